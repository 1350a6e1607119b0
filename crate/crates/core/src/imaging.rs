//! RGB images in planar layout, bilinear crop-and-resize, and netpbm I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Planar (channel, row, column) RGB image with values in `[0, 1]`.
///
/// Frames and the template/search crops fed to the network share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Template and search crops are plain images of the configured side length.
pub type ImageCrop = Image;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if data.len() != 3 * width * height {
            return Err(invalid(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(invalid("pixel values must be finite and within [0, 1]"));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat(c.clamp(0.0, 1.0)).take(width * height));
        }
        Image { width, height, data }
    }

    /// Builds an image from a per-pixel RGB function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.width * self.height;
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            *mc = self.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        m
    }

    /// Samples a square region of side `side` centered at (`cx`, `cy`) into an
    /// `out × out` image by bilinear interpolation. Samples falling outside the
    /// frame take the per-channel frame mean.
    pub fn crop_resize(&self, cx: f64, cy: f64, side: f64, out: usize) -> Result<Image> {
        if !(side > 0.0) || !side.is_finite() || out == 0 {
            return Err(invalid(format!("crop side {side} / output {out} must be positive")));
        }
        let mean = self.channel_means();
        let x0 = cx - side / 2.0;
        let y0 = cy - side / 2.0;
        let step = side / out as f64;
        let plane = out * out;
        let mut data = vec![0.0; 3 * plane];
        let (w, h) = (self.width as f64, self.height as f64);
        for oy in 0..out {
            let sy = y0 + (oy as f64 + 0.5) * step - 0.5;
            for ox in 0..out {
                let sx = x0 + (ox as f64 + 0.5) * step - 0.5;
                let fx = sx.floor();
                let fy = sy.floor();
                let ax = sx - fx;
                let ay = sy - fy;
                for c in 0..3 {
                    let tap = |xx: f64, yy: f64| -> f64 {
                        if xx < 0.0 || yy < 0.0 || xx >= w || yy >= h {
                            mean[c]
                        } else {
                            self.get(c, yy as usize, xx as usize)
                        }
                    };
                    let v = (1.0 - ay) * ((1.0 - ax) * tap(fx, fy) + ax * tap(fx + 1.0, fy))
                        + ay * ((1.0 - ax) * tap(fx, fy + 1.0) + ax * tap(fx + 1.0, fy + 1.0));
                    data[c * plane + oy * out + ox] = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image { width: out, height: out, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Multiplies every value by `gain`, clamping into `[0, 1]`.
    pub fn with_brightness(&self, gain: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v * gain).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let plane = self.width * self.height;
        let mut bytes = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                bytes.push(quantize(self.data[c * plane + i]));
            }
        }
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (magic, width, height, maxval) = read_header(&mut r)?;
        if magic != "P6" || maxval != 255 {
            return Err(Error::Format(format!("{}: expected an 8-bit P6 file", path.display())));
        }
        let plane = width * height;
        let mut bytes = vec![0u8; 3 * plane];
        r.read_exact(&mut bytes)?;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[3 * i + c] as f64 / 255.0;
            }
        }
        Image::new(width, height, data)
    }

    /// Rounds every value to the nearest representable 8-bit level, so the
    /// image equals what a PPM round trip would return.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Binary PGM (P5), 8 bits.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (magic, width, height, maxval) = read_header(&mut r)?;
        if magic != "P5" || maxval != 255 {
            return Err(Error::Format(format!("{}: expected an 8-bit P5 file", path.display())));
        }
        let mut bytes = vec![0u8; width * height];
        r.read_exact(&mut bytes)?;
        Ok(GrayImage { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(String, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        let mut token = Vec::new();
        loop {
            let mut b = [0u8; 1];
            if r.read(&mut b)? == 0 {
                return Err(Error::Format("truncated netpbm header".into()));
            }
            match b[0] {
                b'#' if token.is_empty() => {
                    let mut skip = String::new();
                    r.read_line(&mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        break;
                    }
                }
                c => token.push(c),
            }
        }
        fields.push(String::from_utf8_lossy(&token).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s:?}")));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn identity_crop_reproduces_image() {
        let img = Image::from_fn(8, 8, |x, y| [x as f64 / 8.0, y as f64 / 8.0, 0.5]);
        let crop = img.crop_resize(4.0, 4.0, 8.0, 8).unwrap();
        for (a, b) in crop.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_samples_use_frame_mean() {
        let img = Image::from_fn(4, 4, |x, _| [x as f64 / 4.0, 0.2, 0.9]);
        let crop = img.crop_resize(-100.0, -100.0, 4.0, 2).unwrap();
        let mean = img.channel_means();
        for c in 0..3 {
            assert!((crop.get(c, 0, 0) - mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 5.0, y as f64 / 3.0, 0.33]).quantized();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 5.0, y as f64 / 3.0, 0.1]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }
}

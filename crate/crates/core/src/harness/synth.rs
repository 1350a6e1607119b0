use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxfile::write_boxes;
use crate::error::{invalid, Error, Result};
use crate::head::PixelBox;
use crate::imaging::Image;

/// Striped two-colour texture, evaluated in box-local `[0,1]²` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    /// Stripe cycles across the box.
    pub frequency: f64,
    pub angle: f64,
}

impl Texture {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let (primary, secondary) = (color(), color());
        Texture { primary, secondary, frequency: rng.gen_range(1.5..3.5), angle: rng.gen_range(0.0..std::f64::consts::PI) }
    }

    pub fn blend(&self, other: &Texture, t: f64) -> Texture {
        let mix = |a: [f64; 3], b: [f64; 3]| [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]));
        Texture {
            primary: mix(self.primary, other.primary),
            secondary: mix(self.secondary, other.secondary),
            frequency: self.frequency + t * (other.frequency - self.frequency),
            angle: self.angle + t * (other.angle - self.angle),
        }
    }

    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let phase = (u - 0.5) * self.angle.cos() + (v - 0.5) * self.angle.sin();
        let s = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * self.frequency * phase).sin();
        // a bright core makes the box center distinguishable from the stripes
        let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
        let core = if r2 < 0.04 { 0.35 } else { 0.0 };
        [0, 1, 2].map(|i| (self.primary[i] * s + self.secondary[i] * (1.0 - s) + core).min(1.0))
    }
}

/// An object moving on a bouncing, wobbling path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mover {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub wobble: f64,
    pub wobble_period: f64,
    pub size: (f64, f64),
}

/// Deterministic synthetic tracking sequence. Every property is a pure
/// function of the fields, so frames can be rendered in any order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Amplitude of per-pixel background noise.
    pub noise: f64,
    pub target: Mover,
    /// Relative size oscillation amplitude and period in frames.
    pub scale_amplitude: f64,
    pub scale_period: f64,
    /// Inclusive frame ranges with an occluder over the target.
    pub occlusions: Vec<(usize, usize)>,
    /// Fraction of the target width hidden while occluded.
    pub occluder_coverage: f64,
    pub distractors: Vec<Mover>,
    /// 1 reproduces the target texture, 0 gives an unrelated one.
    pub distractor_similarity: f64,
    /// Frames over which the target texture morphs into a second texture; 0 disables.
    pub drift_period: f64,
}

/// Named scene recipes for data generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Plain,
    Occlusion,
    Clutter,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SceneKind::Plain),
            "occlusion" => Ok(SceneKind::Occlusion),
            "clutter" => Ok(SceneKind::Clutter),
            _ => Err(invalid(format!("unknown scene kind {s:?} (plain, occlusion, clutter)"))),
        }
    }
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let y = (x - lo).rem_euclid(2.0 * span);
    lo + if y > span { 2.0 * span - y } else { y }
}

impl SyntheticScene {
    /// A still target on a noisy background.
    pub fn still(seed: u64, frames: usize) -> Self {
        SyntheticScene {
            width: 160,
            height: 160,
            frames,
            seed,
            noise: 0.08,
            target: Mover { start: (80.0, 80.0), velocity: (0.0, 0.0), wobble: 0.0, wobble_period: 1.0, size: (28.0, 24.0) },
            scale_amplitude: 0.0,
            scale_period: 1.0,
            occlusions: Vec::new(),
            occluder_coverage: 0.85,
            distractors: Vec::new(),
            distractor_similarity: 0.5,
            drift_period: 0.0,
        }
    }

    /// Random scene of the given kind; a pure function of `seed`.
    pub fn random(seed: u64, kind: SceneKind, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5cee);
        let mut s = Self::still(seed, frames);
        let mover = |rng: &mut ChaCha8Rng, speed: f64| {
            let w = rng.gen_range(20.0..34.0);
            let h = w * rng.gen_range(0.7..1.3);
            let angle: f64 = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
            let v = rng.gen_range(0.3..1.0) * speed;
            Mover {
                start: (rng.gen_range(40.0..120.0), rng.gen_range(40.0..120.0)),
                velocity: (v * angle.cos(), v * angle.sin()),
                wobble: rng.gen_range(0.0..4.0),
                wobble_period: rng.gen_range(20.0..60.0),
                size: (w, h),
            }
        };
        s.target = mover(&mut rng, 2.0);
        s.noise = rng.gen_range(0.04..0.12);
        s.scale_amplitude = rng.gen_range(0.0..0.2);
        s.scale_period = rng.gen_range(40.0..120.0);
        s.drift_period = rng.gen_range(60.0..150.0);
        match kind {
            SceneKind::Plain => {}
            SceneKind::Occlusion | SceneKind::Clutter => {
                if kind == SceneKind::Occlusion && frames > 30 {
                    let mut start = rng.gen_range(15..25).min(frames - 1);
                    while start + 5 < frames {
                        let len = rng.gen_range(4..10);
                        s.occlusions.push((start, (start + len).min(frames - 1)));
                        start += len + rng.gen_range(20..35);
                    }
                }
                let n = if kind == SceneKind::Clutter { rng.gen_range(2..4) } else { 1 };
                s.distractors = (0..n).map(|_| mover(&mut rng, 1.5)).collect();
                s.distractor_similarity = rng.gen_range(0.3..0.7);
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 || self.frames == 0 {
            return Err(invalid("scene needs a frame of at least 16x16 and one frame"));
        }
        let check = |m: &Mover, what: &str| -> Result<()> {
            let peak = 1.0 + self.scale_amplitude;
            if !(m.size.0 > 1.0 && m.size.1 > 1.0) || m.size.0 * peak >= self.width as f64 || m.size.1 * peak >= self.height as f64 {
                return Err(invalid(format!("{what} of size {:?} does not fit the frame", m.size)));
            }
            let (sx, sy) = m.start;
            if !(0.0..=self.width as f64).contains(&sx) || !(0.0..=self.height as f64).contains(&sy) {
                return Err(invalid(format!("{what} starts outside the frame")));
            }
            Ok(())
        };
        check(&self.target, "target")?;
        for d in &self.distractors {
            check(d, "distractor")?;
        }
        if !(0.0..1.0).contains(&self.scale_amplitude) || !(self.scale_period > 0.0) {
            return Err(invalid("scale amplitude must lie in [0,1) with a positive period"));
        }
        if !(0.7..=1.0).contains(&self.occluder_coverage) {
            return Err(invalid("occluder must cover at least 70% of the target"));
        }
        if self.occlusions.iter().any(|&(a, b)| a > b || b >= self.frames) {
            return Err(invalid("occlusion interval outside the sequence"));
        }
        Ok(())
    }

    fn scale(&self, t: usize) -> f64 {
        1.0 + self.scale_amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.scale_period).sin()
    }

    fn mover_box(&self, m: &Mover, t: usize) -> PixelBox {
        let s = self.scale(t);
        let (w, h) = (m.size.0 * s, m.size.1 * s);
        let phase = 2.0 * std::f64::consts::PI * t as f64 / m.wobble_period;
        let x = m.start.0 + m.velocity.0 * t as f64 + m.wobble * phase.sin();
        let y = m.start.1 + m.velocity.1 * t as f64 + m.wobble * phase.cos();
        let cx = reflect(x, w / 2.0, self.width as f64 - w / 2.0);
        let cy = reflect(y, h / 2.0, self.height as f64 - h / 2.0);
        PixelBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    /// Ground-truth box of frame `t`, defined whether or not the target is occluded.
    pub fn target_box(&self, t: usize) -> PixelBox {
        self.mover_box(&self.target, t)
    }

    pub fn ground_truth(&self) -> Vec<PixelBox> {
        (0..self.frames).map(|t| self.target_box(t)).collect()
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.occlusions.iter().any(|&(a, b)| (a..=b).contains(&t))
    }

    /// Occluder rectangle of frame `t`: the left part of the target box,
    /// slightly taller than the target.
    pub fn occluder_box(&self, t: usize) -> Option<PixelBox> {
        if !self.is_occluded(t) {
            return None;
        }
        let b = self.target_box(t);
        Some(PixelBox::new(b.x - 1.0, b.y - 2.0, b.w * self.occluder_coverage + 1.0, b.h + 4.0))
    }

    pub fn distractor_boxes(&self, t: usize) -> Vec<PixelBox> {
        self.distractors.iter().map(|d| self.mover_box(d, t)).collect()
    }
}

/// Renders frames of a scene; holds the static background and textures.
pub struct SceneRenderer<'s> {
    scene: &'s SyntheticScene,
    background: Image,
    target_tex: (Texture, Texture),
    distractor_tex: Vec<Texture>,
    occluder_color: [f64; 3],
}

fn inside(b: &PixelBox, px: f64, py: f64) -> bool {
    px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h
}

impl<'s> SceneRenderer<'s> {
    pub fn new(scene: &'s SyntheticScene) -> Result<Self> {
        scene.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let (w, h) = (scene.width, scene.height);
        // coarse colour field, bilinearly upsampled, plus fine noise
        let cells = 6;
        let coarse: Vec<[f64; 3]> =
            (0..(cells + 1) * (cells + 1)).map(|_| [0; 3].map(|_| rng.gen_range(0.15..0.85))).collect();
        let fine: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0) * scene.noise).collect();
        let background = Image::from_fn(w, h, |x, y| {
            let gx = x as f64 / w as f64 * cells as f64;
            let gy = y as f64 / h as f64 * cells as f64;
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (ax, ay) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize| coarse[j.min(cells) * (cells + 1) + i.min(cells)];
            [0, 1, 2].map(|c| {
                let v = (1.0 - ay) * ((1.0 - ax) * at(ix, iy)[c] + ax * at(ix + 1, iy)[c])
                    + ay * ((1.0 - ax) * at(ix, iy + 1)[c] + ax * at(ix + 1, iy + 1)[c]);
                v + fine[(y * w + x) * 3 + c]
            })
        });
        let target_tex = (Texture::random(&mut rng), Texture::random(&mut rng));
        let distractor_tex = scene
            .distractors
            .iter()
            .map(|_| Texture::random(&mut rng).blend(&target_tex.0, scene.distractor_similarity))
            .collect();
        let g = rng.gen_range(0.2..0.8);
        Ok(SceneRenderer { scene, background, target_tex, distractor_tex, occluder_color: [g, g, g] })
    }

    pub fn target_texture(&self, t: usize) -> Texture {
        let p = self.scene.drift_period;
        if p <= 0.0 {
            return self.target_tex.0;
        }
        let mix = 0.5 - 0.5 * (std::f64::consts::PI * t as f64 / p).cos();
        self.target_tex.0.blend(&self.target_tex.1, mix)
    }

    /// Frame `t`, quantized to 8-bit levels so it round-trips through PPM exactly.
    pub fn render(&self, t: usize) -> Result<Image> {
        if t >= self.scene.frames {
            return Err(invalid(format!("frame {t} beyond the {}-frame sequence", self.scene.frames)));
        }
        let mut img = self.background.clone();
        let mut paint = |b: &PixelBox, f: &dyn Fn(f64, f64) -> [f64; 3]| {
            let x0 = b.x.floor().max(0.0) as usize;
            let y0 = b.y.floor().max(0.0) as usize;
            let x1 = ((b.x + b.w).ceil() as usize).min(self.scene.width);
            let y1 = ((b.y + b.h).ceil() as usize).min(self.scene.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if inside(b, px, py) {
                        let rgb = f((px - b.x) / b.w, (py - b.y) / b.h);
                        for (c, v) in rgb.iter().enumerate() {
                            img.set(c, y, x, v.clamp(0.0, 1.0));
                        }
                    }
                }
            }
        };
        for (b, tex) in self.scene.distractor_boxes(t).iter().zip(&self.distractor_tex) {
            paint(b, &|u, v| tex.sample(u, v));
        }
        let tex = self.target_texture(t);
        paint(&self.scene.target_box(t), &|u, v| tex.sample(u, v));
        if let Some(o) = self.scene.occluder_box(t) {
            let oc = self.occluder_color;
            paint(&o, &|u, v| {
                let ripple = 0.08 * (13.0 * u + 7.0 * v).sin();
                oc.map(|c| c + ripple)
            });
        }
        Ok(img.quantized())
    }
}

pub fn render_frame(scene: &SyntheticScene, t: usize) -> Result<Image> {
    SceneRenderer::new(scene)?.render(t)
}

pub fn render_sequence(scene: &SyntheticScene) -> Result<Vec<Image>> {
    let r = SceneRenderer::new(scene)?;
    (0..scene.frames).map(|t| r.render(t)).collect()
}

/// File name of frame `t` inside a sequence directory.
pub fn frame_name(t: usize) -> String {
    format!("{t:05}.ppm")
}

/// Writes `00000.ppm …` and `groundtruth.txt` into `dir`.
pub fn generate_sequence(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let r = SceneRenderer::new(scene)?;
    for t in 0..scene.frames {
        r.render(t)?.write_ppm(&dir.join(frame_name(t)))?;
    }
    write_boxes(&dir.join("groundtruth.txt"), &scene.ground_truth())
}

/// Reads the frames of a sequence directory in file-name order.
pub fn load_sequence(dir: &Path) -> Result<Vec<Image>> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(invalid(format!("no .ppm frames in {}", dir.display())));
    }
    names.iter().map(|p| Image::read_ppm(p)).collect()
}

use crate::error::{invalid, Result};

/// Box as center and extent. Inside the network these are normalized
/// search-crop coordinates; geometry helpers accept any real coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Pixel box in the top-left convention used by ground-truth and result files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Checks the normalized-coordinate invariants.
    pub fn validate_normalized(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("box {self:?} is not a valid normalized box")))
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners clipped to the unit square.
    pub fn clipped_corners(&self) -> [f64; 4] {
        [
            self.x1().clamp(0.0, 1.0),
            self.y1().clamp(0.0, 1.0),
            self.x2().clamp(0.0, 1.0),
            self.y2().clamp(0.0, 1.0),
        ]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            (inter / union).min(1.0)
        } else {
            0.0
        }
    }

    /// Same extent under `x → 1 − x` mirroring.
    pub fn flipped(&self) -> BBox {
        BBox { cx: 1.0 - self.cx, ..*self }
    }
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn to_bbox(&self) -> BBox {
        let (cx, cy) = self.center();
        BBox { cx, cy, w: self.w, h: self.h }
    }

    pub fn from_bbox(b: &BBox) -> Self {
        PixelBox { x: b.x1(), y: b.y1(), w: b.w, h: b.h }
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let iw = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let ih = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        let union = self.w * self.h + other.w * other.h - inter;
        if union > 0.0 {
            (inter / union).min(1.0)
        } else {
            0.0
        }
    }

    pub fn center_distance(&self, other: &PixelBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Clips to a `width × height` frame, keeping at least one pixel of extent.
    pub fn clipped(&self, width: f64, height: f64) -> PixelBox {
        let x1 = self.x.clamp(0.0, width - 1.0);
        let y1 = self.y.clamp(0.0, height - 1.0);
        let x2 = (self.x + self.w).clamp(x1 + 1.0, width);
        let y2 = (self.y + self.h).clamp(y1 + 1.0, height);
        PixelBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
    }

    /// Horizontal mirror inside a frame of the given width.
    pub fn flipped(&self, width: f64) -> PixelBox {
        PixelBox { x: width - self.x - self.w, ..*self }
    }
}

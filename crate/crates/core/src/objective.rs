//! Tracking objective: penalty-reduced focal loss on the score map, L1 and
//! GIoU on the box decoded at the ground-truth cell, and the weighted sum with
//! the two distillation terms.

use crate::error::{invalid, Result};
use crate::head::{BBox, HeadOutput, ScoreMap};
use crate::numerics::{Graph, Tensor, Var};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
const PROB_CLIP: f64 = 1e-12;

/// Coefficients of the box, feature, and prediction terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub feat: f64,
    pub pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 5.0, giou: 2.0, feat: 1.0, pred: 1.0 }
    }
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub feat: f64,
    pub pred: f64,
}

/// `cls + λ1·l1 + λ2·giou + λ3·feat + λ4·pred`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.cls + w.l1 * c.l1 + w.giou * c.giou + w.feat * c.feat + w.pred * c.pred
}

/// Supervision maps for one sample on the search grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub rows: usize,
    pub cols: usize,
    /// Gaussian, 1 exactly at the center cell.
    pub heatmap: Vec<f64>,
    pub center: (usize, usize),
    /// Sub-cell position of the box center inside `center`, x first.
    pub offset: (f64, f64),
    pub size: (f64, f64),
}

impl TargetMaps {
    pub fn center_index(&self) -> usize {
        self.center.0 * self.cols + self.center.1
    }
}

pub fn gaussian_sigma(gt: &BBox, rows: usize) -> f64 {
    (gt.w.min(gt.h) * rows as f64 / 6.0).max(1.0)
}

pub fn make_target_maps(gt: &BBox, rows: usize, cols: usize) -> Result<TargetMaps> {
    if !(gt.w > 0.0) || !(gt.h > 0.0) {
        return Err(invalid(format!("degenerate box {gt:?}")));
    }
    if rows == 0 || cols == 0 {
        return Err(invalid("target grid must be non-empty"));
    }
    let fx = (gt.cx * cols as f64).clamp(0.0, cols as f64 - 1e-9);
    let fy = (gt.cy * rows as f64).clamp(0.0, rows as f64 - 1e-9);
    let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
    let sigma = gaussian_sigma(gt, rows);
    let mut heatmap = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
            heatmap[r * cols + c] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Ok(TargetMaps {
        rows,
        cols,
        heatmap,
        center: (r0, c0),
        offset: (fx - c0 as f64, fy - r0 as f64),
        size: (gt.w, gt.h),
    })
}

/// Focal loss on `sigmoid(score)`; `score` holds `rows·cols` logits.
pub fn focal_loss(g: &mut Graph, score: Var, targets: &TargetMaps) -> Result<Var> {
    let n = targets.rows * targets.cols;
    if g.value(score).numel() != n {
        return Err(invalid(format!("{} score logits for a {n}-cell target", g.value(score).numel())));
    }
    let s = g.reshape(score, &[n])?;
    let p = g.sigmoid(s);
    let p = g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP);
    let q = g.affine(p, -1.0, 1.0);

    let mut pos_w = vec![0.0; n];
    let mut neg_w = vec![0.0; n];
    let mut positives = 0usize;
    for (i, &t) in targets.heatmap.iter().enumerate() {
        if t == 1.0 {
            pos_w[i] = 1.0;
            positives += 1;
        } else {
            neg_w[i] = (1.0 - t).powi(FOCAL_BETA);
        }
    }
    let pos_w = g.constant(Tensor::vector(pos_w)?);
    let neg_w = g.constant(Tensor::vector(neg_w)?);

    let lnp = g.ln(p);
    let q2 = g.square(q);
    let pos = g.mul(q2, lnp)?;
    let pos = g.mul(pos, pos_w)?;

    let lnq = g.ln(q);
    let p2 = g.square(p);
    let neg = g.mul(p2, lnq)?;
    let neg = g.mul(neg, neg_w)?;

    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / positives.max(1) as f64))
}

/// Focal loss value for a score map without keeping a graph.
pub fn focal_loss_value(score: &ScoreMap, targets: &TargetMaps) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::vector(score.logits.clone())?);
    let l = focal_loss(&mut g, s, targets)?;
    g.value(l).item()
}

/// Box coordinates as four scalar graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl BoxVars {
    pub fn constant(g: &mut Graph, b: &BBox) -> Self {
        BoxVars {
            cx: g.constant(Tensor::scalar(b.cx)),
            cy: g.constant(Tensor::scalar(b.cy)),
            w: g.constant(Tensor::scalar(b.w)),
            h: g.constant(Tensor::scalar(b.h)),
        }
    }

    /// Splits a length-4 `[cx, cy, w, h]` node.
    pub fn from_vector(g: &mut Graph, v: Var) -> Result<Self> {
        Ok(BoxVars {
            cx: g.gather(v, &[0])?,
            cy: g.gather(v, &[1])?,
            w: g.gather(v, &[2])?,
            h: g.gather(v, &[3])?,
        })
    }

    fn corners(&self, g: &mut Graph) -> Result<[Var; 4]> {
        let hw = g.scale(self.w, 0.5);
        let hh = g.scale(self.h, 0.5);
        Ok([g.sub(self.cx, hw)?, g.sub(self.cy, hh)?, g.add(self.cx, hw)?, g.add(self.cy, hh)?])
    }

    pub fn value(&self, g: &Graph) -> BBox {
        let v = |x: Var| g.value(x).data()[0];
        BBox::new(v(self.cx), v(self.cy), v(self.w), v(self.h))
    }
}

/// Predicted box at grid cell `center`: `((c + off_x)/W′, (r + off_y)/H′, w, h)`.
pub fn decoded_box_at(g: &mut Graph, head: &HeadOutput, center: (usize, usize), rows: usize, cols: usize) -> Result<BoxVars> {
    let plane = rows * cols;
    let i = center.0 * cols + center.1;
    let off = g.reshape(head.offset, &[2 * plane])?;
    let size = g.reshape(head.size, &[2 * plane])?;
    let ox = g.gather(off, &[i])?;
    let oy = g.gather(off, &[plane + i])?;
    Ok(BoxVars {
        cx: g.affine(ox, 1.0 / cols as f64, center.1 as f64 / cols as f64),
        cy: g.affine(oy, 1.0 / rows as f64, center.0 as f64 / rows as f64),
        w: g.gather(size, &[i])?,
        h: g.gather(size, &[plane + i])?,
    })
}

/// `1 − GIoU` on graph boxes.
pub fn giou_loss_var(g: &mut Graph, pred: &BoxVars, gt: &BoxVars) -> Result<Var> {
    let [ax1, ay1, ax2, ay2] = pred.corners(g)?;
    let [bx1, by1, bx2, by2] = gt.corners(g)?;
    let ix1 = g.maximum(ax1, bx1)?;
    let iy1 = g.maximum(ay1, by1)?;
    let ix2 = g.minimum(ax2, bx2)?;
    let iy2 = g.minimum(ay2, by2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area_a = g.mul(pred.w, pred.h)?;
    let area_b = g.mul(gt.w, gt.h)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let cx1 = g.minimum(ax1, bx1)?;
    let cy1 = g.minimum(ay1, by1)?;
    let cx2 = g.maximum(ax2, bx2)?;
    let cy2 = g.maximum(ay2, by2)?;
    let cw = g.sub(cx2, cx1)?;
    let ch = g.sub(cy2, cy1)?;
    let c = g.mul(cw, ch)?;
    let empty = g.sub(c, union)?;
    let frac = g.div(empty, c)?;
    let giou = g.sub(iou, frac)?;
    Ok(g.affine(giou, -1.0, 1.0))
}

/// Mean absolute coordinate difference on graph boxes.
pub fn l1_box_loss_var(g: &mut Graph, pred: &BoxVars, gt: &BoxVars) -> Result<Var> {
    let pairs = [(pred.cx, gt.cx), (pred.cy, gt.cy), (pred.w, gt.w), (pred.h, gt.h)];
    let mut acc: Option<Var> = None;
    for (a, b) in pairs {
        let d = g.sub(a, b)?;
        let d = g.abs(d);
        acc = Some(match acc {
            None => d,
            Some(s) => g.add(s, d)?,
        });
    }
    Ok(g.scale(acc.expect("four terms"), 0.25))
}

/// `1 − GIoU` with the smallest enclosing axis-aligned rectangle.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !(pred.area() > 0.0) || !(gt.area() > 0.0) {
        return Err(invalid("GIoU is undefined for zero-area boxes"));
    }
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    let cw = pred.x2().max(gt.x2()) - pred.x1().min(gt.x1());
    let ch = pred.y2().max(gt.y2()) - pred.y1().min(gt.y1());
    let c = cw * ch;
    let giou = inter / union - (c - union) / c;
    Ok(1.0 - giou)
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f64 {
    ((pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs()) / 4.0
}

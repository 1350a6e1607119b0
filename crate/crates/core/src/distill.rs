//! Target-aware distillation: token masks from ground-truth boxes, masked
//! feature MSE over stage-2 taps, and masked KL between confidence maps.

use crate::error::{invalid, Result};
use crate::head::BBox;
use crate::numerics::{Graph, Tensor, Var};

/// Binary foreground mask over the `rows × cols` search grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    pub rows: usize,
    pub cols: usize,
    values: Vec<bool>,
}

impl TargetMask {
    pub fn from_values(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid(format!("{} mask values for a {rows}x{cols} grid", values.len())));
        }
        if !values.iter().any(|&v| v) {
            return Err(invalid("target mask has no active token"));
        }
        Ok(TargetMask { rows, cols, values })
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.values[index]
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mask as 0/1 values, one per token.
    pub fn weights(&self) -> Vec<f64> {
        self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Mask repeated across `dim` feature columns.
    pub fn feature_weights(&self, dim: usize) -> Result<Tensor> {
        let w = self.weights();
        Tensor::matrix(self.len(), dim, w.iter().flat_map(|&v| std::iter::repeat(v).take(dim)).collect())
    }
}

/// Activates every token whose patch center lies in the closed box. If none
/// does, the token nearest the box center is activated.
pub fn make_token_mask(gt: &BBox, rows: usize, cols: usize) -> Result<TargetMask> {
    if !(gt.w > 0.0) || !(gt.h > 0.0) {
        return Err(invalid(format!("degenerate box {gt:?}")));
    }
    if rows == 0 || cols == 0 {
        return Err(invalid("mask grid must be non-empty"));
    }
    let (x1, y1, x2, y2) = (gt.x1(), gt.y1(), gt.x2(), gt.y2());
    let mut values = vec![false; rows * cols];
    let mut any = false;
    let mut nearest = (f64::INFINITY, 0);
    for r in 0..rows {
        let y = (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let x = (c as f64 + 0.5) / cols as f64;
            if x >= x1 && x <= x2 && y >= y1 && y <= y2 {
                values[r * cols + c] = true;
                any = true;
            }
            let d = (x - gt.cx).powi(2) + (y - gt.cy).powi(2);
            if d < nearest.0 {
                nearest = (d, r * cols + c);
            }
        }
    }
    if !any {
        values[nearest.1] = true;
    }
    Ok(TargetMask { rows, cols, values })
}

/// Loss variants. Both default off: sum over active tokens, student-first KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DistillOptions {
    /// Divide each sample's feature term by its active token count.
    pub normalize_by_mask: bool,
    /// Use `p_t · ln(p_t / p_s)` instead of `p_s · ln(p_s / p_t)`.
    pub teacher_first_kl: bool,
}

/// Paired student/teacher taps and score logits for a batch, as graph nodes.
/// Teacher nodes should be constants so no gradient reaches them.
pub struct DistillBatch {
    /// `[B][K]` joint feature matrices of the student's stage-2 layers.
    pub student_feats: Vec<Vec<Var>>,
    /// `[B][K]` aligned teacher layers.
    pub teacher_feats: Vec<Vec<Var>>,
    /// `[B]` score logits, any shape with `H′·W′` elements.
    pub student_logits: Vec<Var>,
    pub teacher_logits: Vec<Var>,
    pub masks: Vec<TargetMask>,
    /// Template rows at the top of every joint matrix; they get zero weight.
    pub template_len: usize,
    pub temperature: f64,
}

impl DistillBatch {
    pub fn batch_size(&self) -> usize {
        self.masks.len()
    }
}

/// `(1/(K·B)) Σ_k Σ_i ‖M_i·x_i^k − M_i·y_i^k‖²` over the search rows.
pub fn feature_distill_loss(g: &mut Graph, batch: &DistillBatch, opts: DistillOptions) -> Result<Var> {
    let b = batch.batch_size();
    if b == 0 {
        return Err(invalid("feature distillation needs a non-empty batch"));
    }
    if batch.student_feats.len() != b || batch.teacher_feats.len() != b {
        return Err(invalid("student/teacher feature lists must have one entry per sample"));
    }
    let k = batch.student_feats[0].len();
    if k == 0 {
        return Err(invalid("feature distillation needs at least one layer"));
    }
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let (xs, ys, mask) = (&batch.student_feats[i], &batch.teacher_feats[i], &batch.masks[i]);
        if xs.len() != k || ys.len() != k {
            return Err(invalid(format!("sample {i} has {} student and {} teacher layers, expected {k}", xs.len(), ys.len())));
        }
        for (&x, &y) in xs.iter().zip(ys) {
            if g.shape(x) != g.shape(y) {
                return Err(invalid(format!("feature shapes {:?} vs {:?}", g.shape(x), g.shape(y))));
            }
            let (n, d) = g.value(x).dims2()?;
            if n != batch.template_len + mask.len() {
                return Err(invalid(format!(
                    "{n} tokens but {} template rows and a {}-token mask",
                    batch.template_len,
                    mask.len()
                )));
            }
            let m = g.constant(mask.feature_weights(d)?);
            let xs = g.slice_rows(x, batch.template_len, n)?;
            let ys = g.slice_rows(y, batch.template_len, n)?;
            let mx = g.mul(xs, m)?;
            let my = g.mul(ys, m)?;
            let diff = g.sub(mx, my)?;
            let sq = g.square(diff);
            let mut t = g.sum(sq);
            if opts.normalize_by_mask {
                t = g.scale(t, 1.0 / mask.active_count() as f64);
            }
            terms.push(t);
        }
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, 1.0 / (k * b) as f64))
}

/// `(1/B) Σ_i Σ_j m_ij · KL_j / Σ_j m_ij` with temperature-softmaxed maps.
pub fn prediction_distill_loss(g: &mut Graph, batch: &DistillBatch, opts: DistillOptions) -> Result<Var> {
    let b = batch.batch_size();
    if b == 0 {
        return Err(invalid("prediction distillation needs a non-empty batch"));
    }
    if batch.student_logits.len() != b || batch.teacher_logits.len() != b {
        return Err(invalid("student/teacher logit lists must have one entry per sample"));
    }
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let (s, t, mask) = (batch.student_logits[i], batch.teacher_logits[i], &batch.masks[i]);
        let n = mask.len();
        if g.value(s).numel() != n || g.value(t).numel() != n {
            return Err(invalid(format!(
                "logit maps of {} and {} values for a {n}-token mask",
                g.value(s).numel(),
                g.value(t).numel()
            )));
        }
        let s = g.reshape(s, &[n])?;
        let t = g.reshape(t, &[n])?;
        let ls = g.log_softmax_t(s, batch.temperature)?;
        let lt = g.log_softmax_t(t, batch.temperature)?;
        terms.push(masked_kl(g, ls, lt, mask, opts)?);
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Masked mean of pointwise KL terms given log-probabilities of the two maps.
pub fn masked_kl(g: &mut Graph, log_ps: Var, log_pt: Var, mask: &TargetMask, opts: DistillOptions) -> Result<Var> {
    let active = mask.active_count();
    if active == 0 {
        return Err(invalid("target mask has no active position"));
    }
    let (first, second) = if opts.teacher_first_kl { (log_pt, log_ps) } else { (log_ps, log_pt) };
    let p = g.exp(first);
    let diff = g.sub(first, second)?;
    let term = g.mul(p, diff)?;
    let m = g.constant(Tensor::vector(mask.weights())?);
    let masked = g.mul(term, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / active as f64))
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

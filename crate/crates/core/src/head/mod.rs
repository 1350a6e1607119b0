//! Center-based prediction head: score, offset, and size branches over the
//! search-token grid, and decoding of the three maps into a box.

mod bbox;

pub use bbox::{BBox, PixelBox};

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Binder, ParamId, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::numerics::{softmax_into, Graph, Tensor, Var};

const BN_EPS: f64 = 1e-5;
/// Initial foreground probability of every score cell; the score projection
/// bias starts at its logit so the focal loss begins near its usual regime.
pub const SCORE_PRIOR: f64 = 0.1;

/// Head widths: four Conv-BN-ReLU layers `D → C → C/2 → C/4 → C/8`, then a
/// 1×1 projection to the branch outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub channels: usize,
}

impl HeadConfig {
    /// Width used for full-size accounting.
    pub fn full() -> Self {
        HeadConfig { channels: 256 }
    }

    /// Desk-scale default: `C = D`.
    pub fn for_embed_dim(embed_dim: usize) -> Self {
        HeadConfig { channels: embed_dim }
    }

    pub fn widths(&self, embed_dim: usize) -> [usize; 5] {
        let c = self.channels;
        [embed_dim, c, c / 2, c / 4, c / 8]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 || self.channels % 8 != 0 {
            return Err(Error::Config(format!("head channels {} must be a positive multiple of 8", self.channels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct Branch {
    layers: Vec<ConvBnRelu>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Branch {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, widths: &[usize; 5], out: usize, bias: Option<f64>) -> Self {
        let mut layers = Vec::with_capacity(4);
        for i in 0..4 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let n = |s: &str| format!("{prefix}.{i}.{s}");
            layers.push(ConvBnRelu {
                w: store.uniform(rng, n("conv.weight"), &[cout, cin, 3, 3], cin * 9, false),
                b: store.constant(n("conv.bias"), &[cout], 0.0, false),
                gamma: store.constant(n("bn.weight"), &[cout], 1.0, false),
                beta: store.constant(n("bn.bias"), &[cout], 0.0, false),
                mean: store.buffer(n("bn.running_mean"), &[cout], 0.0),
                var: store.buffer(n("bn.running_var"), &[cout], 1.0),
            });
        }
        let last = widths[4];
        Branch {
            layers,
            out_w: store.uniform(rng, format!("{prefix}.out.weight"), &[out, last, 1, 1], last, false),
            out_b: match bias {
                Some(b) => store.constant(format!("{prefix}.out.bias"), &[out], b, false),
                None => store.uniform(rng, format!("{prefix}.out.bias"), &[out], last, false),
            },
        }
    }

    fn forward(&self, g: &mut Graph, p: &mut Binder, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            let (w, b) = (p.var(g, l.w), p.var(g, l.b));
            x = g.conv2d(x, w, b, 1)?;
            let (gamma, beta) = (p.var(g, l.gamma), p.var(g, l.beta));
            x = g.batch_norm(x, gamma, beta, p.values(l.mean), p.values(l.var), BN_EPS)?;
            x = g.relu(x);
        }
        let (w, b) = (p.var(g, self.out_w), p.var(g, self.out_b));
        g.conv2d(x, w, b, 0)
    }
}

/// Parameters of the three-branch head.
#[derive(Clone, Debug)]
pub struct CenterHead {
    score: Branch,
    offset: Branch,
    size: Branch,
}

/// Graph handles for the head outputs: score logits `[H′,W′]`, offsets and
/// sizes `[2,H′,W′]` (x/width first), both squashed into `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

impl CenterHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, embed_dim: usize, cfg: &HeadConfig) -> Self {
        let widths = cfg.widths(embed_dim);
        CenterHead {
            score: Branch::new(store, rng, "head.score", &widths, 1, Some(-((1.0 - SCORE_PRIOR) / SCORE_PRIOR).ln())),
            offset: Branch::new(store, rng, "head.offset", &widths, 2, None),
            size: Branch::new(store, rng, "head.size", &widths, 2, None),
        }
    }

    /// Runs the head on the search rows (`template_len..N`) of joint features.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, joint: Var, template_len: usize) -> Result<HeadOutput> {
        let (n, d) = g.value(joint).dims2()?;
        if template_len >= n {
            return Err(invalid(format!("no search tokens: {n} rows, {template_len} template rows")));
        }
        let ns = n - template_len;
        let side = (ns as f64).sqrt().round() as usize;
        if side * side != ns {
            return Err(invalid(format!("{ns} search tokens do not form a square grid")));
        }
        let s = g.slice_rows(joint, template_len, n)?;
        let s = g.transpose(s)?;
        let fmap = g.reshape(s, &[d, side, side])?;

        let score = self.score.forward(g, p, fmap)?;
        let score = g.reshape(score, &[side, side])?;
        let offset = self.offset.forward(g, p, fmap)?;
        let offset = g.sigmoid(offset);
        let size = self.size.forward(g, p, fmap)?;
        let size = g.sigmoid(size);
        Ok(HeadOutput { score, offset, size })
    }
}

/// Score logits on the `rows × cols` search grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || logits.len() != rows * cols {
            return Err(invalid(format!("{} logits for a {rows}x{cols} map", logits.len())));
        }
        Ok(ScoreMap { rows, cols, logits })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Self::new(r, c, t.data().to_vec())
    }

    /// Softmax over the flattened grid.
    pub fn probabilities(&self, temperature: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        softmax_into(&self.logits, temperature, &mut out);
        out
    }
}

/// Index of the maximum, first occurrence in row-major order on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box read off the offset and size maps at grid cell (`row`, `col`).
pub fn box_at_cell(row: usize, col: usize, rows: usize, cols: usize, offset: &Tensor, size: &Tensor) -> Result<BBox> {
    let plane = rows * cols;
    if offset.shape() != [2, rows, cols] || size.shape() != [2, rows, cols] {
        return Err(invalid(format!(
            "offset {:?} / size {:?} do not match a {rows}x{cols} grid",
            offset.shape(),
            size.shape()
        )));
    }
    let i = row * cols + col;
    Ok(BBox {
        cx: (col as f64 + offset.data()[i]) / cols as f64,
        cy: (row as f64 + offset.data()[plane + i]) / rows as f64,
        w: size.data()[i],
        h: size.data()[plane + i],
    })
}

/// Decodes the argmax cell of the score map; confidence is the maximum softmax probability.
pub fn decode_box(score: &ScoreMap, offset: &Tensor, size: &Tensor) -> Result<(BBox, f64)> {
    let best = argmax(&score.logits);
    let (r, c) = (best / score.cols, best % score.cols);
    let b = box_at_cell(r, c, score.rows, score.cols, offset, size)?;
    let probs = score.probabilities(1.0);
    Ok((b, probs[best]))
}

use rand_chacha::ChaCha8Rng;

use super::config::BackboneConfig;
use super::params::{Binder, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{Graph, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    heads: usize,
}

/// Output of one block plus the per-head attention probability matrices.
pub struct LayerTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let n = |s: &str| format!("{prefix}.{s}");
        EncoderLayer {
            ln1_g: store.constant(n("norm1.weight"), &[d], 1.0, true),
            ln1_b: store.constant(n("norm1.bias"), &[d], 0.0, true),
            qkv_w: store.uniform(rng, n("attn.qkv.weight"), &[d, 3 * d], d, true),
            qkv_b: store.uniform(rng, n("attn.qkv.bias"), &[3 * d], d, true),
            proj_w: store.uniform(rng, n("attn.proj.weight"), &[d, d], d, true),
            proj_b: store.uniform(rng, n("attn.proj.bias"), &[d], d, true),
            ln2_g: store.constant(n("norm2.weight"), &[d], 1.0, true),
            ln2_b: store.constant(n("norm2.bias"), &[d], 0.0, true),
            fc1_w: store.uniform(rng, n("mlp.fc1.weight"), &[d, hidden], d, true),
            fc1_b: store.uniform(rng, n("mlp.fc1.bias"), &[hidden], d, true),
            fc2_w: store.uniform(rng, n("mlp.fc2.weight"), &[hidden, d], hidden, true),
            fc2_b: store.uniform(rng, n("mlp.fc2.bias"), &[d], hidden, true),
            heads: cfg.num_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        Ok(self.trace(g, p, x)?.output)
    }

    pub fn trace(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<LayerTrace> {
        let d = g.value(x).dims2()?.1;
        let dh = d / self.heads;

        let (w, b) = (p.var(g, self.ln1_g), p.var(g, self.ln1_b));
        let h = g.layer_norm(x, w, b, LN_EPS)?;
        let (w, b) = (p.var(g, self.qkv_w), p.var(g, self.qkv_b));
        let qkv = g.matmul(h, w)?;
        let qkv = g.add_bias(qkv, b)?;

        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * dh, (head + 1) * dh)?;
            let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_t(scores, 1.0)?;
            outs.push(g.matmul(attn, v)?);
            attention.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let (w, b) = (p.var(g, self.proj_w), p.var(g, self.proj_b));
        let proj = g.matmul(merged, w)?;
        let proj = g.add_bias(proj, b)?;
        let x1 = g.add(x, proj)?;

        let (w, b) = (p.var(g, self.ln2_g), p.var(g, self.ln2_b));
        let h2 = g.layer_norm(x1, w, b, LN_EPS)?;
        let (w, b) = (p.var(g, self.fc1_w), p.var(g, self.fc1_b));
        let m = g.matmul(h2, w)?;
        let m = g.add_bias(m, b)?;
        let m = g.gelu(m);
        let (w, b) = (p.var(g, self.fc2_w), p.var(g, self.fc2_b));
        let m = g.matmul(m, w)?;
        let m = g.add_bias(m, b)?;
        let output = g.add(x1, m)?;
        Ok(LayerTrace { output, attention })
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, BackboneConfig};
use super::encoder::{EncoderLayer, LayerTrace, LN_EPS};
use super::params::{Binder, ParamId, ParamStore};
use super::{Origin, TokenSeq};
use crate::error::{invalid, Error, Result};
use crate::head::{CenterHead, HeadConfig, HeadOutput};
use crate::imaging::Image;
use crate::numerics::{Graph, Tensor, Var};

/// Patch embedding, stage-1 and stage-2 encoder stacks, and the center head.
///
/// The teacher is the same structure with no stage-1 layers: every block sees
/// the concatenated template and search tokens.
#[derive(Clone, Debug)]
pub struct TrackerNet {
    config: BackboneConfig,
    head_config: HeadConfig,
    arch: Arch,
    store: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_template: ParamId,
    pos_search: ParamId,
    stage1: Vec<EncoderLayer>,
    stage2: Vec<EncoderLayer>,
    norm_g: ParamId,
    norm_b: ParamId,
    head: CenterHead,
}

/// Everything a full forward pass produces.
pub struct Forward {
    /// Stage-1 template tokens (averaged when several templates are given).
    pub template: TokenSeq,
    pub search: TokenSeq,
    /// Output of every joint layer, in order; the last one feeds the head.
    pub joint_layers: Vec<TokenSeq>,
    pub joint: TokenSeq,
    pub head: HeadOutput,
}

impl TrackerNet {
    pub fn new(config: &BackboneConfig, head_config: &HeadConfig, arch: Arch, seed: u64) -> Result<Self> {
        config.validate()?;
        head_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let patch_w = store.uniform(&mut rng, "patch_embed.weight", &[patch_dim, d], patch_dim, true);
        let patch_b = store.uniform(&mut rng, "patch_embed.bias", &[d], patch_dim, true);
        let pos_template = store.uniform(&mut rng, "pos_embed.template", &[config.template_tokens(), d], d, true);
        let pos_search = store.uniform(&mut rng, "pos_embed.search", &[config.search_tokens(), d], d, true);
        let (n1, n2) = config.stages(arch);
        let stage1 = (0..n1)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("stage1.{i}"), config))
            .collect();
        let stage2 = (0..n2)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("stage2.{i}"), config))
            .collect();
        let norm_g = store.constant("norm.weight", &[d], 1.0, true);
        let norm_b = store.constant("norm.bias", &[d], 0.0, true);
        let head = CenterHead::new(&mut store, &mut rng, d, head_config);
        Ok(TrackerNet {
            config: config.clone(),
            head_config: *head_config,
            arch,
            store,
            patch_w,
            patch_b,
            pos_template,
            pos_search,
            stage1,
            stage2,
            norm_g,
            norm_b,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_config
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn binder(&self, trainable: bool) -> Binder<'_> {
        Binder::new(&self.store, trainable)
    }

    pub fn stage1_depth(&self) -> usize {
        self.stage1.len()
    }

    pub fn stage2_depth(&self) -> usize {
        self.stage2.len()
    }

    /// Splits a crop into non-overlapping `P×P` patches, one row per patch,
    /// ordered (channel, y, x) within the patch.
    pub fn patchify(crop: &Image, patch: usize) -> Result<Tensor> {
        let (w, h) = (crop.width(), crop.height());
        if patch == 0 || w % patch != 0 || h % patch != 0 {
            return Err(invalid(format!("{w}x{h} crop is not divisible into {patch}-pixel patches")));
        }
        let (gw, gh) = (w / patch, h / patch);
        let dim = 3 * patch * patch;
        let mut data = vec![0.0; gw * gh * dim];
        for pr in 0..gh {
            for pc in 0..gw {
                let row = &mut data[(pr * gw + pc) * dim..(pr * gw + pc + 1) * dim];
                let mut k = 0;
                for c in 0..3 {
                    for y in 0..patch {
                        for x in 0..patch {
                            row[k] = crop.get(c, pr * patch + y, pc * patch + x);
                            k += 1;
                        }
                    }
                }
            }
        }
        Tensor::matrix(gw * gh, dim, data)
    }

    /// Shared linear patch projection plus the stream's position table.
    pub fn embed_patches(&self, g: &mut Graph, p: &mut Binder, crop: &Image, origin: Origin) -> Result<TokenSeq> {
        let patch = self.config.patch_size;
        let patches = Self::patchify(crop, patch)?;
        let (expected, pos) = match origin {
            Origin::Template => (self.config.template_size, self.pos_template),
            Origin::Search => (self.config.search_size, self.pos_search),
            Origin::Joint => return Err(invalid("patch embedding takes a template or search crop")),
        };
        if crop.width() != expected || crop.height() != expected {
            return Err(invalid(format!(
                "{origin:?} crop is {}x{}, expected {expected}x{expected}",
                crop.width(),
                crop.height()
            )));
        }
        let x = g.constant(patches);
        let (w, b, pos) = (p.var(g, self.patch_w), p.var(g, self.patch_b), p.var(g, pos));
        let t = g.matmul(x, w)?;
        let t = g.add_bias(t, b)?;
        let t = g.add(t, pos)?;
        let side = expected / patch;
        Ok(TokenSeq::stream(t, origin, (side, side)))
    }

    /// Stage-1 layers on a single stream; weights are shared across streams.
    pub fn student_stage1(&self, g: &mut Graph, p: &mut Binder, x: &TokenSeq) -> Result<TokenSeq> {
        if x.origin == Origin::Joint {
            return Err(invalid("stage 1 only processes a single stream"));
        }
        let mut v = x.var;
        for layer in &self.stage1 {
            v = layer.forward(g, p, v)?;
        }
        Ok(TokenSeq { var: v, ..*x })
    }

    fn concat(&self, g: &mut Graph, z: &TokenSeq, s: &TokenSeq) -> Result<TokenSeq> {
        if z.origin != Origin::Template || s.origin != Origin::Search {
            return Err(invalid("joint modeling takes a template stream and a search stream"));
        }
        let (dz, ds) = (g.value(z.var).dims2()?.1, g.value(s.var).dims2()?.1);
        if dz != ds {
            return Err(invalid(format!("template width {dz} differs from search width {ds}")));
        }
        let v = g.concat_rows(&[z.var, s.var])?;
        Ok(TokenSeq { var: v, origin: Origin::Joint, grid: s.grid, template_len: z.len() })
    }

    /// Concatenates (template first) and applies the stage-2 layers; returns every layer output.
    pub fn student_stage2(&self, g: &mut Graph, p: &mut Binder, z1: &TokenSeq, s1: &TokenSeq) -> Result<Vec<TokenSeq>> {
        Ok(self.joint_layers(g, p, z1, s1)?.0)
    }

    /// Teacher path: every layer on the joint sequence. Returns the per-layer
    /// outputs and the final joint features (the concatenation itself at depth 0).
    pub fn teacher_forward(&self, g: &mut Graph, p: &mut Binder, z: &TokenSeq, s: &TokenSeq) -> Result<(Vec<TokenSeq>, TokenSeq)> {
        if !self.stage1.is_empty() {
            return Err(Error::Config("teacher_forward on a network with stage-1 layers".into()));
        }
        self.joint_layers(g, p, z, s)
    }

    fn joint_layers(&self, g: &mut Graph, p: &mut Binder, z: &TokenSeq, s: &TokenSeq) -> Result<(Vec<TokenSeq>, TokenSeq)> {
        let mut cur = self.concat(g, z, s)?;
        let mut outs = Vec::with_capacity(self.stage2.len());
        for layer in &self.stage2 {
            cur = TokenSeq { var: layer.forward(g, p, cur.var)?, ..cur };
            outs.push(cur);
        }
        Ok((outs, cur))
    }

    /// One stage-2 block with attention traces, for diagnostics.
    pub fn trace_stage2_layer(&self, g: &mut Graph, p: &mut Binder, index: usize, x: Var) -> Result<LayerTrace> {
        self.stage2
            .get(index)
            .ok_or_else(|| invalid(format!("no stage-2 layer {index}")))?
            .trace(g, p, x)
    }

    /// Final layer norm, then the head on the search rows.
    pub fn head_forward(&self, g: &mut Graph, p: &mut Binder, joint: &TokenSeq) -> Result<HeadOutput> {
        let (w, b) = (p.var(g, self.norm_g), p.var(g, self.norm_b));
        let x = g.layer_norm(joint.var, w, b, LN_EPS)?;
        self.head.forward(g, p, x, joint.template_len)
    }

    /// Encodes template crops through embedding and stage 1, averaging when
    /// more than one is supplied.
    pub fn encode_template(&self, g: &mut Graph, p: &mut Binder, templates: &[&Image]) -> Result<TokenSeq> {
        let mut encoded = Vec::with_capacity(templates.len());
        for t in templates {
            let z = self.embed_patches(g, p, t, Origin::Template)?;
            encoded.push(self.student_stage1(g, p, &z)?);
        }
        let first = *encoded.first().ok_or_else(|| invalid("at least one template crop is required"))?;
        if encoded.len() == 1 {
            return Ok(first);
        }
        let mut acc = first.var;
        for e in &encoded[1..] {
            acc = g.add(acc, e.var)?;
        }
        let avg = g.scale(acc, 1.0 / encoded.len() as f64);
        Ok(TokenSeq { var: avg, ..first })
    }

    pub fn encode_search(&self, g: &mut Graph, p: &mut Binder, search: &Image) -> Result<TokenSeq> {
        let s = self.embed_patches(g, p, search, Origin::Search)?;
        self.student_stage1(g, p, &s)
    }

    /// Stage 2 and head on already-encoded streams.
    pub fn forward_encoded(&self, g: &mut Graph, p: &mut Binder, template: TokenSeq, search: TokenSeq) -> Result<Forward> {
        let (joint_layers, joint) = self.joint_layers(g, p, &template, &search)?;
        let head = self.head_forward(g, p, &joint)?;
        Ok(Forward { template, search, joint_layers, joint, head })
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, templates: &[&Image], search: &Image) -> Result<Forward> {
        let z = self.encode_template(g, p, templates)?;
        let s = self.encode_search(g, p, search)?;
        self.forward_encoded(g, p, z, s)
    }
}

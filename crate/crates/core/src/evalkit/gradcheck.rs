use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::distill::{feature_distill_loss, make_token_mask, prediction_distill_loss, DistillBatch, DistillOptions, TargetMask};
use crate::error::Result;
use crate::head::{BBox, HeadOutput};
use crate::numerics::{grad_check, Graph, Tensor, Var};
use crate::objective::{decoded_box_at, focal_loss, giou_loss_var, l1_box_loss_var, make_target_maps, BoxVars, LossWeights, TargetMaps};

pub const GRADCHECK_EPS: f64 = 1e-6;

/// Worst relative gradient error of one loss over a set of random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

/// Shapes of the random instances, taken from a backbone configuration.
#[derive(Clone, Copy, Debug)]
struct Dims {
    rows: usize,
    template_len: usize,
    tokens: usize,
    dim: usize,
    layers: usize,
}

impl Dims {
    fn from(cfg: &BackboneConfig) -> Self {
        Dims {
            rows: cfg.search_grid(),
            template_len: cfg.template_tokens(),
            tokens: cfg.template_tokens() + cfg.search_tokens(),
            dim: cfg.embed_dim,
            layers: cfg.student_stage2,
        }
    }

    fn plane(&self) -> usize {
        self.rows * self.rows
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Box maps from raw `[4, H′·W′]` logits: offsets are rows 0–1, sizes rows 2–3.
fn head_from_logits(g: &mut Graph, raw: Var, rows: usize) -> Result<HeadOutput> {
    let s = g.sigmoid(raw);
    let off = g.slice_rows(s, 0, 2)?;
    let size = g.slice_rows(s, 2, 4)?;
    let score = g.constant(Tensor::zeros(&[rows, rows]));
    Ok(HeadOutput { score, offset: g.reshape(off, &[2, rows, rows])?, size: g.reshape(size, &[2, rows, rows])? })
}

fn box_loss(g: &mut Graph, raw: Var, d: Dims, gt: &BBox, targets: &TargetMaps, giou: bool) -> Result<Var> {
    let head = head_from_logits(g, raw, d.rows)?;
    let pred = decoded_box_at(g, &head, targets.center, d.rows, d.rows)?;
    let gt = BoxVars::constant(g, gt);
    if giou {
        giou_loss_var(g, &pred, &gt)
    } else {
        l1_box_loss_var(g, &pred, &gt)
    }
}

/// Feature batch from stacked student rows `[B·K·N, D]`.
fn feature_batch(g: &mut Graph, stacked: Var, teacher: &[Tensor], d: Dims, masks: &[TargetMask], b: usize) -> Result<DistillBatch> {
    let mut student = Vec::with_capacity(b);
    let mut teach = Vec::with_capacity(b);
    for i in 0..b {
        let mut s = Vec::with_capacity(d.layers);
        let mut t = Vec::with_capacity(d.layers);
        for k in 0..d.layers {
            let start = (i * d.layers + k) * d.tokens;
            s.push(g.slice_rows(stacked, start, start + d.tokens)?);
            t.push(g.constant(teacher[i * d.layers + k].clone()));
        }
        student.push(s);
        teach.push(t);
    }
    Ok(DistillBatch {
        student_feats: student,
        teacher_feats: teach,
        student_logits: Vec::new(),
        teacher_logits: Vec::new(),
        masks: masks.to_vec(),
        template_len: d.template_len,
        temperature: 2.0,
    })
}

/// Runs grad_check on every training loss over `instances` random inputs
/// shaped by `cfg`.
pub fn loss_gradcheck_suite(cfg: &BackboneConfig, instances: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let d = Dims::from(cfg);
    let plane = d.plane();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let gt = random_box(&mut rng);
        let targets = make_target_maps(&gt, d.rows, d.rows)?;
        let mask = make_token_mask(&gt, d.rows, d.rows)?;

        let logits = random_tensor(&mut rng, &[plane], 4.0);
        worst[0] = worst[0].max(grad_check(|g, x| focal_loss(g, x, &targets), &logits, GRADCHECK_EPS)?);

        let raw = random_tensor(&mut rng, &[4, plane], 2.0);
        worst[1] = worst[1].max(grad_check(|g, x| box_loss(g, x, d, &gt, &targets, false), &raw, GRADCHECK_EPS)?);
        worst[2] = worst[2].max(grad_check(|g, x| box_loss(g, x, d, &gt, &targets, true), &raw, GRADCHECK_EPS)?);

        let b = 2;
        let masks: Vec<TargetMask> = (0..b)
            .map(|i| if i == 0 { Ok(mask.clone()) } else { make_token_mask(&random_box(&mut rng), d.rows, d.rows) })
            .collect::<Result<_>>()?;
        let teacher: Vec<Tensor> = (0..b * d.layers).map(|_| random_tensor(&mut rng, &[d.tokens, d.dim], 1.0)).collect();
        let student = random_tensor(&mut rng, &[b * d.layers * d.tokens, d.dim], 1.0);
        let feat = |g: &mut Graph, x: Var| -> Result<Var> {
            let batch = feature_batch(g, x, &teacher, d, &masks, b)?;
            feature_distill_loss(g, &batch, DistillOptions::default())
        };
        worst[3] = worst[3].max(grad_check(feat, &student, GRADCHECK_EPS)?);

        let t_logits: Vec<Tensor> = (0..b).map(|_| random_tensor(&mut rng, &[d.rows, d.rows], 3.0)).collect();
        let s_logits = random_tensor(&mut rng, &[b, plane], 3.0);
        let pred = |g: &mut Graph, x: Var| -> Result<Var> {
            let mut batch = DistillBatch {
                student_feats: Vec::new(),
                teacher_feats: Vec::new(),
                student_logits: Vec::new(),
                teacher_logits: Vec::new(),
                masks: masks.clone(),
                template_len: d.template_len,
                temperature: 2.0,
            };
            for (i, t) in t_logits.iter().enumerate() {
                batch.student_logits.push(g.slice_rows(x, i, i + 1)?);
                batch.teacher_logits.push(g.constant(t.clone()));
            }
            prediction_distill_loss(g, &batch, DistillOptions::default())
        };
        worst[4] = worst[4].max(grad_check(pred, &s_logits, GRADCHECK_EPS)?);

        // every component driven from one flat input: score | box maps | features
        let feat_len = d.layers * d.tokens * d.dim;
        let flat = random_tensor(&mut rng, &[plane + 4 * plane + feat_len], 2.0);
        let teacher1: Vec<Tensor> = teacher[..d.layers].to_vec();
        let t_logit = t_logits[0].clone();
        let weights = LossWeights::default();
        let total = |g: &mut Graph, x: Var| -> Result<Var> {
            let score = g.gather(x, &(0..plane).collect::<Vec<_>>())?;
            let cls = focal_loss(g, score, &targets)?;
            let raw = g.gather(x, &(plane..5 * plane).collect::<Vec<_>>())?;
            let raw = g.reshape(raw, &[4, plane])?;
            let l1 = box_loss(g, raw, d, &gt, &targets, false)?;
            let giou = box_loss(g, raw, d, &gt, &targets, true)?;
            let feats = g.gather(x, &(5 * plane..5 * plane + feat_len).collect::<Vec<_>>())?;
            let feats = g.reshape(feats, &[d.layers * d.tokens, d.dim])?;
            let mut batch = feature_batch(g, feats, &teacher1, d, &masks[..1], 1)?;
            batch.student_logits.push(score);
            batch.teacher_logits.push(g.constant(t_logit.clone()));
            let feat = feature_distill_loss(g, &batch, DistillOptions::default())?;
            let pred = prediction_distill_loss(g, &batch, DistillOptions::default())?;
            let mut acc = cls;
            for (v, w) in [(l1, weights.l1), (giou, weights.giou), (feat, weights.feat), (pred, weights.pred)] {
                let t = g.scale(v, w);
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        };
        worst[5] = worst[5].max(grad_check(total, &flat, GRADCHECK_EPS)?);
    }
    let names = ["focal", "l1_decoded", "giou_decoded", "feature_distill", "prediction_distill", "total"];
    Ok(names.iter().zip(worst).map(|(&name, max_error)| GradcheckReport { name, instances, max_error }).collect())
}

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::data::TrainSample;
use super::optim::AdamW;
use crate::backbone::{Arch, Binder, TrackerNet};
use crate::distill::{feature_distill_loss, prediction_distill_loss, DistillBatch, DistillOptions};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::objective::{decoded_box_at, focal_loss, giou_loss_var, l1_box_loss_var, BoxVars, LossComponents, LossWeights};

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub steps: Vec<StepRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,total,cls,l1,giou,feat,pred\n");
        for r in &self.steps {
            let c = r.components;
            writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.epoch, r.total, c.cls, c.l1, c.giou, c.feat, c.pred).expect("writing to a String");
        }
        s
    }

    /// Mean total loss over the first and last `n` steps.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        let k = n.min(self.steps.len());
        if k == 0 {
            return None;
        }
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.steps[..k]), mean(&self.steps[self.steps.len() - k..])))
    }
}

/// Frozen teacher outputs on a fixed sample set: the aligned joint features
/// for each student stage-2 layer and the score logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub feats: Vec<Vec<Tensor>>,
    pub logits: Vec<Tensor>,
}

/// Checks that a teacher can supervise students of `cfg`.
pub fn check_teacher(teacher: &TrackerNet, cfg: &TrainConfig) -> Result<()> {
    let (t, s) = (teacher.config(), &cfg.model);
    if teacher.arch() != Arch::Teacher {
        return Err(Error::Config("distillation source is not a teacher network".into()));
    }
    let same = t.embed_dim == s.embed_dim
        && t.patch_size == s.patch_size
        && t.template_size == s.template_size
        && t.search_size == s.search_size
        && t.teacher_layers == s.teacher_layers;
    if !same {
        return Err(Error::Config(format!(
            "teacher (D={}, P={}, crops {}/{}, L={}) and student (D={}, P={}, crops {}/{}, L={}) are incompatible",
            t.embed_dim, t.patch_size, t.template_size, t.search_size, t.teacher_layers,
            s.embed_dim, s.patch_size, s.template_size, s.search_size, s.teacher_layers
        )));
    }
    s.validate_pair()
}

/// Runs the frozen teacher once over `data`.
pub fn cache_teacher(teacher: &TrackerNet, cfg: &TrainConfig, data: &[TrainSample]) -> Result<TeacherCache> {
    check_teacher(teacher, cfg)?;
    let layers: Vec<usize> = (0..cfg.model.student_stage2).map(|k| cfg.model.aligned_teacher_layer(k)).collect();
    let mut feats = Vec::with_capacity(data.len());
    let mut logits = Vec::with_capacity(data.len());
    for s in data {
        let mut g = Graph::new();
        let mut p = teacher.binder(false);
        let f = teacher.forward(&mut g, &mut p, &s.template_refs(cfg.two_templates), &s.search)?;
        feats.push(layers.iter().map(|&l| g.value(f.joint_layers[l].var).clone()).collect());
        logits.push(g.value(f.head.score).clone());
    }
    Ok(TeacherCache { feats, logits })
}

struct BatchLoss {
    total: Var,
    components: LossComponents,
}

fn batch_loss(
    g: &mut Graph,
    p: &mut Binder,
    net: &TrackerNet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    data: &[TrainSample],
    batch: &[usize],
    teacher: Option<&TeacherCache>,
) -> Result<BatchLoss> {
    let inv_b = 1.0 / batch.len() as f64;
    let grid = net.config().search_grid();
    let use_feat = cfg.feat_distill && weights.feat > 0.0;
    let use_pred = cfg.pred_distill && weights.pred > 0.0;
    if (use_feat || use_pred) && teacher.is_none() {
        return Err(Error::Config("distillation is enabled but no teacher outputs were supplied".into()));
    }
    let mut cls = Vec::new();
    let mut l1 = Vec::new();
    let mut giou = Vec::new();
    let mut db = DistillBatch {
        student_feats: Vec::new(),
        teacher_feats: Vec::new(),
        student_logits: Vec::new(),
        teacher_logits: Vec::new(),
        masks: Vec::new(),
        template_len: net.config().template_tokens(),
        temperature: cfg.temperature,
    };
    for &i in batch {
        let s = &data[i];
        let f = net.forward(g, p, &s.template_refs(cfg.two_templates), &s.search)?;
        cls.push(focal_loss(g, f.head.score, &s.targets)?);
        let pred = decoded_box_at(g, &f.head, s.targets.center, grid, grid)?;
        let gt = BoxVars::constant(g, &s.gt);
        l1.push(l1_box_loss_var(g, &pred, &gt)?);
        giou.push(giou_loss_var(g, &pred, &gt)?);
        if let Some(tc) = teacher.filter(|_| use_feat || use_pred) {
            db.student_feats.push(f.joint_layers.iter().map(|t| t.var).collect());
            db.teacher_feats.push(tc.feats[i].iter().map(|t| g.constant(t.clone())).collect());
            db.student_logits.push(f.head.score);
            db.teacher_logits.push(g.constant(tc.logits[i].clone()));
            db.masks.push(s.mask.clone());
        }
    }
    let mean = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(g.scale(acc, inv_b))
    };
    let cls = mean(g, &cls)?;
    let l1 = mean(g, &l1)?;
    let giou = mean(g, &giou)?;
    let mut c = LossComponents {
        cls: g.value(cls).item()?,
        l1: g.value(l1).item()?,
        giou: g.value(giou).item()?,
        ..Default::default()
    };
    let t = g.scale(l1, weights.l1);
    let mut total = g.add(cls, t)?;
    let t = g.scale(giou, weights.giou);
    total = g.add(total, t)?;
    let opts = DistillOptions::default();
    if use_feat {
        let feat = feature_distill_loss(g, &db, opts)?;
        c.feat = g.value(feat).item()?;
        let t = g.scale(feat, weights.feat);
        total = g.add(total, t)?;
    }
    if use_pred {
        let pred = prediction_distill_loss(g, &db, opts)?;
        c.pred = g.value(pred).item()?;
        let t = g.scale(pred, weights.pred);
        total = g.add(total, t)?;
    }
    Ok(BatchLoss { total, components: c })
}

/// Optimizes `net` in place over `data` and returns the loss history.
pub fn fit(net: &mut TrackerNet, cfg: &TrainConfig, data: &[TrainSample], teacher: Option<&TeacherCache>) -> Result<LossHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(tc) = teacher {
        if tc.logits.len() != data.len() || tc.feats.len() != data.len() {
            return Err(Error::Config("teacher outputs do not match the training set".into()));
        }
    }
    let weights = if net.arch() == Arch::Teacher {
        LossWeights { feat: 0.0, pred: 0.0, ..cfg.weights }
    } else {
        cfg.weights
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0bad_cafe));
    let mut opt = AdamW::new(net.store(), cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = cfg.lr_scale(epoch, history.steps.len());
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut p = net.binder(true);
                let loss = batch_loss(&mut g, &mut p, net, cfg, &weights, data, batch, teacher)?;
                let total = g.value(loss.total).item()?;
                let grads = g.backward(loss.total)?;
                ((loss.components, total), p.param_grads(&grads))
            };
            let mut grads = grads;
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(net.store_mut(), &grads, cfg.lr_backbone * scale, cfg.lr_other * scale)?;
            history.steps.push(StepRecord { step: history.steps.len(), epoch, components: loss.0, total: loss.1 });
        }
    }
    Ok(history)
}

/// Rescales all gradients together so their joint L2 norm is at most `limit`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], limit: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if limit > 0.0 && norm > limit {
        let k = limit / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Parameter gradients of one batch, for inspection and tests.
pub fn batch_gradients(net: &TrackerNet, cfg: &TrainConfig, data: &[TrainSample], batch: &[usize], teacher: Option<&TeacherCache>) -> Result<(LossComponents, Vec<Option<Vec<f64>>>)> {
    let weights = if net.arch() == Arch::Teacher { LossWeights { feat: 0.0, pred: 0.0, ..cfg.weights } } else { cfg.weights };
    let mut g = Graph::new();
    let mut p = net.binder(true);
    let loss = batch_loss(&mut g, &mut p, net, cfg, &weights, data, batch, teacher)?;
    let grads = g.backward(loss.total)?;
    Ok((loss.components, p.param_grads(&grads)))
}

/// Trains a teacher from random initialization with the tracking loss only.
pub fn train_teacher(cfg: &TrainConfig, data: &[TrainSample]) -> Result<(TrackerNet, LossHistory)> {
    let mut net = TrackerNet::new(&cfg.model, &cfg.head, Arch::Teacher, cfg.seed.wrapping_mul(2))?;
    let history = fit(&mut net, cfg, data, None)?;
    Ok((net, history))
}

/// Trains a randomly initialized student against precomputed teacher outputs.
pub fn train_student_cached(cfg: &TrainConfig, data: &[TrainSample], teacher: Option<&TeacherCache>) -> Result<(TrackerNet, LossHistory)> {
    let mut net = TrackerNet::new(&cfg.model, &cfg.head, Arch::Student, cfg.seed.wrapping_mul(2).wrapping_add(1))?;
    let history = fit(&mut net, cfg, data, teacher)?;
    Ok((net, history))
}

/// Trains a student distilled from a frozen teacher. The teacher is only
/// evaluated when a distillation branch is enabled.
pub fn train_student(teacher: &TrackerNet, cfg: &TrainConfig, data: &[TrainSample]) -> Result<(TrackerNet, LossHistory)> {
    check_teacher(teacher, cfg)?;
    let needs = (cfg.feat_distill && cfg.weights.feat > 0.0) || (cfg.pred_distill && cfg.weights.pred > 0.0);
    let cache = if needs { Some(cache_teacher(teacher, cfg, data)?) } else { None };
    train_student_cached(cfg, data, cache.as_ref())
}

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::objective::LossWeights;

/// Training hyperparameters; also configures the teacher and student shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    /// Epoch after which both learning rates are multiplied by `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Linear learning-rate warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient L2-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub feat_distill: bool,
    pub pred_distill: bool,
    pub weights: LossWeights,
    pub temperature: f64,
    /// Average the encodings of the two template frames of each triplet.
    pub two_templates: bool,
    /// Size of the generated training set.
    pub train_samples: usize,
    pub model: BackboneConfig,
    pub head: HeadConfig,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 300,
            lr_backbone: 4e-5,
            lr_other: 4e-4,
            weight_decay: 1e-4,
            lr_decay_epoch: 240,
            lr_decay_factor: 0.1,
            warmup_steps: 0,
            grad_clip: 0.1,
            seed: 0,
            feat_distill: true,
            pred_distill: true,
            weights: LossWeights::default(),
            temperature: 2.0,
            two_templates: true,
            train_samples: 0,
            model: BackboneConfig::full(),
            head: HeadConfig::full(),
        }
    }

    /// Minutes-scale schedule on the desk model: larger steps, short run.
    pub fn desk() -> Self {
        let model = BackboneConfig::desk();
        TrainConfig {
            batch_size: 8,
            epochs: 12,
            lr_backbone: 2e-3,
            lr_other: 2e-3,
            lr_decay_epoch: 10,
            train_samples: 256,
            head: HeadConfig::for_embed_dim(model.embed_dim),
            model,
            ..Self::full()
        }
    }

    /// The desk schedule on the smallest model, used by the test suites. The
    /// head keeps 32 channels so its narrowest layer still has four.
    pub fn tiny() -> Self {
        TrainConfig { head: HeadConfig { channels: 32 }, model: BackboneConfig::tiny(), ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.validate_pair()?;
        self.head.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let rates = [self.lr_backbone, self.lr_other, self.weight_decay, self.lr_decay_factor, self.grad_clip];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("learning rates, weight decay and decay factor must be finite and non-negative".into()));
        }
        let w = self.weights;
        if [w.l1, w.giou, w.feat, w.pred].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    /// Learning-rate multiplier for `epoch` (0-based) at optimizer step `step` (0-based).
    pub fn lr_scale(&self, epoch: usize, step: usize) -> f64 {
        let decay = if epoch >= self.lr_decay_epoch { self.lr_decay_factor } else { 1.0 };
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        decay * warm
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn from_text(base: TrainConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(base: TrainConfig, path: &Path) -> Result<Self> {
        Self::from_text(base, &fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn v<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = v(key, value)?,
            "epochs" => self.epochs = v(key, value)?,
            "lr_backbone" => self.lr_backbone = v(key, value)?,
            "lr_other" => self.lr_other = v(key, value)?,
            "weight_decay" => self.weight_decay = v(key, value)?,
            "lr_decay_epoch" => self.lr_decay_epoch = v(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = v(key, value)?,
            "warmup_steps" => self.warmup_steps = v(key, value)?,
            "grad_clip" => self.grad_clip = v(key, value)?,
            "seed" => self.seed = v(key, value)?,
            "feat_distill" => self.feat_distill = v(key, value)?,
            "pred_distill" => self.pred_distill = v(key, value)?,
            "lambda1" => self.weights.l1 = v(key, value)?,
            "lambda2" => self.weights.giou = v(key, value)?,
            "lambda3" => self.weights.feat = v(key, value)?,
            "lambda4" => self.weights.pred = v(key, value)?,
            "temperature" => self.temperature = v(key, value)?,
            "two_templates" => self.two_templates = v(key, value)?,
            "train_samples" => self.train_samples = v(key, value)?,
            "embed_dim" => self.model.embed_dim = v(key, value)?,
            "num_heads" => self.model.num_heads = v(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = v(key, value)?,
            "patch_size" => self.model.patch_size = v(key, value)?,
            "teacher_layers" => self.model.teacher_layers = v(key, value)?,
            "student_stage1" => self.model.student_stage1 = v(key, value)?,
            "student_stage2" => self.model.student_stage2 = v(key, value)?,
            "template_size" => self.model.template_size = v(key, value)?,
            "search_size" => self.model.search_size = v(key, value)?,
            "head_channels" => self.head.channels = v(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Serializes every key in the same format [`TrainConfig::apply_text`] reads.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_other", self.lr_other.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_epoch", self.lr_decay_epoch.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("feat_distill", self.feat_distill.to_string()),
            ("pred_distill", self.pred_distill.to_string()),
            ("lambda1", w.l1.to_string()),
            ("lambda2", w.giou.to_string()),
            ("lambda3", w.feat.to_string()),
            ("lambda4", w.pred.to_string()),
            ("temperature", self.temperature.to_string()),
            ("two_templates", self.two_templates.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("teacher_layers", m.teacher_layers.to_string()),
            ("student_stage1", m.student_stage1.to_string()),
            ("student_stage2", m.student_stage2.to_string()),
            ("template_size", m.template_size.to_string()),
            ("search_size", m.search_size.to_string()),
            ("head_channels", self.head.channels.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_defaults() {
        let c = TrainConfig::full();
        assert_eq!((c.weight_decay, c.lr_backbone, c.lr_other), (1e-4, 4e-5, 4e-4));
        assert_eq!((c.epochs, c.lr_decay_epoch, c.lr_decay_factor), (300, 240, 0.1));
        assert_eq!(c.lr_scale(239, 0), 1.0);
        assert_eq!(c.lr_scale(240, 0), 0.1);
        let w = TrainConfig { warmup_steps: 4, ..TrainConfig::desk() };
        assert_eq!(w.lr_scale(0, 1), 0.5);
        assert_eq!(w.lr_scale(0, 4), 1.0);
    }

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let c = TrainConfig::from_text(TrainConfig::desk(), "# run\nepochs = 3\nlambda3 = 0\n\nfeat_distill = false # off\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.weights.feat, 0.0);
        assert!(!c.feat_distill);
        let err = TrainConfig::from_text(TrainConfig::desk(), "epochs = 3\nlearning_rate = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(TrainConfig::from_text(TrainConfig::desk(), "epochs = three\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::tiny();
        c.temperature = 3.5;
        c.seed = 11;
        assert_eq!(TrainConfig::from_text(TrainConfig::full(), &c.to_text()).unwrap(), c);
    }
}

use crate::error::{Error, Result};

/// Transformer dimensions and depths for the teacher and the two-stage student.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    /// Depth of the teacher, which runs every layer on the joint sequence.
    pub teacher_layers: usize,
    /// Student layers applied to each stream on its own.
    pub student_stage1: usize,
    /// Student layers applied to the concatenated streams.
    pub student_stage2: usize,
    pub template_size: usize,
    pub search_size: usize,
}

/// Which network a [`BackboneConfig`] is instantiated as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Teacher,
    Student,
}

impl BackboneConfig {
    /// Full-size configuration: 12-layer teacher, 6+2 student, 192-wide.
    pub fn full() -> Self {
        BackboneConfig {
            embed_dim: 192,
            num_heads: 3,
            mlp_ratio: 4.0,
            patch_size: 16,
            teacher_layers: 12,
            student_stage1: 6,
            student_stage2: 2,
            template_size: 128,
            search_size: 256,
        }
    }

    /// Minutes-scale training configuration.
    pub fn desk() -> Self {
        BackboneConfig {
            embed_dim: 32,
            num_heads: 2,
            mlp_ratio: 4.0,
            patch_size: 16,
            teacher_layers: 4,
            student_stage1: 2,
            student_stage2: 1,
            template_size: 64,
            search_size: 128,
        }
    }

    /// Smallest configuration with the full structure; used by the test suites.
    pub fn tiny() -> Self {
        BackboneConfig { embed_dim: 16, ..Self::desk() }
    }

    pub fn student_layers(&self) -> usize {
        self.student_stage1 + self.student_stage2
    }

    /// (stage-1 depth, stage-2 depth) for the given network.
    pub fn stages(&self, arch: Arch) -> (usize, usize) {
        match arch {
            Arch::Teacher => (0, self.teacher_layers),
            Arch::Student => (self.student_stage1, self.student_stage2),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    /// Structural checks that apply to either network.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return fail("embed_dim, num_heads and patch_size must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!("num_heads {} does not divide embed_dim {}", self.num_heads, self.embed_dim));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        for (name, side) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if side == 0 || side % self.patch_size != 0 {
                return fail(format!("{name} {side} is not a positive multiple of patch_size {}", self.patch_size));
            }
        }
        Ok(())
    }

    /// Checks for a teacher/student pairing: the student must be strictly
    /// shallower and distill from at least one stage-2 layer.
    pub fn validate_pair(&self) -> Result<()> {
        self.validate()?;
        if self.student_layers() >= self.teacher_layers {
            return Err(Error::Config(format!(
                "student depth {} must be below teacher depth {}",
                self.student_layers(),
                self.teacher_layers
            )));
        }
        if self.student_stage2 == 0 {
            return Err(Error::Config("student_stage2 must be at least 1".into()));
        }
        Ok(())
    }

    /// Teacher layer aligned with student stage-2 layer `k` (0-based): last-K alignment.
    pub fn aligned_teacher_layer(&self, k: usize) -> usize {
        self.teacher_layers - self.student_stage2 + k
    }
}

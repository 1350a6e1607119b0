//! Closed-form parameter and multiply-accumulate counts.

use super::config::{Arch, BackboneConfig};
use crate::head::HeadConfig;

/// How multiply-accumulates are converted to a FLOP figure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    /// One FLOP per multiply-accumulate, as reported by common model profilers.
    MultiplyAccumulate,
    /// A multiply and an add counted separately.
    TwoPerMac,
}

/// Multiply-accumulates of every matrix product in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacBreakdown {
    pub patch_embed_template: u64,
    pub patch_embed_search: u64,
    pub stage1_template: u64,
    pub stage1_search: u64,
    pub stage2: u64,
    pub head: u64,
}

impl MacBreakdown {
    /// Work repeated for every tracked frame; template tokens are cached.
    pub fn per_frame(&self) -> u64 {
        self.patch_embed_search + self.stage1_search + self.stage2 + self.head
    }

    /// Work including the template stream.
    pub fn total(&self) -> u64 {
        self.per_frame() + self.patch_embed_template + self.stage1_template
    }
}

fn layer_params(cfg: &BackboneConfig) -> usize {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let qkv = 3 * d * d + 3 * d;
    let proj = d * d + d;
    let mlp = d * h + h + h * d + d;
    let norms = 4 * d;
    qkv + proj + mlp + norms
}

fn head_params(embed_dim: usize, head: &HeadConfig) -> usize {
    let w = head.widths(embed_dim);
    let convs: usize = (0..4).map(|i| 9 * w[i] * w[i + 1] + w[i + 1] + 2 * w[i + 1]).sum();
    [1usize, 2, 2].iter().map(|&out| convs + w[4] * out + out).sum()
}

/// Trainable parameter count of the network; batch-norm statistics are buffers
/// and excluded.
pub fn count_params(cfg: &BackboneConfig, head: &HeadConfig, arch: Arch) -> usize {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let (n1, n2) = cfg.stages(arch);
    let patch = 3 * p * p * d + d;
    let pos = (cfg.template_tokens() + cfg.search_tokens()) * d;
    let final_norm = 2 * d;
    (n1 + n2) * layer_params(cfg) + patch + pos + final_norm + head_params(d, head)
}

fn layer_macs(cfg: &BackboneConfig, tokens: u64) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.mlp_hidden() as u64;
    let qkv = tokens * d * 3 * d;
    let attn = 2 * tokens * tokens * d;
    let proj = tokens * d * d;
    let mlp = 2 * tokens * d * h;
    qkv + attn + proj + mlp
}

pub fn mac_breakdown(cfg: &BackboneConfig, head: &HeadConfig, arch: Arch) -> MacBreakdown {
    let (n1, n2) = cfg.stages(arch);
    let (nz, ns) = (cfg.template_tokens() as u64, cfg.search_tokens() as u64);
    let patch_dim = 3 * (cfg.patch_size as u64).pow(2);
    let d = cfg.embed_dim as u64;
    let w = head.widths(cfg.embed_dim);
    let cells = ns;
    let convs: u64 = (0..4).map(|i| cells * 9 * (w[i] * w[i + 1]) as u64).sum();
    let head_macs: u64 = [1u64, 2, 2].iter().map(|&out| convs + cells * w[4] as u64 * out).sum();
    MacBreakdown {
        patch_embed_template: nz * patch_dim * d,
        patch_embed_search: ns * patch_dim * d,
        stage1_template: n1 as u64 * layer_macs(cfg, nz),
        stage1_search: n1 as u64 * layer_macs(cfg, ns),
        stage2: n2 as u64 * layer_macs(cfg, nz + ns),
        head: head_macs,
    }
}

/// FLOPs of the per-frame inference path at the configured crop sizes.
pub fn count_flops(cfg: &BackboneConfig, head: &HeadConfig, arch: Arch, convention: FlopConvention) -> u64 {
    let macs = mac_breakdown(cfg, head, arch).per_frame();
    match convention {
        FlopConvention::MultiplyAccumulate => macs,
        FlopConvention::TwoPerMac => 2 * macs,
    }
}

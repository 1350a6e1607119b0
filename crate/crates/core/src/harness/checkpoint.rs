use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use crate::backbone::{Arch, TrackerNet};
use crate::error::{Error, Result};

const ARCH_TAG: &str = "# arch = ";

/// Sidecar holding the architecture and training configuration of a checkpoint.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the weights to `path` and the configuration to `<path>.meta`.
pub fn save_model(net: &TrackerNet, cfg: &TrainConfig, path: &Path) -> Result<()> {
    net.store().save(path)?;
    let arch = match net.arch() {
        Arch::Teacher => "teacher",
        Arch::Student => "student",
    };
    std::fs::write(meta_path(path), format!("{ARCH_TAG}{arch}\n{}", cfg.to_text()))?;
    Ok(())
}

/// Rebuilds the network described by the sidecar and loads its weights.
pub fn load_model(path: &Path) -> Result<(TrackerNet, TrainConfig)> {
    let meta = std::fs::read_to_string(meta_path(path))?;
    let arch = match meta.lines().next().and_then(|l| l.strip_prefix(ARCH_TAG)).map(str::trim) {
        Some("teacher") => Arch::Teacher,
        Some("student") => Arch::Student,
        other => return Err(Error::Format(format!("checkpoint metadata has no valid arch line (found {other:?})"))),
    };
    let cfg = TrainConfig::from_text(TrainConfig::desk(), &meta)?;
    let mut net = TrackerNet::new(&cfg.model, &cfg.head, arch, 0)?;
    net.store_mut().load(path)?;
    Ok((net, cfg))
}

use crate::error::{Error, Result};
use crate::imaging::ImageCrop;

/// Store and refresh settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoreConfig {
    pub capacity: usize,
    /// Minimum confidence for an observation to be kept.
    pub threshold: f64,
    /// Template refresh period in frames.
    pub refresh_interval: usize,
    /// Weight of the refreshed encoding against the original template.
    pub fusion: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { capacity: 16, threshold: 0.7, refresh_interval: 25, fusion: 0.5 }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.refresh_interval == 0 {
            return Err(Error::Config("store capacity and refresh interval must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("store threshold {} must lie in (0, 1)", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.fusion) {
            return Err(Error::Config(format!("fusion weight {} must lie in [0, 1]", self.fusion)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    /// Template-scale crop around the box predicted on that frame.
    pub crop: ImageCrop,
    pub confidence: f64,
    pub frame: usize,
}

/// Bounded, confidence-gated buffer of target observations.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStore {
    capacity: usize,
    threshold: f64,
    entries: Vec<StoreEntry>,
    inserted_since_refresh: bool,
}

impl TargetStore {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        TargetStore { capacity, threshold, entries: Vec::new(), inserted_since_refresh: false }
    }

    pub fn from_config(cfg: &StoreConfig) -> Self {
        Self::new(cfg.capacity, cfg.threshold)
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn accepts(&self, confidence: f64) -> bool {
        confidence >= self.threshold
    }

    /// Inserts when `confidence ≥ τ`, then evicts the lowest-confidence entry
    /// (oldest first among equals) if over capacity. Returns whether the
    /// observation is still held afterwards.
    pub fn offer_to_store(&mut self, crop: ImageCrop, confidence: f64, frame: usize) -> bool {
        if !self.accepts(confidence) {
            return false;
        }
        self.entries.push(StoreEntry { crop, confidence, frame });
        self.inserted_since_refresh = true;
        let mut kept = true;
        if self.entries.len() > self.capacity {
            let mut worst = 0;
            for (i, e) in self.entries.iter().enumerate() {
                if e.confidence < self.entries[worst].confidence {
                    worst = i;
                }
            }
            kept = worst + 1 != self.entries.len();
            self.entries.remove(worst);
        }
        kept
    }

    /// Highest-confidence entry, most recent among equals.
    pub fn best(&self) -> Option<&StoreEntry> {
        let mut best: Option<&StoreEntry> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.confidence >= b.confidence) {
                best = Some(e);
            }
        }
        best
    }

    pub(crate) fn has_new_entries(&self) -> bool {
        self.inserted_since_refresh
    }

    pub(crate) fn mark_refreshed(&mut self) {
        self.inserted_since_refresh = false;
    }
}

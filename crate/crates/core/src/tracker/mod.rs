//! Online inference: template encoded once, per-frame search encoding and
//! joint modeling, Hanning-window penalty, and confidence-gated template refresh.

mod store;

pub use store::{StoreConfig, StoreEntry, TargetStore};

use crate::backbone::{Origin, TokenSeq, TrackerNet};
use crate::error::{invalid, Error, Result};
use crate::head::{argmax, box_at_cell, BBox, PixelBox, ScoreMap};
use crate::imaging::{Image, ImageCrop};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Search side as a multiple of `√(w·h)` of the previous box.
    pub search_factor: f64,
    pub template_factor: f64,
    pub store: StoreConfig,
    pub store_enabled: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { search_factor: 4.0, template_factor: 2.0, store: StoreConfig::default(), store_enabled: true }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_factor > 0.0) || !(self.template_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        self.store.validate()
    }
}

/// `hann(k) = 0.5·(1 − cos(2πk/(M−1)))`, mirrored so the taper is exactly symmetric.
pub fn hann(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; m];
    for k in 0..m.div_ceil(2) {
        let v = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (m - 1) as f64).cos());
        w[k] = v;
        w[m - 1 - k] = v;
    }
    w
}

/// Outer product `hann(r)·hann(c)`, row-major.
pub fn hanning_window(rows: usize, cols: usize) -> Vec<f64> {
    let (hr, hc) = (hann(rows), hann(cols));
    let mut w = Vec::with_capacity(rows * cols);
    for r in &hr {
        for c in &hc {
            w.push(r * c);
        }
    }
    w
}

/// Square crop region in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRegion {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropRegion {
    pub fn around(b: &PixelBox, factor: f64) -> Self {
        let (cx, cy) = b.center();
        CropRegion { cx, cy, side: factor * (b.w * b.h).sqrt() }
    }

    pub fn sample(&self, frame: &Image, out: usize) -> Result<ImageCrop> {
        frame.crop_resize(self.cx, self.cy, self.side, out)
    }

    /// Normalized crop box to frame pixels.
    pub fn to_frame(&self, b: &BBox) -> PixelBox {
        let x0 = self.cx - self.side / 2.0;
        let y0 = self.cy - self.side / 2.0;
        PixelBox::from_bbox(&BBox::new(x0 + b.cx * self.side, y0 + b.cy * self.side, b.w * self.side, b.h * self.side))
    }

    /// Frame pixel box to normalized crop coordinates.
    pub fn to_crop(&self, b: &PixelBox) -> BBox {
        let x0 = self.cx - self.side / 2.0;
        let y0 = self.cy - self.side / 2.0;
        let (cx, cy) = b.center();
        BBox::new((cx - x0) / self.side, (cy - y0) / self.side, b.w / self.side, b.h / self.side)
    }
}

/// Everything one search step produces, before the state is updated.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub region: CropRegion,
    pub search_crop: ImageCrop,
    pub crop_box: BBox,
    /// Clipped box in frame pixels.
    pub frame_box: PixelBox,
    /// Unpenalized softmax probability of the selected cell.
    pub confidence: f64,
    pub rows: usize,
    pub cols: usize,
    /// Softmaxed score map multiplied by the Hanning window.
    pub penalized: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub original_template: Tensor,
    pub active_template: Tensor,
    pub prev_box: PixelBox,
    pub frame_index: usize,
    pub store: TargetStore,
    frame_size: (usize, usize),
}

/// Sequence tracker over a fixed network; one instance per sequence.
pub struct Tracker<'n> {
    net: &'n TrackerNet,
    config: TrackerConfig,
    state: Option<TrackerState>,
    template_encodings: usize,
}

fn box_inside(b: &PixelBox, w: usize, h: usize) -> bool {
    b.w > 0.0 && b.h > 0.0 && b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= w as f64 && b.y + b.h <= h as f64
}

impl<'n> Tracker<'n> {
    pub fn new(net: &'n TrackerNet, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Tracker { net, config, state: None, template_encodings: 0 })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    /// Number of stage-1 template encodings run so far.
    pub fn template_encodings(&self) -> usize {
        self.template_encodings
    }

    fn encode_template(&mut self, crop: &ImageCrop) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut p = self.net.binder(false);
        let z = self.net.encode_template(&mut g, &mut p, &[crop])?;
        self.template_encodings += 1;
        Ok(g.value(z.var).clone())
    }

    pub fn init(&mut self, frame: &Image, gt: PixelBox) -> Result<()> {
        if !box_inside(&gt, frame.width(), frame.height()) {
            return Err(invalid(format!("initial box {gt:?} is not inside the {}x{} frame", frame.width(), frame.height())));
        }
        let crop = CropRegion::around(&gt, self.config.template_factor).sample(frame, self.net.config().template_size)?;
        let tokens = self.encode_template(&crop)?;
        self.state = Some(TrackerState {
            original_template: tokens.clone(),
            active_template: tokens,
            prev_box: gt,
            frame_index: 0,
            store: TargetStore::from_config(&self.config.store),
            frame_size: (frame.width(), frame.height()),
        });
        Ok(())
    }

    /// Runs the search step on `frame` without touching the state.
    pub fn predict(&self, frame: &Image) -> Result<Prediction> {
        let state = self.state.as_ref().ok_or_else(|| Error::InvalidState("tracker is not initialized".into()))?;
        if (frame.width(), frame.height()) != state.frame_size {
            return Err(invalid("frame size changed within the sequence"));
        }
        let cfg = self.net.config();
        let region = CropRegion::around(&state.prev_box, self.config.search_factor);
        let search_crop = region.sample(frame, cfg.search_size)?;

        let mut g = Graph::new();
        let mut p = self.net.binder(false);
        let zv = g.constant(state.active_template.clone());
        let tg = cfg.template_grid();
        let z = TokenSeq::stream(zv, Origin::Template, (tg, tg));
        let s = self.net.encode_search(&mut g, &mut p, &search_crop)?;
        let out = self.net.forward_encoded(&mut g, &mut p, z, s)?;

        let score = ScoreMap::from_tensor(g.value(out.head.score))?;
        let probs = score.probabilities(1.0);
        let window = hanning_window(score.rows, score.cols);
        let penalized: Vec<f64> = probs.iter().zip(&window).map(|(p, w)| p * w).collect();
        let best = argmax(&penalized);
        let (r, c) = (best / score.cols, best % score.cols);
        let crop_box = box_at_cell(r, c, score.rows, score.cols, g.value(out.head.offset), g.value(out.head.size))?;
        let (fw, fh) = state.frame_size;
        let frame_box = region.to_frame(&crop_box).clipped(fw as f64, fh as f64);
        Ok(Prediction {
            region,
            search_crop,
            crop_box,
            frame_box,
            confidence: probs[best],
            rows: score.rows,
            cols: score.cols,
            penalized,
        })
    }

    /// Tracks one frame and returns the clipped box with its confidence.
    pub fn track_frame(&mut self, frame: &Image) -> Result<(PixelBox, f64)> {
        let pred = self.predict(frame)?;
        let store_enabled = self.config.store_enabled;
        let template_size = self.net.config().template_size;
        let template_factor = self.config.template_factor;
        let state = self.state.as_mut().expect("predict checked initialization");
        state.prev_box = pred.frame_box;
        state.frame_index += 1;
        if store_enabled {
            if state.store.accepts(pred.confidence) {
                let crop = CropRegion::around(&pred.frame_box, template_factor).sample(frame, template_size)?;
                state.store.offer_to_store(crop, pred.confidence, state.frame_index);
            }
            if state.frame_index % self.config.store.refresh_interval == 0 {
                self.refresh_template()?;
            }
        }
        Ok((pred.frame_box, pred.confidence))
    }

    /// Re-encodes the best stored crop and fuses it with the original
    /// template; no-op when nothing was stored since the last refresh.
    pub fn refresh_template(&mut self) -> Result<()> {
        let state = self.state.as_ref().ok_or_else(|| Error::InvalidState("tracker is not initialized".into()))?;
        if !state.store.has_new_entries() {
            return Ok(());
        }
        let crop = match state.store.best() {
            Some(e) => e.crop.clone(),
            None => return Ok(()),
        };
        let fresh = self.encode_template(&crop)?;
        let alpha = self.config.store.fusion;
        let state = self.state.as_mut().expect("checked above");
        state.active_template = state.original_template.lerp_with(1.0 - alpha, &fresh, alpha)?;
        state.store.mark_refreshed();
        Ok(())
    }

    /// Tracks every frame after the first; the returned list starts with the
    /// initialization box.
    pub fn run(&mut self, frames: &[Image], init_box: PixelBox) -> Result<Vec<PixelBox>> {
        let first = frames.first().ok_or_else(|| invalid("empty sequence"))?;
        self.init(first, init_box)?;
        let mut out = Vec::with_capacity(frames.len());
        out.push(init_box);
        for f in &frames[1..] {
            out.push(self.track_frame(f)?.0);
        }
        Ok(out)
    }
}

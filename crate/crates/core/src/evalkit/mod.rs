//! Tracking metrics, teacher–student feature similarity, score-map dumps,
//! and ablation reports.

mod gradcheck;
mod ope;

pub use gradcheck::{loss_gradcheck_suite, GradcheckReport, GRADCHECK_EPS};
pub use ope::{ope_aggregate, ope_evaluate, success_threshold, OPEResult, PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS};

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::TrackerNet;
use crate::distill::TargetMask;
use crate::error::{invalid, Error, Result};
use crate::harness::TrainSample;
use crate::head::argmax;
use crate::imaging::{GrayImage, Image};
use crate::numerics::{Graph, Tensor};
use crate::tracker::Tracker;

/// Cosine similarity of two equally long vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(invalid(format!("cannot compare vectors of length {} and {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm feature vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn search_vector(t: &Tensor, template_len: usize, mask: Option<&TargetMask>) -> Result<Vec<f64>> {
    let (n, d) = t.dims2()?;
    if template_len >= n {
        return Err(invalid(format!("{n} rows leave no search tokens after {template_len} template rows")));
    }
    if let Some(m) = mask {
        if m.len() != n - template_len {
            return Err(invalid(format!("mask of {} tokens for {} search tokens", m.len(), n - template_len)));
        }
    }
    let mut out = Vec::with_capacity((n - template_len) * d);
    for r in template_len..n {
        if mask.is_none_or(|m| m.is_active(r - template_len)) {
            out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(out)
}

/// Per-layer cosine similarity between aligned student and teacher joint
/// features, over the (optionally masked) search tokens.
pub fn layer_cosine_similarity(student: &[Tensor], teacher: &[Tensor], template_len: usize, mask: Option<&TargetMask>) -> Result<Vec<f64>> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(invalid(format!("{} student taps for {} teacher taps", student.len(), teacher.len())));
    }
    student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            if s.shape() != t.shape() {
                return Err(invalid(format!("tap shapes {:?} and {:?} differ", s.shape(), t.shape())));
            }
            cosine_similarity(&search_vector(s, template_len, mask)?, &search_vector(t, template_len, mask)?)
        })
        .collect()
}

/// Stage-2 joint features of a student and the teacher layers aligned with them.
pub fn aligned_taps(student: &TrackerNet, teacher: &TrackerNet, sample: &TrainSample, two_templates: bool) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let cfg = student.config();
    let run = |net: &TrackerNet| -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut p = net.binder(false);
        let f = net.forward(&mut g, &mut p, &sample.template_refs(two_templates), &sample.search)?;
        Ok(f.joint_layers.iter().map(|t| g.value(t.var).clone()).collect())
    };
    let s = run(student)?;
    let t = run(teacher)?;
    let aligned = (0..s.len())
        .map(|k| t.get(cfg.aligned_teacher_layer(k)).cloned().ok_or_else(|| invalid("teacher is shallower than the alignment")))
        .collect::<Result<Vec<_>>>()?;
    Ok((s, aligned))
}

/// Masked stage-2 similarity averaged over layers and samples.
pub fn mean_masked_similarity(student: &TrackerNet, teacher: &TrackerNet, samples: &[TrainSample], two_templates: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let tl = student.config().template_tokens();
    let mut total = 0.0;
    for s in samples {
        let (st, te) = aligned_taps(student, teacher, s, two_templates)?;
        let sims = layer_cosine_similarity(&st, &te, tl, Some(&s.mask))?;
        total += sims.iter().sum::<f64>() / sims.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Upsamples a `rows × cols` map into `block`-pixel cells, scaled so the
/// maximum maps to white.
pub fn score_map_image(values: &[f64], rows: usize, cols: usize, block: usize) -> Result<GrayImage> {
    if values.len() != rows * cols || block == 0 {
        return Err(invalid(format!("{} values for a {rows}x{cols} map", values.len())));
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let (w, h) = (cols * block, rows * block);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / block) * cols + x / block];
            data[y * w + x] = if peak > 0.0 { (v / peak).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Ok(GrayImage { width: w, height: h, data })
}

/// Penalized score map the tracker would use on `frame`, as a search-crop-sized image.
pub fn dump_score_map(tracker: &Tracker, frame: &Image) -> Result<GrayImage> {
    let pred = tracker.predict(frame)?;
    let block = pred.search_crop.width() / pred.cols;
    score_map_image(&pred.penalized, pred.rows, pred.cols, block)
}

pub fn write_score_map(tracker: &Tracker, frame: &Image, path: &Path) -> Result<()> {
    dump_score_map(tracker, frame)?.write_pgm(path)
}

/// Cell of the brightest block of a dumped map.
pub fn image_argmax_cell(img: &GrayImage, block: usize) -> (usize, usize) {
    let i = argmax(&img.data);
    ((i / img.width) / block, (i % img.width) / block)
}

/// One row of an ablation report.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub feat_distill: bool,
    pub pred_distill: bool,
    /// One value per seed.
    pub similarity: Vec<f64>,
    pub precision: Option<f64>,
    pub success: Option<f64>,
}

impl AblationRow {
    pub fn mean_similarity(&self) -> f64 {
        self.similarity.iter().sum::<f64>() / self.similarity.len().max(1) as f64
    }
}

/// Plain-text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<4} {:<12} {:>5} {:>5} {:>9} {:>7} {:>7}", "#", "variant", "feat", "pred", "cos-sim", "prec", "succ").unwrap();
    let mark = |b: bool| if b { "on" } else { "off" };
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for (i, r) in rows.iter().enumerate() {
        writeln!(
            s,
            "{:<4} {:<12} {:>5} {:>5} {:>9.4} {:>7} {:>7}",
            i + 1,
            r.name,
            mark(r.feat_distill),
            mark(r.pred_distill),
            r.mean_similarity(),
            opt(r.precision),
            opt(r.success)
        )
        .unwrap();
    }
    s
}

/// `variant,seed,similarity` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,similarity\n");
    for r in rows {
        for (k, v) in r.similarity.iter().enumerate() {
            writeln!(s, "{},{k},{v}", r.name).unwrap();
        }
    }
    s
}

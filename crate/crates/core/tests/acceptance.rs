//! Acceptance suite: one PASS/FAIL line per criterion. Set
//! `ACCEPTANCE_ONLY=1,4,8` to run a subset.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use distrack::backbone::{count_flops, count_params, Arch, BackboneConfig, FlopConvention, TrackerNet};
use distrack::distill::{feature_distill_loss, make_token_mask, masked_kl, prediction_distill_loss, DistillBatch, DistillOptions, TargetMask};
use distrack::evalkit::{loss_gradcheck_suite, mean_masked_similarity, ope_evaluate};
use distrack::harness::{build_training_set, cache_teacher, render_sequence, train_student_cached, train_teacher, SceneKind, SyntheticScene, TrainConfig};
use distrack::head::{BBox, HeadConfig, PixelBox};
use distrack::numerics::{Graph, Tensor};
use distrack::objective::{giou_loss, l1_box_loss, total_loss, LossComponents, LossWeights};
use distrack::tracker::{StoreConfig, Tracker, TrackerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lib<T>(r: distrack::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Check {
    let start = Instant::now();
    let reports = lib(loss_gradcheck_suite(&BackboneConfig::desk(), 50, 2024))?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0f64, f64::max);
    let listing: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.name, r.max_error)).collect();
    let all = reports.len() == 6 && reports.iter().all(|r| r.instances >= 50 && r.max_error < 1e-4);
    ensure(all && elapsed < Duration::from_secs(120), format!("worst {worst:.2e} in {:.0?} [{}]", elapsed, listing.join(", ")))
}

// ---------------------------------------------------------------- 2, 3, 4

fn batch_of(g: &mut Graph, x: &Tensor, y: &Tensor, s: &Tensor, t: &Tensor, mask: TargetMask, template_len: usize, temperature: f64) -> DistillBatch {
    let (xv, yv) = (g.input(x.clone()), g.constant(y.clone()));
    let (sv, tv) = (g.input(s.clone()), g.constant(t.clone()));
    DistillBatch {
        student_feats: vec![vec![xv]],
        teacher_feats: vec![vec![yv]],
        student_logits: vec![sv],
        teacher_logits: vec![tv],
        masks: vec![mask],
        template_len,
        temperature,
    }
}

fn both_losses(x: &Tensor, y: &Tensor, s: &Tensor, t: &Tensor, mask: &TargetMask, template_len: usize, temperature: f64) -> Result<(f64, f64), String> {
    let mut g = Graph::new();
    let b = batch_of(&mut g, x, y, s, t, mask.clone(), template_len, temperature);
    let f = lib(feature_distill_loss(&mut g, &b, DistillOptions::default()))?;
    let p = lib(prediction_distill_loss(&mut g, &b, DistillOptions::default()))?;
    Ok((g.value(f).data()[0], g.value(p).data()[0]))
}

fn oracles() -> Check {
    let mask = lib(TargetMask::from_values(1, 2, vec![true, false]))?;
    let x = lib(Tensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, 5.0]))?;
    let zeros = Tensor::zeros(&[2, 2]);
    let (feat, _) = both_losses(&x, &zeros, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &mask, 0, 1.0)?;

    let full = lib(TargetMask::from_values(1, 2, vec![true, true]))?;
    let t = lib(Tensor::new(vec![2], vec![3f64.ln(), 0.0]))?;
    let (_, pred) = both_losses(&zeros, &zeros, &Tensor::zeros(&[2]), &t, &full, 0, 1.0)?;
    let pred_expected = 0.25 * (4.0f64 / 3.0).ln();

    let a = BBox::new(0.5, 0.5, 1.0, 1.0);
    let b = BBox::new(2.5, 0.5, 1.0, 1.0);
    let giou = lib(giou_loss(&a, &b))?;

    let unit = LossComponents { cls: 1.0, l1: 1.0, giou: 1.0, feat: 1.0, pred: 1.0 };
    let total = total_loss(&unit, &LossWeights::default());

    ensure(
        feat == 5.0 && (pred - pred_expected).abs() < 1e-9 && (giou - 4.0 / 3.0).abs() < 1e-12 && total == 10.0,
        format!("feature {feat}, prediction {pred:.9} (want {pred_expected:.9}), GIoU {giou:.15}, total {total}"),
    )
}

fn identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (nz, ns, d) = (4, 16, 8);
    let mask = lib(make_token_mask(&BBox::new(0.4, 0.6, 0.5, 0.3), 4, 4))?;
    let x = Tensor::from_fn(&[nz + ns, d], |_| rng.gen_range(-2.0..2.0));
    let s = Tensor::from_fn(&[ns], |_| rng.gen_range(-3.0..3.0));
    let (feat, pred) = both_losses(&x, &x, &s, &s, &mask, nz, 2.0)?;

    let flat = Tensor::from_fn(&[ns], |_| 0.7);
    let (_, kl_flat) = both_losses(&x, &x, &flat, &Tensor::from_fn(&[ns], |_| -1.3), &mask, nz, 2.0)?;

    let bx = BBox::new(0.3, 0.55, 0.2, 0.4);
    let (l1, giou) = (l1_box_loss(&bx, &bx), lib(giou_loss(&bx, &bx))?);
    ensure(
        feat.abs() <= 1e-12 && pred.abs() <= 1e-12 && kl_flat.abs() <= 1e-12 && l1 == 0.0 && giou.abs() <= 1e-12,
        format!("feature {feat:e}, prediction {pred:e}, equal logits {kl_flat:e}, L1 {l1:e}, GIoU {giou:e}"),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize) -> Result<TargetMask, String> {
    let mut v: Vec<bool> = (0..rows * rows).map(|_| rng.gen_bool(0.3)).collect();
    let k = rng.gen_range(0..v.len());
    v[k] = true;
    lib(TargetMask::from_values(rows, rows, v))
}

fn kl_value(ls: &Tensor, lt: &Tensor, mask: &TargetMask) -> Result<f64, String> {
    let mut g = Graph::new();
    let (a, b) = (g.input(ls.clone()), g.constant(lt.clone()));
    let v = lib(masked_kl(&mut g, a, b, mask, DistillOptions::default()))?;
    Ok(g.value(v).data()[0])
}

fn log_softmax(x: &[f64], t: f64) -> Tensor {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| ((v - m) / t).exp()).sum::<f64>().ln();
    Tensor::from_fn(&[x.len()], |i| (x[i] - m) / t - lse)
}

fn masking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..100 {
        let rows = rng.gen_range(2..9);
        let n = rows * rows;
        let (nz, d) = (rng.gen_range(1..10), rng.gen_range(1..9));
        let mask = random_mask(&mut rng, rows)?;
        let background = |j: usize| !mask.is_active(j);

        let x = Tensor::from_fn(&[nz + n, d], |_| rng.gen_range(-3.0..3.0));
        let y = Tensor::from_fn(&[nz + n, d], |_| rng.gen_range(-3.0..3.0));
        let (mut x2, mut y2) = (x.clone(), y.clone());
        for r in (nz..nz + n).filter(|r| background(r - nz)) {
            for c in 0..d {
                x2.data_mut()[r * d + c] += rng.gen_range(-50.0..50.0);
                y2.data_mut()[r * d + c] += rng.gen_range(-50.0..50.0);
            }
        }
        let logits = Tensor::zeros(&[n]);
        let (fa, _) = both_losses(&x, &y, &logits, &logits, &mask, nz, 2.0)?;
        let (fb, _) = both_losses(&x2, &y2, &logits, &logits, &mask, nz, 2.0)?;
        if fa.to_bits() != fb.to_bits() {
            return Err(format!("trial {trial}: feature loss {fa:e} became {fb:e}"));
        }

        // positions of the softmaxed maps; the active entries stay fixed
        let ls = log_softmax(&(0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>(), 2.0);
        let lt = log_softmax(&(0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>(), 2.0);
        let (mut ls2, mut lt2) = (ls.clone(), lt.clone());
        for j in (0..n).filter(|&j| background(j)) {
            ls2.data_mut()[j] = -rng.gen_range(0.0..40.0);
            lt2.data_mut()[j] = -rng.gen_range(0.0..40.0);
        }
        let (ka, kb) = (kl_value(&ls, &lt, &mask)?, kl_value(&ls2, &lt2, &mask)?);
        if ka.to_bits() != kb.to_bits() {
            return Err(format!("trial {trial}: prediction term {ka:e} became {kb:e}"));
        }
    }
    Ok("100 trials, features and softmaxed map positions bit-identical".into())
}

// ---------------------------------------------------------------- 5, 6

const SEEDS: u64 = 5;

struct Distilled {
    /// Students trained with both branches, one per seed.
    students: Vec<TrackerNet>,
}

fn distillation(shared: &mut Option<Distilled>) -> Check {
    let start = Instant::now();
    let base = TrainConfig { seed: 11, ..TrainConfig::desk() };
    let data = lib(build_training_set(&base.model, base.train_samples, 11))?;
    let held_out = lib(build_training_set(&base.model, 64, 12))?;
    let (teacher, _) = lib(train_teacher(&base, &data))?;
    let cache = lib(cache_teacher(&teacher, &base, &data))?;
    let mut sums = [0.0f64; 3];
    let mut students = Vec::new();
    for seed in 0..SEEDS {
        for (v, (feat, pred)) in [(false, false), (true, false), (true, true)].into_iter().enumerate() {
            let cfg = TrainConfig { seed: 100 + seed, feat_distill: feat, pred_distill: pred, ..base.clone() };
            let (net, _) = lib(train_student_cached(&cfg, &data, Some(&cache)))?;
            sums[v] += lib(mean_masked_similarity(&net, &teacher, &held_out, cfg.two_templates))?;
            if v == 2 {
                students.push(net);
            }
        }
    }
    *shared = Some(Distilled { students });
    let [a, b, c] = sums.map(|s| s / SEEDS as f64);
    let elapsed = start.elapsed();
    ensure(
        c >= b && b >= a && c - a > 0.05 && elapsed < Duration::from_secs(1800),
        format!("similarity none {a:.6}, feature {b:.6}, both {c:.6}; both − none {:.4} in {:.0?}", c - a, elapsed),
    )
}

fn suite_auc(net: &TrackerNet, kind: SceneKind, first_seed: u64, count: u64, tc: TrackerConfig) -> Result<f64, String> {
    let mut total = 0.0;
    for i in 0..count {
        let scene = SyntheticScene::random(first_seed + i, kind, 100);
        let frames = lib(render_sequence(&scene))?;
        let gt = scene.ground_truth();
        let mut tracker = lib(Tracker::new(net, tc))?;
        let boxes = lib(tracker.run(&frames, gt[0]))?;
        total += lib(ope_evaluate(&boxes, &gt))?.success_auc;
    }
    Ok(total / count as f64)
}

fn with_store(threshold: f64) -> TrackerConfig {
    TrackerConfig { store: StoreConfig { threshold, ..StoreConfig::default() }, ..TrackerConfig::default() }
}

const THRESHOLDS: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7];

fn temporal(shared: &Option<Distilled>) -> Check {
    let models = shared.as_ref().ok_or("needs the students trained for criterion 5")?;
    let off = TrackerConfig { store_enabled: false, ..TrackerConfig::default() };
    let mut gains = Vec::new();
    let mut drops = Vec::new();
    let mut picked = Vec::new();
    for (s, net) in models.students.iter().enumerate() {
        let s = s as u64;
        // threshold calibrated on separate validation sequences
        let val = 900_000 + 1000 * s;
        let val_off = suite_auc(net, SceneKind::Occlusion, val, 10, off)?;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &tau in THRESHOLDS.iter().rev() {
            let gain = suite_auc(net, SceneKind::Occlusion, val, 10, with_store(tau))? - val_off;
            if gain > best.0 {
                best = (gain, tau);
            }
        }
        let on = with_store(best.1);
        picked.push(best.1);
        let test = 500_000 + 1000 * s;
        gains.push(suite_auc(net, SceneKind::Occlusion, test, 20, on)? - suite_auc(net, SceneKind::Occlusion, test, 20, off)?);
        drops.push(suite_auc(net, SceneKind::Plain, test, 20, off)? - suite_auc(net, SceneKind::Plain, test, 20, on)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (gain, drop) = (mean(&gains), mean(&drops));
    ensure(
        gains.iter().all(|&g| g >= 0.0) && gain > 0.0 && drop < 0.01,
        format!(
            "occlusion gain per seed {:?} (mean {gain:+.4}); plain drop mean {drop:+.4}; τ {picked:?}",
            gains.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

fn accounting() -> Check {
    let configs = [
        (BackboneConfig::tiny(), HeadConfig { channels: 32 }),
        (BackboneConfig::desk(), HeadConfig::for_embed_dim(32)),
        (BackboneConfig::full(), HeadConfig::full()),
    ];
    for (cfg, head) in &configs {
        for arch in [Arch::Teacher, Arch::Student] {
            let net = lib(TrackerNet::new(cfg, head, arch, 0))?;
            let enumerated: usize = net.store().entries().iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum();
            let counted = count_params(cfg, head, arch);
            if counted != enumerated {
                return Err(format!("{arch:?} at D={}: counted {counted}, enumerated {enumerated}", cfg.embed_dim));
            }
        }
    }
    let (cfg, head) = (BackboneConfig::full(), HeadConfig::full());
    let params = count_params(&cfg, &head, Arch::Student) as f64 / 1e6;
    let flops = count_flops(&cfg, &head, Arch::Student, FlopConvention::MultiplyAccumulate) as f64 / 1e9;
    ensure(
        (params / 6.20 - 1.0).abs() <= 0.15 && (flops / 1.87 - 1.0).abs() <= 0.20,
        format!("enumeration exact; student {params:.3} M params, {flops:.3} G FLOPs (MAC)"),
    )
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pixel_box = |rng: &mut ChaCha8Rng| PixelBox::new(rng.gen_range(0..400) as f64 / 4.0, rng.gen_range(0..400) as f64 / 4.0, rng.gen_range(1..160) as f64 / 4.0, rng.gen_range(1..160) as f64 / 4.0);
    for trial in 0..1000 {
        let n = rng.gen_range(2..60);
        let gt: Vec<PixelBox> = (0..n).map(|_| pixel_box(&mut rng)).collect();
        let pred: Vec<PixelBox> = gt.iter().map(|g| if rng.gen_bool(0.2) { *g } else { pixel_box(&mut rng) }).collect();
        let r = lib(ope_evaluate(&pred, &gt))?;
        let (mut p20, mut auc) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(&gt).skip(1) {
            let (dx, dy) = (p.x + p.w / 2.0 - g.x - g.w / 2.0, p.y + p.h / 2.0 - g.y - g.h / 2.0);
            p20 += (dx * dx + dy * dy <= 400.0) as usize;
            let iw = ((p.x + p.w).min(g.x + g.w) - p.x.max(g.x)).max(0.0);
            let ih = ((p.y + p.h).min(g.y + g.h) - p.y.max(g.y)).max(0.0);
            let inter = iw * ih;
            let union = p.w * p.h + g.w * g.h - inter;
            auc += (0..=20).filter(|&i| 20.0 * inter > i as f64 * union).count();
        }
        let frames = (n - 1) as f64;
        let (want_p, want_auc) = (p20 as f64 / frames, auc as f64 / (21.0 * frames));
        if (r.precision_at_20 - want_p).abs() > 1e-12 || (r.success_auc - want_auc).abs() > 1e-12 {
            return Err(format!("trial {trial}: got ({}, {}), recount ({want_p}, {want_auc})", r.precision_at_20, r.success_auc));
        }
    }
    let gt: Vec<PixelBox> = (0..50).map(|_| pixel_box(&mut rng)).collect();
    let perfect = lib(ope_evaluate(&gt, &gt))?;
    ensure(
        perfect.precision_at_20 == 1.0 && (perfect.success_auc - 20.0 / 21.0).abs() < 1e-12,
        format!("1000 trajectories agree; perfect case {} / {:.6}", perfect.precision_at_20, perfect.success_auc),
    )
}

// ---------------------------------------------------------------- 9

fn efficiency() -> Check {
    let model = BackboneConfig::desk();
    let net = lib(TrackerNet::new(&model, &HeadConfig::for_embed_dim(model.embed_dim), Arch::Student, 9))?;
    let scene = SyntheticScene::random(9, SceneKind::Occlusion, 100);
    let frames = lib(render_sequence(&scene))?;
    let init = scene.target_box(0);
    // every observation passes the gate, so each window triggers a refresh
    let on = TrackerConfig { store: StoreConfig { threshold: 1e-6, refresh_interval: 25, ..StoreConfig::default() }, ..TrackerConfig::default() };
    let off = TrackerConfig { store_enabled: false, ..on };
    let run = |tc: TrackerConfig| -> Result<(Duration, usize), String> {
        let mut t = lib(Tracker::new(&net, tc))?;
        let start = Instant::now();
        lib(t.run(&frames, init))?;
        Ok((start.elapsed(), t.template_encodings()))
    };
    let (mut best_on, mut best_off) = (Duration::MAX, Duration::MAX);
    let (mut enc_on, mut enc_off) = (0, 0);
    for _ in 0..3 {
        let (d, e) = run(on)?;
        best_on = best_on.min(d);
        enc_on = e;
        let (d, e) = run(off)?;
        best_off = best_off.min(d);
        enc_off = e;
    }
    let overhead = best_on.as_secs_f64() / best_off.as_secs_f64() - 1.0;
    ensure(
        enc_on == 4 && enc_off == 1 && overhead < 0.10,
        format!("{enc_on} template encodings with the store ({enc_off} without), per-frame overhead {:+.2}%", overhead * 100.0),
    )
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str], dir: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_distrack")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::write(dir.join("quick.txt"), "embed_dim = 16\nhead_channels = 32\nepochs = 2\ntrain_samples = 16\n").map_err(|e| e.to_string())?;
    cli(&["gen-data", "--seed", "21", "--scene", "occlusion", "--frames", "40", "--out", "seq"], dir)?;
    cli(&["train-teacher", "--config", "quick.txt", "--seed", "21", "--out", "teacher.ckpt"], dir)?;
    cli(&["train-student", "--teacher", "teacher.ckpt", "--config", "quick.txt", "--seed", "21", "--out", "student.ckpt"], dir)?;
    cli(&["track", "--checkpoint", "student.ckpt", "--sequence-dir", "seq", "--out", "result.txt", "--threshold", "0.01"], dir)?;
    let eval = cli(&["eval", "--results", "result.txt", "--gt", "seq/groundtruth.txt", "--curves", "curves.csv"], dir)?;
    let mut files = vec![("eval stdout".to_string(), eval)];
    for f in ["student.ckpt", "result.txt", "curves.csv"] {
        files.push((f.to_string(), std::fs::read(dir.join(f)).map_err(|e| e.to_string())?));
    }
    Ok(files)
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ra, rb) = (pipeline(a.path())?, pipeline(b.path())?);
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    let lines = ra.iter().find(|(n, _)| n == "result.txt").map(|(_, r)| r.iter().filter(|&&c| c == b'\n').count()).unwrap_or(0);
    Ok(format!("result, checkpoint, curves and eval output byte-identical ({lines} result lines)"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |s| s.contains(&k));
    let mut shared = None;
    let mut failed = 0;
    let mut report = |k: usize, name: &str, run: &mut dyn FnMut() -> Check| {
        if !wanted(k) {
            return;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {k:>2} {tag}  {name}: {detail}  ({secs:.1}s)");
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "loss oracles", &mut oracles);
    report(3, "zero/identity invariants", &mut identities);
    report(4, "masking soundness", &mut masking);
    report(5, "distillation efficacy", &mut || distillation(&mut shared));
    if wanted(6) && shared.is_none() && !wanted(5) {
        let _ = distillation(&mut shared);
    }
    report(6, "temporal cues", &mut || temporal(&shared));
    report(7, "parameter/FLOP accounting", &mut accounting);
    report(8, "metric oracle", &mut metrics);
    report(9, "asymmetry/efficiency", &mut efficiency);
    report(10, "determinism", &mut determinism);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

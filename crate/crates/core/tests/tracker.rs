use distrack::backbone::{Arch, BackboneConfig, TrackerNet};
use distrack::harness::{render_sequence, SceneKind, SyntheticScene};
use distrack::head::{argmax, HeadConfig, PixelBox};
use distrack::imaging::{Image, ImageCrop};
use distrack::numerics::Graph;
use distrack::tracker::{hanning_window, StoreConfig, TargetStore, Tracker, TrackerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(arch: Arch, seed: u64) -> TrackerNet {
    TrackerNet::new(&BackboneConfig::tiny(), &HeadConfig { channels: 32 }, arch, seed).unwrap()
}

fn sequence(seed: u64, kind: SceneKind, frames: usize) -> (Vec<Image>, PixelBox) {
    let scene = SyntheticScene::random(seed, kind, frames);
    (render_sequence(&scene).unwrap(), scene.target_box(0))
}

fn config(threshold: f64, interval: usize, fusion: f64, enabled: bool) -> TrackerConfig {
    TrackerConfig {
        store: StoreConfig { threshold, refresh_interval: interval, fusion, ..StoreConfig::default() },
        store_enabled: enabled,
        ..TrackerConfig::default()
    }
}

fn run(net: &TrackerNet, cfg: TrackerConfig, frames: &[Image], init: PixelBox) -> (Vec<PixelBox>, usize) {
    let mut t = Tracker::new(net, cfg).unwrap();
    let boxes = t.run(frames, init).unwrap();
    (boxes, t.template_encodings())
}

fn bits(b: &[PixelBox]) -> Vec<[u64; 4]> {
    b.iter().map(|b| [b.x.to_bits(), b.y.to_bits(), b.w.to_bits(), b.h.to_bits()]).collect()
}

#[test]
fn trajectories_are_deterministic_and_inside_the_frame() {
    let n = net(Arch::Student, 1);
    for (seed, kind) in [(1, SceneKind::Plain), (2, SceneKind::Occlusion), (3, SceneKind::Clutter)] {
        let (frames, init) = sequence(seed, kind, 40);
        let cfg = config(0.01, 10, 0.5, true);
        let (a, _) = run(&n, cfg, &frames, init);
        let (b, _) = run(&net(Arch::Student, 1), cfg, &frames, init);
        assert_eq!(bits(&a), bits(&b));
        let (w, h) = (frames[0].width() as f64, frames[0].height() as f64);
        for bx in &a {
            assert!(bx.x >= 0.0 && bx.y >= 0.0 && bx.x + bx.w <= w + 1e-9 && bx.y + bx.h <= h + 1e-9, "{bx:?}");
        }
    }
}

#[test]
fn tracking_never_reads_teacher_parameters() {
    let teacher = net(Arch::Teacher, 2);
    let student = net(Arch::Student, 3);
    let (frames, init) = sequence(4, SceneKind::Plain, 30);
    let (t0, s0) = (teacher.store().read_count(), student.store().read_count());
    run(&student, config(0.01, 5, 0.5, true), &frames, init);
    assert_eq!(teacher.store().read_count(), t0);
    assert!(student.store().read_count() > s0);
}

#[test]
fn refresh_counts_one_plus_three_template_encodings_over_100_frames() {
    let n = net(Arch::Student, 5);
    let (frames, init) = sequence(6, SceneKind::Plain, 100);
    let (_, with_store) = run(&n, config(1e-6, 25, 0.5, true), &frames, init);
    assert_eq!(with_store, 1 + 3);
    let (_, without) = run(&n, config(1e-6, 25, 0.5, false), &frames, init);
    assert_eq!(without, 1);
}

#[test]
fn store_that_never_fills_leaves_the_trajectory_unchanged() {
    let n = net(Arch::Student, 7);
    let (frames, init) = sequence(8, SceneKind::Occlusion, 60);
    let (on, enc) = run(&n, config(0.999_999, 10, 0.5, true), &frames, init);
    let (off, _) = run(&n, config(0.999_999, 10, 0.5, false), &frames, init);
    assert_eq!(enc, 1);
    assert_eq!(bits(&on), bits(&off));
}

#[test]
fn fusion_weights_select_original_or_fresh_template() {
    let n = net(Arch::Student, 9);
    let (frames, init) = sequence(10, SceneKind::Plain, 11);
    // α = 0: the active template stays the original encoding
    let mut t = Tracker::new(&n, config(1e-6, 5, 0.0, true)).unwrap();
    t.run(&frames, init).unwrap();
    let s = t.state().unwrap();
    assert_eq!(t.template_encodings(), 3);
    assert_eq!(s.active_template, s.original_template);
    // α = 1: the active template is exactly the re-encoded best crop
    let mut t = Tracker::new(&n, config(1e-6, 5, 1.0, true)).unwrap();
    t.run(&frames, init).unwrap();
    let s = t.state().unwrap();
    let best = s.store.best().unwrap().crop.clone();
    let mut g = Graph::new();
    let mut p = n.binder(false);
    let fresh = n.encode_template(&mut g, &mut p, &[&best]).unwrap();
    assert_eq!(&s.active_template, g.value(fresh.var));
    assert_ne!(s.active_template, s.original_template);
}

#[test]
fn predict_before_init_is_an_error() {
    let n = net(Arch::Student, 1);
    let t = Tracker::new(&n, TrackerConfig::default()).unwrap();
    assert!(t.predict(&Image::filled(64, 64, [0.5; 3])).is_err());
}

#[test]
fn init_box_outside_frame_is_rejected() {
    let n = net(Arch::Student, 1);
    let mut t = Tracker::new(&n, TrackerConfig::default()).unwrap();
    assert!(t.init(&Image::filled(64, 64, [0.5; 3]), PixelBox::new(50.0, 50.0, 20.0, 20.0)).is_err());
}

fn crop() -> ImageCrop {
    ImageCrop::filled(2, 2, [0.1; 3])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn store_respects_capacity_and_threshold(confs in prop::collection::vec(0.0f64..1.0, 0..60), cap in 1usize..8, tau in 0.05f64..0.95) {
        let mut s = TargetStore::new(cap, tau);
        let mut accepted = Vec::new();
        for (i, &c) in confs.iter().enumerate() {
            s.offer_to_store(crop(), c, i);
            if c >= tau {
                accepted.push(c);
            }
            prop_assert!(s.len() <= cap);
            prop_assert!(s.entries().iter().all(|e| e.confidence >= tau));
        }
        // the kept entries are the top-`cap` accepted confidences
        accepted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        accepted.truncate(cap);
        let mut kept: Vec<f64> = s.entries().iter().map(|e| e.confidence).collect();
        kept.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(kept, accepted.clone());
        if let Some(b) = s.best() {
            prop_assert_eq!(b.confidence, accepted[0]);
        }
    }

    #[test]
    fn hanning_keeps_order_on_equal_window_values(seed in any::<u64>(), m in 3usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = hanning_window(m, m);
        let p: Vec<f64> = (0..m * m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pen: Vec<f64> = p.iter().zip(&w).map(|(a, b)| a * b).collect();
        // cells mirrored across the center share a window value
        for r in 0..m {
            for c in 0..m {
                let (i, j) = (r * m + c, (m - 1 - r) * m + (m - 1 - c));
                prop_assert_eq!(w[i], w[j]);
                if w[i] > 0.0 && p[i] > p[j] {
                    prop_assert!(pen[i] > pen[j]);
                }
            }
        }
        let uniform: Vec<f64> = w.iter().map(|v| v / (m * m) as f64).collect();
        let best = argmax(&uniform);
        let (br, bc) = (best / m, best % m);
        prop_assert!((br as f64 - (m as f64 - 1.0) / 2.0).abs() <= 0.5 && (bc as f64 - (m as f64 - 1.0) / 2.0).abs() <= 0.5);
    }
}

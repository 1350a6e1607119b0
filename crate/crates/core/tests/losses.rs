use distrack::backbone::BackboneConfig;
use distrack::distill::{feature_distill_loss, make_token_mask, masked_kl, prediction_distill_loss, DistillBatch, DistillOptions, TargetMask};
use distrack::evalkit::loss_gradcheck_suite;
use distrack::head::{decode_box, BBox, ScoreMap};
use distrack::numerics::{Graph, Tensor};
use distrack::objective::{focal_loss_value, giou_loss, l1_box_loss, make_target_maps, total_loss, LossComponents, LossWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> TargetMask {
    let mut v: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    v[rng.gen_range(0..n)] = true;
    TargetMask::from_values(1, n, v).unwrap()
}

fn feature_loss(x: &Tensor, y: &Tensor, mask: &TargetMask, template_len: usize) -> f64 {
    let mut g = Graph::new();
    let (xv, yv) = (g.input(x.clone()), g.constant(y.clone()));
    let batch = DistillBatch {
        student_feats: vec![vec![xv]],
        teacher_feats: vec![vec![yv]],
        student_logits: vec![],
        teacher_logits: vec![],
        masks: vec![mask.clone()],
        template_len,
        temperature: 2.0,
    };
    let l = feature_distill_loss(&mut g, &batch, DistillOptions::default()).unwrap();
    g.value(l).item().unwrap()
}

fn kl_on_log_probs(ls: &[f64], lt: &[f64], mask: &TargetMask) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(ls.to_vec()).unwrap());
    let b = g.constant(Tensor::vector(lt.to_vec()).unwrap());
    let l = masked_kl(&mut g, a, b, mask, DistillOptions::default()).unwrap();
    g.value(l).item().unwrap()
}

fn log_softmax(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| ((v - m) / t).exp()).sum();
    x.iter().map(|v| (v - m) / t - z.ln()).collect()
}

/// Area fractions by midpoint sampling of the enclosing box.
fn giou_loss_by_sampling(a: &BBox, b: &BBox, n: usize) -> f64 {
    let (x1, y1) = (a.x1().min(b.x1()), a.y1().min(b.y1()));
    let (x2, y2) = (a.x2().max(b.x2()), a.y2().max(b.y2()));
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1() && x <= bx.x2() && y >= bx.y1() && y <= bx.y2();
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let x = x1 + (i as f64 + 0.5) / n as f64 * (x2 - x1);
            let y = y1 + (j as f64 + 0.5) / n as f64 * (y2 - y1);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    let total = (n * n) as f64;
    let iou = inter as f64 / union as f64;
    1.0 - (iou - (total - union as f64) / total)
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.6, 0.05f64..0.6).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

#[test]
fn full_map_kl_is_non_negative_over_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(2..300);
        let t = rng.gen_range(0.5..4.0);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let te: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let full = TargetMask::from_values(1, n, vec![true; n]).unwrap();
        let kl = kl_on_log_probs(&log_softmax(&s, t), &log_softmax(&te, t), &full);
        assert!(kl >= -1e-15, "KL {kl}");
    }
}

#[test]
fn masked_partial_kl_is_finite_and_zero_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.gen_range(2..100);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let te: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let m = random_mask(&mut rng, n);
        assert!(kl_on_log_probs(&log_softmax(&s, 2.0), &log_softmax(&te, 2.0), &m).is_finite());
        assert!(kl_on_log_probs(&log_softmax(&s, 2.0), &log_softmax(&s, 2.0), &m).abs() <= 1e-12);
    }
}

#[test]
fn prediction_loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.gen_range(2..64);
        let t = rng.gen_range(0.5..4.0);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let te: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let m = random_mask(&mut rng, n);
        let (ls, lt) = (log_softmax(&s, t), log_softmax(&te, t));
        let direct: f64 = (0..n).filter(|&j| m.is_active(j)).map(|j| ls[j].exp() * (ls[j] - lt[j])).sum::<f64>() / m.active_count() as f64;
        let mut g = Graph::new();
        let sv = g.input(Tensor::vector(s).unwrap());
        let tv = g.constant(Tensor::vector(te).unwrap());
        let batch = DistillBatch {
            student_feats: vec![],
            teacher_feats: vec![],
            student_logits: vec![sv],
            teacher_logits: vec![tv],
            masks: vec![m],
            template_len: 0,
            temperature: t,
        };
        let l = prediction_distill_loss(&mut g, &batch, DistillOptions::default()).unwrap();
        assert!((g.value(l).item().unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn teacher_nodes_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mask = random_mask(&mut rng, 6);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[8, 3], |_| rng.gen_range(-1.0..1.0)));
    let y = g.constant(Tensor::from_fn(&[8, 3], |_| rng.gen_range(-1.0..1.0)));
    let s = g.input(Tensor::from_fn(&[6], |_| rng.gen_range(-1.0..1.0)));
    let t = g.constant(Tensor::from_fn(&[6], |_| rng.gen_range(-1.0..1.0)));
    let batch = DistillBatch {
        student_feats: vec![vec![x]],
        teacher_feats: vec![vec![y]],
        student_logits: vec![s],
        teacher_logits: vec![t],
        masks: vec![mask],
        template_len: 2,
        temperature: 2.0,
    };
    let f = feature_distill_loss(&mut g, &batch, DistillOptions::default()).unwrap();
    let p = prediction_distill_loss(&mut g, &batch, DistillOptions::default()).unwrap();
    let both = g.add(f, p).unwrap();
    let grads = g.backward(both).unwrap();
    assert!(grads.get(y).is_none_or(|v| v.iter().all(|&d| d == 0.0)));
    assert!(grads.get(t).is_none_or(|v| v.iter().all(|&d| d == 0.0)));
    assert!(grads.get(x).unwrap().iter().any(|&d| d != 0.0));
    assert!(grads.get(s).unwrap().iter().any(|&d| d != 0.0));
}

#[test]
fn feature_loss_is_invariant_to_duplicated_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask = random_mask(&mut rng, 6);
    let xs = Tensor::from_fn(&[8, 3], |_| rng.gen_range(-1.0..1.0));
    let ys = Tensor::from_fn(&[8, 3], |_| rng.gen_range(-1.0..1.0));
    let eval = |k: usize| {
        let mut g = Graph::new();
        let x = g.input(xs.clone());
        let y = g.constant(ys.clone());
        let batch = DistillBatch {
            student_feats: vec![vec![x; k]],
            teacher_feats: vec![vec![y; k]],
            student_logits: vec![],
            teacher_logits: vec![],
            masks: vec![mask.clone()],
            template_len: 2,
            temperature: 2.0,
        };
        let l = feature_distill_loss(&mut g, &batch, DistillOptions::default()).unwrap();
        g.value(l).item().unwrap()
    };
    assert!((eval(1) - eval(2)).abs() < 1e-15);
}

#[test]
fn losses_pass_gradient_check_on_tiny_instances() {
    for r in loss_gradcheck_suite(&BackboneConfig::tiny(), 3, 21).unwrap() {
        assert!(r.max_error < 1e-4, "{}: {}", r.name, r.max_error);
    }
}

#[test]
fn decoding_ideal_target_maps_recovers_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..500 {
        let rows = 8 * rng.gen_range(1..4);
        let gt = BBox::new(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.8), rng.gen_range(0.05..0.8));
        let t = make_target_maps(&gt, rows, rows).unwrap();
        let plane = rows * rows;
        let i = t.center_index();
        let mut off = Tensor::zeros(&[2, rows, rows]);
        let mut size = Tensor::zeros(&[2, rows, rows]);
        off.data_mut()[i] = t.offset.0;
        off.data_mut()[plane + i] = t.offset.1;
        size.data_mut()[i] = t.size.0;
        size.data_mut()[plane + i] = t.size.1;
        let logits: Vec<f64> = t.heatmap.iter().map(|h| 10.0 * h).collect();
        let (b, _) = decode_box(&ScoreMap::new(rows, rows, logits).unwrap(), &off, &size).unwrap();
        let half = 0.5 / rows as f64;
        assert!((b.cx - gt.cx).abs() <= half && (b.cy - gt.cy).abs() <= half);
        assert!((b.w - gt.w).abs() <= half && (b.h - gt.h).abs() <= half);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn background_feature_perturbation_is_invisible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nz, ns, d) = (rng.gen_range(0..5), rng.gen_range(2..20), rng.gen_range(1..6));
        let mask = random_mask(&mut rng, ns);
        let x = Tensor::from_fn(&[nz + ns, d], |_| rng.gen_range(-3.0..3.0));
        let y = Tensor::from_fn(&[nz + ns, d], |_| rng.gen_range(-3.0..3.0));
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        for r in 0..nz + ns {
            if r < nz || !mask.is_active(r - nz) {
                for c in 0..d {
                    x2.data_mut()[r * d + c] += rng.gen_range(-100.0..100.0);
                    y2.data_mut()[r * d + c] -= rng.gen_range(-100.0..100.0);
                }
            }
        }
        let a = feature_loss(&x, &y, &mask, nz);
        let b = feature_loss(&x2, &y2, &mask, nz);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn feature_loss_vanishes_iff_active_features_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, d) = (rng.gen_range(2..12), rng.gen_range(1..4));
        let mask = random_mask(&mut rng, ns);
        let x = Tensor::from_fn(&[ns, d], |_| rng.gen_range(-3.0..3.0));
        prop_assert_eq!(feature_loss(&x, &x, &mask, 0), 0.0);
        let mut y = x.clone();
        let j = (0..ns).find(|&j| mask.is_active(j)).unwrap();
        y.data_mut()[j * d] += 0.5;
        prop_assert!(feature_loss(&x, &y, &mask, 0) > 0.0);
    }

    #[test]
    fn background_kl_terms_are_invisible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..64);
        let m = random_mask(&mut rng, n);
        let ls = log_softmax(&(0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>(), 2.0);
        let lt = log_softmax(&(0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>(), 2.0);
        let (mut ls2, mut lt2) = (ls.clone(), lt.clone());
        for j in (0..n).filter(|&j| !m.is_active(j)) {
            ls2[j] = -rng.gen_range(0.0..30.0);
            lt2[j] = -rng.gen_range(0.0..30.0);
        }
        prop_assert_eq!(kl_on_log_probs(&ls, &lt, &m).to_bits(), kl_on_log_probs(&ls2, &lt2, &m).to_bits());
    }

    #[test]
    fn giou_matches_area_sampling(a in arb_box(), b in arb_box()) {
        let exact = giou_loss(&a, &b).unwrap();
        let approx = giou_loss_by_sampling(&a, &b, 400);
        prop_assert!((exact - approx).abs() < 0.02, "{exact} vs {approx}");
        prop_assert!((0.0..=2.0).contains(&exact));
        prop_assert!(giou_loss(&a, &a).unwrap().abs() < 1e-12);
        prop_assert_eq!(l1_box_loss(&a, &a), 0.0);
    }

    #[test]
    fn focal_loss_is_non_negative(seed in any::<u64>(), gt in arb_box()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = make_target_maps(&gt, 8, 8).unwrap();
        let logits = (0..64).map(|_| rng.gen_range(-8.0..8.0)).collect();
        prop_assert!(focal_loss_value(&ScoreMap::new(8, 8, logits).unwrap(), &t).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_is_linear_in_each_component(c in prop::array::uniform5(0.0f64..10.0), k in 0usize..5, delta in 0.0f64..3.0) {
        let w = LossWeights::default();
        let base = LossComponents { cls: c[0], l1: c[1], giou: c[2], feat: c[3], pred: c[4] };
        let mut bumped = base;
        let coeff = match k {
            0 => { bumped.cls += delta; 1.0 }
            1 => { bumped.l1 += delta; w.l1 }
            2 => { bumped.giou += delta; w.giou }
            3 => { bumped.feat += delta; w.feat }
            _ => { bumped.pred += delta; w.pred }
        };
        let diff = total_loss(&bumped, &w) - total_loss(&base, &w);
        prop_assert!((diff - coeff * delta).abs() < 1e-12);
    }

    #[test]
    fn token_mask_matches_patch_center_enumeration(gt in arb_box()) {
        let m = make_token_mask(&gt, 16, 16).unwrap();
        let mut any = false;
        for r in 0..16 {
            for c in 0..16 {
                let (x, y) = ((c as f64 + 0.5) / 16.0, (r as f64 + 0.5) / 16.0);
                let inside = x >= gt.x1() && x <= gt.x2() && y >= gt.y1() && y <= gt.y2();
                any |= inside;
                if inside {
                    prop_assert!(m.is_active(r * 16 + c));
                }
            }
        }
        if any {
            prop_assert_eq!(m.active_count(), (0..256).filter(|&j| {
                let (x, y) = (((j % 16) as f64 + 0.5) / 16.0, ((j / 16) as f64 + 0.5) / 16.0);
                x >= gt.x1() && x <= gt.x2() && y >= gt.y1() && y <= gt.y2()
            }).count());
        } else {
            prop_assert_eq!(m.active_count(), 1);
        }
    }
}

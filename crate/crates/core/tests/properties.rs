use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointadapt::datakit::rle;
use pointadapt::grid::Grid;
use pointadapt::losses::{dice_loss_with_grad, focal_loss_with_grad, instance_loss, iou_loss_with_grad, LossWeights};
use pointadapt::maskops::{
    binary_entropy, confidence_filter, enclosing_box, entropy_map, leakage_rate, overlap_map, refine, refine_stack,
    BinaryMaskSet, BoundingBox, ProbMaskStack,
};
use pointadapt::pipeline::{f1, iou};
use pointadapt::prompts::{
    derive_seed, make_views, sample_points, transfer_prompts, AugmentConfig, NegativeRegion, Polarity, PromptGroup,
};
use pointadapt::segmenter::lora::{lora_forward, LoraAdapter, LoraTarget, Projection};
use pointadapt::segmenter::tensor::Matrix;
use pointadapt::segmenter::{ToyConfig, ToySegmenter};
use pointadapt::ssa::ssa_loss_raw;
use pointadapt::{Mask, RgbImage};

fn mask_strategy(max_side: usize) -> impl Strategy<Value = Mask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |v| Mask::from_vec(h, w, v).unwrap())
    })
}

/// A stack of `k` layers on an `h x w` grid; layers are blobs of high
/// probability so instances overlap often.
fn random_stack(seed: u64, k: usize, h: usize, w: usize) -> ProbMaskStack<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..k)
        .map(|_| {
            let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
            let r = rng.gen_range(1.0..(h.max(w) as f64 / 2.0).max(1.5));
            Grid::from_fn(h, w, |y, x| {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / r;
                let base = if d < 1.0 { 0.97 } else { 0.2 };
                (base + rng.gen_range(-0.2..0.03f64)).clamp(0.0, 1.0)
            })
        })
        .collect();
    ProbMaskStack::new("img", (1..=k as u32).collect(), layers).unwrap()
}

fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.gen()).collect();
    RgbImage::new(h, w, data).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn close(a: f64, n: f64, rel: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_symmetric(p in 0.0f64..=1.0) {
        let a = binary_entropy(p).unwrap();
        let b = binary_entropy(1.0 - p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn refine_is_disjoint_and_idempotent(seed in any::<u64>(), k in 1usize..=6, h in 2usize..24, w in 2usize..24) {
        let stack = random_stack(seed, k, h, w);
        let refined = refine_stack(&stack, 0.5).unwrap();
        let set = refined.to_mask_set();
        prop_assert_eq!(leakage_rate(&set), 0.0);
        let again = refine(&set, &overlap_map(&set)).unwrap();
        prop_assert_eq!(again.masks(), refined.masks());
    }

    #[test]
    fn raising_epsilon_never_adds_pixels(seed in any::<u64>(), e1 in 0.0f64..0.99, delta in 0.0f64..0.5) {
        let stack = random_stack(seed, 3, 12, 12);
        let h = entropy_map(&stack).unwrap();
        let e2 = (e1 + delta).min(0.999);
        let lo = confidence_filter(&stack, &h, e1).unwrap();
        let hi = confidence_filter(&stack, &h, e2).unwrap();
        for (a, b) in lo.masks().iter().zip(hi.masks()) {
            prop_assert_eq!(b.intersection_count(a), b.count());
        }
    }

    #[test]
    fn boxes_are_tight(m in mask_strategy(20)) {
        match enclosing_box(&m) {
            None => prop_assert!(!m.any()),
            Some(b) => {
                let px = m.pixels();
                prop_assert!(px.iter().all(|&(y, x)| b.contains(y, x)));
                let (x0, y0, x1, y1) = (b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64);
                let shrunk = [(x0 + 1, y0, x1, y1), (x0, y0 + 1, x1, y1), (x0, y0, x1 - 1, y1), (x0, y0, x1, y1 - 1)];
                for (x0, y0, x1, y1) in shrunk {
                    let excluded = px.iter().any(|&(y, x)| {
                        !(x as i64 >= x0 && x as i64 <= x1 && y as i64 >= y0 && y as i64 <= y1)
                    });
                    prop_assert!(excluded);
                }
            }
        }
    }

    #[test]
    fn rle_round_trip(m in mask_strategy(48)) {
        prop_assert_eq!(rle::decode(&rle::encode(&m)).unwrap(), m);
    }

    #[test]
    fn metrics_are_symmetric(a in mask_strategy(12)) {
        let b = a.map(|&v| !v);
        let c = a.flip_horizontal();
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            prop_assert_eq!(iou(x, y), iou(y, x));
            prop_assert_eq!(f1(x, y), f1(y, x));
        }
    }

    #[test]
    fn transfer_twice_is_identity(seed in any::<u64>(), x in 0u32..32, y in 0u32..24, bx in 0u32..32, by in 0u32..24) {
        let img = RgbImage::filled(24, 32, [10, 20, 30]);
        let cfg = AugmentConfig { flip_probability: 1.0, ..AugmentConfig::default() };
        let views = make_views(&img, seed, &cfg);
        let mut g = PromptGroup::from_box(1, BoundingBox::new(bx.min(x), by.min(y), bx.max(x), by.max(y)).unwrap());
        g.points = sample_points(&Mask::from_fn(24, 32, |yy, xx| yy as u32 == y && xx as u32 == x), 1, 1, seed,
            NegativeRegion::Background).unwrap().points;
        let there = transfer_prompts(std::slice::from_ref(&g), &views).unwrap();
        let back = transfer_prompts(&there, &views).unwrap();
        prop_assert_eq!(&back[0], &g);
    }

    #[test]
    fn views_share_geometry_and_are_seeded(seed in any::<u64>(), m in mask_strategy(16)) {
        let (h, w) = m.shape();
        let img = random_image(seed, h, w);
        let a = make_views(&img, seed, &AugmentConfig::default());
        let b = make_views(&img, seed, &AugmentConfig::default());
        prop_assert_eq!(&a, &b);
        let geom = a.geometry();
        // strong view is photometric only, so both views move masks the same way
        let weak_mask = geom.mask(&m).unwrap();
        let expected = if a.flip_applied { m.flip_horizontal() } else { m.clone() };
        prop_assert_eq!(weak_mask, expected);
        prop_assert_eq!(a.strong_image.height(), a.weak_image.height());
    }

    #[test]
    fn points_respect_membership(seed in any::<u64>(), m in mask_strategy(20), n in 1usize..=3) {
        prop_assume!(m.any());
        let s = sample_points(&m, 7, n, seed, NegativeRegion::default()).unwrap();
        for p in &s.points {
            let inside = *m.get(p.y as usize, p.x as usize);
            prop_assert_eq!(inside, p.polarity == Polarity::Positive);
        }
        prop_assert_eq!(s.positives().count(), n);
        let again = sample_points(&m, 7, n, seed, NegativeRegion::default()).unwrap();
        prop_assert_eq!(s.points, again.points);
    }

    #[test]
    fn derived_seeds_are_pure(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        prop_assert_eq!(derive_seed(a, b, c), derive_seed(a, b, c));
        prop_assert_ne!(derive_seed(a, b, c), derive_seed(a, b, c.wrapping_add(1)));
    }

    #[test]
    fn lora_matches_dense_oracle(seed in any::<u64>(), d_out in 2usize..10, d_in in 2usize..10, rank in 1usize..3) {
        prop_assume!(rank <= d_out.min(d_in));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = LoraTarget { block: 0, projection: Projection::Query };
        let mut ad = LoraAdapter::<f64>::init(d_out, d_in, rank, target, seed).unwrap();
        ad.a = Matrix::from_fn(d_out, rank, |_, _| rng.gen_range(-1.0..1.0));
        let theta = Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = lora_forward(&ad, &theta, &x).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut want = 0.0;
            for j in 0..d_in {
                let ab: f64 = (0..rank).map(|r| ad.a.get(i, r) * ad.b.get(r, j)).sum();
                want += (theta.get(i, j) + ab) * x[j];
            }
            prop_assert!(close(*g, want, 1e-6));
        }
    }

    #[test]
    fn alignment_loss_bounds_and_symmetries(seed in any::<u64>(), n in 2usize..12, d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let refs: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
        let live = vec![true; n];
        let l = ssa_loss_raw(&refs, &live, 0.05).unwrap().loss;
        prop_assert!((0.0..=2.0).contains(&l));
        let mut rev = refs.clone();
        rev.reverse();
        prop_assert!((ssa_loss_raw(&rev, &live, 0.05).unwrap().loss - l).abs() < 1e-12);
        let same: Vec<&[f64]> = vec![refs[0]; n];
        prop_assert_eq!(ssa_loss_raw(&same, &live, 0.05).unwrap().loss, 0.0);
        prop_assert!(l > 0.0);
    }

    #[test]
    fn history_entries_carry_no_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 4)).collect();
        let live = [false, true, false, true, true];
        let before = {
            let refs: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
            ssa_loss_raw(&refs, &live, 0.05).unwrap()
        };
        prop_assert!(before.grads[0].is_none() && before.grads[2].is_none());
        e[0] = unit(&mut rng, 4);
        let refs: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
        let after = ssa_loss_raw(&refs, &live, 0.05).unwrap();
        prop_assert!(after.grads[0].is_none());
        prop_assert_ne!(after.loss, before.loss);
    }

    #[test]
    fn mask_losses_are_finite_and_fixed_at_target(m in mask_strategy(10)) {
        let pred = m.map(|&t| if t { 1.0f64 } else { 0.0 });
        let out = instance_loss(&pred, &m, &LossWeights::default()).unwrap();
        for v in [out.terms.focal, out.terms.dice, out.terms.iou] {
            prop_assert!(v.is_finite() && (0.0..1e-6).contains(&v));
        }
        let wrong = m.map(|&t| if t { 0.0f64 } else { 1.0 });
        let out = instance_loss(&wrong, &m, &LossWeights::default()).unwrap();
        for v in [out.terms.focal, out.terms.dice, out.terms.iou] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut trials = 0;
    for &n in &[2usize, 8, 32] {
        for &d in &[4usize, 16] {
            for _ in 0..4 {
                trials += 1;
                let e: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
                let live: Vec<bool> = (0..n).map(|i| i >= n / 2).collect();
                let refs: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
                let out = ssa_loss_raw(&refs, &live, 0.05).unwrap();
                for (a, g) in out.grads.iter().enumerate() {
                    let Some(g) = g else { continue };
                    for k in 0..d {
                        let h = 1e-5;
                        let eval = |delta: f64| {
                            let mut e2 = e.clone();
                            e2[a][k] += delta;
                            let r: Vec<&[f64]> = e2.iter().map(|v| v.as_slice()).collect();
                            ssa_loss_raw(&r, &live, 0.05).unwrap().loss
                        };
                        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                        assert!(
                            close(g[k], numeric, 1e-4),
                            "n={n} d={d} entry {a} dim {k}: {} vs {numeric}",
                            g[k]
                        );
                    }
                }
            }
        }
    }
    assert!(trials >= 20);
}

#[test]
fn mask_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let pred = Grid::from_fn(8, 8, |_, _| rng.gen_range(0.05..0.95f64));
        let target = Mask::from_fn(8, 8, |_, _| rng.gen_bool(0.4));
        type LossFn = fn(&Grid<f64>, &Mask) -> (f64, Grid<f64>);
        let fns: [(&str, LossFn); 3] = [
            ("focal", |p, t| focal_loss_with_grad(p, t, 2.0, 0.25).unwrap()),
            ("dice", |p, t| dice_loss_with_grad(p, t, 1.0).unwrap()),
            ("iou", |p, t| iou_loss_with_grad(p, t, 1.0).unwrap()),
        ];
        for (name, f) in fns {
            let (_, grad) = f(&pred, &target);
            for i in 0..64 {
                let h = 1e-6;
                let shifted = |delta: f64| {
                    let mut p = pred.clone();
                    p.as_mut_slice()[i] += delta;
                    f(&p, &target).0
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert!(close(grad.as_slice()[i], numeric, 1e-4), "{name} pixel {i}");
            }
        }
    }
}

#[test]
fn rle_round_trip_at_full_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Mask::from_fn(1024, 1024, |_, _| rng.gen_bool(0.3));
    assert_eq!(rle::decode(&rle::encode(&m)).unwrap(), m);
}

fn small_model() -> ToySegmenter<f64> {
    ToySegmenter::new(ToyConfig {
        init_seed: 4,
        ..ToyConfig::default()
    })
    .unwrap()
}

#[test]
fn decoder_predictions_are_independent_per_instance() {
    let model = small_model();
    let img = random_image(1, 32, 32);
    let groups: Vec<PromptGroup> = (0..3u32)
        .map(|k| {
            let m = Mask::from_fn(32, 32, |y, x| y / 8 == k as usize && x / 8 == k as usize);
            sample_points(&m, k + 1, 2, k as u64, NegativeRegion::default())
                .unwrap()
                .into_group(k + 1)
        })
        .collect();
    let all = model.predict(&img, &groups).unwrap();
    assert_eq!(all.len(), 3);
    for (k, g) in groups.iter().enumerate() {
        let alone = model.predict(&img, std::slice::from_ref(g)).unwrap();
        assert_eq!(alone[0].instance_id, all[k].instance_id);
        assert_eq!(alone[0].mask_logits, all[k].mask_logits);
    }
    let mut reversed = groups.clone();
    reversed.reverse();
    let rev = model.predict(&img, &reversed).unwrap();
    for (k, p) in rev.iter().enumerate() {
        assert_eq!(p.mask_prob, all[2 - k].mask_prob);
    }
}

#[test]
fn embeddings_have_unit_norm() {
    let model = small_model();
    for seed in 0..4 {
        let img = random_image(seed, 32, 32);
        let g = PromptGroup::from_box(1, BoundingBox::new(4, 4, 20, 24).unwrap());
        for p in model.predict(&img, &[g]).unwrap() {
            if let Some(e) = p.embedding {
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn overlapping_input_has_leakage() {
    let set = BinaryMaskSet::new(vec![1, 2], vec![Mask::filled(3, 3, true), Mask::filled(3, 3, true)]).unwrap();
    assert_eq!(leakage_rate(&set), 1.0);
}

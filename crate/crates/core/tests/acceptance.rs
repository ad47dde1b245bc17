//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails.
//!
//! Trains the default base once and reuses it for every training criterion.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointadapt::datakit::{rle, synthesize, Checkpoint, Dataset, SceneSpec, Split};
use pointadapt::grid::Grid;
use pointadapt::losses::{total_loss, LossWeights, MaskTerms};
use pointadapt::maskops::{
    binary_entropy, confidence_filter, entropy_map, leakage_rate, refine_stack, BoundingBox, ProbMaskStack,
};
use pointadapt::pipeline::{
    direct_test, pretrain, requery_study, train, PretrainConfig, TrainConfig, TrainOutcome, Variant,
};
use pointadapt::prompts::PromptGroup;
use pointadapt::segmenter::lora::{lora_forward, LoraAdapter, LoraTarget, Projection};
use pointadapt::segmenter::tensor::Matrix;
use pointadapt::segmenter::{ToyConfig, ToySegmenter};
use pointadapt::ssa::ssa_loss_raw;
use pointadapt::{Error, Mask, RgbImage};

type Model = ToySegmenter<f32>;

const SEEDS: [u64; 3] = [0, 1, 2];
const H_095: f64 = 0.286396957115956128766475977727897474306;
const SSA_THREE: f64 = 0.3333333347074357454601357209539080863164;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn random_stack(rng: &mut ChaCha8Rng) -> ProbMaskStack<f32> {
    let (h, w) = (rng.gen_range(4..=64), rng.gen_range(4..=64));
    let k = rng.gen_range(1..=8);
    let layers = (0..k)
        .map(|_| {
            let (cy, cx) = (rng.gen_range(0..h) as f32, rng.gen_range(0..w) as f32);
            let r = rng.gen_range(2.0..(h.max(w) as f32 / 2.0));
            let noise: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-0.15..0.03)).collect();
            Grid::from_fn(h, w, |y, x| {
                let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() / r;
                let base = if d < 1.0 { 0.98 } else { 0.1 };
                (base + noise[y * w + x]).clamp(0.0, 1.0)
            })
        })
        .collect();
    ProbMaskStack::new("stack", (1..=k as u32).collect(), layers).unwrap()
}

fn refine_disjointness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut leaked_before, mut leaked_after) = (0usize, 0usize);
    for _ in 0..1000 {
        let stack = random_stack(&mut rng);
        let gated = confidence_filter(&stack, &entropy_map(&stack).unwrap(), 0.5).unwrap();
        if leakage_rate(&gated) > 0.0 {
            leaked_before += 1;
        }
        let refined = refine_stack(&stack, 0.5).unwrap();
        if leakage_rate(&refined.to_mask_set()) != 0.0 {
            leaked_after += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        leaked_after == 0 && leaked_before > 0 && secs < 10.0,
        format!("1000 stacks, {leaked_before} leaky before, {leaked_after} leaky after, {secs:.2}s"),
    )
}

fn entropy_gate() -> Outcome {
    let exact = binary_entropy(0.5f64).unwrap() == 1.0
        && binary_entropy(0.0f64).unwrap() == 0.0
        && binary_entropy(1.0f64).unwrap() == 0.0
        && binary_entropy(0.5f32).unwrap() == 1.0
        && binary_entropy(0.0f32).unwrap() == 0.0;
    let h = binary_entropy(0.95f64).unwrap();
    let h32 = binary_entropy(0.95f32).unwrap() as f64;
    let layer = Grid::from_vec(1, 2, vec![0.95f64, 0.8]).unwrap();
    let stack = ProbMaskStack::new("gate", vec![1], vec![layer]).unwrap();
    let kept = confidence_filter(&stack, &entropy_map(&stack).unwrap(), 0.5).unwrap();
    let gate = kept.masks()[0].as_slice() == [true, false];
    let pass = exact && (h - H_095).abs() < 1e-5 && (h32 - H_095).abs() < 1e-5 && gate;
    outcome(pass, format!("H(0.95) = {h:.8}, keep 0.95 / reject 0.8: {gate}"))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn ssa_numerics() -> Outcome {
    let started = Instant::now();
    let same: Vec<&[f64]> = vec![&[0.6, 0.8]; 5];
    let zero = ssa_loss_raw(&same, &[true; 5], 0.05).unwrap().loss;
    let three: [&[f64]; 3] = [&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]];
    let l3 = ssa_loss_raw(&three, &[true; 3], 0.05).unwrap().loss;
    let three32: [&[f32]; 3] = [&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]];
    let l3_32 = ssa_loss_raw(&three32, &[true; 3], 0.05).unwrap().loss as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let sizes = [2usize, 8, 32];
    for q in 0..20 {
        let n = sizes[q % 3];
        let d = if q % 2 == 0 { 4 } else { 16 };
        let e: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let live: Vec<bool> = (0..n).map(|i| i % 2 == 0 || n == 2).collect();
        let refs: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
        let out = ssa_loss_raw(&refs, &live, 0.05).unwrap();
        for (a, g) in out.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for k in 0..d {
                let h = 1e-6;
                let at = |delta: f64| {
                    let mut e2 = e.clone();
                    e2[a][k] += delta;
                    let r: Vec<&[f64]> = e2.iter().map(|v| v.as_slice()).collect();
                    ssa_loss_raw(&r, &live, 0.05).unwrap().loss
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let scale = g[k].abs().max(numeric.abs());
                if scale > 1e-7 {
                    worst = worst.max((g[k] - numeric).abs() / scale);
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass =
        zero == 0.0 && (l3 - SSA_THREE).abs() < 1e-5 && (l3_32 - SSA_THREE).abs() < 1e-5 && worst < 1e-4 && secs < 30.0;
    outcome(
        pass,
        format!("identical queue {zero}, three-entry {l3:.6}, worst relative gradient error {worst:.2e}, {secs:.2}s"),
    )
}

fn bits(m: &Model) -> Vec<(String, Vec<u32>)> {
    m.base_weights()
        .map(|(n, w)| (n.to_string(), w.as_slice().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn lora_contracts(base: &Model, trained: &TrainOutcome<f32>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = LoraTarget {
        block: 0,
        projection: Projection::Value,
    };
    let mut identity = 0.0f64;
    let mut dense = 0.0f64;
    for t in 0..100u64 {
        let (d_out, d_in) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let rank = rng.gen_range(1..=d_out.min(d_in).min(4));
        let theta = Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-1.0..1.0f64));
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ad = LoraAdapter::<f64>::init(d_out, d_in, rank, target, t).unwrap();
        let plain: Vec<f64> = (0..d_out)
            .map(|i| (0..d_in).map(|j| theta.get(i, j) * x[j]).sum())
            .collect();
        for (a, b) in lora_forward(&ad, &theta, &x).unwrap().iter().zip(&plain) {
            identity = identity.max((a - b).abs());
        }
        ad.a = Matrix::from_fn(d_out, rank, |_, _| rng.gen_range(-1.0..1.0));
        for (i, got) in lora_forward(&ad, &theta, &x).unwrap().iter().enumerate() {
            let want: f64 = (0..d_in)
                .map(|j| (theta.get(i, j) + (0..rank).map(|r| ad.a.get(i, r) * ad.b.get(r, j)).sum::<f64>()) * x[j])
                .sum();
            dense = dense.max((got - want).abs() / want.abs().max(1e-12));
        }
    }

    // Whole-model no-op: freshly initialized adapters leave predictions unchanged.
    let mut fresh = base.clone();
    fresh.reset_adapters(99).unwrap();
    let mut model_gap = 0.0f64;
    for s in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let img = RgbImage::new(64, 64, (0..64 * 64 * 3).map(|_| r.gen()).collect()).unwrap();
        let b = BoundingBox::new(
            r.gen_range(0..30),
            r.gen_range(0..30),
            r.gen_range(32..64),
            r.gen_range(32..64),
        )
        .unwrap();
        let g = [PromptGroup::from_box(1, b)];
        let (p, q) = (base.predict(&img, &g).unwrap(), fresh.predict(&img, &g).unwrap());
        for (a, b) in p[0].mask_prob.as_slice().iter().zip(q[0].mask_prob.as_slice()) {
            model_gap = model_gap.max((a - b).abs() as f64);
        }
    }

    let steps: usize = trained.reports.iter().map(|r| r.steps - r.skipped_steps).sum();
    let frozen = bits(base) == bits(&trained.model);
    let pass = identity < 1e-6 && model_gap < 1e-6 && dense < 1e-6 && steps >= 50 && frozen;
    outcome(
        pass,
        format!(
            "identity gap {identity:.1e} (model {model_gap:.1e}), dense relative error {dense:.1e}, base bitwise unchanged after {steps} steps: {frozen}"
        ),
    )
}

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = LossWeights::default();
    let defaults = weights.alpha == 20.0 && weights.beta == 0.1;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=4);
        let terms: Vec<MaskTerms<f64>> = (0..k)
            .map(|_| MaskTerms {
                focal: rng.gen_range(0.0..2.0),
                dice: rng.gen_range(0.0..1.0),
                iou: rng.gen_range(0.0..1.0),
            })
            .collect();
        let ssa = rng.gen_range(0.0..2.0);
        let n = k as f64;
        let focal = terms.iter().map(|t| t.focal).sum::<f64>() / n;
        let dice = terms.iter().map(|t| t.dice).sum::<f64>() / n;
        let iou = terms.iter().map(|t| t.iou).sum::<f64>() / n;
        let want = 20.0 * focal + dice + iou + 0.1 * ssa;
        worst = worst.max((total_loss(&terms, ssa, &weights).unwrap() - want).abs());
    }
    outcome(
        defaults && worst < 1e-12,
        format!("100 term sets, worst gap {worst:.1e}"),
    )
}

fn requery(base: &Model, dataset: &Dataset) -> Outcome {
    let train_set = dataset.split(Split::Train);
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let s = requery_study(
            base,
            &train_set,
            &TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        pass &= s.pseudo_iou >= s.point_iou;
        parts.push(format!(
            "seed {seed}: box {:.2} vs point {:.2} ({} of {} eliminated)",
            100.0 * s.pseudo_iou,
            100.0 * s.point_iou,
            s.eliminated,
            s.instances
        ));
    }
    outcome(pass, parts.join("; "))
}

fn metric_lines(out: &TrainOutcome<f32>) -> Vec<String> {
    let mut lines: Vec<String> = out
        .reports
        .iter()
        .map(|r| {
            format!(
                "epoch {} loss {:.6} ssa {:?} test mIoU {:.4} F1 {:.4}",
                r.epoch, r.mean_total, r.mean_ssa, r.test_miou, r.test_f1
            )
        })
        .collect();
    lines.push(format!("final {}", out.final_eval.summary()));
    lines
}

fn corrupted_rejected(ck: &Checkpoint<f32>, base: &Model) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let bytes = ck.to_bytes();
    let mut cases = vec![bytes[..bytes.len() - 7].to_vec(), bytes[..20].to_vec()];
    for at in [12, bytes.len() / 3, bytes.len() - 40] {
        let mut b = bytes.clone();
        b[at] ^= 0x01;
        cases.push(b);
    }
    cases.iter().enumerate().all(|(i, b)| {
        let path = dir.path().join(format!("broken{i}.ckpt"));
        std::fs::write(&path, b).unwrap();
        let mut model = base.clone();
        let before = model.adapters().to_vec();
        let rejected = match Checkpoint::<f32>::load(&path) {
            Err(Error::Corruption { .. }) => true,
            Ok(c) => c.apply_adapters(&mut model).is_err(),
            Err(_) => false,
        };
        rejected && model.adapters() == &before[..]
    })
}

fn persistence(base: &Model, trained: &TrainOutcome<f32>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rle_ok = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let density = rng.gen_range(0.0..1.0);
        let m = Mask::from_fn(h, w, |_, _| rng.gen_bool(density));
        if rle::decode(&rle::encode(&m)).unwrap() == m {
            rle_ok += 1;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapters.ckpt");
    trained.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let mut model = base.clone();
    let state = loaded.apply_adapters(&mut model).unwrap();
    let exact = loaded.to_bytes() == trained.checkpoint.to_bytes()
        && state.as_ref() == Some(&trained.optimizer)
        && model.adapters() == trained.model.adapters();
    let rejected = corrupted_rejected(&trained.checkpoint, base);
    let pass = rle_ok == 1000 && exact && rejected;
    outcome(
        pass,
        format!("RLE {rle_ok}/1000, checkpoint round trip exact: {exact}, corrupted files rejected: {rejected}"),
    )
}

fn report(name: &str, o: &Outcome, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    report("refine disjointness", &refine_disjointness(), &mut failures);
    report("entropy and gate", &entropy_gate(), &mut failures);
    report("alignment loss numerics", &ssa_numerics(), &mut failures);
    report("loss composition", &loss_composition(), &mut failures);

    let started = Instant::now();
    let (base, _) = pretrain::<f32>(ToyConfig::default(), &PretrainConfig::default()).unwrap();
    let dataset = Dataset::from_files(&synthesize(&SceneSpec::default(), 200, 50).unwrap()).unwrap();
    let test_set = dataset.split(Split::Test);
    eprintln!("base trained in {:.0}s", started.elapsed().as_secs_f64());

    report("requery improvement", &requery(&base, &dataset), &mut failures);

    let run = |seed: u64, variant: Variant| {
        let cfg = TrainConfig {
            seed,
            variant,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let out = train(&base, &cfg, &dataset).unwrap();
        eprintln!(
            "{} seed {seed}: {} in {:.0}s",
            variant.name(),
            out.final_eval.summary(),
            t.elapsed().as_secs_f64()
        );
        out
    };
    let full: Vec<TrainOutcome<f32>> = SEEDS.iter().map(|&s| run(s, Variant::Full)).collect();
    let e2e_secs = started.elapsed().as_secs_f64();

    report("LoRA contracts", &lora_contracts(&base, &full[0]), &mut failures);

    let gains: Vec<f64> = SEEDS
        .iter()
        .zip(&full)
        .map(|(&s, out)| 100.0 * (out.final_eval.miou - direct_test(&base, &test_set, 1, s).unwrap().miou))
        .collect();
    let gain = median(gains.clone());
    let per_seed: Vec<String> = gains.iter().map(|g| format!("{g:+.2}")).collect();
    report(
        "end-to-end adaptation",
        &outcome(
            gain >= 3.0 && e2e_secs <= 1800.0,
            format!(
                "median gain {gain:+.2} points (seeds {}), {e2e_secs:.0}s",
                per_seed.join(", ")
            ),
        ),
        &mut failures,
    );

    let full_median = median(full.iter().map(|o| o.final_eval.miou).collect());
    let no_ssa = median(SEEDS.iter().map(|&s| run(s, Variant::NoSsa).final_eval.miou).collect());
    let no_requery = median(
        SEEDS
            .iter()
            .map(|&s| run(s, Variant::NoRequery).final_eval.miou)
            .collect(),
    );
    report(
        "ablation ordering",
        &outcome(
            full_median >= no_ssa && full_median >= no_requery,
            format!(
                "median mIoU full {:.2}, no_ssa {:.2}, no_requery {:.2}",
                100.0 * full_median,
                100.0 * no_ssa,
                100.0 * no_requery
            ),
        ),
        &mut failures,
    );

    let again = run(0, Variant::Full);
    let same_bytes = again.checkpoint.to_bytes() == full[0].checkpoint.to_bytes();
    let same_lines = metric_lines(&again) == metric_lines(&full[0]);
    report(
        "determinism",
        &outcome(
            same_bytes && same_lines,
            format!("checkpoint bytes equal: {same_bytes}, printed metrics equal: {same_lines}"),
        ),
        &mut failures,
    );

    report("persistence and format", &persistence(&base, &full[0]), &mut failures);

    println!("{} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

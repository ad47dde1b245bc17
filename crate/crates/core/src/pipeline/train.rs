//! Training driver, evaluation and ablations.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapt::{adapt_gradients, gt_point_groups, pseudo_labels, StepReport};
use super::metrics::{iou, EvalReport};
use super::{TrainConfig, Variant};
use crate::datakit::{Checkpoint, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::prompts::derive_seed;
use crate::scalar::Scalar;
use crate::segmenter::optim::AdamState;
use crate::segmenter::tape::ParamKey;
use crate::segmenter::tensor::Matrix;
use crate::segmenter::{InstancePrediction, ToySegmenter, TrainMode};
use crate::ssa::EmbeddingQueue;

pub const EPOCH_REPORT_SCHEMA_VERSION: u32 = 1;
const EVAL_STREAM: u64 = 0x4556_414c;

/// Per-epoch summary, one line of the records file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub schema_version: u32,
    pub epoch: usize,
    pub variant: Variant,
    pub beta: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub mean_focal: f64,
    pub mean_dice: f64,
    pub mean_iou_loss: f64,
    /// Absent when the variant does not use the queue.
    pub mean_ssa: Option<f64>,
    pub mean_total: f64,
    pub test_miou: f64,
    pub test_f1: f64,
    pub mean_leakage_pre: f64,
    pub mean_leakage_post: f64,
    pub queue_mean_similarity: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome<T> {
    pub model: ToySegmenter<T>,
    pub optimizer: AdamState<T>,
    pub reports: Vec<EpochReport>,
    pub checkpoint: Checkpoint<T>,
    /// Test metrics of the final model.
    pub final_eval: EvalReport,
}

/// Evaluates predicted masks supplied by `predict` for every instance.
pub fn evaluate_with(
    samples: &[&Sample],
    mut predict: impl FnMut(&Sample) -> Result<Vec<(Mask, Mask)>>,
) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    let mut excluded = 0;
    let mut sorted: Vec<&Sample> = samples.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for s in sorted {
        excluded += s.instances.iter().filter(|i| !i.mask.any()).count();
        pairs.extend(predict(s)?);
    }
    let mut r = EvalReport::from_pairs(pairs.iter().map(|(p, g)| (p, g)));
    r.excluded += excluded;
    Ok(r)
}

/// Predictions for the evaluation prompts of `sample`: one per instance
/// with a non-empty ground truth, in instance order.
pub fn predict_points<T: Scalar>(
    model: &ToySegmenter<T>,
    sample: &Sample,
    n_points: usize,
    seed: u64,
) -> Result<Vec<InstancePrediction<T>>> {
    let groups = gt_point_groups(sample, n_points, seed, EVAL_STREAM)?;
    model.predict(&sample.image, &groups)
}

/// Point-prompted evaluation: prompts sampled from ground truth with
/// `seed`, predictions thresholded at 0.5.
pub fn evaluate<T: Scalar>(
    model: &ToySegmenter<T>,
    samples: &[&Sample],
    n_points: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(samples, |s| {
        let preds = predict_points(model, s, n_points, seed)?;
        let gts = s.instances.iter().filter(|i| i.mask.any());
        Ok(preds
            .into_iter()
            .zip(gts)
            .map(|(p, g)| (p.binary(T::lit(0.5)), g.mask.clone()))
            .collect())
    })
}

/// Evaluation of the unadapted model.
pub fn direct_test<T: Scalar>(
    model: &ToySegmenter<T>,
    samples: &[&Sample],
    n_points: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut frozen = model.clone();
    for ad in frozen.adapters_mut() {
        ad.a = Matrix::zeros(ad.a.rows(), ad.a.cols());
    }
    evaluate(&frozen, samples, n_points, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequeryStudy {
    /// Mean IoU of point-prompted masks against ground truth.
    pub point_iou: f64,
    /// Mean IoU of box-requeried pseudo-masks; eliminated instances score 0.
    pub pseudo_iou: f64,
    /// Point-mask IoU restricted to instances that kept a pseudo-mask.
    pub paired_point_iou: f64,
    /// Pseudo-mask IoU over the same instances.
    pub paired_pseudo_iou: f64,
    pub instances: usize,
    pub eliminated: usize,
}

/// Compares point-prompted masks with requeried pseudo-masks on the
/// original (unaugmented) images.
pub fn requery_study<T: Scalar>(
    model: &ToySegmenter<T>,
    samples: &[&Sample],
    config: &TrainConfig,
) -> Result<RequeryStudy> {
    let (mut sp, mut sq, mut n, mut eliminated) = (0.0, 0.0, 0usize, 0usize);
    let (mut pp, mut pq) = (0.0, 0.0);
    for s in samples {
        let groups = gt_point_groups(s, config.n_points, config.seed, EVAL_STREAM)?;
        let pl = pseudo_labels(model, &s.image_id, &s.image, &groups, config.epsilon, Variant::Full)?;
        let gts = s.instances.iter().filter(|i| i.mask.any());
        for ((pm, target), gt) in pl.point_masks.iter().zip(&pl.targets).zip(gts) {
            let point = iou(pm, &gt.mask);
            sp += point;
            match target {
                Some(t) => {
                    let q = iou(t, &gt.mask);
                    sq += q;
                    pp += point;
                    pq += q;
                }
                None => eliminated += 1,
            }
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    let kept = (n - eliminated).max(1) as f64;
    Ok(RequeryStudy {
        point_iou: sp / d,
        pseudo_iou: sq / d,
        paired_point_iou: pp / kept,
        paired_pseudo_iou: pq / kept,
        instances: n,
        eliminated,
    })
}

fn add_grads<T: Scalar>(acc: &mut HashMap<ParamKey, Matrix<T>>, g: HashMap<ParamKey, Matrix<T>>) {
    for (k, m) in g {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&m),
            None => {
                acc.insert(k, m);
            }
        }
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(
    epoch: usize,
    config: &TrainConfig,
    steps: &[StepReport],
    eval: EvalReport,
    seconds: f64,
    queue: Option<&EmbeddingQueue<impl Scalar>>,
) -> EpochReport {
    let done: Vec<&StepReport> = steps.iter().filter(|s| !s.skipped).collect();
    let term = |f: fn(&StepReport) -> Option<f64>| mean_of(done.iter().filter_map(|s| f(s))).unwrap_or(0.0);
    let uses_queue = config.variant.uses_queue();
    EpochReport {
        schema_version: EPOCH_REPORT_SCHEMA_VERSION,
        epoch,
        variant: config.variant,
        beta: config.effective_weights().beta,
        steps: steps.len(),
        skipped_steps: steps.len() - done.len(),
        mean_focal: term(|s| s.terms.map(|t| t.focal)),
        mean_dice: term(|s| s.terms.map(|t| t.dice)),
        mean_iou_loss: term(|s| s.terms.map(|t| t.iou)),
        mean_ssa: if uses_queue {
            mean_of(done.iter().filter_map(|s| s.ssa))
        } else {
            None
        },
        mean_total: term(|s| s.total),
        test_miou: eval.miou,
        test_f1: eval.f1,
        mean_leakage_pre: mean_of(steps.iter().map(|s| s.leakage_pre)).unwrap_or(0.0),
        mean_leakage_post: mean_of(steps.iter().map(|s| s.leakage_post)).unwrap_or(0.0),
        queue_mean_similarity: queue.and_then(|q| q.mean_similarity()),
        seconds,
    }
}

/// Adapts `base` on the training split and evaluates on the test split
/// after every epoch. Fully determined by `(base, config, dataset)`.
pub fn train<T: Scalar>(base: &ToySegmenter<T>, config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if config.lora_rank != base.config().lora_rank {
        return Err(Error::Config(format!(
            "config rank {} differs from the model rank {}",
            config.lora_rank,
            base.config().lora_rank
        )));
    }
    let train_set = dataset.split(Split::Train);
    let test_set = dataset.split(Split::Test);
    if train_set.is_empty() && config.epochs > 0 && config.variant != Variant::Direct {
        return Err(Error::Config("the training split is empty".into()));
    }
    let mut model = base.clone();
    model.reset_adapters(derive_seed(config.seed, u64::MAX, 0))?;
    let mut optimizer = model.optimizer_state(TrainMode::Adapters);
    let mut queue = if config.variant.uses_queue() {
        Some(EmbeddingQueue::<T>::new(config.queue_capacity)?)
    } else {
        None
    };
    let epochs = if config.variant == Variant::Direct {
        0
    } else {
        config.epochs
    };
    let mut reports = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let started = Instant::now();
        if config.reset_queue_each_epoch {
            if let Some(q) = queue.as_mut() {
                q.clear();
            }
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            epoch as u64,
            u64::MAX,
        )));
        let mut steps = Vec::with_capacity(order.len());
        let mut acc: HashMap<ParamKey, Matrix<T>> = HashMap::new();
        let mut in_batch = 0usize;
        for (pos, &i) in order.iter().enumerate() {
            let seed = derive_seed(config.seed, epoch as u64, i as u64);
            let (report, grads) = adapt_gradients(&model, queue.as_mut(), train_set[i], config, seed)?;
            steps.push(report);
            if let Some(g) = grads {
                add_grads(&mut acc, g);
                in_batch += 1;
            }
            let last = pos + 1 == order.len();
            if in_batch > 0 && (in_batch == config.batch_size || last) {
                if in_batch > 1 {
                    let scale = T::one() / T::from_usize(in_batch).unwrap();
                    for m in acc.values_mut() {
                        m.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    }
                }
                model.apply_gradients(TrainMode::Adapters, &acc, &mut optimizer, &config.optimizer)?;
                acc.clear();
                in_batch = 0;
            }
        }
        let eval = evaluate(&model, &test_set, config.n_points, config.seed)?;
        let report = summarize(
            epoch,
            config,
            &steps,
            eval,
            started.elapsed().as_secs_f64(),
            queue.as_ref(),
        );
        log::info!(
            "epoch {epoch}: loss {:.4} test {} leakage {:.3} -> {:.3}",
            report.mean_total,
            eval.summary(),
            report.mean_leakage_pre,
            report.mean_leakage_post
        );
        reports.push(report);
    }
    let final_eval = evaluate(&model, &test_set, config.n_points, config.seed)?;
    let metadata = serde_json::json!({
        "variant": config.variant.name(),
        "seed": config.seed,
        "epochs": epochs,
        "n_points": config.n_points,
        "beta": config.effective_weights().beta,
        "coordinates": crate::datakit::dataset::COORDINATES,
    });
    let checkpoint = Checkpoint::adapters(&model, Some(&optimizer), metadata);
    Ok(TrainOutcome {
        model,
        optimizer,
        reports,
        checkpoint,
        final_eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub miou: f64,
    pub f1: f64,
    /// Absent for variants without a queue.
    pub queue_mean_similarity: Option<f64>,
    pub reports: Vec<EpochReport>,
}

/// One training run per variant with shared seeds.
pub fn run_ablation<T: Scalar>(
    base: &ToySegmenter<T>,
    config: &TrainConfig,
    dataset: &Dataset,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let test_set = dataset.split(Split::Test);
    variants
        .iter()
        .map(|&variant| {
            if variant == Variant::Direct {
                let e = direct_test(base, &test_set, config.n_points, config.seed)?;
                return Ok(AblationRow {
                    variant,
                    miou: e.miou,
                    f1: e.f1,
                    queue_mean_similarity: None,
                    reports: Vec::new(),
                });
            }
            let cfg = TrainConfig {
                variant,
                ..config.clone()
            };
            let out = train(base, &cfg, dataset)?;
            Ok(AblationRow {
                variant,
                miou: out.final_eval.miou,
                f1: out.final_eval.f1,
                queue_mean_similarity: out.reports.last().and_then(|r| r.queue_mean_similarity),
                reports: out.reports,
            })
        })
        .collect()
}

/// Plain aligned table of ablation rows, metrics in percent.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<12} {:>8} {:>8}\n", "variant", "mIoU", "F1");
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>8.2} {:>8.2}\n",
            r.variant.name(),
            100.0 * r.miou,
            100.0 * r.f1
        ));
    }
    s
}

//! One refine / requery / reinforce step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{instance_seed, TrainConfig, Variant};
use crate::datakit::Sample;
use crate::error::Result;
use crate::grid::{Grid, Mask};
use crate::image::RgbImage;
use crate::losses::{instance_loss, mean_terms, total_loss, MaskTerms};
use crate::maskops::{
    enclosing_box, leakage_rate, refine_stack, BinaryMaskSet, BoundingBox, InstanceId, ProbMaskStack,
};
use crate::prompts::{make_views, sample_points, NegativeRegion, PromptGroup};
use crate::scalar::Scalar;
use crate::segmenter::optim::AdamState;
use crate::segmenter::tape::ParamKey;
use crate::segmenter::tensor::Matrix;
use crate::segmenter::{sigmoid, ToySegmenter, TrainMode};
use crate::ssa::{ssa_loss, EmbeddingQueue, Origin};

const POINT_STREAM: u64 = 0x5052_4f4d;

/// Pseudo-labels produced by the no-gradient path on one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub instance_ids: Vec<InstanceId>,
    /// Point-prompted predictions thresholded at 0.5.
    pub point_masks: Vec<Mask>,
    /// Masks after refinement (raw point masks for `no_refine`).
    pub refined_masks: Vec<Mask>,
    pub boxes: Vec<Option<BoundingBox>>,
    /// Supervision target per instance, absent when nothing survived.
    pub targets: Vec<Option<Mask>>,
    /// Prompt the student receives for each present target.
    pub student_prompts: Vec<Option<PromptGroup>>,
    pub box_prompts: usize,
    pub leakage_pre: f64,
    pub leakage_post: f64,
}

fn threshold<T: Scalar>(p: &Grid<T>) -> Mask {
    p.map(|&v| v > T::lit(0.5))
}

/// Decodes `point_groups`, refines the result and re-queries with the
/// enclosing boxes. Runs in inference mode only.
pub fn pseudo_labels<T: Scalar>(
    model: &ToySegmenter<T>,
    image_id: &str,
    image: &RgbImage,
    point_groups: &[PromptGroup],
    epsilon: f64,
    variant: Variant,
) -> Result<PseudoLabels> {
    let preds = model.predict(image, point_groups)?;
    let ids: Vec<InstanceId> = point_groups.iter().map(|g| g.instance_id).collect();
    let point_masks: Vec<Mask> = preds.iter().map(|p| threshold(&p.mask_prob)).collect();
    let leakage_pre = leakage_rate(&BinaryMaskSet::new(ids.clone(), point_masks.clone())?);

    let refined_masks = if variant == Variant::NoRefine {
        point_masks.clone()
    } else {
        let layers = preds.into_iter().map(|p| p.mask_prob).collect();
        let stack = ProbMaskStack::new(image_id, ids.clone(), layers)?;
        refine_stack(&stack, T::lit(epsilon))?.masks().to_vec()
    };
    let leakage_post = leakage_rate(&BinaryMaskSet::new(ids.clone(), refined_masks.clone())?);
    let boxes: Vec<Option<BoundingBox>> = refined_masks.iter().map(enclosing_box).collect();

    let (targets, student_prompts, box_prompts) = if variant == Variant::NoRequery {
        let targets: Vec<Option<Mask>> = refined_masks.iter().map(|m| m.any().then(|| m.clone())).collect();
        let prompts = targets
            .iter()
            .zip(point_groups)
            .map(|(t, g)| t.as_ref().map(|_| g.clone()))
            .collect();
        (targets, prompts, 0)
    } else {
        let box_groups: Vec<PromptGroup> = ids
            .iter()
            .zip(&boxes)
            .filter_map(|(&id, b)| b.map(|b| PromptGroup::from_box(id, b)))
            .collect();
        let requeried = model.predict(image, &box_groups)?;
        let mut it = box_groups.iter().zip(requeried);
        let mut targets = Vec::with_capacity(ids.len());
        let mut prompts = Vec::with_capacity(ids.len());
        for b in &boxes {
            if b.is_some() {
                let (g, pred) = it.next().expect("one prediction per box");
                targets.push(Some(threshold(&pred.mask_prob)));
                prompts.push(Some(g.clone()));
            } else {
                targets.push(None);
                prompts.push(None);
            }
        }
        (targets, prompts, box_groups.len())
    };
    Ok(PseudoLabels {
        instance_ids: ids,
        point_masks,
        refined_masks,
        boxes,
        targets,
        student_prompts,
        box_prompts,
        leakage_pre,
        leakage_post,
    })
}

/// Point prompts for every non-empty ground-truth instance, in original
/// image coordinates.
pub(crate) fn gt_point_groups(sample: &Sample, n_points: usize, seed: u64, stream: u64) -> Result<Vec<PromptGroup>> {
    let mut out = Vec::new();
    for (k, inst) in sample.instances.iter().enumerate() {
        if !inst.mask.any() {
            continue;
        }
        let s = instance_seed(seed, stream, &sample.image_id, k);
        let pts = sample_points(&inst.mask, inst.instance_id, n_points, s, NegativeRegion::default())?;
        out.push(pts.into_group(inst.instance_id));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub image_id: String,
    pub instances: usize,
    /// Instances removed by refinement or left without a pseudo-mask.
    pub eliminated: usize,
    pub box_prompts: usize,
    pub supervised: usize,
    pub skipped: bool,
    pub terms: Option<MaskTerms<f64>>,
    pub ssa: Option<f64>,
    pub total: Option<f64>,
    pub leakage_pre: f64,
    pub leakage_post: f64,
    pub queue_len: usize,
    pub queue_mean_similarity: Option<f64>,
}

/// Runs steps (1) to (7) and the backward pass; returns the adapter
/// gradients, or `None` when the step has nothing to supervise.
pub fn adapt_gradients<T: Scalar>(
    model: &ToySegmenter<T>,
    queue: Option<&mut EmbeddingQueue<T>>,
    sample: &Sample,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<(StepReport, Option<HashMap<ParamKey, Matrix<T>>>)> {
    let mut report = StepReport {
        image_id: sample.image_id.clone(),
        ..StepReport::default()
    };
    let views = make_views(&sample.image, step_seed, &config.augment);
    let geom = views.geometry();
    let groups = gt_point_groups(sample, config.n_points, step_seed, POINT_STREAM)?
        .iter()
        .map(|g| geom.group(g))
        .collect::<Result<Vec<_>>>()?;
    report.instances = groups.len();
    if groups.is_empty() {
        report.skipped = true;
        return Ok((report, None));
    }

    let pl = pseudo_labels(
        model,
        &sample.image_id,
        &views.weak_image,
        &groups,
        config.epsilon,
        config.variant,
    )?;
    report.box_prompts = pl.box_prompts;
    report.leakage_pre = pl.leakage_pre;
    report.leakage_post = pl.leakage_post;

    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut prompts = Vec::new();
    for ((id, t), p) in pl.instance_ids.iter().zip(pl.targets).zip(pl.student_prompts) {
        if let (Some(t), Some(p)) = (t, p) {
            if t.any() {
                ids.push(*id);
                targets.push(t);
                prompts.push(p);
            }
        }
    }
    report.supervised = ids.len();
    report.eliminated = report.instances - report.supervised;
    if ids.is_empty() {
        report.skipped = true;
        return Ok((report, None));
    }

    let weights = config.effective_weights();
    let pass = model.forward(&views.strong_image, &prompts, &targets, TrainMode::Adapters)?;
    let (h, w) = (sample.image.height(), sample.image.width());
    let k = T::from_usize(ids.len()).unwrap();
    let mut seeds = Vec::new();
    let mut terms = Vec::new();
    for (&node, target) in pass.logits.iter().zip(&targets) {
        let logits = pass.graph.value(node);
        let prob = Grid::from_vec(h, w, logits.as_slice().iter().map(|&z| sigmoid(z)).collect())?;
        let loss = instance_loss(&prob, target, &weights)?;
        terms.push(loss.terms);
        let g: Vec<T> = loss
            .grad
            .as_slice()
            .iter()
            .zip(prob.as_slice())
            .map(|(&g, &p)| g * p * (T::one() - p) / k)
            .collect();
        seeds.push((node, Matrix::from_vec(h * w, 1, g)?));
    }

    let mut ssa_value = T::zero();
    if let (Some(queue), true) = (queue, config.variant.uses_queue()) {
        queue.begin_iteration();
        let mut pushed = Vec::new();
        let mut entries = Vec::new();
        for (node, &id) in pass.embeddings.iter().zip(&ids) {
            if let Some(node) = node {
                entries.push((
                    pass.graph.value(*node).as_slice().to_vec(),
                    Origin {
                        image_id: sample.image_id.clone(),
                        instance_id: id,
                    },
                ));
                pushed.push(*node);
            }
        }
        queue.push(entries)?;
        let outcome = ssa_loss(queue, T::lit(config.tau))?;
        ssa_value = outcome.loss;
        let live: Vec<Vec<T>> = outcome.grads.into_iter().flatten().collect();
        let offset = pushed.len() - live.len();
        let beta = T::lit(weights.beta);
        if beta != T::zero() {
            for (node, g) in pushed[offset..].iter().zip(live) {
                let g = g.into_iter().map(|v| v * beta).collect();
                seeds.push((*node, Matrix::row_vector(g)));
            }
        }
        report.ssa = Some(ssa_value.as_f64());
        report.queue_len = queue.len();
        report.queue_mean_similarity = queue.mean_similarity();
    }

    let mean = mean_terms(&terms).expect("at least one instance");
    report.terms = Some(MaskTerms {
        focal: mean.focal.as_f64(),
        dice: mean.dice.as_f64(),
        iou: mean.iou.as_f64(),
    });
    report.total = total_loss(&terms, ssa_value, &weights).map(|t| t.as_f64());
    let grads = pass.graph.backward(&seeds);
    Ok((report, Some(grads)))
}

/// A full step: gradients followed by one optimizer update of the adapters.
pub fn adapt_step<T: Scalar>(
    model: &mut ToySegmenter<T>,
    optimizer: &mut AdamState<T>,
    queue: Option<&mut EmbeddingQueue<T>>,
    sample: &Sample,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<StepReport> {
    let (report, grads) = adapt_gradients(model, queue, sample, config, step_seed)?;
    if let Some(grads) = grads {
        model.apply_gradients(TrainMode::Adapters, &grads, optimizer, &config.optimizer)?;
    }
    Ok(report)
}

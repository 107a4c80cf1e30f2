//! Prompt simulation with iterative correction, the interactive training
//! objective and the evaluation protocol.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::instanceseg::{
    connected_components, derive_targets, dice_masks, distance_transform, mean_segmentation_accuracy,
    watershed_decode, InstanceMap, DEFAULT_TAU_CENTER, DEFAULT_TAU_FG,
};
use crate::optim::Adam;
use crate::samlite::{PromptSet, SamLite};
use crate::synth::{Metric, Sample};
use crate::tensor::NdArray;

/// Corrections applied after the initial prompt during evaluation.
pub const EVAL_CORRECTIONS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Point,
    Box,
}

impl StartKind {
    pub fn name(self) -> &'static str {
        match self {
            StartKind::Point => "point",
            StartKind::Box => "box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn bbox_of(mask: &[bool], w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (p / w, p % w);
        b = Some(match b {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    b
}

/// Mask pixel farthest from the background (the image border counts as
/// background); ties go to the first pixel in row-major order.
pub fn center_point(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize)> {
    let (ph, pw) = (h + 2, w + 2);
    let mut sites = vec![true; ph * pw];
    for r in 0..h {
        for c in 0..w {
            sites[(r + 1) * pw + c + 1] = !mask[r * w + c];
        }
    }
    let d = distance_transform(&sites, ph, pw);
    let mut best: Option<(f64, usize)> = None;
    for p in (0..h * w).filter(|&p| mask[p]) {
        let v = d[(p / w + 1) * pw + p % w + 1];
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, p));
        }
    }
    best.map(|(_, p)| (p / w, p % w))
}

/// Initial prompt for one object mask.
pub fn sample_initial_prompt<R: Rng + ?Sized>(
    mask: &[bool],
    h: usize,
    w: usize,
    kind: StartKind,
    mode: Mode,
    rng: &mut R,
) -> Result<PromptSet> {
    if mask.len() != h * w {
        return Err(Error::shape("sample_initial_prompt", format!("{} pixels for {h}x{w}", mask.len())));
    }
    let (r0, c0, r1, c1) = bbox_of(mask, w).ok_or_else(|| Error::Data("cannot prompt an empty mask".into()))?;
    Ok(match (kind, mode) {
        (StartKind::Point, Mode::Eval) => PromptSet::point(center_point(mask, h, w).expect("mask is non-empty")),
        (StartKind::Point, Mode::Train) => {
            let n = mask.iter().filter(|&&m| m).count();
            let k = rng.random_range(0..n);
            let p = mask.iter().enumerate().filter(|(_, &m)| m).nth(k).unwrap().0;
            PromptSet::point((p / w, p % w))
        }
        (StartKind::Box, Mode::Eval) => PromptSet::bbox((r0, c0, r1, c1)),
        (StartKind::Box, Mode::Train) => {
            let jit = |len: usize, rng: &mut R| rng.random_range(0..=(len as f64 * 0.05).floor() as usize);
            let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
            PromptSet::bbox((
                r0.saturating_sub(jit(bh, rng)),
                c0.saturating_sub(jit(bw, rng)),
                (r1 + jit(bh, rng)).min(h - 1),
                (c1 + jit(bw, rng)).min(w - 1),
            ))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub point: (usize, usize),
    pub positive: bool,
}

impl Correction {
    pub fn apply(&self, prompts: &mut PromptSet) {
        if self.positive {
            prompts.positive.push(self.point);
        } else {
            prompts.negative.push(self.point);
        }
    }
}

/// One correction from the larger error set (false negatives win ties),
/// drawn uniformly from its largest connected component. `None` when the
/// prediction is exact.
pub fn sample_correction<R: Rng + ?Sized>(
    pred: &[bool],
    truth: &[bool],
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Option<Correction>> {
    if pred.len() != truth.len() || pred.len() != h * w {
        return Err(Error::shape(
            "sample_correction",
            format!("prediction {} vs truth {} pixels for {h}x{w}", pred.len(), truth.len()),
        ));
    }
    let fn_set: Vec<bool> = truth.iter().zip(pred).map(|(&t, &p)| t && !p).collect();
    let fp_set: Vec<bool> = truth.iter().zip(pred).map(|(&t, &p)| p && !t).collect();
    let (nfn, nfp) = (fn_set.iter().filter(|&&b| b).count(), fp_set.iter().filter(|&&b| b).count());
    if nfn == 0 && nfp == 0 {
        return Ok(None);
    }
    let (set, positive) = if nfn >= nfp { (fn_set, true) } else { (fp_set, false) };
    let (labels, n) = connected_components(&set, h, w);
    let mut sizes = vec![0usize; n + 1];
    labels.iter().for_each(|&l| sizes[l as usize] += 1);
    let mut largest = 1;
    for l in 2..=n {
        if sizes[l] > sizes[largest] {
            largest = l;
        }
    }
    let k = rng.random_range(0..sizes[largest]);
    let p = labels.iter().enumerate().filter(|(_, &l)| l as usize == largest).nth(k).unwrap().0;
    Ok(Some(Correction {
        point: (p / w, p % w),
        positive,
    }))
}

/// A model that can be driven by the interactive protocol.
pub trait SegModel: Sync {
    type Features: Send;

    /// Per-image state shared across prompts. `index` is the image's position
    /// in the evaluated dataset.
    fn embed(&self, index: usize, image: &NdArray<f32>) -> Result<Self::Features>;

    fn predict_mask(&self, feats: &Self::Features, prompts: &PromptSet) -> Result<Vec<bool>>;

    fn predict_instances(&self, feats: &Self::Features) -> Result<InstanceMap>;
}

impl SegModel for SamLite<f32> {
    type Features = (NdArray<f32>, NdArray<f32>);

    fn embed(&self, _index: usize, image: &NdArray<f32>) -> Result<Self::Features> {
        let mut t = Tape::inference();
        let x = self.image_input(&mut t, image)?;
        let f = self.arch.embed(&mut t, &self.store, x)?;
        Ok((image.clone(), t.value(f).clone()))
    }

    fn predict_mask(&self, (_, feats): &Self::Features, prompts: &PromptSet) -> Result<Vec<bool>> {
        let mut t = Tape::inference();
        let f = t.input(feats.clone());
        let l = self.arch.mask_logits(&mut t, &self.store, f, prompts)?;
        Ok(t.value(l).data().iter().map(|&v| v > 0.0).collect())
    }

    fn predict_instances(&self, (image, feats): &Self::Features) -> Result<InstanceMap> {
        let mut t = Tape::inference();
        let f = t.input(feats.clone());
        let x = t.input(image.clone());
        let out = self.arch.instance_output(&mut t, &self.store, f, x)?;
        watershed_decode(t.value(out), DEFAULT_TAU_CENTER, DEFAULT_TAU_FG)
    }
}

/// Returns the annotated object selected by the prompts: the one under the
/// first positive point, else the one best filling the box.
pub struct OracleModel {
    pub truths: Vec<InstanceMap>,
}

impl SegModel for OracleModel {
    type Features = InstanceMap;

    fn embed(&self, index: usize, _image: &NdArray<f32>) -> Result<InstanceMap> {
        self.truths
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("oracle has no annotation for image {index}")))
    }

    fn predict_mask(&self, map: &InstanceMap, prompts: &PromptSet) -> Result<Vec<bool>> {
        prompts.validate(map.height().max(map.width()))?;
        let id = if let Some(&(r, c)) = prompts.positive.first() {
            map.get(r, c)
        } else if let Some((r0, c0, r1, c1)) = prompts.bbox {
            let mut counts = std::collections::BTreeMap::<u32, usize>::new();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    *counts.entry(map.get(r, c)).or_default() += 1;
                }
            }
            counts.into_iter().filter(|&(l, _)| l != 0).max_by_key(|&(l, n)| (n, std::cmp::Reverse(l))).map_or(0, |(l, _)| l)
        } else {
            0
        };
        Ok(map.mask(id))
    }

    fn predict_instances(&self, map: &InstanceMap) -> Result<InstanceMap> {
        Ok(map.clone())
    }
}

/// Predicts nothing.
pub struct EmptyModel;

impl SegModel for EmptyModel {
    type Features = (usize, usize);

    fn embed(&self, _index: usize, image: &NdArray<f32>) -> Result<(usize, usize)> {
        let s = image.shape();
        Ok((s[s.len() - 2], s[s.len() - 1]))
    }

    fn predict_mask(&self, &(h, w): &(usize, usize), _prompts: &PromptSet) -> Result<Vec<bool>> {
        Ok(vec![false; h * w])
    }

    fn predict_instances(&self, &(h, w): &(usize, usize)) -> Result<InstanceMap> {
        Ok(InstanceMap::empty(h, w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AddedPrompt {
    Initial { prompts: PromptSet },
    Correction { point: (usize, usize), positive: bool },
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub metric: f64,
    pub added: AddedPrompt,
    #[serde(skip)]
    pub mask: Vec<bool>,
}

/// Metric per iteration; entry 0 is the initial prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub entries: Vec<TraceEntry>,
    pub prompts: Vec<PromptSet>,
}

impl IterationTrace {
    pub fn metrics(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.metric).collect()
    }
}

pub fn object_metric(metric: Metric, pred: &[bool], truth: &[bool], h: usize, w: usize) -> Result<f64> {
    match metric {
        Metric::Dice => dice_masks(pred, truth),
        Metric::Msa => mean_segmentation_accuracy(&InstanceMap::from_mask(h, w, pred)?, &InstanceMap::from_mask(h, w, truth)?),
    }
}

/// Runs the initial prompt and `corrections` correction rounds for one
/// object.
#[allow(clippy::too_many_arguments)]
pub fn run_object<M: SegModel, R: Rng + ?Sized>(
    model: &M,
    feats: &M::Features,
    truth: &[bool],
    h: usize,
    w: usize,
    start: StartKind,
    corrections: usize,
    metric: Metric,
    rng: &mut R,
) -> Result<IterationTrace> {
    let mut prompts = sample_initial_prompt(truth, h, w, start, Mode::Eval, rng)?;
    let mut added = AddedPrompt::Initial {
        prompts: prompts.clone(),
    };
    let mut trace = IterationTrace {
        entries: Vec::with_capacity(corrections + 1),
        prompts: Vec::with_capacity(corrections + 1),
    };
    for it in 0..=corrections {
        let mask = model.predict_mask(feats, &prompts)?;
        if mask.len() != truth.len() {
            return Err(Error::shape("predict_mask", format!("{} vs {} pixels", mask.len(), truth.len())));
        }
        let m = object_metric(metric, &mask, truth, h, w)?;
        trace.prompts.push(prompts.clone());
        let next = if it < corrections {
            sample_correction(&mask, truth, h, w, rng)?
        } else {
            None
        };
        trace.entries.push(TraceEntry {
            metric: m,
            added: std::mem::replace(
                &mut added,
                match next {
                    Some(c) => AddedPrompt::Correction {
                        point: c.point,
                        positive: c.positive,
                    },
                    None => AddedPrompt::Noop,
                },
            ),
            mask,
        });
        if let Some(c) = next {
            c.apply(&mut prompts);
        }
    }
    Ok(trace)
}

/// One JSON Lines record per (image, object, start kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub image_id: String,
    pub object_id: u32,
    pub start: StartKind,
    pub metrics: Vec<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub trace: Option<IterationTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractiveEval {
    pub start: StartKind,
    pub records: Vec<ObjectRecord>,
    /// Mean metric at iteration 0.
    pub initial: f64,
    /// Mean metric after the last correction.
    pub last: f64,
}

/// Per-image rng stream derived from the master seed.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluates every annotated object of every image. Images run in
/// parallel; results do not depend on the thread count.
pub fn evaluate_interactive<M: SegModel>(
    model: &M,
    data: &[Sample],
    start: StartKind,
    corrections: usize,
    metric: Metric,
    seed: u64,
    keep_traces: bool,
) -> Result<InteractiveEval> {
    if data.iter().all(|s| s.labels.ids().is_empty()) {
        return Err(Error::Data("no annotated objects to evaluate".into()));
    }
    let per_image: Vec<Vec<ObjectRecord>> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = image_rng(seed ^ (start as u64).wrapping_mul(0x9e37_79b9), i);
            let feats = model.embed(i, &s.image)?;
            let (h, w) = s.labels.shape();
            s.labels
                .ids()
                .into_iter()
                .map(|id| {
                    let trace = run_object(model, &feats, &s.labels.mask(id), h, w, start, corrections, metric, &mut rng)?;
                    Ok(ObjectRecord {
                        image_id: s.id.clone(),
                        object_id: id,
                        start,
                        metrics: trace.metrics(),
                        seed,
                        trace: keep_traces.then_some(trace),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<ObjectRecord> = per_image.into_iter().flatten().collect();
    let n = records.len() as f64;
    Ok(InteractiveEval {
        start,
        initial: records.iter().map(|r| r.metrics[0]).sum::<f64>() / n,
        last: records.iter().map(|r| *r.metrics.last().unwrap()).sum::<f64>() / n,
        records,
    })
}

/// Automatic instance segmentation: mean per-image mSA.
pub fn evaluate_ais<M: SegModel>(model: &M, data: &[Sample]) -> Result<Vec<f64>> {
    data.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let feats = model.embed(i, &s.image)?;
            let pred = model.predict_instances(&feats)?;
            mean_segmentation_accuracy(&pred, &s.labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub objects_per_image: usize,
    pub correction_iterations: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Train the instance head alongside the interactive objective.
    pub instance_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            objects_per_image: 25,
            correction_iterations: EVAL_CORRECTIONS,
            lr: 1e-5,
            patience: 10,
            max_epochs: 100,
            instance_head: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.objects_per_image == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, objects per image, patience and max epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn soft_dice_loss(tape: &mut Tape<f32>, prob: Var, target: Var) -> Result<Var> {
    let eps = 1e-6;
    let pt = tape.mul(prob, target)?;
    let inter = tape.sum(pt)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let sp = tape.sum(prob)?;
    let st = tape.sum(target)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Dice plus binary cross-entropy on mask logits.
pub fn mask_loss(tape: &mut Tape<f32>, logits: Var, target: Var) -> Result<Var> {
    let prob = tape.sigmoid(logits)?;
    let d = soft_dice_loss(tape, prob, target)?;
    let b = tape.bce_with_logits(logits, target)?;
    tape.add(d, b)
}

/// MSE on both distance channels plus dice on the foreground channel.
pub fn instance_loss(tape: &mut Tape<f32>, out: Var, targets: &NdArray<f32>) -> Result<Var> {
    let t = tape.input(targets.clone());
    let od = tape.slice(out, 0, 0, 2)?;
    let td = tape.slice(t, 0, 0, 2)?;
    let diff = tape.sub(od, td)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;
    let of = tape.slice(out, 0, 2, 3)?;
    let tf = tape.slice(t, 0, 2, 3)?;
    let d = soft_dice_loss(tape, of, tf)?;
    tape.add(mse, d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mask_loss: f64,
    pub instance_loss: f64,
    pub objects: usize,
    pub images: usize,
}

struct ImagePlan<'a> {
    sample: &'a Sample,
    objects: Vec<u32>,
    seed: u64,
}

/// Loss and gradients for one image, already scaled into the batch mean.
fn image_gradients(
    model: &SamLite<f32>,
    plan: &ImagePlan,
    cfg: &TrainConfig,
    mask_terms: usize,
    images: usize,
) -> Result<(f64, f64, Gradients<f32>)> {
    let s = plan.sample;
    let (h, w) = s.labels.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut tape = Tape::training(plan.seed);
    let x = model.image_input(&mut tape, &s.image)?;
    let feats = model.arch.embed(&mut tape, &model.store, x)?;
    let mut terms = Vec::new();
    for &id in &plan.objects {
        let truth = s.labels.mask(id);
        let target = tape.input(NdArray::new(vec![h, w], truth.iter().map(|&b| b as u8 as f32).collect())?);
        let kind = if rng.random_bool(0.5) { StartKind::Point } else { StartKind::Box };
        let mut prompts = sample_initial_prompt(&truth, h, w, kind, Mode::Train, &mut rng)?;
        for it in 0..=cfg.correction_iterations {
            let logits = model.arch.mask_logits(&mut tape, &model.store, feats, &prompts)?;
            terms.push(mask_loss(&mut tape, logits, target)?);
            if it < cfg.correction_iterations {
                let pred: Vec<bool> = tape.value(logits).data().iter().map(|&v| v > 0.0).collect();
                if let Some(c) = sample_correction(&pred, &truth, h, w, &mut rng)? {
                    c.apply(&mut prompts);
                }
            }
        }
    }
    let mut mask_sum = terms[0];
    for &t in &terms[1..] {
        mask_sum = tape.add(mask_sum, t)?;
    }
    let mask_part = tape.scale(mask_sum, 1.0 / mask_terms as f64)?;
    let mask_value = tape.value(mask_part).data()[0] as f64;
    let (loss, inst_value) = if cfg.instance_head {
        let out = model.arch.instance_output(&mut tape, &model.store, feats, x)?;
        let il = instance_loss(&mut tape, out, &derive_targets(&s.labels).to_array())?;
        let il = tape.scale(il, 1.0 / images as f64)?;
        let v = tape.value(il).data()[0] as f64;
        (tape.add(mask_part, il)?, v)
    } else {
        (mask_part, 0.0)
    };
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite(format!("training loss on {}", s.id)));
    }
    Ok((mask_value, inst_value, tape.backward(loss)?))
}

/// One optimizer step on `batch`: per object an initial prompt (point or box
/// with equal odds) and `correction_iterations` correction rounds, with the
/// loss averaged over all iterations and objects.
pub fn training_step(
    model: &mut SamLite<f32>,
    opt: &mut Adam<f32>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for s in batch {
        let ids = s.labels.ids();
        if ids.is_empty() {
            log::warn!("skipping {}: no annotated objects", s.id);
            continue;
        }
        let k = cfg.objects_per_image.min(ids.len());
        let mut pick = sample_indices(&mut rng, ids.len(), k).into_vec();
        pick.sort_unstable();
        plans.push(ImagePlan {
            sample: s,
            objects: pick.into_iter().map(|i| ids[i]).collect(),
            seed: rng.random(),
        });
    }
    if plans.is_empty() {
        return Ok(StepStats::default());
    }
    let objects: usize = plans.iter().map(|p| p.objects.len()).sum();
    let terms = objects * (cfg.correction_iterations + 1);
    let images = plans.len();
    let shared: &SamLite<f32> = model;
    let results: Vec<(f64, f64, Gradients<f32>)> = plans
        .par_iter()
        .map(|p| image_gradients(shared, p, cfg, terms, images))
        .collect::<Result<_>>()?;
    let mut stats = StepStats {
        objects,
        images,
        ..StepStats::default()
    };
    let mut grads = Gradients::empty();
    for (m, i, g) in results {
        stats.mask_loss += m;
        stats.instance_loss += i;
        grads.accumulate(g);
    }
    stats.loss = stats.mask_loss + stats.instance_loss;
    opt.step(&mut model.store, &grads)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Vec<bool> {
        (0..h * w).map(|p| (r0..=r1).contains(&(p / w)) && (c0..=c1).contains(&(p % w))).collect()
    }

    #[test]
    fn single_pixel_object_prompts_that_pixel() {
        let mut m = vec![false; 20];
        m[13] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [Mode::Train, Mode::Eval] {
            let p = sample_initial_prompt(&m, 4, 5, StartKind::Point, mode, &mut rng).unwrap();
            assert_eq!(p.positive, vec![(2, 3)]);
        }
    }

    #[test]
    fn eval_box_is_tight_and_train_box_contains_it() {
        let m = square(30, 30, 3, 5, 22, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = sample_initial_prompt(&m, 30, 30, StartKind::Box, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.bbox, Some((3, 5, 22, 14)));
        for _ in 0..50 {
            let (r0, c0, r1, c1) = sample_initial_prompt(&m, 30, 30, StartKind::Box, Mode::Train, &mut rng)
                .unwrap()
                .bbox
                .unwrap();
            assert!(r0 <= 3 && c0 <= 5 && r1 >= 22 && c1 >= 14);
            assert!(3 - r0 <= 1 && 5 - c0 == 0 && r1 - 22 <= 1 && c1 - 14 == 0);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_initial_prompt(&[false; 4], 2, 2, StartKind::Point, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn corrections_follow_the_error_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = square(10, 10, 2, 2, 5, 5);
        assert_eq!(sample_correction(&truth, &truth, 10, 10, &mut rng).unwrap(), None);
        let c = sample_correction(&[false; 100], &truth, 10, 10, &mut rng).unwrap().unwrap();
        assert!(c.positive && truth[c.point.0 * 10 + c.point.1]);
        let pred = square(10, 10, 1, 1, 6, 6);
        let c = sample_correction(&pred, &truth, 10, 10, &mut rng).unwrap().unwrap();
        let p = c.point.0 * 10 + c.point.1;
        assert!(!c.positive && pred[p] && !truth[p]);
        assert!(sample_correction(&pred, &truth[..50], 10, 10, &mut rng).is_err());
    }

    #[test]
    fn correction_uses_the_largest_component() {
        // two false-negative components of sizes 1 and 4
        let mut truth = vec![false; 36];
        truth[0] = true;
        for p in [20, 21, 26, 27] {
            truth[p] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c = sample_correction(&[false; 36], &truth, 6, 6, &mut rng).unwrap().unwrap();
            assert!([20, 21, 26, 27].contains(&(c.point.0 * 6 + c.point.1)));
        }
    }

    #[test]
    fn exact_logits_give_near_zero_dice_loss() {
        let mut t = Tape::<f32>::new();
        let truth: Vec<f32> = (0..64).map(|i| ((i / 3) % 2) as f32).collect();
        let logits = t.input(NdArray::new(vec![8, 8], truth.iter().map(|&v| (2.0 * v - 1.0) * 30.0).collect()).unwrap());
        let target = t.input(NdArray::new(vec![8, 8], truth).unwrap());
        let p = t.sigmoid(logits).unwrap();
        let d = soft_dice_loss(&mut t, p, target).unwrap();
        assert!(t.value(d).data()[0].abs() < 1e-5);
    }
}

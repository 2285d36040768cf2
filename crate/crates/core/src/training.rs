//! Selective parameter optimization: trainable partitions, proposal matching,
//! the weighted segmentation loss, and an AdamW training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, soft_dice_value, softmax_rows, Graph, Var};
use crate::data::{Dataset, SegmentationSample};
use crate::error::{Error, Result};
use crate::generator::ProposalProvider;
use crate::hungarian;
use crate::model::{ForwardCtx, MiniVlm};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// SEVE projections, adapter, every visual query projection, mask embedding.
    Simo,
    /// Like `Simo` without the visual query projections.
    SeveOnly,
    /// Every visual-encoder parameter.
    Full,
    Frozen,
    /// `Simo` plus the whole text encoder.
    Lang,
    /// `Simo` with the generator also marked trainable; the generator has no
    /// parameters, so the set is the same as `Simo`.
    Gen,
}

impl PartitionMode {
    pub const ALL: [PartitionMode; 6] = [Self::Simo, Self::SeveOnly, Self::Full, Self::Frozen, Self::Lang, Self::Gen];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simo => "simo",
            Self::SeveOnly => "seve-only",
            Self::Full => "full",
            Self::Frozen => "frozen",
            Self::Lang => "lang",
            Self::Gen => "gen",
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown partition mode `{s}`")))
    }
}

/// Coarse grouping of trainable parameters, used for reporting and for the
/// "every group moved" check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    SeveProjection,
    Adapter,
    QueryProjection,
    MaskEmbedding,
    VisualOther,
    Text,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("text.") {
        ParamGroup::Text
    } else if name.starts_with("visual.adapter.") {
        ParamGroup::Adapter
    } else if name == "visual.mask_embed" {
        ParamGroup::MaskEmbedding
    } else if name.starts_with("visual.blocks.") && name.contains(".seve.") {
        ParamGroup::SeveProjection
    } else if name.starts_with("visual.blocks.") && name.contains(".attn.q.") {
        ParamGroup::QueryProjection
    } else {
        ParamGroup::VisualOther
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
}

impl ParameterPartition {
    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        self.trainable.iter().map(|n| param_group(n)).collect()
    }
}

/// Labels every model parameter trainable or frozen. `overrides` names
/// extra parameters to make trainable; unknown names are an error.
pub fn partition_parameters(model: &MiniVlm, mode: PartitionMode, overrides: &[String]) -> Result<ParameterPartition> {
    let simo = |g: ParamGroup| {
        matches!(g, ParamGroup::SeveProjection | ParamGroup::Adapter | ParamGroup::QueryProjection | ParamGroup::MaskEmbedding)
    };
    let wanted = |name: &str| {
        let g = param_group(name);
        match mode {
            PartitionMode::Simo | PartitionMode::Gen => simo(g),
            PartitionMode::SeveOnly => simo(g) && g != ParamGroup::QueryProjection,
            PartitionMode::Full => g != ParamGroup::Text,
            PartitionMode::Frozen => false,
            PartitionMode::Lang => simo(g) || g == ParamGroup::Text,
        }
    };
    let mut trainable = BTreeSet::new();
    let mut frozen = BTreeSet::new();
    for name in model.params.names() {
        if wanted(name) { &mut trainable } else { &mut frozen }.insert(name.to_string());
    }
    for name in overrides {
        if model.params.get(name).is_none() {
            return Err(Error::UnknownParameter(name.clone()));
        }
        frozen.remove(name);
        trainable.insert(name.clone());
    }
    let count = |set: &BTreeSet<String>| set.iter().map(|n| model.params.get(n).map_or(0, Matrix::len)).sum();
    Ok(ParameterPartition { trainable_scalars: count(&trainable), frozen_scalars: count(&frozen), trainable, frozen })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacBoundQuery {
    /// Natural log of the hypothesis-class size.
    pub log_hypothesis_count: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl PacBoundQuery {
    pub fn new(hypothesis_count: f64, delta: f64, epsilon: f64) -> Self {
        Self { log_hypothesis_count: hypothesis_count.ln(), delta, epsilon }
    }
}

/// Minimum sample size `ln(|H|/δ)/ε`.
pub fn pac_min_samples(q: &PacBoundQuery) -> Result<f64> {
    if !(q.delta > 0.0 && q.delta <= 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1], got {}", q.delta)));
    }
    if !(q.epsilon > 0.0 && q.epsilon <= 1.0) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 1], got {}", q.epsilon)));
    }
    if !q.log_hypothesis_count.is_finite() || q.log_hypothesis_count < 0.0 {
        return Err(Error::Domain("hypothesis count must be finite and at least 1".into()));
    }
    Ok((q.log_hypothesis_count - q.delta.ln()) / q.epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    /// CE weight of proposals matched to nothing.
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ce: 2.0, lambda_dice: 5.0, lambda_bce: 5.0, no_object_weight: 0.1 }
    }
}

pub const DICE_SMOOTH: f64 = 1.0;

/// Ground truth for one sample in loss-ready form.
#[derive(Clone, Debug)]
pub struct GtTargets {
    pub classes: Vec<usize>,
    /// `|gt| × (H·W)` in {0, 1}.
    pub masks: Matrix,
}

impl GtTargets {
    pub fn from_sample(sample: &SegmentationSample) -> Self {
        let mut masks = Matrix::zeros(sample.segments.len(), sample.height * sample.width);
        for (i, s) in sample.segments.iter().enumerate() {
            masks.row_mut(i).copy_from_slice(&s.mask.to_f64());
        }
        Self { classes: sample.segments.iter().map(|s| s.class_id).collect(), masks }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_proposals: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// `m × |gt|` cost: `λ_ce·(−log p[class]) + λ_dice·Dice + λ_bce·BCE`.
pub fn matching_cost(class_probs: &Matrix, soft_masks: &Matrix, gt: &GtTargets, w: &LossWeights) -> Matrix {
    let (m, g) = (soft_masks.rows(), gt.len());
    let mut cost = Matrix::zeros(m, g);
    for i in 0..m {
        let p = Matrix::row_vector(soft_masks.row(i));
        for j in 0..g {
            let t = Matrix::row_vector(gt.masks.row(j));
            let ce = -class_probs.get(i, gt.classes[j]).max(1e-12).ln();
            let c = w.lambda_ce * ce + w.lambda_dice * soft_dice_value(&p, &t, DICE_SMOOTH) + w.lambda_bce * bce_value(&p, &t);
            cost.set(i, j, c);
        }
    }
    cost
}

pub fn match_proposals_to_ground_truth(
    class_probs: &Matrix,
    soft_masks: &Matrix,
    gt: &GtTargets,
    weights: &LossWeights,
) -> MatchingResult {
    let cost = matching_cost(class_probs, soft_masks, gt, weights);
    let pairs = hungarian::solve(&cost);
    let used_p: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let used_g: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    MatchingResult {
        unmatched_proposals: (0..soft_masks.rows()).filter(|i| !used_p.contains(i)).collect(),
        unmatched_gt: (0..gt.len()).filter(|j| !used_g.contains(j)).collect(),
        pairs,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub bce: f64,
}

impl LossBreakdown {
    fn combine(ce: f64, dice: f64, bce: f64, w: &LossWeights) -> Self {
        Self { total: w.lambda_ce * ce + w.lambda_dice * dice + w.lambda_bce * bce, ce, dice, bce }
    }
}

/// CE targets: the matched GT class, or the no-object class `K` (last logit
/// column) at reduced weight.
fn ce_targets(m: usize, no_object: usize, matching: &MatchingResult, gt: &GtTargets, w: &LossWeights) -> (Vec<usize>, Vec<f64>) {
    let mut targets = vec![no_object; m];
    let mut weights = vec![w.no_object_weight; m];
    for &(i, j) in &matching.pairs {
        targets[i] = gt.classes[j];
        weights[i] = 1.0;
    }
    (targets, weights)
}

fn matched_rows(matching: &MatchingResult) -> (Vec<usize>, Vec<usize>) {
    matching.pairs.iter().map(|&(i, j)| (i, j)).unzip()
}

/// Scalar loss for `m × (K+1)` logits and `m × (H·W)` soft masks.
pub fn compute_loss(
    class_logits: &Matrix,
    soft_masks: &Matrix,
    gt: &GtTargets,
    matching: &MatchingResult,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if class_logits.rows() != soft_masks.rows() {
        return Err(Error::Shape("logit and mask proposal counts differ".into()));
    }
    let m = class_logits.rows();
    let mut ce = 0.0;
    if m > 0 {
        let (targets, w) = ce_targets(m, class_logits.cols() - 1, matching, gt, weights);
        let probs = softmax_rows(class_logits);
        let tw: f64 = w.iter().sum();
        if tw > 0.0 {
            ce = targets.iter().zip(&w).enumerate().map(|(i, (&t, &wi))| -wi * probs.get(i, t).ln()).sum::<f64>() / tw;
        }
    }
    let (pi, gi) = matched_rows(matching);
    let (dice, bce) = if pi.is_empty() {
        (0.0, 0.0)
    } else {
        let p = soft_masks.select_rows(&pi);
        let t = gt.masks.select_rows(&gi);
        (soft_dice_value(&p, &t, DICE_SMOOTH), bce_value(&p, &t))
    };
    Ok(LossBreakdown::combine(ce, dice, bce, weights))
}

/// The same loss on the tape. Returns the total as a `1×1` node.
pub fn loss_graph(
    g: &mut Graph,
    class_logits: Var,
    soft_masks: Var,
    gt: &GtTargets,
    matching: &MatchingResult,
    weights: &LossWeights,
) -> (Var, LossBreakdown) {
    let (m, k1) = g.value(class_logits).shape();
    let (targets, w) = ce_targets(m, k1 - 1, matching, gt, weights);
    let ce = g.cross_entropy(class_logits, &targets, &w);
    let mut total = g.scale(ce, weights.lambda_ce);
    let (pi, gi) = matched_rows(matching);
    let (mut dice_v, mut bce_v) = (0.0, 0.0);
    if !pi.is_empty() {
        let p = g.gather_rows(soft_masks, &pi);
        let t = gt.masks.select_rows(&gi);
        let dice = g.soft_dice(p, &t, DICE_SMOOTH);
        let bce = g.bce(p, &t);
        dice_v = g.scalar(dice);
        bce_v = g.scalar(bce);
        let d = g.scale(dice, weights.lambda_dice);
        let b = g.scale(bce, weights.lambda_bce);
        total = g.add(total, d);
        total = g.add(total, b);
    }
    let breakdown = LossBreakdown::combine(g.scalar(ce), dice_v, bce_v, weights);
    (total, breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub partition: PartitionMode,
    pub trainable_overrides: Vec<String>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            partition: PartitionMode::Simo,
            trainable_overrides: Vec::new(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over named tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)` for each parameter with a gradient.
    pub fn step(&mut self, params: &mut crate::model::ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let theta = params.get_mut(name).expect("gradient for a known parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            for (((t, &gi), mi), vi) in
                theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *t -= self.lr * (update + self.weight_decay * *t);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub bce: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MiniVlm,
    pub log: Vec<TrainRecord>,
    pub partition: ParameterPartition,
}

/// Per-sample forward and loss on a shared tape.
pub struct SampleLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub matching: MatchingResult,
}

/// Builds the forward graph and loss for one sample. `text` holds the
/// `(tgt_tokens, label_embeddings)` nodes shared across the batch.
pub fn sample_loss(
    model: &MiniVlm,
    ctx: &mut ForwardCtx<'_>,
    text: (Var, Var),
    sample: &SegmentationSample,
    soft_masks: &Matrix,
    weights: &LossWeights,
) -> Result<Option<SampleLoss>> {
    if soft_masks.rows() == 0 {
        return Ok(None);
    }
    let out = model.visual_forward(ctx, &sample.image, sample.height, sample.width, soft_masks, Some(text.0))?;
    let emb = out.mask_embeddings.expect("proposals present");
    let adapted = out.adapted_masks.expect("proposals present");
    let logits = model.class_logits(ctx, emb, text.1);
    let gt = GtTargets::from_sample(sample);
    let probs = softmax_rows(ctx.graph.value(logits));
    let matching = match_proposals_to_ground_truth(&probs, ctx.graph.value(adapted), &gt, weights);
    let (total, breakdown) = loss_graph(&mut ctx.graph, logits, adapted, &gt, &matching, weights);
    Ok(Some(SampleLoss { total, breakdown, matching }))
}

/// Trains `model` in place of a copy. `on_record` sees each log record as it
/// is produced.
pub fn train(
    mut model: MiniVlm,
    dataset: &Dataset,
    proposals: &ProposalProvider,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let partition = partition_parameters(&model, cfg.partition, &cfg.trainable_overrides)?;
    let text_trainable = partition.trainable.iter().any(|n| n.starts_with("text."));
    let mut optimizer = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let frozen_text = if text_trainable {
            None
        } else {
            let enc = model.encode_text_labels(&dataset.vocabulary)?;
            Some((enc.tgt_tokens.data, enc.label_embeddings))
        };
        let (record, grads) = {
            let mut ctx = ForwardCtx::new(&model.params, Some(&partition.trainable));
            let text = match &frozen_text {
                Some((tgt, emb)) => (ctx.graph.constant(tgt.clone()), ctx.graph.constant(emb.clone())),
                None => model.text_forward(&mut ctx, &dataset.vocabulary)?,
            };
            let mut totals = Vec::with_capacity(batch.len());
            let mut sum = LossBreakdown::default();
            for &idx in &batch {
                let sample = &dataset.samples[idx];
                let set = proposals.get(sample)?;
                let soft = set.soft_matrix(sample.height, sample.width);
                if let Some(l) = sample_loss(&model, &mut ctx, text, sample, &soft, &cfg.loss)? {
                    totals.push(l.total);
                    sum.total += l.breakdown.total;
                    sum.ce += l.breakdown.ce;
                    sum.dice += l.breakdown.dice;
                    sum.bce += l.breakdown.bce;
                }
            }
            let n = batch.len() as f64;
            let record = TrainRecord {
                iter,
                total: sum.total / n,
                ce: sum.ce / n,
                dice: sum.dice / n,
                bce: sum.bce / n,
                trainable_params: partition.trainable_scalars,
            };
            for (term, v) in [("ce", record.ce), ("dice", record.dice), ("bce", record.bce), ("total", record.total)] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { term, iteration: iter });
                }
            }
            let grads = if totals.is_empty() || partition.trainable.is_empty() {
                BTreeMap::new()
            } else {
                let stacked = ctx.graph.concat_rows(&totals);
                let s = ctx.graph.sum_all(stacked);
                let mean = ctx.graph.scale(s, 1.0 / n);
                ctx.graph.backward(mean).param_grads()
            };
            (record, grads)
        };
        optimizer.step(&mut model.params, &grads);
        on_record(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, log, partition })
}

pub fn write_log_jsonl(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

//! Panoptic quality, mean IoU, and oracle-substitution evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Dataset, Segment, SegmentationSample};
use crate::error::{Error, Result};
use crate::generator::{ground_truth_proposals, ProposalProvider};
use crate::model::{argmax, classify_masks, MiniVlm};
use crate::seve;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticSegment {
    pub segment_id: u32,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticPrediction {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<PanopticSegment>,
}

impl PanopticPrediction {
    /// Paints masks in descending `score` (ties keep input order); pixels
    /// already painted are never overwritten and segments left empty are
    /// dropped.
    pub fn from_scored(height: usize, width: usize, candidates: Vec<(BinaryMask, usize, f64)>) -> Self {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[b].2.total_cmp(&candidates[a].2).then(a.cmp(&b)));
        let mut taken = vec![false; height * width];
        let mut segments = Vec::new();
        for i in order {
            let (mask, class_id, _) = &candidates[i];
            let mut bits = vec![false; height * width];
            for (p, (&b, t)) in mask.bits().iter().zip(taken.iter_mut()).enumerate() {
                if b && !*t {
                    *t = true;
                    bits[p] = true;
                }
            }
            let mask = BinaryMask::from_bits(height, width, bits).expect("dimensions match");
            if !mask.is_empty() {
                segments.push(PanopticSegment { segment_id: segments.len() as u32 + 1, class_id: *class_id, mask });
            }
        }
        Self { height, width, segments }
    }

    /// Per-pixel class, `None` for unassigned pixels.
    pub fn semantic_map(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.height * self.width];
        for s in &self.segments {
            for (o, &b) in out.iter_mut().zip(s.mask.bits()) {
                if b {
                    *o = Some(s.class_id);
                }
            }
        }
        out
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; self.height * self.width];
        for s in &self.segments {
            if s.mask.height() != self.height || s.mask.width() != self.width {
                return Err(Error::Shape(format!("predicted segment {} has the wrong shape", s.segment_id)));
            }
            if s.class_id >= num_classes {
                return Err(Error::Domain(format!("predicted class {} out of range", s.class_id)));
            }
            for (t, &b) in seen.iter_mut().zip(s.mask.bits()) {
                if b && *t {
                    return Err(Error::Domain("predicted segments overlap".into()));
                }
                *t |= b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqClassStats {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PqClassStats {
    pub fn is_active(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: Vec<PqClassStats>,
}

impl PqStats {
    pub fn new(num_classes: usize) -> Self {
        Self { per_class: vec![PqClassStats::default(); num_classes] }
    }

    pub fn merge(&mut self, other: &PqStats) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.iou_sum += b.iou_sum;
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }

    fn average(&self, f: impl Fn(&PqClassStats) -> f64) -> f64 {
        let active: Vec<_> = self.per_class.iter().filter(|c| c.is_active()).collect();
        if active.is_empty() {
            0.0
        } else {
            active.iter().map(|c| f(c)).sum::<f64>() / active.len() as f64
        }
    }

    /// Mean over classes with any TP, FP or FN.
    pub fn pq(&self) -> f64 {
        self.average(PqClassStats::pq)
    }

    pub fn sq(&self) -> f64 {
        self.average(PqClassStats::sq)
    }

    pub fn rq(&self) -> f64 {
        self.average(PqClassStats::rq)
    }
}

/// Panoptic quality of one image. Ground-truth pixels outside every segment
/// are void: they are removed from IoU unions, and a prediction lying mostly
/// in void is not counted as a false positive.
pub fn compute_pq(pred: &PanopticPrediction, gt: &[Segment], num_classes: usize) -> Result<PqStats> {
    pred.validate(num_classes)?;
    let (h, w) = (pred.height, pred.width);
    let mut gt_void = vec![true; h * w];
    for s in gt {
        if s.mask.height() != h || s.mask.width() != w {
            return Err(Error::Shape(format!("ground-truth segment {} has the wrong shape", s.segment_id)));
        }
        if s.class_id >= num_classes {
            return Err(Error::Domain(format!("ground-truth class {} out of range", s.class_id)));
        }
        for (v, &b) in gt_void.iter_mut().zip(s.mask.bits()) {
            if b {
                *v = false;
            }
        }
    }
    let mut stats = PqStats::new(num_classes);
    let mut gt_matched = vec![false; gt.len()];
    let mut pred_matched = vec![false; pred.segments.len()];
    for (pi, p) in pred.segments.iter().enumerate() {
        let void_overlap = p.mask.bits().iter().zip(&gt_void).filter(|(&a, &b)| a && b).count();
        for (gi, g) in gt.iter().enumerate() {
            if g.class_id != p.class_id {
                continue;
            }
            let inter = p.mask.intersection(&g.mask);
            if inter == 0 {
                continue;
            }
            let union = p.mask.area() + g.mask.area() - inter - void_overlap;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                let c = &mut stats.per_class[g.class_id];
                c.tp += 1;
                c.iou_sum += iou;
                gt_matched[gi] = true;
                pred_matched[pi] = true;
            }
        }
    }
    for (gi, g) in gt.iter().enumerate() {
        if !gt_matched[gi] {
            stats.per_class[g.class_id].fn_ += 1;
        }
    }
    for (pi, p) in pred.segments.iter().enumerate() {
        if pred_matched[pi] {
            continue;
        }
        let void_overlap = p.mask.bits().iter().zip(&gt_void).filter(|(&a, &b)| a && b).count();
        if void_overlap as f64 / p.mask.area() as f64 > 0.5 {
            continue;
        }
        stats.per_class[p.class_id].fp += 1;
    }
    Ok(stats)
}

/// Intersection and union pixel counts per class, summed over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { intersection: vec![0; num_classes], union: vec![0; num_classes] }
    }

    /// Pixels whose ground truth is `None` are ignored.
    pub fn add(&mut self, pred: &[Option<usize>], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("semantic maps differ in size: {} vs {}", pred.len(), gt.len())));
        }
        let k = self.union.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let Some(g) = g else { continue };
            if g >= k || p.is_some_and(|p| p >= k) {
                return Err(Error::Domain("class id out of range in semantic map".into()));
            }
            self.union[g] += 1;
            match p {
                Some(p) if p == g => self.intersection[g] += 1,
                Some(p) => self.union[p] += 1,
                None => {}
            }
        }
        Ok(())
    }

    pub fn result(&self) -> MiouResult {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        MiouResult { per_class_iou, miou }
    }
}

pub fn compute_miou(pred: &[Option<usize>], gt: &[Option<usize>], num_classes: usize) -> Result<MiouResult> {
    let mut acc = MiouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.result())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    None,
    /// Generator proposals labeled with the class of their best-overlapping
    /// ground-truth segment.
    Classifier,
    /// Ground-truth masks classified by the model.
    Generator,
}

impl OracleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Classifier => "classifier",
            Self::Generator => "generator",
        }
    }
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Classifier, Self::Generator]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown oracle mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oracle: OracleMode,
    pub num_samples: usize,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Conventions the numbers depend on, recorded alongside them.
    pub conventions: Vec<String>,
}

pub const EVAL_CONVENTIONS: [&str; 4] = [
    "panoptic output painted in descending confidence; earlier paint is never overwritten",
    "oracle classifier: label = class of the max-IoU ground-truth segment, ties to the lower segment index",
    "oracle classifier: proposals with zero overlap are dropped; painting order is descending IoU",
    "ground-truth void pixels are excluded from IoU unions",
];

/// Scores model predictions on `dataset` under the given oracle mode.
pub fn evaluate(model: &MiniVlm, dataset: &Dataset, proposals: &ProposalProvider, mode: OracleMode) -> Result<EvalReport> {
    let k = dataset.num_classes();
    let text = match mode {
        OracleMode::Classifier => None,
        _ => Some(model.encode_text_labels(&dataset.vocabulary)?),
    };
    let mut pq = PqStats::new(k);
    let mut miou = MiouAccumulator::new(k);
    for sample in &dataset.samples {
        let pred = match (mode, &text) {
            (OracleMode::Classifier, _) => {
                let set = proposals.get(sample)?;
                oracle_label(sample, &set.binary_masks())
            }
            (OracleMode::Generator, Some(t)) => {
                let set = ground_truth_proposals(sample);
                let masks = set.binary_masks();
                model_label(model, sample, &set.soft_matrix(sample.height, sample.width), masks, t, false)?
            }
            (_, Some(t)) => {
                let set = proposals.get(sample)?;
                let masks = set.binary_masks();
                model_label(model, sample, &set.soft_matrix(sample.height, sample.width), masks, t, true)?
            }
            (_, None) => unreachable!("text encoded for model modes"),
        };
        pq.merge(&compute_pq(&pred, &sample.segments, k)?);
        miou.add(&pred.semantic_map(), &sample.semantic_map())?;
    }
    let m = miou.result();
    let per_class = (0..k)
        .map(|c| {
            let s = &pq.per_class[c];
            ClassMetrics {
                class_name: dataset.vocabulary.class_names()[c].clone(),
                pq: s.pq(),
                sq: s.sq(),
                rq: s.rq(),
                iou: m.per_class_iou[c],
            }
        })
        .collect();
    Ok(EvalReport {
        oracle: mode,
        num_samples: dataset.samples.len(),
        pq: pq.pq(),
        sq: pq.sq(),
        rq: pq.rq(),
        miou: m.miou,
        per_class,
        conventions: EVAL_CONVENTIONS.iter().map(|s| s.to_string()).collect(),
    })
}

fn oracle_label(sample: &SegmentationSample, masks: &[BinaryMask]) -> PanopticPrediction {
    let mut candidates = Vec::new();
    for mask in masks {
        let mut best: Option<(usize, f64)> = None;
        for (j, seg) in sample.segments.iter().enumerate() {
            let iou = mask.iou(&seg.mask);
            if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            candidates.push((mask.clone(), sample.segments[j].class_id, iou));
        }
    }
    PanopticPrediction::from_scored(sample.height, sample.width, candidates)
}

/// Classifies proposals with the model. With `use_adapted`, painted masks are
/// the adapter outputs thresholded at 0.5; otherwise the given masks.
fn model_label(
    model: &MiniVlm,
    sample: &SegmentationSample,
    soft: &Matrix,
    masks: Vec<BinaryMask>,
    text: &crate::model::TextEncoding,
    use_adapted: bool,
) -> Result<PanopticPrediction> {
    if soft.rows() == 0 {
        return Ok(PanopticPrediction { height: sample.height, width: sample.width, segments: Vec::new() });
    }
    let enc = model.encode_image_with_masks(&sample.image, sample.height, sample.width, soft, Some(&text.tgt_tokens))?;
    let cls = classify_masks(&enc.embeddings, &text.label_embeddings, model.config.logit_scale)?;
    let masks =
        if use_adapted { seve::threshold_masks(&enc.adapted_masks, sample.height, sample.width) } else { masks };
    let candidates = masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| {
            let row = cls.probabilities.row(i);
            let c = argmax(row);
            (mask, c, row[c])
        })
        .collect();
    Ok(PanopticPrediction::from_scored(sample.height, sample.width, candidates))
}

/// Fraction of ground-truth segments whose mask, fed as a proposal, is
/// assigned its own class.
pub fn mask_classification_accuracy(model: &MiniVlm, dataset: &Dataset) -> Result<f64> {
    let text = model.encode_text_labels(&dataset.vocabulary)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for sample in &dataset.samples {
        let set = ground_truth_proposals(sample);
        if set.is_empty() {
            continue;
        }
        let soft = set.soft_matrix(sample.height, sample.width);
        let enc =
            model.encode_image_with_masks(&sample.image, sample.height, sample.width, &soft, Some(&text.tgt_tokens))?;
        let cls = classify_masks(&enc.embeddings, &text.label_embeddings, model.config.logit_scale)?;
        for (pred, seg) in cls.predicted().into_iter().zip(&sample.segments) {
            correct += usize::from(pred == seg.class_id);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// One evaluated run, as written to results files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: String,
    pub report: EvalReport,
}

pub const RESULT_METRICS: [&str; 4] = ["pq", "sq", "rq", "miou"];

pub fn write_results_json(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(runs)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per (run, metric, class) plus an `all` row per (run, metric).
pub fn write_results_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut write = |rec: [&str; 4]| w.write_record(rec).map_err(|e| Error::format(path.display().to_string(), e.to_string()));
    write(["run", "metric", "class", "value"])?;
    for r in runs {
        for metric in RESULT_METRICS {
            let overall = match metric {
                "pq" => r.report.pq,
                "sq" => r.report.sq,
                "rq" => r.report.rq,
                _ => r.report.miou,
            };
            write([&r.run, metric, "all", &format!("{overall:.6}")])?;
            for c in &r.report.per_class {
                let v = match metric {
                    "pq" => Some(c.pq),
                    "sq" => Some(c.sq),
                    "rq" => Some(c.rq),
                    _ => c.iou,
                };
                let v = v.map_or_else(String::new, |v| format!("{v:.6}"));
                write([&r.run, metric, &c.class_name, &v])?;
            }
        }
    }
    drop(write);
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: u32, class: usize, mask: BinaryMask) -> Segment {
        Segment { segment_id: id, class_id: class, mask }
    }

    fn halves() -> Vec<Segment> {
        vec![
            seg(1, 0, BinaryMask::from_fn(4, 4, |y, _| y < 2)),
            seg(2, 1, BinaryMask::from_fn(4, 4, |y, _| y >= 2)),
        ]
    }

    #[test]
    fn perfect_prediction() {
        let gt = halves();
        let pred = PanopticPrediction {
            height: 4,
            width: 4,
            segments: gt
                .iter()
                .rev()
                .map(|s| PanopticSegment { segment_id: s.segment_id + 10, class_id: s.class_id, mask: s.mask.clone() })
                .collect(),
        };
        let pq = compute_pq(&pred, &gt, 2).unwrap();
        assert_eq!(pq.pq(), 1.0);
        let m = compute_miou(&pred.semantic_map(), &pred.semantic_map(), 2).unwrap();
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn no_predictions_is_zero() {
        let gt = vec![seg(1, 0, BinaryMask::full(4, 4))];
        let pred = PanopticPrediction { height: 4, width: 4, segments: vec![] };
        let pq = compute_pq(&pred, &gt, 2).unwrap();
        assert_eq!(pq.per_class[0].fn_, 1);
        assert_eq!(pq.pq(), 0.0);
    }

    #[test]
    fn overlapping_prediction_rejected() {
        let full = BinaryMask::full(2, 2);
        let pred = PanopticPrediction {
            height: 2,
            width: 2,
            segments: vec![
                PanopticSegment { segment_id: 1, class_id: 0, mask: full.clone() },
                PanopticSegment { segment_id: 2, class_id: 0, mask: full },
            ],
        };
        assert!(compute_pq(&pred, &[], 1).is_err());
    }

    #[test]
    fn disjoint_maps_give_zero_miou() {
        let pred = vec![Some(1), Some(1), Some(0), Some(0)];
        let gt = vec![Some(0), Some(0), Some(1), Some(1)];
        assert_eq!(compute_miou(&pred, &gt, 3).unwrap().miou, 0.0);
        assert!(compute_miou(&pred, &gt[..3], 3).is_err());
    }

    #[test]
    fn painting_respects_confidence() {
        let a = BinaryMask::full(2, 2);
        let b = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        let p = PanopticPrediction::from_scored(2, 2, vec![(a, 0, 0.2), (b, 1, 0.9)]);
        assert_eq!(p.semantic_map(), vec![Some(1), Some(1), Some(0), Some(0)]);
        assert_eq!(p.segments[0].class_id, 1);
    }

    #[test]
    fn oracle_labels_by_max_iou_and_drops_zero_overlap() {
        let sample = SegmentationSample {
            sample_id: "x".into(),
            height: 4,
            width: 4,
            image: vec![0.0; 48],
            segments: halves(),
        };
        let stray = BinaryMask::empty(4, 4);
        let top = BinaryMask::from_fn(4, 4, |y, x| y < 2 || (y == 2 && x == 0));
        let p = oracle_label(&sample, &[stray, top]);
        assert_eq!(p.segments.len(), 1);
        assert_eq!(p.segments[0].class_id, 0);
    }
}

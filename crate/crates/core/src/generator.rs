//! Frozen mask-proposal sources.
//!
//! The synthetic source starts from ground truth and applies seeded
//! corruption (boundary jitter, drops, splits, spurious blobs) so proposal
//! quality can be dialed without training a segmentation network. Proposals
//! never carry class labels.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Dataset, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PROPOSALS_FORMAT: &str = "fisa-prop/1";
pub const PROPOSALS_FILE: &str = "proposals.json";
pub const DEFAULT_MAX_PROPOSALS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposalSource {
    SyntheticCorrupted,
    Precomputed,
    OracleGt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposal {
    /// Row-major `H·W` values in `[0, 1]`.
    pub soft_mask: Vec<f64>,
    pub binary_mask: BinaryMask,
}

impl MaskProposal {
    pub fn from_binary(mask: BinaryMask) -> Self {
        Self { soft_mask: mask.to_f64(), binary_mask: mask }
    }

    pub fn from_soft(height: usize, width: usize, soft: Vec<f64>) -> Result<Self> {
        if soft.len() != height * width {
            return Err(Error::Shape(format!("soft mask has {} values, expected {}", soft.len(), height * width)));
        }
        if soft.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("soft mask values must lie in [0, 1]".into()));
        }
        let bits = soft.iter().map(|&v| v >= 0.5).collect();
        Ok(Self { binary_mask: BinaryMask::from_bits(height, width, bits)?, soft_mask: soft })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposalSet {
    pub proposals: Vec<MaskProposal>,
    pub source: ProposalSource,
}

impl MaskProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Soft masks stacked as `m × (H·W)`.
    pub fn soft_matrix(&self, height: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.proposals.len(), height * width);
        for (i, p) in self.proposals.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&p.soft_mask);
        }
        out
    }

    pub fn binary_masks(&self) -> Vec<BinaryMask> {
        self.proposals.iter().map(|p| p.binary_mask.clone()).collect()
    }

    pub fn truncate(&mut self, max: usize) {
        self.proposals.truncate(max);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub boundary_jitter_px: usize,
    pub drop_prob: f64,
    pub split_prob: f64,
    pub spurious_count: usize,
    pub seed: u64,
    pub max_proposals: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self::clean(0)
    }
}

impl CorruptionConfig {
    /// No corruption: proposals equal the ground-truth masks.
    pub fn clean(seed: u64) -> Self {
        Self {
            boundary_jitter_px: 0,
            drop_prob: 0.0,
            split_prob: 0.0,
            spurious_count: 0,
            seed,
            max_proposals: DEFAULT_MAX_PROPOSALS,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.boundary_jitter_px == 0 && self.drop_prob == 0.0 && self.split_prob == 0.0 && self.spurious_count == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop_prob", self.drop_prob), ("split_prob", self.split_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.max_proposals == 0 {
            return Err(Error::Config("max_proposals must be positive".into()));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seeded corruption of the ground-truth masks of `sample`.
pub fn generate_proposals(sample: &SegmentationSample, config: &CorruptionConfig) -> Result<MaskProposalSet> {
    config.validate()?;
    let (h, w) = (sample.height, sample.width);
    let source = if config.is_clean() { ProposalSource::OracleGt } else { ProposalSource::SyntheticCorrupted };
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&sample.sample_id) ^ config.seed);
    let mut masks = Vec::new();
    for seg in &sample.segments {
        if rng.gen::<f64>() < config.drop_prob {
            continue;
        }
        let mut mask = seg.mask.clone();
        if config.boundary_jitter_px > 0 {
            let j = config.boundary_jitter_px as i64;
            let amount = rng.gen_range(-j..=j);
            let jittered = morph(&mask, amount);
            // erosion may swallow thin shapes entirely
            if !jittered.is_empty() {
                mask = jittered;
            }
        }
        if rng.gen::<f64>() < config.split_prob {
            let vertical = rng.gen::<bool>();
            let (a, b) = split_at_centroid(&mask, vertical);
            masks.extend([a, b].into_iter().filter(|m| !m.is_empty()));
        } else {
            masks.push(mask);
        }
    }
    for _ in 0..config.spurious_count {
        let r = rng.gen_range(1.5..(h.min(w) as f64 / 5.0).max(2.0));
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let blob = BinaryMask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            dy * dy + dx * dx <= r * r
        });
        if !blob.is_empty() {
            masks.push(blob);
        }
    }
    masks.truncate(config.max_proposals);
    Ok(MaskProposalSet { proposals: masks.into_iter().map(MaskProposal::from_binary).collect(), source })
}

/// Ground-truth masks as proposals, in segment order.
pub fn ground_truth_proposals(sample: &SegmentationSample) -> MaskProposalSet {
    MaskProposalSet {
        proposals: sample.segments.iter().map(|s| MaskProposal::from_binary(s.mask.clone())).collect(),
        source: ProposalSource::OracleGt,
    }
}

/// Positive `amount` dilates, negative erodes, by that many 4-neighbour steps.
fn morph(mask: &BinaryMask, amount: i64) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let dilate = amount > 0;
    let mut cur = mask.clone();
    for _ in 0..amount.unsigned_abs() {
        let prev = cur.clone();
        cur = BinaryMask::from_fn(h, w, |y, x| {
            let mut neigh = [prev.get(y, x); 5];
            if y > 0 {
                neigh[1] = prev.get(y - 1, x);
            }
            if y + 1 < h {
                neigh[2] = prev.get(y + 1, x);
            }
            if x > 0 {
                neigh[3] = prev.get(y, x - 1);
            }
            if x + 1 < w {
                neigh[4] = prev.get(y, x + 1);
            }
            if dilate {
                neigh.iter().any(|&b| b)
            } else {
                neigh.iter().all(|&b| b)
            }
        });
    }
    cur
}

fn split_at_centroid(mask: &BinaryMask, vertical: bool) -> (BinaryMask, BinaryMask) {
    let (h, w) = (mask.height(), mask.width());
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                sum += if vertical { x } else { y } as f64;
                count += 1;
            }
        }
    }
    let cut = if count == 0 { 0.0 } else { sum / count as f64 };
    let side = |y: usize, x: usize| (if vertical { x } else { y }) as f64 <= cut;
    (
        BinaryMask::from_fn(h, w, |y, x| mask.get(y, x) && side(y, x)),
        BinaryMask::from_fn(h, w, |y, x| mask.get(y, x) && !side(y, x)),
    )
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    rle: Vec<u32>,
    soft: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct ProposalsFile {
    format_version: String,
    samples: BTreeMap<String, Vec<ProposalRecord>>,
}

/// Writes proposals keyed by sample id. Soft masks are stored only when
/// they differ from the binary mask.
pub fn save_proposals(
    path: &Path,
    sets: &BTreeMap<String, MaskProposalSet>,
    dims: &BTreeMap<String, (usize, usize)>,
) -> Result<()> {
    let mut samples = BTreeMap::new();
    for (id, set) in sets {
        let &(_, w) = dims.get(id).ok_or_else(|| Error::Config(format!("no dimensions for sample `{id}`")))?;
        let records = set
            .proposals
            .iter()
            .map(|p| {
                let hard = p.binary_mask.to_f64();
                let soft = (hard != p.soft_mask).then(|| p.soft_mask.chunks(w).map(<[f64]>::to_vec).collect());
                ProposalRecord { rle: p.binary_mask.to_rle(), soft }
            })
            .collect();
        samples.insert(id.clone(), records);
    }
    let file = ProposalsFile { format_version: PROPOSALS_FORMAT.into(), samples };
    fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
}

/// Reads a proposals file; every sample id must exist in `dataset`.
pub fn load_precomputed_proposals(path: &Path, dataset: &Dataset) -> Result<BTreeMap<String, MaskProposalSet>> {
    let ctx = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ProposalsFile = serde_json::from_str(&text).map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
    if file.format_version != PROPOSALS_FORMAT {
        return Err(Error::format(ctx, format!("unsupported format_version `{}`", file.format_version)));
    }
    let dims: HashMap<&str, (usize, usize)> =
        dataset.samples.iter().map(|s| (s.sample_id.as_str(), (s.height, s.width))).collect();
    let mut out = BTreeMap::new();
    for (id, records) in file.samples {
        let &(h, w) = dims
            .get(id.as_str())
            .ok_or_else(|| Error::format(ctx.clone(), format!("sample `{id}` is not in the dataset manifest")))?;
        let mut proposals = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            let binary = BinaryMask::from_rle(h, w, &r.rle)
                .map_err(|e| Error::format(ctx.clone(), format!("sample `{id}` proposal {i}: {e}")))?;
            let p = match r.soft {
                None => MaskProposal::from_binary(binary),
                Some(rows) => {
                    let flat: Vec<f64> = rows.into_iter().flatten().collect();
                    let p = MaskProposal::from_soft(h, w, flat)
                        .map_err(|e| Error::format(ctx.clone(), format!("sample `{id}` proposal {i}: {e}")))?;
                    if p.binary_mask != binary {
                        return Err(Error::format(
                            ctx.clone(),
                            format!("sample `{id}` proposal {i}: soft mask disagrees with rle"),
                        ));
                    }
                    p
                }
            };
            proposals.push(p);
        }
        out.insert(id, MaskProposalSet { proposals, source: ProposalSource::Precomputed });
    }
    Ok(out)
}

/// Read-mostly memo of generated proposals. Entries are keyed by sample id
/// and a fingerprint of the ground truth, since different datasets reuse ids.
#[derive(Debug, Default)]
pub struct ProposalCache {
    config: CorruptionConfig,
    entries: RwLock<HashMap<(String, u64), Arc<MaskProposalSet>>>,
}

fn gt_fingerprint(sample: &SegmentationSample) -> u64 {
    let mut h = DefaultHasher::new();
    (sample.height, sample.width).hash(&mut h);
    for s in &sample.segments {
        (s.segment_id, s.class_id, s.mask.to_rle()).hash(&mut h);
    }
    h.finish()
}

impl ProposalCache {
    pub fn new(config: CorruptionConfig) -> Self {
        Self { config, entries: RwLock::new(HashMap::new()) }
    }

    pub fn config(&self) -> &CorruptionConfig {
        &self.config
    }

    pub fn get(&self, sample: &SegmentationSample) -> Result<Arc<MaskProposalSet>> {
        let key = (sample.sample_id.clone(), gt_fingerprint(sample));
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let set = Arc::new(generate_proposals(sample, &self.config)?);
        let mut entries = self.entries.write().expect("cache lock");
        Ok(Arc::clone(entries.entry(key).or_insert(set)))
    }
}

/// Where training and evaluation get their proposals from.
#[derive(Debug)]
pub enum ProposalProvider {
    Generated(ProposalCache),
    Precomputed(BTreeMap<String, MaskProposalSet>),
}

impl ProposalProvider {
    pub fn generated(config: CorruptionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::Generated(ProposalCache::new(config)))
    }

    pub fn get(&self, sample: &SegmentationSample) -> Result<Arc<MaskProposalSet>> {
        match self {
            Self::Generated(cache) => cache.get(sample),
            Self::Precomputed(map) => map.get(&sample.sample_id).cloned().map(Arc::new).ok_or_else(|| {
                Error::format("proposals", format!("no precomputed proposals for sample `{}`", sample.sample_id))
            }),
        }
    }
}

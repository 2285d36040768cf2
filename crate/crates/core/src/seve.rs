//! Semantic-guided visual encoding.
//!
//! Mask tokens are refined in two steps. First they cross-attend the text
//! encoder's class tokens through a separate set of projections `g`:
//!
//! ```text
//! enriched = softmax(g_q(mask) · g_k(tgt)ᵀ / √C) · g_v(tgt)
//! ```
//!
//! and the enriched tokens then query the image tokens with the visual
//! encoder's own projections `f`, restricted to the patches each proposal
//! touches:
//!
//! ```text
//! out = softmax(f_q(enriched) · f_k(img)ᵀ / √C + bias) · f_v(img)
//! ```
//!
//! `bias[i][j]` is 0 when mask `i` covers patch `j` and [`NEG_SENTINEL`]
//! otherwise. Before the second step, proposal soft masks may be refined by
//! a residual two-convolution adapter.
//!
//! The graph-level functions are what the model uses; the matrix-level
//! functions wrap them for direct use and testing.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{BinaryMask, PatchCoverage};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Finite stand-in for −∞ in attention logits.
pub const NEG_SENTINEL: f64 = -1e9;

/// Threshold applied to adapted soft masks before rasterizing to patches.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Mask,
    Image,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub role: TokenRole,
    pub data: Matrix,
}

impl TokenSequence {
    pub fn new(role: TokenRole, data: Matrix) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::Numeric(format!("{role:?} tokens contain non-finite values")));
        }
        Ok(Self { role, data })
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }
}

/// `y = x·W + b` with `W` stored input-major (`C_in × C_out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Option<Matrix>) -> Self {
        Self { weight, bias }
    }

    pub fn identity(c: usize) -> Self {
        Self { weight: Matrix::identity(c), bias: None }
    }

    pub fn zeros(c: usize) -> Self {
        Self { weight: Matrix::zeros(c, c), bias: None }
    }

    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        Self { weight: Matrix::random_normal(c, c, std, rng), bias: Some(Matrix::random_normal(1, c, 0.1, rng)) }
    }

    fn check(&self, width: usize, what: &str) -> Result<()> {
        if self.weight.shape() != (width, width) {
            return Err(Error::Shape(format!("{what} weight is {:?}, expected {width}x{width}", self.weight.shape())));
        }
        if let Some(b) = &self.bias {
            if b.shape() != (1, width) {
                return Err(Error::Shape(format!("{what} bias is {:?}, expected 1x{width}", b.shape())));
            }
        }
        if !self.weight.is_finite() || self.bias.as_ref().is_some_and(|b| !b.is_finite()) {
            return Err(Error::Numeric(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    fn to_graph(&self, g: &mut Graph) -> LinearVars {
        LinearVars { weight: g.constant(self.weight.clone()), bias: self.bias.clone().map(|b| g.constant(b)) }
    }
}

/// Query, key and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl ProjectionWeights {
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self { query: Linear::random(c, rng), key: Linear::random(c, rng), value: Linear::random(c, rng) }
    }

    fn check(&self, width: usize) -> Result<()> {
        self.query.check(width, "query projection")?;
        self.key.check(width, "key projection")?;
        self.value.check(width, "value projection")
    }

    fn to_graph(&self, g: &mut Graph) -> ProjectionVars {
        ProjectionVars { query: self.query.to_graph(g), key: self.key.to_graph(g), value: self.value.to_graph(g) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
}

pub fn linear(g: &mut Graph, x: Var, l: &LinearVars) -> Var {
    let y = g.matmul(x, l.weight);
    match l.bias {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// `m × n` additive attention bias built from patch coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBiasMatrix {
    data: Matrix,
    degenerate_rows: Vec<usize>,
}

impl AttentionBiasMatrix {
    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Rows whose mask covers no patch at all. Every logit in such a row is
    /// shifted by the same sentinel, so softmax degrades to attention over
    /// all patches instead of producing NaN.
    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate_rows
    }

    /// Replaces degenerate rows with full coverage.
    pub fn with_full_coverage_fallback(mut self) -> Self {
        for &i in &self.degenerate_rows {
            self.data.row_mut(i).fill(0.0);
        }
        self
    }
}

pub fn build_mask_attention_bias(coverage: &PatchCoverage) -> AttentionBiasMatrix {
    let m = coverage.num_masks();
    let n = coverage.num_patches;
    let mut data = Matrix::zeros(m, n);
    let mut degenerate_rows = Vec::new();
    for (i, row) in coverage.covered.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            data.set(i, j, if c { 0.0 } else { NEG_SENTINEL });
        }
        if !row.iter().any(|&c| c) {
            degenerate_rows.push(i);
        }
    }
    AttentionBiasMatrix { data, degenerate_rows }
}

/// Single-head scaled dot-product attention of already-projected queries,
/// keys and values. Returns `(output, weights)`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>) -> (Var, Var) {
    let width = g.value(q).cols();
    let logits = g.matmul_nt(q, k);
    let logits = g.scale(logits, 1.0 / (width as f64).sqrt());
    let logits = match bias {
        Some(b) => g.add(logits, b),
        None => logits,
    };
    let weights = g.softmax_rows(logits);
    (g.matmul(weights, v), weights)
}

/// Mask tokens cross-attend the target class tokens.
pub fn semantic_information_extraction_graph(g: &mut Graph, mask: Var, tgt: Var, proj: &ProjectionVars) -> Var {
    let q = linear(g, mask, &proj.query);
    let k = linear(g, tgt, &proj.key);
    let v = linear(g, tgt, &proj.value);
    attend(g, q, k, v, None).0
}

/// Enriched mask tokens cross-attend the image tokens under the mask bias.
/// Returns `(output, weights)`.
pub fn semantic_guided_visual_extraction_graph(
    g: &mut Graph,
    enriched: Var,
    img: Var,
    bias: Var,
    proj: &ProjectionVars,
) -> (Var, Var) {
    let q = linear(g, enriched, &proj.query);
    let k = linear(g, img, &proj.key);
    let v = linear(g, img, &proj.value);
    attend(g, q, k, v, Some(bias))
}

fn validate_pair(a: &TokenSequence, b: &TokenSequence) -> Result<()> {
    if a.width() != b.width() {
        return Err(Error::Shape(format!("channel widths differ: {} vs {}", a.width(), b.width())));
    }
    for s in [a, b] {
        if !s.data.is_finite() {
            return Err(Error::Numeric(format!("{:?} tokens contain non-finite values", s.role)));
        }
    }
    Ok(())
}

pub fn semantic_information_extraction(
    mask_tokens: &TokenSequence,
    tgt_tokens: &TokenSequence,
    g_proj: &ProjectionWeights,
) -> Result<TokenSequence> {
    if tgt_tokens.count() == 0 {
        return Err(Error::EmptyVocabulary);
    }
    validate_pair(mask_tokens, tgt_tokens)?;
    g_proj.check(mask_tokens.width())?;
    let mut g = Graph::new();
    let mask = g.constant(mask_tokens.data.clone());
    let tgt = g.constant(tgt_tokens.data.clone());
    let proj = g_proj.to_graph(&mut g);
    let out = semantic_information_extraction_graph(&mut g, mask, tgt, &proj);
    TokenSequence::new(TokenRole::Mask, g.value(out).clone())
}

fn visual_extraction_impl(
    enriched: &TokenSequence,
    img_tokens: &TokenSequence,
    bias: &AttentionBiasMatrix,
    f_proj: &ProjectionWeights,
) -> Result<(Matrix, Matrix)> {
    validate_pair(enriched, img_tokens)?;
    f_proj.check(enriched.width())?;
    if bias.data.shape() != (enriched.count(), img_tokens.count()) {
        return Err(Error::Shape(format!(
            "bias is {:?}, expected {}x{}",
            bias.data.shape(),
            enriched.count(),
            img_tokens.count()
        )));
    }
    let mut g = Graph::new();
    let e = g.constant(enriched.data.clone());
    let i = g.constant(img_tokens.data.clone());
    let b = g.constant(bias.data.clone());
    let proj = f_proj.to_graph(&mut g);
    let (out, w) = semantic_guided_visual_extraction_graph(&mut g, e, i, b, &proj);
    Ok((g.value(out).clone(), g.value(w).clone()))
}

pub fn semantic_guided_visual_extraction(
    enriched: &TokenSequence,
    img_tokens: &TokenSequence,
    bias: &AttentionBiasMatrix,
    f_proj: &ProjectionWeights,
) -> Result<TokenSequence> {
    let (out, _) = visual_extraction_impl(enriched, img_tokens, bias, f_proj)?;
    TokenSequence::new(TokenRole::Mask, out)
}

/// The `m × n` softmax weights used by [`semantic_guided_visual_extraction`].
pub fn visual_attention_weights(
    enriched: &TokenSequence,
    img_tokens: &TokenSequence,
    bias: &AttentionBiasMatrix,
    f_proj: &ProjectionWeights,
) -> Result<Matrix> {
    Ok(visual_extraction_impl(enriched, img_tokens, bias, f_proj)?.1)
}

/// Two 3×3 convolutions (1→h→1 channels, padding 1) with a rectifier in
/// between, applied residually to each proposal's soft mask. Kernels are
/// stored as im2col matrices: `conv1_weight` is `9 × h` and `conv2_weight`
/// is `9h × 1`, tap-major (`(ky*3 + kx)*channels + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionAdapterParams {
    pub conv1_weight: Matrix,
    pub conv1_bias: Matrix,
    pub conv2_weight: Matrix,
    pub conv2_bias: Matrix,
}

impl DistributionAdapterParams {
    /// Random first layer, zero second layer: the adapter starts as the identity.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            conv1_weight: Matrix::random_normal(9, hidden, 1.0 / 3.0, rng),
            conv1_bias: Matrix::zeros(1, hidden),
            conv2_weight: Matrix::zeros(9 * hidden, 1),
            conv2_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.conv1_weight.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.conv1_weight.rows() == 9
            && self.conv1_bias.shape() == (1, h)
            && self.conv2_weight.shape() == (9 * h, 1)
            && self.conv2_bias.shape() == (1, 1);
        if !ok {
            return Err(Error::Shape("inconsistent distribution adapter parameter shapes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

/// `soft` is `m × (height·width)`, one proposal per row. The result is
/// clamped to `[0, 1]`.
pub fn distribution_adapter_graph(g: &mut Graph, soft: Var, height: usize, width: usize, p: &AdapterVars) -> Var {
    let m = g.value(soft).rows();
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let x = g.slice_rows(soft, i, 1);
        let x = g.reshape(x, height * width, 1);
        let cols = g.im2col3x3(x, height, width);
        let h = g.matmul(cols, p.conv1_weight);
        let h = g.add_row(h, p.conv1_bias);
        let h = g.relu(h);
        let cols = g.im2col3x3(h, height, width);
        let d = g.matmul(cols, p.conv2_weight);
        let d = g.add_row(d, p.conv2_bias);
        let d = g.reshape(d, 1, height * width);
        let base = g.slice_rows(soft, i, 1);
        rows.push(g.add(base, d));
    }
    if rows.is_empty() {
        return soft;
    }
    let out = g.concat_rows(&rows);
    g.clamp(out, 0.0, 1.0)
}

pub fn apply_distribution_adapter(
    soft_masks: &Matrix,
    height: usize,
    width: usize,
    params: &DistributionAdapterParams,
) -> Result<Matrix> {
    if soft_masks.cols() != height * width {
        return Err(Error::Shape(format!(
            "soft masks have {} pixels per proposal, expected {height}x{width}",
            soft_masks.cols()
        )));
    }
    params.check()?;
    let mut g = Graph::new();
    let x = g.constant(soft_masks.clone());
    let p = AdapterVars {
        conv1_weight: g.constant(params.conv1_weight.clone()),
        conv1_bias: g.constant(params.conv1_bias.clone()),
        conv2_weight: g.constant(params.conv2_weight.clone()),
        conv2_bias: g.constant(params.conv2_bias.clone()),
    };
    let out = distribution_adapter_graph(&mut g, x, height, width, &p);
    Ok(g.value(out).clone())
}

/// Thresholds soft masks at [`MASK_THRESHOLD`].
pub fn threshold_masks(soft: &Matrix, height: usize, width: usize) -> Vec<BinaryMask> {
    (0..soft.rows())
        .map(|i| {
            let bits = soft.row(i).iter().map(|&v| v >= MASK_THRESHOLD).collect();
            BinaryMask::from_bits(height, width, bits).expect("row length is height*width")
        })
        .collect()
}

/// Bias for thresholded masks, with empty masks widened to the full image.
pub fn bias_from_soft_masks(soft: &Matrix, height: usize, width: usize, patch_size: usize) -> Result<AttentionBiasMatrix> {
    let masks = threshold_masks(soft, height, width);
    let mut coverage = PatchCoverage::from_masks(&masks, patch_size)?;
    coverage.num_patches = (height / patch_size) * (width / patch_size);
    let bias = build_mask_attention_bias(&coverage);
    if !bias.degenerate_rows().is_empty() {
        warn!("{} mask(s) cover no patch; attending to the full image instead", bias.degenerate_rows().len());
    }
    Ok(bias.with_full_coverage_fallback())
}

/// Proposals for [`seve_forward`].
#[derive(Clone, Debug)]
pub struct ProposalInput<'a> {
    /// `m × (height·width)` soft masks in `[0, 1]`.
    pub soft_masks: &'a Matrix,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

#[derive(Clone, Debug)]
pub struct SeveOutput {
    pub tokens: TokenSequence,
    pub adapted_masks: Matrix,
    pub bias: AttentionBiasMatrix,
}

/// Adapter (optional), coverage from the thresholded masks, semantic
/// information extraction, then semantic-guided visual extraction.
#[allow(clippy::too_many_arguments)]
pub fn seve_forward(
    mask_tokens: &TokenSequence,
    img_tokens: &TokenSequence,
    tgt_tokens: &TokenSequence,
    proposals: &ProposalInput<'_>,
    f_proj: &ProjectionWeights,
    g_proj: &ProjectionWeights,
    adapter: &DistributionAdapterParams,
    adapter_enabled: bool,
) -> Result<SeveOutput> {
    if proposals.soft_masks.rows() != mask_tokens.count() {
        return Err(Error::Shape(format!(
            "{} proposals for {} mask tokens",
            proposals.soft_masks.rows(),
            mask_tokens.count()
        )));
    }
    let adapted_masks = if adapter_enabled {
        apply_distribution_adapter(proposals.soft_masks, proposals.height, proposals.width, adapter)?
    } else {
        proposals.soft_masks.clone()
    };
    let bias = bias_from_soft_masks(&adapted_masks, proposals.height, proposals.width, proposals.patch_size)?;
    let enriched = semantic_information_extraction(mask_tokens, tgt_tokens, g_proj)?;
    let tokens = semantic_guided_visual_extraction(&enriched, img_tokens, &bias, f_proj)?;
    Ok(SeveOutput { tokens, adapted_masks, bias })
}

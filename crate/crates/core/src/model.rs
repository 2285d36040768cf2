//! A miniature CLIP-style dual encoder with mask tokens.
//!
//! The visual encoder embeds `P×P` patches, runs pre-norm transformer blocks
//! over the image tokens, and carries one extra token per mask proposal.
//! Mask tokens read from image tokens but never write into them: at ordinary
//! blocks they use masked multi-head attention with the block's own
//! projections; at SEVE blocks they first attend the text class tokens and
//! then attend the masked image tokens with a single head. The final mask
//! token states are projected and L2-normalized, and classified by cosine
//! similarity against the text encoder's label embeddings.
//!
//! Parameter names are stable and used by checkpoints and by the trainable
//! partition:
//!
//! ```text
//! visual.patch_embed.{weight,bias}   visual.pos_embed   visual.mask_embed
//! visual.blocks.<l>.ln1.{gamma,beta} visual.blocks.<l>.ln2.{gamma,beta}
//! visual.blocks.<l>.attn.{q,k,v,out}.{weight,bias}
//! visual.blocks.<l>.mlp.{fc1,fc2}.{weight,bias}
//! visual.blocks.<l>.seve.{q,k,v}.{weight,bias}      (SEVE blocks only)
//! visual.adapter.{conv1,conv2}.{weight,bias}
//! visual.ln_post.{gamma,beta}        visual.proj.weight
//! text.token_embed  text.pos_embed   text.blocks.<l>.…  text.ln_final.{gamma,beta}  text.proj.weight
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::LabelVocabulary;
use crate::error::{Error, Result};
use crate::seve::{
    self, attend, linear, AdapterVars, AttentionBiasMatrix, LinearVars, ProjectionVars, TokenRole, TokenSequence,
    NEG_SENTINEL,
};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    /// Blocks whose mask-token update uses semantic-guided attention.
    pub seve_layers: Vec<usize>,
    pub adapter_enabled: bool,
    pub adapter_hidden: usize,
    pub logit_scale: f64,
    /// Fixed logit of the extra "no object" class used for unmatched proposals.
    pub no_object_logit: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            text_depth: 2,
            text_heads: 4,
            text_max_len: 32,
            seve_layers: vec![3],
            adapter_enabled: true,
            adapter_hidden: 8,
            logit_scale: 10.0,
            no_object_logit: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Mask attention only, no adapter: a frozen-classifier baseline.
    pub fn without_seve(mut self) -> Self {
        self.seve_layers.clear();
        self.adapter_enabled = false;
        self
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.text_heads == 0 || self.width % self.text_heads != 0 {
            return bad(format!("width {} not divisible by {} text heads", self.width, self.text_heads));
        }
        if let Some(&l) = self.seve_layers.iter().find(|&&l| l >= self.depth) {
            return bad(format!("SEVE layer {l} out of range for depth {}", self.depth));
        }
        if self.text_max_len < 2 {
            return bad("text_max_len must be at least 2".into());
        }
        if !(self.logit_scale >= 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale must be finite and non-negative".into());
        }
        Ok(())
    }

    fn is_seve_layer(&self, l: usize) -> bool {
        self.seve_layers.contains(&l)
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    fn expect(&self, name: &str) -> &Matrix {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// A forward pass in progress: the tape plus the parameters it reads.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    trainable: Option<&'a BTreeSet<String>>,
}

impl<'a> ForwardCtx<'a> {
    /// `trainable = None` records no parameter gradients.
    pub fn new(params: &'a ParamStore, trainable: Option<&'a BTreeSet<String>>) -> Self {
        Self { graph: Graph::new(), params, trainable }
    }

    pub fn param(&mut self, name: &str) -> Var {
        let t = self.trainable.is_some_and(|s| s.contains(name));
        self.graph.param(name, self.params.expect(name), t)
    }

    fn linear_vars(&mut self, prefix: &str) -> LinearVars {
        let weight = self.param(&format!("{prefix}.weight"));
        let bias = Some(self.param(&format!("{prefix}.bias")));
        LinearVars { weight, bias }
    }

    fn lin(&mut self, x: Var, prefix: &str) -> Var {
        let l = self.linear_vars(prefix);
        linear(&mut self.graph, x, &l)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        self.graph.layer_norm(x, gamma, beta)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.lin(x, &format!("{prefix}.fc1"));
        let h = self.graph.gelu(h);
        self.lin(h, &format!("{prefix}.fc2"))
    }

    fn projection_vars(&mut self, prefix: &str) -> ProjectionVars {
        ProjectionVars {
            query: self.linear_vars(&format!("{prefix}.q")),
            key: self.linear_vars(&format!("{prefix}.k")),
            value: self.linear_vars(&format!("{prefix}.v")),
        }
    }
}

/// Multi-head attention over already-projected `q`, `k`, `v`.
fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize) -> Var {
    if heads == 1 {
        return attend(g, q, k, v, bias).0;
    }
    let width = g.value(q).cols();
    let hd = width / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        outs.push(attend(g, qh, kh, vh, bias).0);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub tgt_tokens: TokenSequence,
    /// `K × C`, unit rows.
    pub label_embeddings: Matrix,
}

#[derive(Clone, Debug)]
pub struct MaskEncoding {
    /// `m × C`, unit rows.
    pub embeddings: Matrix,
    /// Final image token states, `n × C`.
    pub image_tokens: Matrix,
    /// Soft masks after the adapter (or unchanged when it is disabled).
    pub adapted_masks: Matrix,
}

#[derive(Clone, Debug)]
pub struct ClassificationResult {
    /// `m × K`, rows sum to one.
    pub probabilities: Matrix,
    pub embeddings: Matrix,
    pub logit_scale: f64,
}

impl ClassificationResult {
    pub fn predicted(&self) -> Vec<usize> {
        (0..self.probabilities.rows()).map(|i| argmax(self.probabilities.row(i))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Graph handles produced by [`MiniVlm::visual_forward`].
pub struct VisualVars {
    pub mask_embeddings: Option<Var>,
    pub adapted_masks: Option<Var>,
    pub image_tokens: Var,
    pub bias: Option<AttentionBiasMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniVlm {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const TEXT_VOCAB: usize = 98;
const TEXT_UNKNOWN: usize = 96;
const TEXT_EOT: usize = 97;

/// Character-level ids: printable ASCII maps to 1..=95, anything else to a
/// shared unknown id, followed by an end-of-text id.
pub fn tokenize(label: &str, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = label
        .bytes()
        .map(|b| if (32..=126).contains(&b) { (b - 31) as usize } else { TEXT_UNKNOWN })
        .take(max_len - 1)
        .collect();
    ids.push(TEXT_EOT);
    ids
}

impl MiniVlm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.width;
        let hidden = c * config.mlp_ratio;
        let patch_dim = config.patch_size * config.patch_size * 3;
        let mut p = ParamStore::default();
        let mut normal = |r: usize, cols: usize, std: f64| Matrix::random_normal(r, cols, std, &mut rng);
        let inv = |d: usize| 1.0 / (d as f64).sqrt();

        p.insert("visual.patch_embed.weight", normal(patch_dim, c, inv(patch_dim)));
        p.insert("visual.patch_embed.bias", Matrix::zeros(1, c));
        p.insert("visual.pos_embed", normal(config.num_patches(), c, 0.1));
        p.insert("visual.mask_embed", normal(1, c, 0.1));
        for l in 0..config.depth {
            let pre = format!("visual.blocks.{l}");
            insert_block(&mut p, &pre, c, hidden, &mut normal);
            if config.is_seve_layer(l) {
                for proj in ["q", "k", "v"] {
                    p.insert(format!("{pre}.seve.{proj}.weight"), normal(c, c, inv(c)));
                    p.insert(format!("{pre}.seve.{proj}.bias"), Matrix::zeros(1, c));
                }
            }
        }
        let adapter = {
            let mut arng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xada9_7e55);
            seve::DistributionAdapterParams::init(config.adapter_hidden, &mut arng)
        };
        p.insert("visual.adapter.conv1.weight", adapter.conv1_weight);
        p.insert("visual.adapter.conv1.bias", adapter.conv1_bias);
        p.insert("visual.adapter.conv2.weight", adapter.conv2_weight);
        p.insert("visual.adapter.conv2.bias", adapter.conv2_bias);
        p.insert("visual.ln_post.gamma", Matrix::filled(1, c, 1.0));
        p.insert("visual.ln_post.beta", Matrix::zeros(1, c));
        p.insert("visual.proj.weight", normal(c, c, inv(c)));

        p.insert("text.token_embed", normal(TEXT_VOCAB, c, 0.5));
        p.insert("text.pos_embed", normal(config.text_max_len, c, 0.1));
        for l in 0..config.text_depth {
            insert_block(&mut p, &format!("text.blocks.{l}"), c, hidden, &mut normal);
        }
        p.insert("text.ln_final.gamma", Matrix::filled(1, c, 1.0));
        p.insert("text.ln_final.beta", Matrix::zeros(1, c));
        p.insert("text.proj.weight", normal(c, c, inv(c)));
        Ok(Self { config, params: p })
    }

    pub fn adapter_params(&self) -> seve::DistributionAdapterParams {
        seve::DistributionAdapterParams {
            conv1_weight: self.params.expect("visual.adapter.conv1.weight").clone(),
            conv1_bias: self.params.expect("visual.adapter.conv1.bias").clone(),
            conv2_weight: self.params.expect("visual.adapter.conv2.weight").clone(),
            conv2_bias: self.params.expect("visual.adapter.conv2.bias").clone(),
        }
    }

    /// Text tower on the tape. Returns `(tgt_tokens K×C, label_embeddings K×C)`.
    pub fn text_forward(&self, ctx: &mut ForwardCtx<'_>, vocab: &LabelVocabulary) -> Result<(Var, Var)> {
        if vocab.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let cfg = &self.config;
        let mut pooled = Vec::with_capacity(vocab.len());
        for name in vocab.class_names() {
            let ids = tokenize(name, cfg.text_max_len);
            let len = ids.len();
            let table = ctx.param("text.token_embed");
            let x = ctx.graph.gather_rows(table, &ids);
            let pos = ctx.param("text.pos_embed");
            let pos = ctx.graph.slice_rows(pos, 0, len);
            let mut x = ctx.graph.add(x, pos);
            let causal = ctx.graph.constant(causal_bias(len));
            for l in 0..cfg.text_depth {
                let pre = format!("text.blocks.{l}");
                let a = ctx.layer_norm(x, &format!("{pre}.ln1"));
                let q = ctx.lin(a, &format!("{pre}.attn.q"));
                let k = ctx.lin(a, &format!("{pre}.attn.k"));
                let v = ctx.lin(a, &format!("{pre}.attn.v"));
                let att = multi_head(&mut ctx.graph, q, k, v, Some(causal), cfg.text_heads);
                let att = ctx.lin(att, &format!("{pre}.attn.out"));
                x = ctx.graph.add(x, att);
                let a = ctx.layer_norm(x, &format!("{pre}.ln2"));
                let f = ctx.mlp(a, &format!("{pre}.mlp"));
                x = ctx.graph.add(x, f);
            }
            pooled.push(ctx.graph.slice_rows(x, len - 1, 1));
        }
        let pooled = ctx.graph.concat_rows(&pooled);
        let tgt = ctx.layer_norm(pooled, "text.ln_final");
        let proj = ctx.param("text.proj.weight");
        let emb = ctx.graph.matmul(tgt, proj);
        let emb = ctx.graph.l2_normalize_rows(emb);
        Ok((tgt, emb))
    }

    pub fn encode_text_labels(&self, vocab: &LabelVocabulary) -> Result<TextEncoding> {
        let mut ctx = ForwardCtx::new(&self.params, None);
        let (tgt, emb) = self.text_forward(&mut ctx, vocab)?;
        Ok(TextEncoding {
            tgt_tokens: TokenSequence::new(TokenRole::Target, ctx.graph.value(tgt).clone())?,
            label_embeddings: ctx.graph.value(emb).clone(),
        })
    }

    /// Splits an `H×W×3` image into row-major patches, each flattened as
    /// `(dy, dx, channel)`.
    pub fn patchify(&self, image: &[f32], height: usize, width: usize) -> Result<Matrix> {
        let p = self.config.patch_size;
        if image.len() != height * width * 3 {
            return Err(Error::Shape(format!("image buffer has {} values, expected {height}x{width}x3", image.len())));
        }
        if height % p != 0 || width % p != 0 {
            return Err(Error::Shape(format!("image {height}x{width} not divisible by patch size {p}")));
        }
        let (gh, gw) = (height / p, width / p);
        let mut out = Matrix::zeros(gh * gw, p * p * 3);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((py * p + dy) * width + px * p + dx) * 3;
                        for c in 0..3 {
                            row[(dy * p + dx) * 3 + c] = image[src + c] as f64;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Visual tower on the tape. `soft_masks` is `m × (H·W)`; `tgt` is
    /// required when any SEVE layer is configured and `m > 0`.
    pub fn visual_forward(
        &self,
        ctx: &mut ForwardCtx<'_>,
        image: &[f32],
        height: usize,
        width: usize,
        soft_masks: &Matrix,
        tgt: Option<Var>,
    ) -> Result<VisualVars> {
        let cfg = &self.config;
        let patches = self.patchify(image, height, width)?;
        let m = soft_masks.rows();
        if m > 0 && soft_masks.cols() != height * width {
            return Err(Error::Shape(format!(
                "proposal masks have {} pixels, image has {}",
                soft_masks.cols(),
                height * width
            )));
        }
        let n = patches.rows();
        let patches = ctx.graph.constant(patches);
        let mut x = ctx.lin(patches, "visual.patch_embed");
        let mut pos = ctx.param("visual.pos_embed");
        let native = cfg.image_size / cfg.patch_size;
        let (gh, gw) = (height / cfg.patch_size, width / cfg.patch_size);
        if (gh, gw) != (native, native) {
            let r = ctx.graph.constant(bilinear_resize_matrix(native, native, gh, gw));
            pos = ctx.graph.matmul(r, pos);
        }
        x = ctx.graph.add(x, pos);

        let mut mask_state = None;
        let mut adapted = None;
        let mut bias_matrix = None;
        let mut bias_var = None;
        if m > 0 {
            let soft = ctx.graph.constant(soft_masks.clone());
            let a = if cfg.adapter_enabled {
                let vars = AdapterVars {
                    conv1_weight: ctx.param("visual.adapter.conv1.weight"),
                    conv1_bias: ctx.param("visual.adapter.conv1.bias"),
                    conv2_weight: ctx.param("visual.adapter.conv2.weight"),
                    conv2_bias: ctx.param("visual.adapter.conv2.bias"),
                };
                seve::distribution_adapter_graph(&mut ctx.graph, soft, height, width, &vars)
            } else {
                soft
            };
            // the discrete bias is built from values only; no gradient flows through it
            let bias = seve::bias_from_soft_masks(ctx.graph.value(a), height, width, cfg.patch_size)?;
            let averaging = coverage_average(&bias, n);
            let avg = ctx.graph.constant(averaging);
            let pos_mean = ctx.graph.matmul(avg, pos);
            let me = ctx.param("visual.mask_embed");
            mask_state = Some(ctx.graph.add_row(pos_mean, me));
            bias_var = Some(ctx.graph.constant(bias.data().clone()));
            bias_matrix = Some(bias);
            adapted = Some(a);
        }

        for l in 0..cfg.depth {
            let pre = format!("visual.blocks.{l}");
            let a = ctx.layer_norm(x, &format!("{pre}.ln1"));
            let q = ctx.lin(a, &format!("{pre}.attn.q"));
            let k = ctx.lin(a, &format!("{pre}.attn.k"));
            let v = ctx.lin(a, &format!("{pre}.attn.v"));
            let att = multi_head(&mut ctx.graph, q, k, v, None, cfg.heads);
            let att = ctx.lin(att, &format!("{pre}.attn.out"));
            let x_mid = ctx.graph.add(x, att);
            let a2 = ctx.layer_norm(x_mid, &format!("{pre}.ln2"));
            let f = ctx.mlp(a2, &format!("{pre}.mlp"));
            let x_next = ctx.graph.add(x_mid, f);

            if let (Some(u), Some(bias)) = (mask_state, bias_var) {
                let au = ctx.layer_norm(u, &format!("{pre}.ln1"));
                let u_mid = if cfg.is_seve_layer(l) {
                    let tgt = tgt.ok_or_else(|| Error::Config("SEVE layer requires target class tokens".into()))?;
                    let gp = ctx.projection_vars(&format!("{pre}.seve"));
                    let enriched = seve::semantic_information_extraction_graph(&mut ctx.graph, au, tgt, &gp);
                    let fq = ctx.linear_vars(&format!("{pre}.attn.q"));
                    let q_hat = linear(&mut ctx.graph, enriched, &fq);
                    let mo = attend(&mut ctx.graph, q_hat, k, v, Some(bias)).0;
                    let mo = ctx.lin(mo, &format!("{pre}.attn.out"));
                    ctx.graph.add(enriched, mo)
                } else {
                    let qu = ctx.lin(au, &format!("{pre}.attn.q"));
                    let mo = multi_head(&mut ctx.graph, qu, k, v, Some(bias), cfg.heads);
                    let mo = ctx.lin(mo, &format!("{pre}.attn.out"));
                    ctx.graph.add(u, mo)
                };
                let au2 = ctx.layer_norm(u_mid, &format!("{pre}.ln2"));
                let fu = ctx.mlp(au2, &format!("{pre}.mlp"));
                mask_state = Some(ctx.graph.add(u_mid, fu));
            }
            x = x_next;
        }

        let mask_embeddings = match mask_state {
            Some(u) => {
                let h = ctx.layer_norm(u, "visual.ln_post");
                let proj = ctx.param("visual.proj.weight");
                let e = ctx.graph.matmul(h, proj);
                Some(ctx.graph.l2_normalize_rows(e))
            }
            None => None,
        };
        Ok(VisualVars { mask_embeddings, adapted_masks: adapted, image_tokens: x, bias: bias_matrix })
    }

    /// `m × (K + 1)` logits: scaled cosine similarity per class plus the fixed
    /// no-object logit in the last column.
    pub fn class_logits(&self, ctx: &mut ForwardCtx<'_>, mask_embeddings: Var, label_embeddings: Var) -> Var {
        let sims = ctx.graph.matmul_nt(mask_embeddings, label_embeddings);
        let logits = ctx.graph.scale(sims, self.config.logit_scale);
        let m = ctx.graph.value(logits).rows();
        let void = ctx.graph.constant(Matrix::filled(m, 1, self.config.no_object_logit));
        ctx.graph.concat_cols(&[logits, void])
    }

    pub fn encode_image_with_masks(
        &self,
        image: &[f32],
        height: usize,
        width: usize,
        soft_masks: &Matrix,
        tgt_tokens: Option<&TokenSequence>,
    ) -> Result<MaskEncoding> {
        let mut ctx = ForwardCtx::new(&self.params, None);
        let tgt = tgt_tokens.map(|t| ctx.graph.constant(t.data.clone()));
        let out = self.visual_forward(&mut ctx, image, height, width, soft_masks, tgt)?;
        let c = self.config.width;
        Ok(MaskEncoding {
            embeddings: out.mask_embeddings.map_or_else(|| Matrix::zeros(0, c), |v| ctx.graph.value(v).clone()),
            image_tokens: ctx.graph.value(out.image_tokens).clone(),
            adapted_masks: out
                .adapted_masks
                .map_or_else(|| Matrix::zeros(0, height * width), |v| ctx.graph.value(v).clone()),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut index = BTreeMap::new();
        let mut offset = 0usize;
        let mut blob = Vec::with_capacity(self.params.scalar_count() * 8);
        for (name, m) in self.params.iter() {
            index.insert(
                name.to_string(),
                TensorEntry { shape: [m.rows(), m.cols()], dtype: "f64".into(), offset },
            );
            for v in m.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += m.len() * 8;
        }
        let header = CheckpointHeader { format: CHECKPOINT_FORMAT.into(), config: self.config.clone(), tensors: index };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(ctx, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(Error::format(ctx, "truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(ctx, format!("unsupported checkpoint format `{}`", header.format)));
        }
        let mut model = MiniVlm::new(header.config)?;
        let expected: BTreeSet<&str> = model.params.names().collect();
        let found: BTreeSet<&str> = header.tensors.keys().map(String::as_str).collect();
        if expected != found {
            return Err(Error::format(ctx, "tensor names do not match the model configuration"));
        }
        for (name, entry) in &header.tensors {
            let [r, c] = entry.shape;
            if entry.dtype != "f64" {
                return Err(Error::format(ctx, format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let start = body + entry.offset;
            let end = start + r * c * 8;
            if end > bytes.len() {
                return Err(Error::format(ctx, format!("{name}: data out of range")));
            }
            let target = model.params.get_mut(name).expect("name checked above");
            if target.shape() != (r, c) {
                return Err(Error::format(ctx, format!("{name}: shape {r}x{c} does not match the model")));
            }
            for (v, chunk) in target.data_mut().iter_mut().zip(bytes[start..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(model)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FISACKPT";
pub const CHECKPOINT_FORMAT: &str = "fisa-ckpt/1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

fn insert_block(
    p: &mut ParamStore,
    pre: &str,
    c: usize,
    hidden: usize,
    normal: &mut impl FnMut(usize, usize, f64) -> Matrix,
) {
    let inv = |d: usize| 1.0 / (d as f64).sqrt();
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{pre}.{ln}.gamma"), Matrix::filled(1, c, 1.0));
        p.insert(format!("{pre}.{ln}.beta"), Matrix::zeros(1, c));
    }
    for proj in ["q", "k", "v", "out"] {
        p.insert(format!("{pre}.attn.{proj}.weight"), normal(c, c, inv(c)));
        p.insert(format!("{pre}.attn.{proj}.bias"), Matrix::zeros(1, c));
    }
    p.insert(format!("{pre}.mlp.fc1.weight"), normal(c, hidden, inv(c)));
    p.insert(format!("{pre}.mlp.fc1.bias"), Matrix::zeros(1, hidden));
    p.insert(format!("{pre}.mlp.fc2.weight"), normal(hidden, c, inv(hidden)));
    p.insert(format!("{pre}.mlp.fc2.bias"), Matrix::zeros(1, c));
}

fn causal_bias(len: usize) -> Matrix {
    let mut b = Matrix::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            b.set(i, j, NEG_SENTINEL);
        }
    }
    b
}

/// Row `i` averages the patches admitted by bias row `i`.
fn coverage_average(bias: &AttentionBiasMatrix, n: usize) -> Matrix {
    let b = bias.data();
    let mut avg = Matrix::zeros(b.rows(), n);
    for i in 0..b.rows() {
        let count = b.row(i).iter().filter(|&&v| v == 0.0).count().max(1) as f64;
        for j in 0..n {
            if b.get(i, j) == 0.0 {
                avg.set(i, j, 1.0 / count);
            }
        }
    }
    avg
}

/// Linear map taking a row-major `src_h × src_w` grid of embeddings to a
/// `dst_h × dst_w` grid by bilinear interpolation with half-pixel centers.
pub fn bilinear_resize_matrix(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Matrix {
    let mut r = Matrix::zeros(dst_h * dst_w, src_h * src_w);
    let axis = |dst: usize, src: usize, i: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    for y in 0..dst_h {
        let (y0, y1, fy) = axis(dst_h, src_h, y);
        for x in 0..dst_w {
            let (x0, x1, fx) = axis(dst_w, src_w, x);
            let row = y * dst_w + x;
            let mut add = |sy: usize, sx: usize, w: f64| {
                let col = sy * src_w + sx;
                r.set(row, col, r.get(row, col) + w);
            };
            add(y0, x0, (1.0 - fy) * (1.0 - fx));
            add(y0, x1, (1.0 - fy) * fx);
            add(y1, x0, fy * (1.0 - fx));
            add(y1, x1, fy * fx);
        }
    }
    r
}

/// Softmax of scaled cosine similarities between mask and label embeddings.
pub fn classify_masks(
    mask_embeddings: &Matrix,
    label_embeddings: &Matrix,
    logit_scale: f64,
) -> Result<ClassificationResult> {
    if mask_embeddings.cols() != label_embeddings.cols() {
        return Err(Error::Shape("mask and label embeddings differ in width".into()));
    }
    if label_embeddings.rows() == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let normalize = |m: &Matrix, what: &str| -> Result<Matrix> {
        let mut out = m.clone();
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("{what} embedding {i} cannot be normalized")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    };
    let e = normalize(mask_embeddings, "mask")?;
    let l = normalize(label_embeddings, "label")?;
    let logits = e.matmul_nt(&l).scaled(logit_scale);
    Ok(ClassificationResult {
        probabilities: crate::autodiff::softmax_rows(&logits),
        embeddings: e,
        logit_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            depth: 2,
            heads: 2,
            text_depth: 1,
            text_heads: 2,
            seve_layers: vec![1],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tokenizer_appends_end_of_text() {
        assert_eq!(tokenize("ab", 32), vec![66, 67, TEXT_EOT]);
        assert_eq!(tokenize("abcdef", 4).len(), 4);
        assert_eq!(tokenize("é", 32)[0], TEXT_UNKNOWN);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { seve_layers: vec![4], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn label_embeddings_are_unit_and_deterministic() {
        let model = MiniVlm::new(tiny()).unwrap();
        let vocab = LabelVocabulary::new(vec!["cat".into()], vec![true]).unwrap();
        let a = model.encode_text_labels(&vocab).unwrap();
        assert_eq!(a.tgt_tokens.data.shape(), (1, 8));
        let norm = a.label_embeddings.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let b = MiniVlm::new(tiny()).unwrap().encode_text_labels(&vocab).unwrap();
        assert_eq!(a.label_embeddings, b.label_embeddings);
        let empty = LabelVocabulary::new(vec![], vec![]).unwrap();
        assert!(matches!(model.encode_text_labels(&empty), Err(Error::EmptyVocabulary)));
    }

    #[test]
    fn classification_examples() {
        let labels = Matrix::identity(3);
        let emb = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]);
        let r = classify_masks(&emb, &labels, 100.0).unwrap();
        assert!(r.probabilities.get(0, 1) > 0.99);
        let r = classify_masks(&emb, &labels, 0.0).unwrap();
        for k in 0..3 {
            assert!((r.probabilities.get(0, k) - 1.0 / 3.0).abs() < 1e-12);
        }
        let zero = Matrix::zeros(1, 3);
        assert!(matches!(classify_masks(&zero, &labels, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn bilinear_resize_identity_and_rows_sum_to_one() {
        let r = bilinear_resize_matrix(3, 3, 3, 3);
        assert_eq!(r, Matrix::identity(9));
        let r = bilinear_resize_matrix(2, 2, 5, 3);
        for i in 0..r.rows() {
            assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = MiniVlm::new(tiny()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let back = MiniVlm::load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(MiniVlm::load_checkpoint(&path), Err(Error::Format { .. })));
    }
}

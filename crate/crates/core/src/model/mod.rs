//! The prior-augmented vision transformer.
//!
//! Input sequence layout, for N patches:
//!
//! ```text
//! row 0        class token + pos[0]
//! rows 1..=N   patch embeddings + pos[1..=N]
//! row N+1      prior token, alpha * softmax(prior_logits) · W_proj  (no positional encoding)
//! ```
//!
//! The encoder is a pre-LN stack; only the final class-token row feeds the
//! classifier head.

mod params;

pub use params::Params;
pub(crate) use params::Init;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tape, Tensor, Var};
use crate::train::{Network, Sample};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How prior tokens are assigned to batch elements during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorBroadcast {
    /// Each sample gets the token built from its own prior logits.
    #[default]
    Sample,
    /// One token, built from the batch-mean prior distribution, shared by
    /// every sample in the batch.
    Batch,
}

impl std::str::FromStr for PriorBroadcast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "batch" => Ok(Self::Batch),
            other => Err(Error::Invalid(format!("prior_broadcast must be `sample` or `batch`, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub alpha: f64,
    #[serde(default)]
    pub prior_broadcast: PriorBroadcast,
}

impl PViTConfig {
    /// 28×28×1 inputs, 7×7 patches, D=64, 4 layers of 4 heads.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            image_h: 28,
            image_w: 28,
            channels: 1,
            patch_size: 7,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_dim: 128,
            num_classes,
            alpha: 0.1,
            prior_broadcast: PriorBroadcast::Sample,
        }
    }

    /// ViT-S/16-sized configuration on 224×224 RGB.
    pub fn large_scale(num_classes: usize) -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_dim: 768,
            num_classes,
            alpha: 0.1,
            prior_broadcast: PriorBroadcast::Sample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Invalid(format!("alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Class token, N patches and the prior token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

/// Splits an H×W×C image (channel-last, row-major) into N rows of
/// flattened P×P×C patches in raster order.
pub fn patchify(image: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    if image.len() != h * w * c {
        return Err(Error::Shape(format!("image has {} values, expected {h}x{w}x{c}", image.len())));
    }
    let (ph, pw) = (h / p, w / p);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for pr in 0..ph {
        for pc in 0..pw {
            for y in 0..p {
                let start = ((pr * p + y) * w + pc * p) * c;
                data.extend_from_slice(&image[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(ph * pw, dim, data)
}

// Parameter layout. The block entries repeat `depth` times after the
// embedding parameters; the final norm and head follow the blocks.
const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const CLS: usize = 2;
const POS: usize = 3;
const PRIOR_PROJ: usize = 4;
const BLOCK_START: usize = 5;
const BLOCK_LEN: usize = 16;

#[derive(Clone, Copy)]
struct BlockIdx(usize);

impl BlockIdx {
    fn ln1_g(self) -> usize { self.0 }
    fn ln1_b(self) -> usize { self.0 + 1 }
    fn wq(self) -> usize { self.0 + 2 }
    fn bq(self) -> usize { self.0 + 3 }
    fn wk(self) -> usize { self.0 + 4 }
    fn bk(self) -> usize { self.0 + 5 }
    fn wv(self) -> usize { self.0 + 6 }
    fn bv(self) -> usize { self.0 + 7 }
    fn wo(self) -> usize { self.0 + 8 }
    fn bo(self) -> usize { self.0 + 9 }
    fn ln2_g(self) -> usize { self.0 + 10 }
    fn ln2_b(self) -> usize { self.0 + 11 }
    fn fc1_w(self) -> usize { self.0 + 12 }
    fn fc1_b(self) -> usize { self.0 + 13 }
    fn fc2_w(self) -> usize { self.0 + 14 }
    fn fc2_b(self) -> usize { self.0 + 15 }
}

/// Attention weights, class representation and logits of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `attention[layer][head]` is a (N+2)×(N+2) row-stochastic matrix.
    pub attention: Vec<Vec<Tensor>>,
    /// Final normalized class-token representation Y.
    pub cls_repr: Vec<f64>,
    pub logits: Vec<f64>,
}

/// One attention matrix plus the class token's weight on the prior token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub matrix: Tensor,
    pub prior_mass: f64,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.attention
            .first()
            .and_then(|l| l.first())
            .map_or(0, |m| m.shape()[0])
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn extract_attention(&self, layer: usize, head: usize) -> Result<AttentionMap> {
        let heads = self
            .attention
            .get(layer)
            .ok_or_else(|| Error::Index(format!("layer {layer} (valid: 0..{})", self.attention.len())))?;
        let matrix = heads
            .get(head)
            .ok_or_else(|| Error::Index(format!("head {head} (valid: 0..{})", heads.len())))?
            .clone();
        let n = matrix.shape()[1];
        let prior_mass = matrix.get2(0, n - 1);
        Ok(AttentionMap { layer, head, matrix, prior_mass })
    }
}

/// Tape handles produced by one sample's forward pass.
pub struct SampleGraph {
    pub cls_repr: Var,
    pub logits: Var,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PViTModel {
    config: PViTConfig,
    params: Params,
}

impl PViTModel {
    pub fn new(config: PViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let params = Self::layout(&config, &mut init);
        Ok(Self { config, params })
    }

    fn layout(c: &PViTConfig, init: &mut Init) -> Params {
        let (d, k, m) = (c.embed_dim, c.num_classes, c.mlp_dim);
        let mut p = Params::new();
        p.push("patch_embed.weight", init.normal(vec![c.patch_dim(), d]));
        p.push("patch_embed.bias", init.zeros(vec![d]));
        p.push("cls_token", init.normal(vec![1, d]));
        p.push("pos_embed", init.normal(vec![c.num_patches() + 1, d]));
        p.push("prior_proj.weight", init.normal(vec![k, d]));
        for l in 0..c.depth {
            let pre = format!("blocks.{l}");
            p.push(format!("{pre}.ln1.gain"), init.ones(vec![d]));
            p.push(format!("{pre}.ln1.bias"), init.zeros(vec![d]));
            for proj in ["q", "k", "v", "out"] {
                p.push(format!("{pre}.attn.{proj}.weight"), init.normal(vec![d, d]));
                p.push(format!("{pre}.attn.{proj}.bias"), init.zeros(vec![d]));
            }
            p.push(format!("{pre}.ln2.gain"), init.ones(vec![d]));
            p.push(format!("{pre}.ln2.bias"), init.zeros(vec![d]));
            p.push(format!("{pre}.mlp.fc1.weight"), init.normal(vec![d, m]));
            p.push(format!("{pre}.mlp.fc1.bias"), init.zeros(vec![m]));
            p.push(format!("{pre}.mlp.fc2.weight"), init.normal(vec![m, d]));
            p.push(format!("{pre}.mlp.fc2.bias"), init.zeros(vec![d]));
        }
        p.push("final_norm.gain", init.ones(vec![d]));
        p.push("final_norm.bias", init.zeros(vec![d]));
        p.push("head.weight", init.normal(vec![d, k]));
        p.push("head.bias", init.zeros(vec![k]));
        p
    }

    pub fn config(&self) -> &PViTConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.alpha = alpha;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    /// The K×D prior projection `W_proj` (stored transposed so that a 1×K
    /// probability row multiplies it on the left).
    pub fn prior_projection(&self) -> &Tensor {
        self.params.tensor(PRIOR_PROJ)
    }

    pub fn prior_projection_mut(&mut self) -> &mut Tensor {
        self.params.tensor_mut(PRIOR_PROJ)
    }

    fn head_idx(&self) -> (usize, usize, usize, usize) {
        let base = BLOCK_START + self.config.depth * BLOCK_LEN;
        (base, base + 1, base + 2, base + 3)
    }

    fn check_prior(&self, prior_logits: &[f64]) -> Result<()> {
        if prior_logits.len() != self.config.num_classes {
            return Err(Error::Shape(format!(
                "prior logits have length {}, model expects K = {}",
                prior_logits.len(),
                self.config.num_classes
            )));
        }
        if prior_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior logits".into()));
        }
        Ok(())
    }

    /// `alpha * softmax(prior_logits) · W_proj` recorded on `tape`.
    pub fn prior_token_on(&self, tape: &mut Tape, vars: &[Var], prior_logits: &[f64], alpha: f64) -> Result<Var> {
        self.check_prior(prior_logits)?;
        let p = tape.constant(Tensor::row(prior_logits.to_vec())?);
        let q = tape.softmax(p, 1)?;
        let t = tape.matmul(q, vars[PRIOR_PROJ])?;
        Ok(tape.scale(t, alpha))
    }

    /// One token shared by a whole batch, built from the mean of the
    /// per-sample prior distributions.
    pub fn batch_prior_token_on(&self, tape: &mut Tape, vars: &[Var], priors: &[&[f64]], alpha: f64) -> Result<Var> {
        let b = priors.len();
        if b == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(b);
        for p in priors {
            self.check_prior(p)?;
            rows.push(p.to_vec());
        }
        let p = tape.constant(Tensor::from_rows(&rows)?);
        let q = tape.softmax(p, 1)?;
        let mean = tape.constant(Tensor::row(vec![1.0 / b as f64; b])?);
        let qbar = tape.matmul(mean, q)?;
        let t = tape.matmul(qbar, vars[PRIOR_PROJ])?;
        Ok(tape.scale(t, alpha))
    }

    /// The 1×D prior token for `prior_logits` at scale `alpha`.
    pub fn prior_token(&self, prior_logits: &[f64], alpha: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let t = self.prior_token_on(&mut tape, &vars, prior_logits, alpha)?;
        Ok(tape.value(t).clone())
    }

    /// Patch embeddings (N×D) for one image.
    pub fn embed_patches_on(&self, tape: &mut Tape, vars: &[Var], pixels: &[f64]) -> Result<Var> {
        let c = &self.config;
        let xp = patchify(pixels, c.image_h, c.image_w, c.channels, c.patch_size)?;
        let xp = tape.constant(xp);
        let e = tape.matmul(xp, vars[PATCH_W])?;
        tape.add_row(e, vars[PATCH_B])
    }

    /// Builds the (N+2)×D input sequence from patch embeddings and a prior token.
    pub fn assemble_sequence_on(&self, tape: &mut Tape, vars: &[Var], patch_emb: Var, prior_token: Var) -> Result<Var> {
        let n = self.config.num_patches();
        let d = self.config.embed_dim;
        if tape.value(patch_emb).shape() != [n, d] || tape.value(prior_token).shape() != [1, d] {
            return Err(Error::Shape(format!(
                "assemble_sequence: patches {:?} / prior token {:?}, expected [{n}, {d}] / [1, {d}]",
                tape.value(patch_emb).shape(),
                tape.value(prior_token).shape()
            )));
        }
        let pos0 = tape.slice_rows(vars[POS], 0, 1)?;
        let pos_rest = tape.slice_rows(vars[POS], 1, n + 1)?;
        let first = tape.add(vars[CLS], pos0)?;
        let rest = tape.add(patch_emb, pos_rest)?;
        tape.concat_rows(&[first, rest, prior_token])
    }

    /// Runs the encoder stack, the final norm on the class row and the head.
    pub fn encode_on(&self, tape: &mut Tape, vars: &[Var], seq: Var) -> Result<SampleGraph> {
        let c = &self.config;
        let expect = [c.seq_len(), c.embed_dim];
        if tape.value(seq).shape() != expect {
            return Err(Error::Shape(format!(
                "encoder input {:?}, expected {expect:?}",
                tape.value(seq).shape()
            )));
        }
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut z = seq;
        let mut attention = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let b = BlockIdx(BLOCK_START + l * BLOCK_LEN);
            let h = tape.layer_norm(z, vars[b.ln1_g()], vars[b.ln1_b()], LAYER_NORM_EPS)?;
            let q = tape.matmul(h, vars[b.wq()])?;
            let q = tape.add_row(q, vars[b.bq()])?;
            let k = tape.matmul(h, vars[b.wk()])?;
            let k = tape.add_row(k, vars[b.bk()])?;
            let v = tape.matmul(h, vars[b.wv()])?;
            let v = tape.add_row(v, vars[b.bv()])?;
            let mut heads = Vec::with_capacity(c.heads);
            let mut maps = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let a = tape.softmax(scores, 1)?;
                maps.push(a);
                heads.push(tape.matmul(a, vh)?);
            }
            attention.push(maps);
            let o = tape.concat_cols(&heads)?;
            let o = tape.matmul(o, vars[b.wo()])?;
            let o = tape.add_row(o, vars[b.bo()])?;
            let z_mid = tape.add(z, o)?;
            let h2 = tape.layer_norm(z_mid, vars[b.ln2_g()], vars[b.ln2_b()], LAYER_NORM_EPS)?;
            let m = tape.matmul(h2, vars[b.fc1_w()])?;
            let m = tape.add_row(m, vars[b.fc1_b()])?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, vars[b.fc2_w()])?;
            let m = tape.add_row(m, vars[b.fc2_b()])?;
            z = tape.add(z_mid, m)?;
        }
        let (ng, nb, hw, hb) = self.head_idx();
        let cls = tape.slice_rows(z, 0, 1)?;
        let y = tape.layer_norm(cls, vars[ng], vars[nb], LAYER_NORM_EPS)?;
        let logits = tape.matmul(y, vars[hw])?;
        let logits = tape.add_row(logits, vars[hb])?;
        Ok(SampleGraph { cls_repr: y, logits, attention })
    }

    /// Full forward for one sample with an already-built prior token.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], pixels: &[f64], prior_token: Var) -> Result<SampleGraph> {
        let e = self.embed_patches_on(tape, vars, pixels)?;
        let seq = self.assemble_sequence_on(tape, vars, e, prior_token)?;
        self.encode_on(tape, vars, seq)
    }

    /// The (N+2)×D sequence fed to the first encoder block.
    pub fn input_sequence(&self, pixels: &[f64], prior_logits: &[f64], alpha: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let token = self.prior_token_on(&mut tape, &vars, prior_logits, alpha)?;
        let e = self.embed_patches_on(&mut tape, &vars, pixels)?;
        let seq = self.assemble_sequence_on(&mut tape, &vars, e, token)?;
        Ok(tape.value(seq).clone())
    }

    /// Runs the encoder and head on a prebuilt input sequence.
    pub fn encode(&self, seq: &Tensor) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let s = tape.constant(seq.clone());
        let g = self.encode_on(&mut tape, &vars, s)?;
        Ok(Self::collect_trace(&tape, &g))
    }

    /// Forward pass at the configured alpha.
    pub fn trace(&self, pixels: &[f64], prior_logits: &[f64]) -> Result<ForwardTrace> {
        self.trace_with_alpha(pixels, prior_logits, self.config.alpha)
    }

    /// Forward pass with the prior token scaled by `alpha` instead of the
    /// configured value; weights are untouched.
    pub fn trace_with_alpha(&self, pixels: &[f64], prior_logits: &[f64], alpha: f64) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let token = self.prior_token_on(&mut tape, &vars, prior_logits, alpha)?;
        let g = self.forward_on(&mut tape, &vars, pixels, token)?;
        Ok(Self::collect_trace(&tape, &g))
    }

    pub fn logits(&self, pixels: &[f64], prior_logits: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(pixels, prior_logits)?.logits)
    }

    /// Head applied to the trace's class representation.
    pub fn classify(&self, trace: &ForwardTrace) -> Result<Vec<f64>> {
        let (_, _, hw, hb) = self.head_idx();
        let (w, b) = (self.params.tensor(hw), self.params.tensor(hb));
        let (d, k) = w.dims2()?;
        if trace.cls_repr.len() != d {
            return Err(Error::Shape(format!("class representation has length {}, expected {d}", trace.cls_repr.len())));
        }
        let mut out = b.data().to_vec();
        for (i, &y) in trace.cls_repr.iter().enumerate() {
            for j in 0..k {
                out[j] += y * w.data()[i * k + j];
            }
        }
        Ok(out)
    }

    fn collect_trace(tape: &Tape, g: &SampleGraph) -> ForwardTrace {
        ForwardTrace {
            attention: g
                .attention
                .iter()
                .map(|l| l.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
            cls_repr: tape.value(g.cls_repr).data().to_vec(),
            logits: tape.value(g.logits).data().to_vec(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::write(path, &header, self.params.iter())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path)?;
        let config: PViTConfig = serde_json::from_str(&header)
            .map_err(|e| Error::Format(format!("{}: bad model config: {e}", path.display())))?;
        let mut model = Self::new(config, 0)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        model
            .params
            .load_from(tensors)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(model)
    }
}

impl Network for PViTModel {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn batch_logits(&self, tape: &mut Tape, vars: &[Var], batch: &[Sample<'_>]) -> Result<Var> {
        let alpha = self.config.alpha;
        let shared = match self.config.prior_broadcast {
            PriorBroadcast::Batch => {
                let priors: Vec<&[f64]> = batch.iter().map(|s| s.prior).collect();
                Some(self.batch_prior_token_on(tape, vars, &priors, alpha)?)
            }
            PriorBroadcast::Sample => None,
        };
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let token = match shared {
                Some(t) => t,
                None => self.prior_token_on(tape, vars, s.prior, alpha)?,
            };
            rows.push(self.forward_on(tape, vars, s.pixels, token)?.logits);
        }
        tape.concat_rows(&rows)
    }
}

//! The two modality encoders sharing one latent space.
//!
//! The tabular encoder tokenizes each scalar descriptor with a per-feature
//! affine embed and runs a small transformer; the vision encoder is a patch
//! transformer whose attention projections carry low-rank adapters so the
//! trunk can stay frozen after its self-supervised base pretraining
//! (rotation prediction on an auxiliary corpus).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rvegen::{self, Microstructure};
use crate::util::derive_seed;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared latent dimension.
    pub d: usize,
    /// Transformer model dimension.
    pub model_dim: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub tabular_layers: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// MLP hidden width as a multiple of the model dimension.
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub freeze_base: bool,
    /// L2-normalize embeddings before losses and retrieval.
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            model_dim: 64,
            heads: 4,
            vision_layers: 4,
            tabular_layers: 2,
            patch_size: 8,
            image_size: 64,
            mlp_ratio: 2,
            lora_rank: 8,
            lora_alpha: 16.0,
            freeze_base: true,
            normalize: true,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::ConfigInvalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Tabular,
    Vision,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Tabular => "tabular",
            Modality::Vision => "vision",
        }
    }
}

/// N x d latent features with their modality tag.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub features: Tensor,
    pub modality: Modality,
    pub unit_norm: bool,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Per-feature z-score statistics, fitted on the train split only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::UnfittedNormalizer);
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Tensor {
        let dim = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(self.transform_row(r));
        }
        Tensor::new(vec![rows.len(), dim], data)
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId, // (out, in)
    pub b: ParamId, // (out,)
}

impl Linear {
    fn init(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[dout, din], 0.02, rng, trainable);
        let b = store.add_zeros(format!("{name}.b"), &[dout], trainable);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let b = g.param(store, self.b);
        g.add(y, b)
    }
}

/// Rank-r additive adapter over a frozen base projection. The effective
/// weight is W0 + (alpha/r) B A; B starts at zero so the adapted layer
/// reproduces the base exactly at initialization.
#[derive(Debug, Clone, Copy)]
pub struct LoraLayer {
    pub base: Linear,
    pub a: ParamId, // (r, in)
    pub b: ParamId, // (out, r)
    pub scale: f64,
    pub din: usize,
    pub dout: usize,
    pub rank: usize,
}

impl LoraLayer {
    fn init(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        din: usize,
        dout: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (din as f64).sqrt();
        let a = store.add_normal(format!("{name}.lora_a"), &[rank, din], std, rng, true);
        let b = store.add_zeros(format!("{name}.lora_b"), &[dout, rank], true);
        Self {
            base,
            a,
            b,
            scale: alpha / rank as f64,
            din,
            dout,
            rank,
        }
    }

    /// W0 x (+ frozen bias) + scale * B (A x).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y0 = self.base.forward(g, store, x)?;
        let a = g.param(store, self.a);
        let at = g.transpose(a)?;
        let u = g.matmul(x, at)?;
        let b = g.param(store, self.b);
        let bt = g.transpose(b)?;
        let v = g.matmul(u, bt)?;
        let v = g.scale(v, self.scale);
        g.add(y0, v)
    }

    /// Trainable parameters of the adapter: r (din + dout).
    pub fn trainable_params(&self) -> usize {
        self.rank * (self.din + self.dout)
    }
}

/// Attention projection that may or may not carry an adapter.
#[derive(Debug, Clone, Copy)]
enum Projection {
    Plain(Linear),
    Adapted(LoraLayer),
}

impl Projection {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match self {
            Projection::Plain(l) => l.forward(g, store, x),
            Projection::Adapted(l) => l.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), trainable);
        let bias = store.add_zeros(format!("{name}.b"), &[dim], trainable);
        Self { gain, bias }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    q: Projection,
    k: Projection,
    v: Projection,
    o: Projection,
    ln2: LayerNormParams,
    mlp_in: Linear,
    mlp_out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        with_lora: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dm = cfg.model_dim;
        let hidden = dm * cfg.mlp_ratio;
        let ln1 = LayerNormParams::init(store, &format!("{name}.ln1"), dm, trainable);
        let proj = |store: &mut ParamStore, rng: &mut ChaCha8Rng, which: &str| {
            let base = Linear::init(store, &format!("{name}.attn.{which}"), dm, dm, rng, trainable);
            if with_lora {
                Projection::Adapted(LoraLayer::init(
                    store,
                    &format!("{name}.attn.{which}"),
                    base,
                    dm,
                    dm,
                    cfg.lora_rank,
                    cfg.lora_alpha,
                    rng,
                ))
            } else {
                Projection::Plain(base)
            }
        };
        let q = proj(store, rng, "q");
        let k = proj(store, rng, "k");
        let v = proj(store, rng, "v");
        let o = proj(store, rng, "o");
        let ln2 = LayerNormParams::init(store, &format!("{name}.ln2"), dm, trainable);
        let mlp_in = Linear::init(store, &format!("{name}.mlp_in"), dm, hidden, rng, trainable);
        let mlp_out = Linear::init(store, &format!("{name}.mlp_out"), hidden, dm, rng, trainable);
        Self {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            mlp_in,
            mlp_out,
            heads: cfg.heads,
            head_dim: dm / cfg.heads,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.heads;
        let norm = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, norm)?;
        let k = self.k.forward(g, store, norm)?;
        let v = self.v.forward(g, store, norm)?;
        let qh = g.split_heads(q, h)?;
        let kh = g.split_heads(k, h)?;
        let vh = g.split_heads(v, h)?;
        let kt = g.transpose(kh)?;
        let scores = g.bmm(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, vh)?;
        let merged = g.merge_heads(ctx, h)?;
        let out = self.o.forward(g, store, merged)?;
        let x = g.add(x, out)?;

        let norm2 = self.ln2.forward(g, store, x)?;
        let m = self.mlp_in.forward(g, store, norm2)?;
        let m = g.gelu(m);
        let m = self.mlp_out.forward(g, store, m)?;
        g.add(x, m)
    }
}

/// Patch transformer over grayscale microstructures with a classification
/// token and learned positional embeddings.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    patch: Linear,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    head: Linear,
    with_lora: bool,
}

impl VisionEncoder {
    /// `with_lora` attaches adapters to q/k/v/o; `trunk_trainable` controls
    /// whether the base weights receive gradients (false once frozen).
    pub fn init(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        seed: u64,
        with_lora: bool,
        trunk_trainable: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7107, 0));
        let dm = cfg.model_dim;
        let patch_px = cfg.patch_size * cfg.patch_size;
        let tokens = cfg.tokens();
        let patch = Linear::init(store, "vision.patch", patch_px, dm, &mut rng, trunk_trainable);
        let pos = store.add_normal(
            "vision.pos",
            &[tokens + 1, dm],
            0.02,
            &mut rng,
            trunk_trainable,
        );
        let cls = store.add_normal("vision.cls", &[1, dm], 0.02, &mut rng, trunk_trainable);
        let blocks = (0..cfg.vision_layers)
            .map(|i| {
                Block::init(
                    store,
                    &format!("vision.block{i}"),
                    cfg,
                    with_lora,
                    trunk_trainable,
                    &mut rng,
                )
            })
            .collect();
        let ln_f = LayerNormParams::init(store, "vision.ln_f", dm, trunk_trainable);
        // The latent head is new in this model; it trains even when the
        // trunk is frozen.
        let head = Linear::init(store, "vision.head", dm, cfg.d, &mut rng, true);
        Ok(Self {
            cfg: *cfg,
            patch,
            pos,
            cls,
            blocks,
            ln_f,
            head,
            with_lora,
        })
    }

    pub fn with_lora(&self) -> bool {
        self.with_lora
    }

    pub fn lora_layers(&self) -> Vec<&LoraLayer> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o])
            .filter_map(|p| match p {
                Projection::Adapted(l) => Some(l),
                Projection::Plain(_) => None,
            })
            .collect()
    }

    /// CLS feature after the final layer norm, shape (N, model_dim).
    pub fn forward_trunk(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: NodeId,
    ) -> Result<NodeId> {
        let n = g.shape(patches)[0];
        let tokens = g.shape(patches)[1];
        if tokens != self.cfg.tokens() {
            return Err(Error::ShapeMismatch {
                op: "vision_forward",
                lhs: g.shape(patches).to_vec(),
                rhs: vec![n, self.cfg.tokens(), 0],
            });
        }
        let embedded = self.patch.forward(g, store, patches)?;
        let cls = g.param(store, self.cls);
        let cls = g.expand_rows(cls, n.max(1))?;
        let cls = if n == 0 {
            let dm = self.cfg.model_dim;
            g.leaf(Tensor::zeros(&[0, 1, dm]))
        } else {
            let dm = self.cfg.model_dim;
            g.reshape(cls, vec![n, 1, dm])
        };
        let mut x = g.concat_axis1(cls, embedded)?;
        let pos = g.param(store, self.pos);
        x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, store, x)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        let cls_out = g.slice_axis1(x, 0, 1)?;
        Ok(g.reshape(cls_out, vec![n, self.cfg.model_dim]))
    }

    /// Latent embedding, optionally unit-normalized.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: NodeId) -> Result<NodeId> {
        let trunk = self.forward_trunk(g, store, patches)?;
        let out = self.head.forward(g, store, trunk)?;
        if self.cfg.normalize {
            g.row_normalize(out)
        } else {
            Ok(out)
        }
    }

    /// Inference wrapper over a slice of images.
    pub fn encode(&self, store: &ParamStore, images: &[&Microstructure]) -> Result<EmbeddingBatch> {
        let patches = patchify(images, self.cfg.image_size, self.cfg.patch_size)?;
        let mut g = Graph::new();
        let leaf = g.leaf(patches);
        let out = self.forward(&mut g, store, leaf)?;
        Ok(EmbeddingBatch {
            features: g.value(out).clone(),
            modality: Modality::Vision,
            unit_norm: self.cfg.normalize,
        })
    }

    /// Names of every trunk tensor (the frozen part under adaptation).
    pub fn trunk_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .filter(|n| {
                n.starts_with("vision.")
                    && !n.contains(".lora_")
                    && !n.starts_with("vision.head.")
            })
            .collect()
    }

    /// Copy trunk weights from a base checkpoint and freeze them.
    pub fn load_base(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let (src, _) = checkpoint::load(path)?;
        for name in self.trunk_names(store) {
            let sid = src.lookup(&name).ok_or_else(|| {
                Error::CheckpointFormat(format!("base checkpoint missing {name}"))
            })?;
            let did = store.lookup(&name).expect("trunk name exists");
            if src.get(sid).shape() != store.get(did).shape() {
                return Err(Error::CheckpointFormat(format!(
                    "shape mismatch for {name}"
                )));
            }
            *store.get_mut(did) = src.get(sid).clone();
            store.set_trainable(did, false);
        }
        Ok(())
    }
}

/// Feature-tokenizing transformer for the scalar descriptors.
#[derive(Debug, Clone)]
pub struct TabularEncoder {
    pub cfg: EncoderConfig,
    pub features: usize,
    tok_w: ParamId, // (F, dm)
    tok_b: ParamId, // (F, dm)
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    head: Linear,
}

impl TabularEncoder {
    pub fn init(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7AB, 0));
        let dm = cfg.model_dim;
        let tok_w = store.add_normal("tab.tokenizer.w", &[features, dm], 0.02, &mut rng, true);
        let tok_b = store.add_normal("tab.tokenizer.b", &[features, dm], 0.02, &mut rng, true);
        let cls = store.add_normal("tab.cls", &[1, dm], 0.02, &mut rng, true);
        let blocks = (0..cfg.tabular_layers)
            .map(|i| Block::init(store, &format!("tab.block{i}"), cfg, false, true, &mut rng))
            .collect();
        let ln_f = LayerNormParams::init(store, "tab.ln_f", dm, true);
        let head = Linear::init(store, "tab.head", dm, cfg.d, &mut rng, true);
        Ok(Self {
            cfg: *cfg,
            features,
            tok_w,
            tok_b,
            cls,
            blocks,
            ln_f,
            head,
        })
    }

    /// `x` holds z-scored descriptor rows, shape (N, F).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(Error::ShapeMismatch {
                op: "tabular_forward",
                lhs: shape,
                rhs: vec![0, self.features],
            });
        }
        let n = shape[0];
        let f = self.features;
        let dm = self.cfg.model_dim;
        // token[n, f, :] = x[n, f] * w[f, :] + b[f, :]
        let xcol = g.reshape(x, vec![n * f, 1]);
        let ones = g.leaf(Tensor::full(&[1, dm], 1.0));
        let xrep = g.matmul(xcol, ones)?;
        let xrep = g.reshape(xrep, vec![n, f, dm]);
        let w = g.param(store, self.tok_w);
        let tokens = g.mul(xrep, w)?;
        let b = g.param(store, self.tok_b);
        let tokens = g.add(tokens, b)?;

        let cls = g.param(store, self.cls);
        let cls = if n == 0 {
            g.leaf(Tensor::zeros(&[0, 1, dm]))
        } else {
            let c = g.expand_rows(cls, n)?;
            g.reshape(c, vec![n, 1, dm])
        };
        let mut t = g.concat_axis1(cls, tokens)?;
        for block in &self.blocks {
            t = block.forward(g, store, t)?;
        }
        let t = self.ln_f.forward(g, store, t)?;
        let cls_out = g.slice_axis1(t, 0, 1)?;
        let cls_out = g.reshape(cls_out, vec![n, dm]);
        let out = self.head.forward(g, store, cls_out)?;
        if self.cfg.normalize {
            g.row_normalize(out)
        } else {
            Ok(out)
        }
    }

    /// Inference wrapper around z-scored descriptor rows.
    pub fn encode(&self, store: &ParamStore, rows_z: &Tensor) -> Result<EmbeddingBatch> {
        let mut g = Graph::new();
        let leaf = g.leaf(rows_z.clone());
        let out = self.forward(&mut g, store, leaf)?;
        Ok(EmbeddingBatch {
            features: g.value(out).clone(),
            modality: Modality::Tabular,
            unit_norm: self.cfg.normalize,
        })
    }
}

/// Flatten images into (N, tokens, patch^2) patch rows.
pub fn patchify(images: &[&Microstructure], image_size: usize, patch: usize) -> Result<Tensor> {
    let side = image_size / patch;
    let tokens = side * side;
    let p2 = patch * patch;
    let mut data = Vec::with_capacity(images.len() * tokens * p2);
    for img in images {
        let (h, w) = img.size();
        if h != image_size || w != image_size {
            return Err(Error::SizeMismatch {
                expected: (image_size, image_size),
                got: (h, w),
            });
        }
        for pi in 0..side {
            for pj in 0..side {
                for di in 0..patch {
                    for dj in 0..patch {
                        data.push(img.at(pi * patch + di, pj * patch + dj));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), tokens, p2], data))
}

/// Add a vertical sawtooth shading with the given period (used to make the
/// rotation task well-posed on otherwise isotropic microstructures: every
/// patch then carries a strong signed gradient that rotates with the
/// image).
pub fn add_brightness_ramp(img: &Microstructure, amplitude: f64) -> Microstructure {
    add_oriented_shading(img, amplitude, 8)
}

pub fn add_oriented_shading(img: &Microstructure, amplitude: f64, period: usize) -> Microstructure {
    let (h, w) = img.size();
    let p = period.max(2);
    let mut out = img.clone();
    for i in 0..h {
        let shade = amplitude * ((i % p) as f64 / (p - 1) as f64 - 0.5);
        for j in 0..w {
            let px = &mut out.pixels_mut()[i * w + j];
            *px = (*px + shade).clamp(0.0, 1.0);
        }
    }
    out
}

/// Auxiliary corpus for base pretraining; drawn from a seed stream disjoint
/// from the main dataset and shaded with a brightness ramp.
pub fn build_aux_corpus(
    count: usize,
    seed: u64,
    image_size: usize,
    ramp: f64,
) -> Result<Vec<Microstructure>> {
    let cfg = rvegen::GenConfig {
        count,
        seed: derive_seed(seed, 0xAA4C, 1),
        image_size: (image_size, image_size),
        noise: false,
        ..Default::default()
    };
    let samples = rvegen::generate_samples(&cfg)?;
    Ok(samples
        .into_iter()
        .map(|s| add_oriented_shading(&s.image, ramp, 8))
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct BasePretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the corpus held out for the accuracy report.
    pub holdout: f64,
}

impl Default for BasePretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 3e-4,
            seed: 0,
            holdout: 0.25,
        }
    }
}

/// Outcome of base pretraining: a store holding the trained trunk and the
/// held-out rotation accuracy.
#[derive(Debug)]
pub struct BasePretrainOutcome {
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub holdout_accuracy: f64,
}

/// Self-supervised rotation prediction (0/90/180/270 degrees) training of
/// the vision trunk. The trained trunk is what ORDER pretraining freezes.
pub fn pretrain_base_vision(
    aux: &[Microstructure],
    enc_cfg: &EncoderConfig,
    cfg: &BasePretrainConfig,
) -> Result<BasePretrainOutcome> {
    if aux.len() < 8 {
        return Err(Error::TooFewSamples {
            need: 8,
            got: aux.len(),
        });
    }
    let mut store = ParamStore::new();
    let encoder = VisionEncoder::init(&mut store, enc_cfg, cfg.seed, false, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xBA5E, 0));
    let rot_head = Linear::init(&mut store, "rot_head", enc_cfg.model_dim, 4, &mut rng, true);

    let n_hold = ((aux.len() as f64) * cfg.holdout).round() as usize;
    let n_train = aux.len() - n_hold;
    let mut adam = AdamState::new(cfg.lr);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE60C, epoch as u64));
        shuffle(&mut order, &mut erng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rots: Vec<usize> = chunk.iter().map(|_| erng.gen_range(0..4)).collect();
            let imgs: Vec<Microstructure> = chunk
                .iter()
                .zip(&rots)
                .map(|(&i, &r)| aux[i].rotated_quarter(r))
                .collect();
            let refs: Vec<&Microstructure> = imgs.iter().collect();
            let patches = patchify(&refs, enc_cfg.image_size, enc_cfg.patch_size)?;
            let mut g = Graph::new();
            let leaf = g.leaf(patches);
            let trunk = encoder.forward_trunk(&mut g, &store, leaf)?;
            let logits = rot_head.forward(&mut g, &store, trunk)?;
            let loss = cross_entropy(&mut g, logits, &rots)?;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &store);
            adam.step(&mut store, &pg)?;
        }
    }

    // Held-out accuracy over all four rotations of each held-out image.
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in n_train..aux.len() {
        for r in 0..4 {
            let img = aux[i].rotated_quarter(r);
            let patches = patchify(&[&img], enc_cfg.image_size, enc_cfg.patch_size)?;
            let mut g = Graph::new();
            let leaf = g.leaf(patches);
            let trunk = encoder.forward_trunk(&mut g, &store, leaf)?;
            let logits = rot_head.forward(&mut g, &store, trunk)?;
            let row = g.value(logits).row(0).to_vec();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == r {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(BasePretrainOutcome {
        store,
        encoder,
        holdout_accuracy: correct as f64 / total as f64,
    })
}

/// Mean softmax cross-entropy against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    }
    let classes = shape[1];
    let mut onehot = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + y] = 1.0;
    }
    let oh = g.leaf(onehot);
    let lse = g.log_sum_exp(logits);
    let picked = g.mul(logits, oh)?;
    let picked = g.sum_last(picked);
    let per = g.sub(lse, picked)?;
    Ok(g.mean_all(per))
}

/// Fisher-Yates with the crate's deterministic RNG.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Save trunk + head weights of a base-pretraining store.
pub fn save_base_checkpoint(path: &Path, outcome: &BasePretrainOutcome) -> Result<()> {
    let mut trunk = ParamStore::new();
    for e in outcome.store.entries() {
        if e.name.starts_with("vision.") {
            trunk.add(e.name.clone(), e.value.clone(), e.trainable);
        }
    }
    let meta = serde_json::json!({
        "kind": "vision_base",
        "holdout_accuracy": outcome.holdout_accuracy,
    });
    checkpoint::save(path, &trunk, &meta)
}

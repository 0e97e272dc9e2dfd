//! Descriptor-conditioned microstructure generation.
//!
//! Two-stage pipeline over frozen encoder features: a diffusion prior maps
//! tabular features to image-feature space (trained to predict the clean
//! feature), and a DDPM decoder synthesizes low-resolution images (trained
//! to predict the added noise). Both share one variance schedule.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{checkpoint, AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rvegen::Microstructure;
use crate::trainer::OrderModel;
use crate::util::derive_seed;
use crate::{Error, Result};

/// Noise-variance sequence shared by prior and decoder.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta schedule from `beta_min` to `beta_max` over `k_max`
    /// steps.
    pub fn linear(k_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if k_max < 2 || beta_min <= 0.0 || beta_max >= 1.0 || beta_min >= beta_max {
            return Err(Error::ConfigInvalid(format!(
                "bad schedule (k_max={k_max}, beta=[{beta_min}, {beta_max}])"
            )));
        }
        let betas: Vec<f64> = (0..k_max)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k_max - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_1000() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn k_max(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.k_max() {
            return Err(Error::TimestepOutOfRange {
                k,
                max: self.k_max(),
            });
        }
        Ok(())
    }

    /// 1-indexed accessors (k in [1, k_max]).
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// alpha_bar(0) = 1 by convention.
    pub fn alpha_bar0(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }
}

/// x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) noise.
pub fn forward_noise(
    x0: &Tensor,
    k: usize,
    schedule: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check(k)?;
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(k);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, e)| s0 * x + s1 * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data))
}

/// Sinusoidal timestep embedding.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let w = 10_000f64.powf(-(i as f64) / half as f64);
        let pos = k as f64 * w;
        out.push(pos.sin());
        out.push(pos.cos());
    }
    while out.len() < dim {
        out.push(0.0);
    }
    out
}

const TEMB_DIM: usize = 32;

/// Gelu MLP with additive residual blocks, used by both networks.
#[derive(Debug)]
pub struct ResidualMlp {
    pub store: ParamStore,
    w_in: (ParamId, ParamId),
    res: Vec<(ParamId, ParamId)>,
    w_out: (ParamId, ParamId),
    /// Zero-initialized linear shortcut from the first `skip_dims` input
    /// columns to the output (the epsilon head needs a full-rank path from
    /// the noisy input that the hidden bottleneck cannot provide).
    skip: Option<(ParamId, usize)>,
    pub din: usize,
    pub hidden: usize,
    pub dout: usize,
}

impl ResidualMlp {
    pub fn init(din: usize, hidden: usize, dout: usize, blocks: usize, seed: u64) -> Self {
        Self::init_with_skip(din, hidden, dout, blocks, None, seed)
    }

    pub fn init_with_skip(
        din: usize,
        hidden: usize,
        dout: usize,
        blocks: usize,
        skip_dims: Option<usize>,
        seed: u64,
    ) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD1FF, 0));
        let lin = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       i: usize,
                       o: usize| {
            let std = (2.0 / (i + o) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let data: Vec<f64> = (0..i * o).map(|_| normal.sample(rng)).collect();
            let w = store.add(format!("{name}.w"), Tensor::new(vec![o, i], data), true);
            let b = store.add_zeros(format!("{name}.b"), &[o], true);
            (w, b)
        };
        let w_in = lin(&mut store, &mut rng, "in", din, hidden);
        let res = (0..blocks)
            .map(|i| lin(&mut store, &mut rng, &format!("res{i}"), hidden, hidden))
            .collect();
        let w_out = lin(&mut store, &mut rng, "out", hidden, dout);
        let skip = skip_dims.map(|sd| {
            (
                store.add_zeros("skip.w", &[dout, sd], true),
                sd,
            )
        });
        Self {
            store,
            w_in,
            res,
            w_out,
            skip,
            din,
            hidden,
            dout,
        }
    }

    fn linear(
        g: &mut Graph,
        store: &ParamStore,
        (w, b): (ParamId, ParamId),
        x: NodeId,
    ) -> Result<NodeId> {
        let wn = g.param(store, w);
        let wt = g.transpose(wn)?;
        let y = g.matmul(x, wt)?;
        let bn = g.param(store, b);
        g.add(y, bn)
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if g.shape(x)[1] != self.din {
            return Err(Error::ShapeMismatch {
                op: "residual_mlp",
                lhs: g.shape(x).to_vec(),
                rhs: vec![0, self.din],
            });
        }
        let mut h = Self::linear(g, &self.store, self.w_in, x)?;
        h = g.gelu(h);
        for &blk in &self.res {
            let r = Self::linear(g, &self.store, blk, h)?;
            let r = g.gelu(r);
            h = g.add(h, r)?;
        }
        let out = Self::linear(g, &self.store, self.w_out, h)?;
        match self.skip {
            None => Ok(out),
            Some((w, sd)) => {
                let n = g.shape(x)[0];
                let cols = g.reshape(x, vec![n, self.din, 1]);
                let head = g.slice_axis1(cols, 0, sd)?;
                let head = g.reshape(head, vec![n, sd]);
                let wn = g.param(&self.store, w);
                let wt = g.transpose(wn)?;
                let sk = g.matmul(head, wt)?;
                g.add(out, sk)
            }
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone());
        let out = self.forward(&mut g, leaf)?;
        Ok(g.value(out).clone())
    }
}

/// Prior network: (noisy image feature, tabular feature, timestep) ->
/// predicted clean image feature. Conditioning is part of the input row;
/// there is no unconditional path.
#[derive(Debug)]
pub struct PriorNet {
    pub mlp: ResidualMlp,
    pub d: usize,
}

impl PriorNet {
    pub fn init(d: usize, hidden: usize, seed: u64) -> Self {
        Self {
            mlp: ResidualMlp::init(2 * d + TEMB_DIM, hidden, d, 2, seed),
            d,
        }
    }

    pub fn input_rows(&self, noisy: &[f64], cond: &[f64], k: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.mlp.din);
        row.extend_from_slice(noisy);
        row.extend_from_slice(cond);
        row.extend(time_embedding(k, TEMB_DIM));
        row
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "diffusion_prior", "d": self.d, "hidden": self.mlp.hidden,
        });
        checkpoint::save(path, &self.mlp.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path)?;
        if meta["kind"] != "diffusion_prior" {
            return Err(Error::CheckpointFormat("not a prior checkpoint".into()));
        }
        let d = meta["d"].as_u64().unwrap_or(0) as usize;
        let hidden = meta["hidden"].as_u64().unwrap_or(0) as usize;
        let mut net = Self::init(d, hidden, 0);
        checkpoint::copy_by_name(&mut net.mlp.store, &store)?;
        Ok(net)
    }
}

/// Decoder network: (noisy flattened image, image feature, timestep) ->
/// predicted noise.
#[derive(Debug)]
pub struct DecoderNet {
    pub mlp: ResidualMlp,
    pub pixels: usize,
    pub side: usize,
    pub d: usize,
}

impl DecoderNet {
    pub fn init(side: usize, d: usize, hidden: usize, seed: u64) -> Self {
        let pixels = side * side;
        Self {
            mlp: ResidualMlp::init_with_skip(
                pixels + d + TEMB_DIM,
                hidden,
                pixels,
                2,
                Some(pixels),
                seed,
            ),
            pixels,
            side,
            d,
        }
    }

    pub fn input_rows(&self, noisy: &[f64], cond: &[f64], k: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.mlp.din);
        row.extend_from_slice(noisy);
        row.extend_from_slice(cond);
        row.extend(time_embedding(k, TEMB_DIM));
        row
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "diffusion_decoder", "side": self.side, "d": self.d,
            "hidden": self.mlp.hidden,
        });
        checkpoint::save(path, &self.mlp.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path)?;
        if meta["kind"] != "diffusion_decoder" {
            return Err(Error::CheckpointFormat("not a decoder checkpoint".into()));
        }
        let side = meta["side"].as_u64().unwrap_or(0) as usize;
        let d = meta["d"].as_u64().unwrap_or(0) as usize;
        let hidden = meta["hidden"].as_u64().unwrap_or(0) as usize;
        let mut net = Self::init(side, d, hidden, 0);
        checkpoint::copy_by_name(&mut net.mlp.store, &store)?;
        Ok(net)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 200,
            batch_size: 32,
            hidden: 256,
            seed: 0,
        }
    }
}

fn standard_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Train the prior on frozen (tabular, image) feature pairs; returns the
/// net and the per-epoch loss curve.
pub fn train_prior(
    tab_feats: &Tensor,
    img_feats: &Tensor,
    schedule: &DiffusionSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<(PriorNet, Vec<f64>)> {
    if tab_feats.shape() != img_feats.shape() {
        return Err(Error::ShapeMismatch {
            op: "train_prior",
            lhs: tab_feats.shape().to_vec(),
            rhs: img_feats.shape().to_vec(),
        });
    }
    let (n, d) = (img_feats.shape()[0], img_feats.shape()[1]);
    let mut net = PriorNet::init(d, cfg.hidden, cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x9210, 0));
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        crate::encoders::shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * net.mlp.din);
            let mut clean = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                let k = rng.gen_range(1..=schedule.k_max());
                let noise = standard_noise(&mut rng, d);
                let x0 = Tensor::new(vec![d], img_feats.row(i).to_vec());
                let e = Tensor::new(vec![d], noise);
                let xk = forward_noise(&x0, k, schedule, &e)?;
                rows.extend(net.input_rows(xk.data(), tab_feats.row(i), k));
                clean.extend_from_slice(img_feats.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), net.mlp.din], rows);
            let y = Tensor::new(vec![chunk.len(), d], clean);
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let pred = net.mlp.forward(&mut g, xn)?;
            let yn = g.leaf(y);
            let loss = g.mse(pred, yn)?;
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &net.mlp.store);
            adam.step(&mut net.mlp.store, &pg)?;
        }
        curve.push(sum / batches.max(1) as f64);
    }
    Ok((net, curve))
}

/// Train the decoder to predict the added noise from ([-1, 1]-scaled noisy
/// images conditioned on their frozen image features).
pub fn train_decoder(
    images: &[&Microstructure],
    img_feats: &Tensor,
    schedule: &DiffusionSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<(DecoderNet, Vec<f64>)> {
    if images.is_empty() || images.len() != img_feats.shape()[0] {
        return Err(Error::LengthMismatch(images.len(), img_feats.shape()[0]));
    }
    let (h, w) = images[0].size();
    if h != w {
        return Err(Error::SizeMismatch {
            expected: (h, h),
            got: (h, w),
        });
    }
    let d = img_feats.shape()[1];
    let mut net = DecoderNet::init(h, d, cfg.hidden, cfg.seed);
    let pixels = net.pixels;
    // [0,1] -> [-1,1]
    let scaled: Vec<Vec<f64>> = images
        .iter()
        .map(|im| im.pixels().iter().map(|p| 2.0 * p - 1.0).collect())
        .collect();
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xDEC0, 0));
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        crate::encoders::shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * net.mlp.din);
            let mut eps = Vec::with_capacity(chunk.len() * pixels);
            for &i in chunk {
                let k = rng.gen_range(1..=schedule.k_max());
                let noise = standard_noise(&mut rng, pixels);
                let x0 = Tensor::new(vec![pixels], scaled[i].clone());
                let e = Tensor::new(vec![pixels], noise.clone());
                let xk = forward_noise(&x0, k, schedule, &e)?;
                rows.extend(net.input_rows(xk.data(), img_feats.row(i), k));
                eps.extend(noise);
            }
            let x = Tensor::new(vec![chunk.len(), net.mlp.din], rows);
            let y = Tensor::new(vec![chunk.len(), pixels], eps);
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let pred = net.mlp.forward(&mut g, xn)?;
            let yn = g.leaf(y);
            let loss = g.mse(pred, yn)?;
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &net.mlp.store);
            adam.step(&mut net.mlp.store, &pg)?;
        }
        curve.push(sum / batches.max(1) as f64);
    }
    Ok((net, curve))
}

/// Reverse diffusion in feature space. The prior predicts the clean
/// feature, converted to the standard posterior mean for each step.
pub fn sample_prior(
    prior: &PriorNet,
    cond: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let d = prior.d;
    let mut x = standard_noise(rng, d);
    for k in (1..=schedule.k_max()).rev() {
        let input = Tensor::new(vec![1, prior.mlp.din], prior.input_rows(&x, cond, k));
        let x0 = prior.mlp.predict(&input)?;
        let x0 = x0.data();
        let ab = schedule.alpha_bar(k);
        let ab_prev = schedule.alpha_bar0(k - 1);
        let beta = schedule.beta(k);
        let alpha = schedule.alpha(k);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        let noise = if k > 1 {
            standard_noise(rng, d)
        } else {
            vec![0.0; d]
        };
        for i in 0..d {
            x[i] = c0 * x0[i] + ck * x[i] + sigma * noise[i];
        }
    }
    Ok(x)
}

/// Ancestral DDPM sampling of a flattened image in [-1, 1] space.
pub fn sample_decoder(
    decoder: &DecoderNet,
    cond: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let p = decoder.pixels;
    let mut x = standard_noise(rng, p);
    for k in (1..=schedule.k_max()).rev() {
        let input = Tensor::new(vec![1, decoder.mlp.din], decoder.input_rows(&x, cond, k));
        let eps = decoder.mlp.predict(&input)?;
        let eps = eps.data();
        let ab = schedule.alpha_bar(k);
        let ab_prev = schedule.alpha_bar0(k - 1);
        let beta = schedule.beta(k);
        let alpha = schedule.alpha(k);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        let noise = if k > 1 {
            standard_noise(rng, p)
        } else {
            vec![0.0; p]
        };
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let coef = beta / (1.0 - ab).sqrt();
        for i in 0..p {
            x[i] = inv_sqrt_alpha * (x[i] - coef * eps[i]) + sigma * noise[i];
        }
    }
    Ok(x)
}

/// Full generation: descriptor -> tabular feature -> prior-sampled image
/// feature -> decoder-sampled image. Deterministic per seed; final pixels
/// clamp to [0, 1].
pub fn generate(
    descriptor_row: &[f64],
    model: &OrderModel,
    prior: &PriorNet,
    decoder: &DecoderNet,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Microstructure> {
    let ht = model.encode_descriptors(&[descriptor_row.to_vec()])?;
    let cond = ht.features.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6E4, 0));
    let hv = sample_prior(prior, &cond, schedule, &mut rng)?;
    let flat = sample_decoder(decoder, &hv, schedule, &mut rng)?;
    let pixels: Vec<f64> = flat.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    Ok(Microstructure::new(decoder.side, decoder.side, pixels))
}

/// 10 log10(1 / MSE) for pixels in [0, 1], capped at 100 dB.
pub fn psnr(a: &Microstructure, b: &Microstructure) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: vec![a.size().0, a.size().1],
            rhs: vec![b.size().0, b.size().1],
        });
    }
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

//! Frozen-feature evaluation: cross-modal retrieval with a property audit,
//! MLP property prediction (single-modality and fusion), and feature-space
//! diagnostics (sorted similarity matrices, 2-D projection).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::encoders::{shuffle, EmbeddingBatch, Normalizer};
use crate::trainer::SplitSpec;
use crate::util::derive_seed;
use crate::{Error, Result};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Ranked candidates for one query.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub query_id: u64,
    /// (candidate id, cosine score), scores non-increasing, ties broken by
    /// ascending id.
    pub ranked: Vec<(u64, f64)>,
    pub k: usize,
    pub hit: bool,
}

/// Exact cosine ranking of opposite-modality candidates.
pub fn retrieve(
    query: &[f64],
    query_id: u64,
    candidates: &EmbeddingBatch,
    candidate_ids: &[u64],
    k: usize,
) -> Result<RetrievalResult> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if candidate_ids.len() != candidates.len() {
        return Err(Error::LengthMismatch(candidate_ids.len(), candidates.len()));
    }
    let mut scored: Vec<(u64, f64)> = candidate_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, cosine(query, candidates.features.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let k = k.min(scored.len());
    let ranked: Vec<(u64, f64)> = scored[..k].to_vec();
    let hit = ranked.iter().any(|(id, _)| *id == query_id);
    Ok(RetrievalResult {
        query_id,
        ranked,
        k,
        hit,
    })
}

/// Retrieval for every query row against the opposite-modality batch.
/// Requires each query id to appear exactly once among the candidates.
pub fn retrieve_all(
    queries: &EmbeddingBatch,
    query_ids: &[u64],
    candidates: &EmbeddingBatch,
    candidate_ids: &[u64],
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    if queries.modality == candidates.modality {
        return Err(Error::Domain(
            "retrieval requires opposite modalities".into(),
        ));
    }
    for id in query_ids {
        if candidate_ids.iter().filter(|c| *c == id).count() != 1 {
            return Err(Error::MissingGroundTruth(*id));
        }
    }
    (0..queries.len())
        .map(|i| {
            retrieve(
                queries.features.row(i),
                query_ids[i],
                candidates,
                candidate_ids,
                k,
            )
        })
        .collect()
}

pub fn topk_accuracy(results: &[RetrievalResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.hit).count() as f64 / results.len() as f64
}

/// Mean absolute target gap between each query and its retrieved items.
#[derive(Debug, Clone)]
pub struct Deviation {
    /// One mean per target property.
    pub per_property: Vec<f64>,
    /// Mean across properties.
    pub aggregate: f64,
}

pub fn property_deviation(
    results: &[RetrievalResult],
    targets: &BTreeMap<u64, Vec<f64>>,
) -> Result<Deviation> {
    if results.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let m = targets
        .values()
        .next()
        .map(|v| v.len())
        .ok_or(Error::EmptyCandidates)?;
    let mut sums = vec![0.0; m];
    for r in results {
        let qy = targets
            .get(&r.query_id)
            .ok_or(Error::MissingGroundTruth(r.query_id))?;
        let mut per = vec![0.0; m];
        for (cid, _) in &r.ranked {
            let cy = targets.get(cid).ok_or(Error::MissingGroundTruth(*cid))?;
            for c in 0..m {
                per[c] += (cy[c] - qy[c]).abs();
            }
        }
        for c in 0..m {
            sums[c] += per[c] / r.ranked.len() as f64;
        }
    }
    let per_property: Vec<f64> = sums.iter().map(|s| s / results.len() as f64).collect();
    let aggregate = per_property.iter().sum::<f64>() / m as f64;
    Ok(Deviation {
        per_property,
        aggregate,
    })
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: pred.len(),
        });
    }
    let mse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: pred.len(),
        });
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorMode {
    Tabular,
    Vision,
    Fusion,
}

impl PredictorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictorMode::Tabular => "tabular",
            PredictorMode::Vision => "vision",
            PredictorMode::Fusion => "fusion",
        }
    }
}

/// Two ReLU hidden layers of shape (d, d) and a final (d, 1) head, with an
/// optional (2d, d) fusion projection in front.
#[derive(Debug)]
pub struct PredictorHead {
    store: ParamStore,
    fusion: Option<(ParamId, ParamId)>,
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    out: (ParamId, ParamId),
    pub d: usize,
}

impl PredictorHead {
    pub fn init(d: usize, fusion: bool, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9EAD, 0));
        let bound = 1.0 / (d as f64).sqrt();
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize| {
            let w = store.add_uniform(format!("{name}.w"), &[dout, din], bound, rng, true);
            let b = store.add_zeros(format!("{name}.b"), &[dout], true);
            (w, b)
        };
        let fusion = fusion.then(|| lin(&mut store, &mut rng, "proj", 2 * d, d));
        let l1 = lin(&mut store, &mut rng, "l1", d, d);
        let l2 = lin(&mut store, &mut rng, "l2", d, d);
        let out = lin(&mut store, &mut rng, "out", d, 1);
        Self {
            store,
            fusion,
            l1,
            l2,
            out,
            d,
        }
    }

    pub fn expected_width(&self) -> usize {
        if self.fusion.is_some() {
            2 * self.d
        } else {
            self.d
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
        let width = g.shape(x)[1];
        if width != self.expected_width() {
            return Err(Error::ShapeMismatch {
                op: "predictor_forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![0, self.expected_width()],
            });
        }
        let mut h = x;
        if let Some(proj) = self.fusion {
            h = Self::linear(g, &self.store, proj, h)?;
        }
        h = Self::linear(g, &self.store, self.l1, h)?;
        h = g.relu(h);
        h = Self::linear(g, &self.store, self.l2, h)?;
        h = g.relu(h);
        Self::linear(g, &self.store, self.out, h)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.leaf(features.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience on the eval split.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 100,
            batch_size: 32,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PredictorOutcome {
    pub head: PredictorHead,
    /// Test RMSE in original target units.
    pub rmse: f64,
    /// Test R^2; NaN when the test targets have zero variance.
    pub r2: f64,
    pub best_epoch: usize,
    pub epochs_ran: usize,
    /// (id, prediction, truth) on the test split, original units.
    pub predictions: Vec<(u64, f64, f64)>,
}

/// Train an MLP on frozen features with MSE on z-scored targets, early
/// stopping on the eval split (best weights restored), and report test
/// metrics in original units.
pub fn train_predictor(
    features: &Tensor,
    ids: &[u64],
    targets: &BTreeMap<u64, f64>,
    split: &SplitSpec,
    mode: PredictorMode,
    cfg: &PredictorConfig,
) -> Result<PredictorOutcome> {
    if features.shape()[0] != ids.len() {
        return Err(Error::LengthMismatch(features.shape()[0], ids.len()));
    }
    let width = features.shape()[1];
    let d = match mode {
        PredictorMode::Fusion => width / 2,
        _ => width,
    };
    let row_of: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let lookup = |id: u64| -> Result<usize> {
        row_of.get(&id).copied().ok_or(Error::MissingGroundTruth(id))
    };
    let target_of = |id: u64| -> Result<f64> {
        targets.get(&id).copied().ok_or(Error::MissingGroundTruth(id))
    };

    // z-score statistics from the predictor train split only.
    let train_targets: Vec<Vec<f64>> = split
        .train
        .iter()
        .map(|&id| target_of(id).map(|t| vec![t]))
        .collect::<Result<_>>()?;
    let tnorm = Normalizer::fit(&train_targets)?;
    let degenerate = tnorm.std[0] <= 1e-12;
    if degenerate {
        log::warn!("constant training targets; R^2 will be undefined");
    }

    let gather = |ids: &[u64]| -> Result<(Tensor, Tensor, Vec<f64>)> {
        let mut x = Vec::with_capacity(ids.len() * width);
        let mut yz = Vec::with_capacity(ids.len());
        let mut y = Vec::with_capacity(ids.len());
        for &id in ids {
            let r = lookup(id)?;
            x.extend_from_slice(features.row(r));
            let t = target_of(id)?;
            yz.push(tnorm.transform_row(&[t])[0]);
            y.push(t);
        }
        Ok((
            Tensor::new(vec![ids.len(), width], x),
            Tensor::new(vec![ids.len(), 1], yz),
            y,
        ))
    };

    let head = PredictorHead::init(d, matches!(mode, PredictorMode::Fusion), cfg.seed);
    let mut head = head;
    let mut adam = AdamState::new(cfg.lr);
    let (eval_x, eval_yz, _) = gather(&split.eval)?;

    let eval_mse = |head: &PredictorHead| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(eval_x.clone());
        let p = head.forward(&mut g, x)?;
        let t = g.leaf(eval_yz.clone());
        let m = g.mse(p, t)?;
        Ok(g.value(m).item())
    };

    let mut best = (eval_mse(&head)?, 0usize, head.store.clone());
    let mut since_best = 0usize;
    let mut epochs_ran = 0usize;

    for epoch in 0..cfg.epochs {
        epochs_ran = epoch + 1;
        let mut order = split.train.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x93d, epoch as u64));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, yz, _) = gather(chunk)?;
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let p = head.forward(&mut g, xn)?;
            let t = g.leaf(yz);
            let loss = g.mse(p, t)?;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &head.store);
            adam.step(&mut head.store, &pg)?;
        }
        let m = eval_mse(&head)?;
        if m < best.0 {
            best = (m, epoch + 1, head.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    head.store = best.2;

    let (test_x, _, test_y) = gather(&split.test)?;
    let pred_z = head.predict(&test_x)?;
    let pred: Vec<f64> = pred_z.iter().map(|z| tnorm.inverse_row(&[*z])[0]).collect();
    let rmse_v = rmse(&pred, &test_y)?;
    let r2_v = match r2(&pred, &test_y) {
        Ok(v) => v,
        Err(Error::ZeroVariance) => {
            log::warn!("test targets have zero variance; reporting R^2 = NaN");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let predictions = split
        .test
        .iter()
        .zip(pred.iter())
        .zip(test_y.iter())
        .map(|((&id, &p), &t)| (id, p, t))
        .collect();
    Ok(PredictorOutcome {
        head,
        rmse: rmse_v,
        r2: r2_v,
        best_epoch: best.1,
        epochs_ran,
        predictions,
    })
}

/// Cosine similarity matrix between two modalities with rows/columns sorted
/// by a target value. Returns the matrix and the sample order used.
pub fn similarity_matrix(
    hv: &EmbeddingBatch,
    ht: &EmbeddingBatch,
    sort_by: &[f64],
) -> Result<(Tensor, Vec<usize>)> {
    let n = hv.len();
    if ht.len() != n || sort_by.len() != n {
        return Err(Error::LengthMismatch(n, ht.len().min(sort_by.len())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sort_by[a].partial_cmp(&sort_by[b]).unwrap().then(a.cmp(&b)));
    let mut m = Tensor::zeros(&[n, n]);
    for (i, &a) in order.iter().enumerate() {
        for (j, &b) in order.iter().enumerate() {
            m.data_mut()[i * n + j] = cosine(hv.features.row(a), ht.features.row(b));
        }
    }
    Ok((m, order))
}

/// Mean similarity near the sorted diagonal (|delta rank| <= near) vs far
/// from it (|delta rank| >= far).
pub fn band_means(matrix: &Tensor, near: usize, far: usize) -> (f64, f64) {
    let n = matrix.shape()[0];
    let (mut ns, mut nc, mut fs, mut fc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            let d = i.abs_diff(j);
            if d <= near {
                ns += matrix.at(&[i, j]);
                nc += 1;
            } else if d >= far {
                fs += matrix.at(&[i, j]);
                fc += 1;
            }
        }
    }
    (ns / nc.max(1) as f64, fs / fc.max(1) as f64)
}

/// Top-2 principal components of the feature covariance.
#[derive(Debug, Clone)]
pub struct Projection2D {
    pub coords: Tensor,    // (N, 2)
    pub mean: Vec<f64>,    // (d,)
    pub basis: Vec<Vec<f64>>, // two orthonormal d-vectors
}

pub fn project_2d(features: &Tensor) -> Result<Projection2D> {
    if features.ndim() != 2 || features.shape()[0] < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: features.shape().first().copied().unwrap_or(0),
        });
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Covariance (d x d).
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let xa = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += xa * (row[b] - mean[b]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }

    // Power iteration with deflation; deterministic start vector.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for comp in 0..2usize {
        let mut v: Vec<f64> = (0..d)
            .map(|i| {
                let h = derive_seed(0x9CA, comp as u64, i as u64);
                (h as f64 / u64::MAX as f64) - 0.5
            })
            .collect();
        for _ in 0..300 {
            // Project out previous components.
            for prev in &basis {
                let dp: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dp * p;
                }
            }
            let mut w = vec![0.0; d];
            for a in 0..d {
                let va = v[a];
                if va != 0.0 {
                    for b in 0..d {
                        w[b] += cov[a * d + b] * va;
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break; // rank-deficient covariance; keep current direction
            }
            for x in w.iter_mut() {
                *x /= norm;
            }
            v = w;
        }
        for prev in &basis {
            let dp: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dp * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        basis.push(v);
    }

    let mut coords = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let row = features.row(i);
        for (c, b) in basis.iter().enumerate() {
            let proj: f64 = row
                .iter()
                .zip(&mean)
                .zip(b)
                .map(|((x, m), e)| (x - m) * e)
                .sum();
            coords.data_mut()[i * 2 + c] = proj;
        }
    }
    Ok(Projection2D {
        coords,
        mean,
        basis,
    })
}

/// `metric,task,modality,value` rows.
pub fn metrics_csv(rows: &[(String, String, String, f64)]) -> String {
    let mut out = String::from("metric,task,modality,value\n");
    for (m, t, mo, v) in rows {
        let _ = writeln!(out, "{m},{t},{mo},{v}");
    }
    out
}

#[cfg(test)]
mod tests;

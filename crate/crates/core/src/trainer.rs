//! Pretraining orchestration: splits, normalization, augmentation, the
//! epoch loop for the three training modes, and checkpointing.
//!
//! `order_dyn` combines the two objectives through the per-iteration
//! simplex program and is the only mode that reads the eval split during
//! pretraining; `order_alpha` uses a fixed weight; `cmcl` trains on the
//! alignment loss alone (the ordinal loss is logged but never
//! differentiated).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{checkpoint, AdamState, Graph, NodeId, ParamStore, Tensor};
use crate::encoders::{
    patchify, shuffle, EmbeddingBatch, EncoderConfig, Modality, Normalizer, TabularEncoder,
    VisionEncoder,
};
use crate::losses::{self, LossConfig};
use crate::pareto::{self, ParetoConfig};
use crate::rvegen::{Microstructure, SamplePair};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Frozen split membership, persisted so every downstream task reuses it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub eval: Vec<u64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn all_ids(&self) -> BTreeSet<u64> {
        self.train
            .iter()
            .chain(&self.test)
            .chain(&self.eval)
            .copied()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("split,id\n");
        for (name, ids) in [("train", &self.train), ("test", &self.test), ("eval", &self.eval)] {
            for id in ids {
                let _ = writeln!(out, "{name},{id}");
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut spec = SplitSpec {
            train: vec![],
            test: vec![],
            eval: vec![],
            seed,
        };
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (name, id) = line
                .split_once(',')
                .ok_or_else(|| Error::Domain(format!("bad split row {line}")))?;
            let id: u64 = id
                .parse()
                .map_err(|_| Error::Domain(format!("bad split id {id}")))?;
            match name {
                "train" => spec.train.push(id),
                "test" => spec.test.push(id),
                "eval" => spec.eval.push(id),
                _ => return Err(Error::Domain(format!("bad split name {name}"))),
            }
        }
        Ok(spec)
    }
}

/// 70 / 15 / 15 split; fractional remainders go to train.
pub fn split_dataset(ids: &[u64], seed: u64) -> Result<SplitSpec> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::TooFewSamples { need: 10, got: n });
    }
    let mut sorted: Vec<u64> = ids.to_vec();
    sorted.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x59117, 0));
    shuffle(&mut sorted, &mut rng);
    let n_test = (0.15 * n as f64).floor() as usize;
    let n_eval = (0.15 * n as f64).floor() as usize;
    let n_train = n - n_test - n_eval;
    Ok(SplitSpec {
        train: sorted[..n_train].to_vec(),
        test: sorted[n_train..n_train + n_test].to_vec(),
        eval: sorted[n_train + n_test..].to_vec(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    OrderDyn,
    OrderAlpha(f64),
    Cmcl,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::OrderDyn => "order_dyn",
            TrainMode::OrderAlpha(_) => "order_alpha",
            TrainMode::Cmcl => "cmcl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    /// Per-axis flip probability, train images only.
    pub flip_prob: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub pareto: ParetoConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 3e-4,
            batch_size: 32,
            mode: TrainMode::OrderDyn,
            flip_prob: 0.1,
            seed: 0,
            loss: LossConfig::default(),
            pareto: ParetoConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

/// Both encoders plus the normalization state they were trained with.
#[derive(Debug)]
pub struct OrderModel {
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub tabular: TabularEncoder,
    pub desc_norm: Normalizer,
    pub target_norm: Normalizer,
    pub cfg: EncoderConfig,
}

pub const DESCRIPTOR_FEATURES: usize = 3;

impl OrderModel {
    /// Fresh model; normalizer statistics come from the train split only.
    pub fn init(
        dataset: &[SamplePair],
        split: &SplitSpec,
        cfg: &EncoderConfig,
        seed: u64,
        base_checkpoint: Option<&Path>,
    ) -> Result<OrderModel> {
        let by_id = index_by_id(dataset);
        let train_rows: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|id| sample(&by_id, *id).map(|s| s.descriptor.features().to_vec()))
            .collect::<Result<_>>()?;
        let target_rows: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|id| sample(&by_id, *id).map(|s| s.targets.as_array().to_vec()))
            .collect::<Result<_>>()?;
        let desc_norm = Normalizer::fit(&train_rows)?;
        let target_norm = Normalizer::fit(&target_rows)?;

        let mut store = ParamStore::new();
        let with_lora = cfg.freeze_base;
        let vision = VisionEncoder::init(&mut store, cfg, derive_seed(seed, 0x111, 0), with_lora, !cfg.freeze_base)?;
        let tabular = TabularEncoder::init(
            &mut store,
            cfg,
            DESCRIPTOR_FEATURES,
            derive_seed(seed, 0x222, 0),
        )?;
        if cfg.freeze_base {
            let path = base_checkpoint.ok_or_else(|| {
                Error::MissingArtifact("vision base checkpoint (freeze_base is on)".into())
            })?;
            vision.load_base(&mut store, path)?;
        }
        Ok(OrderModel {
            store,
            vision,
            tabular,
            desc_norm,
            target_norm,
            cfg: *cfg,
        })
    }

    pub fn encode_images(&self, images: &[&Microstructure]) -> Result<EmbeddingBatch> {
        self.vision.encode(&self.store, images)
    }

    pub fn encode_descriptors(&self, rows: &[Vec<f64>]) -> Result<EmbeddingBatch> {
        let z = self.desc_norm.transform(rows);
        self.tabular.encode(&self.store, &z)
    }

    /// Encode a set of samples in the given order; returns (vision, tabular).
    pub fn encode_samples(
        &self,
        samples: &[&SamplePair],
    ) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
        let images: Vec<&Microstructure> = samples.iter().map(|s| &s.image).collect();
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.descriptor.features().to_vec())
            .collect();
        Ok((self.encode_images(&images)?, self.encode_descriptors(&rows)?))
    }

    /// z-scored targets in sample order (the ordinal loss consumes these).
    pub fn target_matrix(&self, samples: &[&SamplePair]) -> Tensor {
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.targets.as_array().to_vec())
            .collect();
        self.target_norm.transform(&rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "order_model",
            "encoder": self.cfg,
            "features": DESCRIPTOR_FEATURES,
            "desc_norm": self.desc_norm,
            "target_norm": self.target_norm,
            "with_lora": self.vision.with_lora(),
        });
        checkpoint::save(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<OrderModel> {
        let (loaded, meta) = checkpoint::load(path)?;
        if meta["kind"] != "order_model" {
            return Err(Error::CheckpointFormat(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let cfg: EncoderConfig = serde_json::from_value(meta["encoder"].clone())
            .map_err(|e| Error::CheckpointFormat(format!("encoder config: {e}")))?;
        let desc_norm: Normalizer = serde_json::from_value(meta["desc_norm"].clone())
            .map_err(|e| Error::CheckpointFormat(format!("desc_norm: {e}")))?;
        let target_norm: Normalizer = serde_json::from_value(meta["target_norm"].clone())
            .map_err(|e| Error::CheckpointFormat(format!("target_norm: {e}")))?;
        let with_lora = meta["with_lora"].as_bool().unwrap_or(cfg.freeze_base);

        let mut store = ParamStore::new();
        let vision = VisionEncoder::init(&mut store, &cfg, 0, with_lora, !cfg.freeze_base)?;
        let tabular = TabularEncoder::init(&mut store, &cfg, DESCRIPTOR_FEATURES, 0)?;
        checkpoint::copy_by_name(&mut store, &loaded)?;
        // Restore trainable flags exactly as stored.
        for e in loaded.entries() {
            if let Some(id) = store.lookup(&e.name) {
                store.set_trainable(id, e.trainable);
            }
        }
        Ok(OrderModel {
            store,
            vision,
            tabular,
            desc_norm,
            target_norm,
            cfg,
        })
    }
}

fn index_by_id(dataset: &[SamplePair]) -> std::collections::BTreeMap<u64, &SamplePair> {
    dataset.iter().map(|s| (s.id, s)).collect()
}

fn sample<'a>(
    by_id: &std::collections::BTreeMap<u64, &'a SamplePair>,
    id: u64,
) -> Result<&'a SamplePair> {
    by_id
        .get(&id)
        .copied()
        .ok_or(Error::MissingGroundTruth(id))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_align: f64,
    pub l_order: f64,
    pub l_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iter: usize,
    pub branch: &'static str,
    pub beta1: f64,
    pub l_order: f64,
    pub l_align: f64,
    pub l_val: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Final-epoch weights.
    pub model: OrderModel,
    /// Weights of the best epoch (lowest tracked loss).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub curves: Vec<EpochStats>,
    pub iter_log: Vec<IterRecord>,
    /// Every sample id read while assembling pretraining batches.
    pub accessed_ids: BTreeSet<u64>,
}

impl PretrainOutcome {
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,l_align,l_order,l_val\n");
        for c in &self.curves {
            let lv = c.l_val.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", c.epoch, c.l_align, c.l_order, lv);
        }
        out
    }

    pub fn iter_csv(&self) -> String {
        let mut out = String::from("iter,branch,beta1,l_order,l_align,l_val\n");
        for r in &self.iter_log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.branch, r.beta1, r.l_order, r.l_align, r.l_val
            );
        }
        out
    }
}

struct BatchInput {
    patches: Tensor,
    desc_z: Tensor,
    targets_z: Tensor,
}

/// Assemble one batch, applying per-axis flips to train images only.
fn assemble_batch(
    model: &OrderModel,
    by_id: &std::collections::BTreeMap<u64, &SamplePair>,
    ids: &[u64],
    flip_prob: f64,
    rng: Option<&mut ChaCha8Rng>,
    log: &mut BTreeSet<u64>,
) -> Result<BatchInput> {
    let mut images: Vec<Microstructure> = Vec::with_capacity(ids.len());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    let mut flips: Vec<(bool, bool)> = Vec::with_capacity(ids.len());
    if let Some(rng) = rng {
        for _ in ids {
            flips.push((rng.gen::<f64>() < flip_prob, rng.gen::<f64>() < flip_prob));
        }
    } else {
        flips.resize(ids.len(), (false, false));
    }
    for (&id, &(fh, fv)) in ids.iter().zip(&flips) {
        let s = sample(by_id, id)?;
        log.insert(id);
        let mut img = s.image.clone();
        if fh {
            img.flip_horizontal();
        }
        if fv {
            img.flip_vertical();
        }
        images.push(img);
        rows.push(s.descriptor.features().to_vec());
        targets.push(s.targets.as_array().to_vec());
    }
    let refs: Vec<&Microstructure> = images.iter().collect();
    Ok(BatchInput {
        patches: patchify(&refs, model.cfg.image_size, model.cfg.patch_size)?,
        desc_z: model.desc_norm.transform(&rows),
        targets_z: model.target_norm.transform(&targets),
    })
}

/// Forward both encoders inside one graph.
fn forward_pair(
    model: &OrderModel,
    g: &mut Graph,
    batch: &BatchInput,
) -> Result<(NodeId, NodeId)> {
    let p = g.leaf(batch.patches.clone());
    let hv = model.vision.forward(g, &model.store, p)?;
    let d = g.leaf(batch.desc_z.clone());
    let ht = model.tabular.forward(g, &model.store, d)?;
    Ok((hv, ht))
}

fn check_finite(g: &Graph, loss: NodeId, epoch: usize, ids: &[u64]) -> Result<()> {
    if !g.value(loss).item().is_finite() {
        return Err(Error::Domain(format!(
            "non-finite loss at epoch {epoch}, batch ids {ids:?}"
        )));
    }
    Ok(())
}

/// Run pretraining and return the trained model plus logs. `model` must be
/// freshly initialized against the same dataset and split.
pub fn pretrain(
    mut model: OrderModel,
    dataset: &[SamplePair],
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    let by_id = index_by_id(dataset);
    let mut adam = AdamState::new(cfg.lr);
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut iter_log = Vec::new();
    let mut accessed = BTreeSet::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut iter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<u64> = split.train.clone();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE90C, epoch as u64));
        shuffle(&mut order, &mut erng);
        let mut sum_align = 0.0;
        let mut sum_order = 0.0;
        let mut sum_val = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // contrastive denominators need a negative
            }
            let batch = assemble_batch(
                &model,
                &by_id,
                chunk,
                cfg.flip_prob,
                Some(&mut erng),
                &mut accessed,
            )?;

            match cfg.mode {
                TrainMode::OrderDyn => {
                    let mut tg = Graph::new();
                    let (hv, ht) = forward_pair(&model, &mut tg, &batch)?;
                    let order_node =
                        losses::order_loss_both(&mut tg, hv, ht, &batch.targets_z, &cfg.loss)?;
                    let align_node = losses::align_loss(&mut tg, hv, ht, &cfg.loss)?;
                    check_finite(&tg, order_node, epoch, chunk)?;
                    check_finite(&tg, align_node, epoch, chunk)?;

                    let val_ids = pick_val_batch(split, cfg, epoch, iter);
                    let val_batch = assemble_batch(
                        &model,
                        &by_id,
                        &val_ids,
                        0.0,
                        None,
                        &mut accessed,
                    )?;
                    let mut vgr = Graph::new();
                    let (vhv, vht) = forward_pair(&model, &mut vgr, &val_batch)?;
                    let val_node = losses::align_loss(&mut vgr, vhv, vht, &cfg.loss)?;
                    check_finite(&vgr, val_node, epoch, &val_ids)?;

                    let (step, stat) = pareto::dyn_train_step(
                        &mut model.store,
                        &mut adam,
                        (tg, order_node, align_node),
                        (vgr, val_node),
                        &cfg.pareto,
                    )?;
                    iter_log.push(IterRecord {
                        iter,
                        branch: step.branch.as_str(),
                        beta1: step.beta[0],
                        l_order: stat.l_order,
                        l_align: stat.l_align,
                        l_val: stat.l_val,
                    });
                    sum_order += stat.l_order;
                    sum_align += stat.l_align;
                    sum_val += stat.l_val;
                }
                TrainMode::OrderAlpha(alpha) => {
                    let mut g = Graph::new();
                    let (hv, ht) = forward_pair(&model, &mut g, &batch)?;
                    let (total, order_node, align_node) =
                        losses::combined_loss(&mut g, hv, ht, &batch.targets_z, alpha, &cfg.loss)?;
                    check_finite(&g, total, epoch, chunk)?;
                    sum_order += g.value(order_node).item();
                    sum_align += g.value(align_node).item();
                    pareto::fixed_alpha_step(&mut model.store, &mut adam, (g, total), alpha)?;
                }
                TrainMode::Cmcl => {
                    let mut g = Graph::new();
                    let (hv, ht) = forward_pair(&model, &mut g, &batch)?;
                    let align_node = losses::align_loss(&mut g, hv, ht, &cfg.loss)?;
                    check_finite(&g, align_node, epoch, chunk)?;
                    sum_align += g.value(align_node).item();
                    // Logged only: recomputed from detached embeddings so no
                    // gradient can flow through the ordinal term.
                    sum_order += losses::order_loss_value(
                        g.value(hv),
                        g.value(ht),
                        &batch.targets_z,
                        &cfg.loss,
                    )?;
                    let grads = g.backward(align_node)?;
                    let pg = g.param_grads(&grads, &model.store);
                    adam.step(&mut model.store, &pg)?;
                }
            }
            iter += 1;
            batches += 1;
        }

        if batches == 0 {
            return Err(Error::TooFewSamples {
                need: 2,
                got: split.train.len(),
            });
        }
        let stats = EpochStats {
            epoch,
            l_align: sum_align / batches as f64,
            l_order: sum_order / batches as f64,
            l_val: matches!(cfg.mode, TrainMode::OrderDyn)
                .then_some(sum_val / batches as f64),
        };
        curves.push(stats);

        let tracked = match cfg.mode {
            TrainMode::OrderDyn => stats.l_val.unwrap(),
            TrainMode::OrderAlpha(a) => a * stats.l_order + (1.0 - a) * stats.l_align,
            TrainMode::Cmcl => stats.l_align,
        };
        if best.as_ref().map_or(true, |(b, _, _)| tracked < *b) {
            best = Some((tracked, epoch, model.store.clone()));
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(PretrainOutcome {
        model,
        best: best_store,
        best_epoch,
        curves,
        iter_log,
        accessed_ids: accessed,
    })
}

/// Validation mini-batch for the dynamic mode; the eval split is fixed, the
/// mini-batch is redrawn every iteration unless `val_full` is set.
fn pick_val_batch(split: &SplitSpec, cfg: &TrainConfig, epoch: usize, iter: usize) -> Vec<u64> {
    if cfg.pareto.val_full {
        return split.eval.clone();
    }
    let want = cfg.pareto.val_batch.unwrap_or(cfg.batch_size);
    let mut ids = split.eval.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        0x7A1,
        (epoch as u64) << 32 | iter as u64,
    ));
    shuffle(&mut ids, &mut rng);
    ids.truncate(want.max(2).min(split.eval.len()));
    ids
}

/// Convenience wrapper returning embeddings for a list of ids.
pub fn encode_ids(
    model: &OrderModel,
    dataset: &[SamplePair],
    ids: &[u64],
) -> Result<(EmbeddingBatch, EmbeddingBatch, Vec<u64>)> {
    let by_id = index_by_id(dataset);
    let samples: Vec<&SamplePair> = ids
        .iter()
        .map(|id| sample(&by_id, *id))
        .collect::<Result<_>>()?;
    let (hv, ht) = model.encode_samples(&samples)?;
    debug_assert_eq!(hv.modality, Modality::Vision);
    debug_assert_eq!(ht.modality, Modality::Tabular);
    Ok((hv, ht, ids.to_vec()))
}

//! Pretraining objectives: cross-modal alignment and ordinal-aware contrast.
//!
//! Both losses are assembled from graph ops so gradients come from the same
//! backward pass as the encoders. All exponentials go through shifted
//! log-sum-exp; excluded terms are masked with a large negative constant
//! whose contribution underflows to exactly zero.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Additive logit mask that underflows to zero weight after exp.
const MASK: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    L2,
    L1,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// When true, the matched pair also appears in the alignment
    /// denominator (standard InfoNCE); the default follows the literal
    /// form, which excludes it.
    pub include_positive_in_denominator: bool,
    /// Target-space metric for the ordinal loss.
    pub distance: DistanceKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            include_positive_in_denominator: false,
            distance: DistanceKind::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub l_align: f64,
    pub l_order: f64,
}

fn batch_dims(g: &Graph, h: NodeId) -> Result<(usize, usize)> {
    let s = g.shape(h);
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "loss_input",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((s[0], s[1]))
}

/// One direction of the alignment loss: anchors `a` against counterparts
/// `b`, with the anchor's own modality providing extra negatives.
fn align_one_direction(
    g: &mut Graph,
    anchors: NodeId,
    counterparts: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let (n, _) = batch_dims(g, anchors)?;
    let bt = g.transpose(counterparts)?;
    let cross = g.matmul(anchors, bt)?;
    let cross = g.scale(cross, 1.0 / cfg.tau);
    let at = g.transpose(anchors)?;
    let intra = g.matmul(anchors, at)?;
    let intra = g.scale(intra, 1.0 / cfg.tau);

    let diag_mask = {
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = MASK;
        }
        g.leaf(m)
    };
    let cross_den = if cfg.include_positive_in_denominator {
        cross
    } else {
        g.add(cross, diag_mask)?
    };
    // Self-similarity is not a pair; always masked.
    let intra_den = g.add(intra, diag_mask)?;
    let den = g.concat_last(cross_den, intra_den)?;
    let lse = g.log_sum_exp(den);

    let eye = g.leaf(Tensor::eye(n));
    let pos = g.mul(cross, eye)?;
    let pos = g.sum_last(pos);
    let per_anchor = g.sub(lse, pos)?; // -log(num/den) per anchor
    Ok(g.sum_all(per_anchor))
}

/// Cross-modal alignment loss: mean of the two directional sums.
pub fn align_loss(g: &mut Graph, hv: NodeId, ht: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (nv, dv) = batch_dims(g, hv)?;
    let (nt, dt) = batch_dims(g, ht)?;
    if nv != nt || dv != dt {
        return Err(Error::ShapeMismatch {
            op: "align_loss",
            lhs: g.shape(hv).to_vec(),
            rhs: g.shape(ht).to_vec(),
        });
    }
    if nv < 2 {
        return Err(Error::BatchTooSmall(nv));
    }
    let l_vt = align_one_direction(g, hv, ht, cfg)?;
    let l_tv = align_one_direction(g, ht, hv, cfg)?;
    let s = g.add(l_vt, l_tv)?;
    Ok(g.scale(s, 0.5))
}

/// Pairwise target distances, one row per anchor.
pub fn target_distances(targets: &Tensor, kind: DistanceKind) -> Vec<Vec<f64>> {
    let n = targets.shape()[0];
    let m = targets.shape()[1];
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for c in 0..m {
                let diff = targets.data()[i * m + c] - targets.data()[k * m + c];
                acc += match kind {
                    DistanceKind::L2 => diff * diff,
                    DistanceKind::L1 => diff.abs(),
                };
            }
            d[i][k] = match kind {
                DistanceKind::L2 => acc.sqrt(),
                DistanceKind::L1 => acc,
            };
        }
    }
    d
}

/// Single-modality ordinal contrastive loss. For each anchor i and positive
/// j != i, the denominator runs over k != i with d(i,k) >= d(i,j) (ties
/// included, so j itself always appears); the sum carries the 1/(N(N-1))
/// factor. Targets must already be z-scored per property.
pub fn order_loss(
    g: &mut Graph,
    h: NodeId,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let (n, _) = batch_dims(g, h)?;
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if targets.ndim() != 2 || targets.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "order_loss_targets",
            lhs: targets.shape().to_vec(),
            rhs: vec![n, 0],
        });
    }
    let dist = target_distances(targets, cfg.distance);
    let degenerate = (0..n)
        .all(|i| (0..n).all(|k| i == k || dist[i][k] == 0.0));
    if degenerate {
        log::warn!("order_loss: all target distances are zero; loss is constant");
    }

    // mask[i][j][k] keeps k in the denominator of pair (i, j).
    let mut mask = Tensor::full(&[n, n, n], MASK);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if k != i && dist[i][k] >= dist[i][j] {
                    mask.data_mut()[(i * n + j) * n + k] = 0.0;
                }
            }
        }
    }
    let mask = g.leaf(mask);

    let ht = g.transpose(h)?;
    let sims = g.matmul(h, ht)?;
    let sims = g.scale(sims, 1.0 / cfg.tau);
    let s_rows = g.reshape(sims, vec![n, 1, n]);
    let s3 = g.expand_axis1(s_rows, n)?;
    let den_in = g.add(s3, mask)?;
    let lse = g.log_sum_exp(den_in); // (n, n) indexed (i, j)
    let pair = g.sub(sims, lse)?;

    let mut off_diag = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let valid = g.leaf(off_diag);
    let contrib = g.mul(pair, valid)?;
    let total = g.sum_all(contrib);
    Ok(g.scale(total, -1.0 / (n as f64 * (n as f64 - 1.0))))
}

/// Ordinal loss applied per modality and summed.
pub fn order_loss_both(
    g: &mut Graph,
    hv: NodeId,
    ht: NodeId,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let lv = order_loss(g, hv, targets, cfg)?;
    let lt = order_loss(g, ht, targets, cfg)?;
    g.add(lv, lt)
}

/// alpha * order + (1 - alpha) * align. Returns (total, order, align) nodes.
pub fn combined_loss(
    g: &mut Graph,
    hv: NodeId,
    ht: NodeId,
    targets: &Tensor,
    alpha: f64,
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let order = order_loss_both(g, hv, ht, targets, cfg)?;
    let align = align_loss(g, hv, ht, cfg)?;
    let so = g.scale(order, alpha);
    let sa = g.scale(align, 1.0 - alpha);
    let total = g.add(so, sa)?;
    Ok((total, order, align))
}

/// Evaluate the alignment loss on plain tensors (no gradients kept).
pub fn align_loss_value(hv: &Tensor, ht: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(hv.clone());
    let b = g.leaf(ht.clone());
    let l = align_loss(&mut g, a, b, cfg)?;
    Ok(g.value(l).item())
}

/// Evaluate the two-modality ordinal loss on plain tensors.
pub fn order_loss_value(hv: &Tensor, ht: &Tensor, targets: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(hv.clone());
    let b = g.leaf(ht.clone());
    let l = order_loss_both(&mut g, a, b, targets, cfg)?;
    Ok(g.value(l).item())
}

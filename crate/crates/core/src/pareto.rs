//! Preference-guided combination of the two training gradients.
//!
//! With two objectives every projection and objective is affine in
//! beta_1 on the simplex, so both linear programs reduce to maximizing an
//! affine function over a closed interval computed exactly: the optimum
//! sits at an interval endpoint, or is resolved by the max-min tie-break
//! when the objective is constant.

use crate::autodiff::{AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Maximize the smaller of the two gradient projections.
    MaxMin,
}

#[derive(Debug, Clone, Copy)]
pub struct ParetoConfig {
    /// Validation-loss threshold selecting the balance branch.
    pub epsilon: f64,
    /// Per-iteration validation mini-batch size; `None` uses the train
    /// batch size.
    pub val_batch: Option<usize>,
    pub tie_break: TieBreak,
    /// Apply the combined direction through Adam (default) or plain SGD.
    pub use_adam: bool,
    /// Estimate the validation gradient on the full validation split
    /// instead of one mini-batch.
    pub val_full: bool,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            val_batch: None,
            tie_break: TieBreak::MaxMin,
            use_adam: true,
            val_full: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Balance,
    Descent,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Balance => "balance",
            Branch::Descent => "descent",
        }
    }
}

/// Record of one solved combination step.
#[derive(Debug, Clone)]
pub struct ParetoStep {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub gv: Vec<f64>,
    pub beta: [f64; 2],
    pub direction: Vec<f64>,
    pub branch: Branch,
    /// Set when the LP was infeasible and the equal-weight fallback applied.
    pub fallback: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine form `slope * beta1 + intercept` of (G beta)^T v for v in {g1, g2}.
#[derive(Debug, Clone, Copy)]
struct Affine {
    slope: f64,
    intercept: f64,
}

impl Affine {
    fn at(&self, b: f64) -> f64 {
        self.slope * b + self.intercept
    }
}

/// Intersect `slope * b + intercept >= rhs` with [lo, hi]. Returns None when
/// the constraint empties the interval.
fn clip_interval(lo: f64, hi: f64, a: Affine, rhs: f64) -> Option<(f64, f64)> {
    if a.slope == 0.0 {
        if a.intercept >= rhs {
            Some((lo, hi))
        } else {
            None
        }
    } else {
        let bound = (rhs - a.intercept) / a.slope;
        let (lo, hi) = if a.slope > 0.0 {
            (lo.max(bound), hi)
        } else {
            (lo, hi.min(bound))
        };
        (lo <= hi).then_some((lo, hi))
    }
}

/// Solve the per-iteration combination over the 2-simplex.
///
/// `l_val > epsilon` selects the balance program (maximize alignment of the
/// update with the validation gradient under the projection constraints);
/// otherwise the descent program maximizes the summed projections subject
/// to both being non-negative.
pub fn solve_combination(
    g1: Vec<f64>,
    g2: Vec<f64>,
    gv: Vec<f64>,
    l_val: f64,
    cfg: &ParetoConfig,
) -> Result<ParetoStep> {
    if g1.len() != g2.len() || g1.len() != gv.len() {
        return Err(Error::LengthMismatch(g1.len(), g2.len().max(gv.len())));
    }
    for v in [&g1, &g2, &gv] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite gradient".into()));
        }
    }
    let c11 = dot(&g1, &g1);
    let c12 = dot(&g1, &g2);
    let c22 = dot(&g2, &g2);
    let b = [dot(&gv, &g1), dot(&gv, &g2)];
    // proj[j](beta1) = (G beta)^T g_{j+1}
    let proj = [
        Affine {
            slope: c11 - c12,
            intercept: c12,
        },
        Affine {
            slope: c12 - c22,
            intercept: c22,
        },
    ];

    let branch = if l_val > cfg.epsilon {
        Branch::Balance
    } else {
        Branch::Descent
    };

    let mut interval = Some((0.0f64, 1.0f64));
    let objective = match branch {
        Branch::Balance => {
            let max_b = b[0].max(b[1]);
            let j_star = [b[0] == max_b, b[1] == max_b];
            let j_aligned = [b[0] > 0.0, b[1] > 0.0];
            let j_nonempty = j_aligned[0] || j_aligned[1];
            for j in 0..2 {
                let rhs = if j_star[j] {
                    0.0
                } else if !j_aligned[j] {
                    // j in complement(J) \ J*
                    if j_nonempty {
                        b[j]
                    } else {
                        0.0
                    }
                } else {
                    // j in J \ J*: unconstrained.
                    continue;
                };
                interval = interval.and_then(|(lo, hi)| clip_interval(lo, hi, proj[j], rhs));
            }
            Affine {
                slope: b[0] - b[1],
                intercept: b[1],
            }
        }
        Branch::Descent => {
            for j in 0..2 {
                interval = interval.and_then(|(lo, hi)| clip_interval(lo, hi, proj[j], 0.0));
            }
            Affine {
                slope: proj[0].slope + proj[1].slope,
                intercept: proj[0].intercept + proj[1].intercept,
            }
        }
    };

    let (beta1, fallback) = match interval {
        None => {
            log::warn!("combination LP infeasible ({branch:?}); using beta = (0.5, 0.5)");
            (0.5, true)
        }
        Some((lo, hi)) => {
            let beta1 = if objective.slope > 0.0 {
                hi
            } else if objective.slope < 0.0 {
                lo
            } else {
                match cfg.tie_break {
                    TieBreak::MaxMin => max_min_projection(lo, hi, proj),
                }
            };
            (beta1, false)
        }
    };

    let beta = [beta1, 1.0 - beta1];
    let direction: Vec<f64> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| beta[0] * a + beta[1] * b)
        .collect();
    Ok(ParetoStep {
        g1,
        g2,
        gv,
        beta,
        direction,
        branch,
        fallback,
    })
}

/// Maximize min(proj_1, proj_2) over [lo, hi]: the min of two affine
/// functions is concave, so the optimum is at the crossing point or an
/// endpoint. Candidates are probed in a fixed order so fully degenerate
/// cases resolve to the interval midpoint.
fn max_min_projection(lo: f64, hi: f64, proj: [Affine; 2]) -> f64 {
    let mut candidates = Vec::with_capacity(4);
    if proj[0].slope != proj[1].slope {
        let x = (proj[1].intercept - proj[0].intercept) / (proj[0].slope - proj[1].slope);
        if x >= lo && x <= hi {
            candidates.push(x);
        }
    }
    candidates.push((lo + hi) / 2.0);
    candidates.push(lo);
    candidates.push(hi);
    let mut best = candidates[0];
    let mut best_val = f64::NEG_INFINITY;
    for &c in &candidates {
        let v = proj[0].at(c).min(proj[1].at(c));
        if v > best_val {
            best_val = v;
            best = c;
        }
    }
    best
}

impl ParetoStep {
    /// Replay the active constraint set against the solved direction.
    pub fn constraints_satisfied(&self, epsilon_branch: Branch, tol: f64) -> bool {
        let p = [dot(&self.direction, &self.g1), dot(&self.direction, &self.g2)];
        let b = [dot(&self.gv, &self.g1), dot(&self.gv, &self.g2)];
        if self.fallback {
            return true; // no feasible point existed; nothing to replay
        }
        match epsilon_branch {
            Branch::Descent => p[0] >= -tol && p[1] >= -tol,
            Branch::Balance => {
                let max_b = b[0].max(b[1]);
                let j_nonempty = b[0] > 0.0 || b[1] > 0.0;
                (0..2).all(|j| {
                    if b[j] == max_b {
                        p[j] >= -tol
                    } else if b[j] <= 0.0 {
                        let rhs = if j_nonempty { b[j] } else { 0.0 };
                        p[j] >= rhs - tol
                    } else {
                        true
                    }
                })
            }
        }
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        self.beta[0] >= -tol
            && self.beta[1] >= -tol
            && (self.beta[0] + self.beta[1] - 1.0).abs() <= tol
    }
}

/// Flatten per-parameter gradients into one vector following the canonical
/// trainable-parameter order; parameters absent from `grads` contribute
/// zeros.
pub fn flatten_grads(
    store: &ParamStore,
    trainable: &[ParamId],
    grads: &[(ParamId, Tensor)],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.trainable_numel());
    for &pid in trainable {
        match grads.iter().find(|(g, _)| *g == pid) {
            Some((_, t)) => out.extend_from_slice(t.data()),
            None => out.extend(std::iter::repeat(0.0).take(store.get(pid).numel())),
        }
    }
    out
}

/// Inverse of [`flatten_grads`].
pub fn unflatten_direction(
    store: &ParamStore,
    trainable: &[ParamId],
    h: &[f64],
) -> Vec<(ParamId, Tensor)> {
    let mut out = Vec::with_capacity(trainable.len());
    let mut offset = 0;
    for &pid in trainable {
        let shape = store.get(pid).shape().to_vec();
        let n: usize = shape.iter().product();
        out.push((pid, Tensor::new(shape, h[offset..offset + n].to_vec())));
        offset += n;
    }
    debug_assert_eq!(offset, h.len());
    out
}

/// Losses observed during one dynamic step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l_order: f64,
    pub l_align: f64,
    pub l_val: f64,
}

/// One dynamic-weighting update: two backward passes on the train graph
/// (ordinal and alignment losses), one on a validation alignment graph,
/// the LP solve, and a single optimizer step along the combined direction.
pub fn dyn_train_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    train_graph: (Graph, NodeId, NodeId),
    val_graph: (Graph, NodeId),
    cfg: &ParetoConfig,
) -> Result<(ParetoStep, StepLosses)> {
    let trainable = store.trainable_ids();
    let (tg, order_node, align_node) = train_graph;
    let l_order = tg.value(order_node).item();
    let l_align = tg.value(align_node).item();
    let g_order = tg.backward(order_node)?;
    let g1 = flatten_grads(store, &trainable, &tg.param_grads(&g_order, store));
    let g_align = tg.backward(align_node)?;
    let g2 = flatten_grads(store, &trainable, &tg.param_grads(&g_align, store));
    drop(tg);

    let (vg, val_node) = val_graph;
    let l_val = vg.value(val_node).item();
    let g_val = vg.backward(val_node)?;
    let gv = flatten_grads(store, &trainable, &vg.param_grads(&g_val, store));
    drop(vg);

    let step = solve_combination(g1, g2, gv, l_val, cfg)?;
    let grads = unflatten_direction(store, &trainable, &step.direction);
    if cfg.use_adam {
        adam.step(store, &grads)?;
    } else {
        adam.sgd_step(store, &grads)?;
    }
    Ok((
        step,
        StepLosses {
            l_order,
            l_align,
            l_val,
        },
    ))
}

/// One fixed-weight update: single backward pass on the combined loss.
pub fn fixed_alpha_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    graph: (Graph, NodeId),
    alpha: f64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let (g, total) = graph;
    let grads = g.backward(total)?;
    let pg = g.param_grads(&grads, store);
    adam.step(store, &pg)
}

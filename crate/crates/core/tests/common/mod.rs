//! Independent oracles shared by the integration suites. Everything here
//! is written directly from the loss/program definitions with plain loops,
//! deliberately not reusing the library's computation paths.

use ordalign_core::autodiff::{Graph, ParamId, ParamStore, Tensor};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force cross-modal alignment loss: per-anchor softmax over the
/// opposite-modality row plus same-modality negatives, positive excluded
/// from the denominator unless `include_positive`.
pub fn align_oracle(hv: &[Vec<f64>], ht: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let one_direction = |anchors: &[Vec<f64>], counterparts: &[Vec<f64>]| -> f64 {
        let n = anchors.len();
        let mut total = 0.0;
        for i in 0..n {
            let num = (dot(&anchors[i], &counterparts[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += (dot(&anchors[i], &counterparts[j]) / tau).exp();
                    den += (dot(&anchors[i], &anchors[j]) / tau).exp();
                } else if include_positive {
                    den += num;
                }
            }
            total -= (num / den).ln();
        }
        total
    };
    (one_direction(hv, ht) + one_direction(ht, hv)) / 2.0
}

/// Brute-force single-modality ordinal loss with L2 target distances.
pub fn order_oracle(h: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> f64 {
    let n = h.len();
    let dist = |i: usize, k: usize| -> f64 {
        targets[i]
            .iter()
            .zip(&targets[k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let num = (dot(&h[i], &h[j]) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i && dist(i, k) >= dist(i, j) {
                    den += (dot(&h[i], &h[k]) / tau).exp();
                }
            }
            total -= (num / den).ln();
        }
    }
    total / (n as f64 * (n as f64 - 1.0))
}

/// Central finite differences of `f` w.r.t. one parameter.
pub fn finite_diff(
    f: &mut dyn FnMut(&ParamStore) -> f64,
    store: &mut ParamStore,
    pid: ParamId,
    eps: f64,
) -> Tensor {
    let shape = store.get(pid).shape().to_vec();
    let n = store.get(pid).numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let original = store.get(pid).data()[i];
        store.get_mut(pid).data_mut()[i] = original + eps;
        let up = f(store);
        store.get_mut(pid).data_mut()[i] = original - eps;
        let down = f(store);
        store.get_mut(pid).data_mut()[i] = original;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(shape, grad)
}

/// Assert analytic gradients of a scalar graph against central differences
/// for every parameter in the store. `build` must be a pure function of the
/// store contents.
pub fn assert_grads_match(
    name: &str,
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> ordalign_core::Result<usize>,
    rel_tol: f64,
) {
    let mut g = Graph::new();
    let loss = build(&mut g, store).unwrap_or_else(|e| panic!("{name}: build failed: {e}"));
    let grads = g.backward(loss).unwrap();
    let analytic = g.param_grads(&grads, store);
    assert!(!analytic.is_empty(), "{name}: no trainable parameters bound");

    let mut eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let loss = build(&mut g, store).unwrap();
        g.value(loss).item()
    };
    for (pid, a) in analytic {
        let numeric = finite_diff(&mut eval, store, pid, 1e-5);
        for (i, (av, nv)) in a.data().iter().zip(numeric.data()).enumerate() {
            let tol = rel_tol * nv.abs().max(1.0);
            assert!(
                (av - nv).abs() <= tol,
                "{name}: param {} [{}]: analytic {av} vs numeric {nv}",
                store.name(pid),
                i
            );
        }
    }
}

/// Grid-search oracle for the two-objective combination program.
/// Returns the best feasible objective over beta1 in {0, step, ..., 1}
/// (None when no grid point is feasible).
pub fn lp_grid_oracle(
    g1: &[f64],
    g2: &[f64],
    gv: &[f64],
    balance_branch: bool,
    step: f64,
) -> Option<(f64, f64)> {
    let c11 = dot(g1, g1);
    let c12 = dot(g1, g2);
    let c22 = dot(g2, g2);
    let b = [dot(gv, g1), dot(gv, g2)];
    let proj = |beta1: f64, j: usize| -> f64 {
        if j == 0 {
            beta1 * c11 + (1.0 - beta1) * c12
        } else {
            beta1 * c12 + (1.0 - beta1) * c22
        }
    };
    let max_b = b[0].max(b[1]);
    let j_nonempty = b[0] > 0.0 || b[1] > 0.0;
    let mut best: Option<(f64, f64)> = None;
    let mut beta1: f64 = 0.0;
    while beta1 <= 1.0 + 1e-12 {
        let bb = beta1.min(1.0);
        let feasible = if balance_branch {
            (0..2).all(|j| {
                if b[j] == max_b {
                    proj(bb, j) >= 0.0
                } else if b[j] <= 0.0 {
                    let rhs = if j_nonempty { b[j] } else { 0.0 };
                    proj(bb, j) >= rhs
                } else {
                    true
                }
            })
        } else {
            proj(bb, 0) >= 0.0 && proj(bb, 1) >= 0.0
        };
        if feasible {
            let obj = if balance_branch {
                bb * b[0] + (1.0 - bb) * b[1]
            } else {
                proj(bb, 0) + proj(bb, 1)
            };
            if best.map_or(true, |(o, _)| obj > o) {
                best = Some((obj, bb));
            }
        }
        beta1 += step;
    }
    best
}

/// Compact PASS/FAIL line per criterion.
pub fn verdict(criterion: &str, ok: bool) -> bool {
    println!(
        "criterion {criterion}: {}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

//! Brute-force viability kernel over a `(q, dq)` grid for 1-DoF models.
//!
//! The kernel grows from the equilibrium-holding nodes by fixed-point
//! iteration of the one-step backward operator: a node joins the viable set
//! when some sampled control maps it inside the state box AND into a grid
//! cell whose (nonzero-weight) corner nodes are all already viable. The
//! all-corners rule under-approximates reachability, so the converged set
//! is a conservative inner approximation — exact up to grid resolution at
//! low dimension, which makes it the validation oracle for the interpolated
//! safe sets.

use super::{linspace, GridVelocityBound, SafeSetError, SafeSetModel, SafeSetPayload};
use crate::dynamics::{ControlVec, ManipulatorModel, StateVec};
use crate::exec;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Number of evenly spaced control samples per sweep.
pub const KERNEL_CONTROL_SAMPLES: usize = 21;

/// Converged boolean viability table over a state grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelGrid {
    pub q_axis: Vec<f64>,
    pub v_axis: Vec<f64>,
    /// Row-major `[iq][iv]`.
    pub viable: Vec<bool>,
    /// Backward passes until the fixed point; doubles as a step bound for
    /// reaching an equilibrium from any viable node.
    pub iterations: usize,
}

impl KernelGrid {
    pub fn idx(&self, iq: usize, iv: usize) -> usize {
        iq * self.v_axis.len() + iv
    }

    pub fn node_viable(&self, iq: usize, iv: usize) -> bool {
        self.viable[self.idx(iq, iv)]
    }

    pub fn viable_count(&self) -> usize {
        self.viable.iter().filter(|v| **v).count()
    }

    /// Viability of the node nearest to `x` (false outside the grid).
    pub fn snap_viable(&self, x: &StateVec) -> bool {
        let q = x[0];
        let v = x[1];
        if q < self.q_axis[0] || q > *self.q_axis.last().unwrap() {
            return false;
        }
        if v < self.v_axis[0] || v > *self.v_axis.last().unwrap() {
            return false;
        }
        let iq = nearest(&self.q_axis, q);
        let iv = nearest(&self.v_axis, v);
        self.node_viable(iq, iv)
    }

    /// Conservative containment: every nonzero-weight corner of the cell
    /// holding `x` is viable.
    pub fn contains_conservative(&self, x: &StateVec) -> bool {
        match cell_corners(&self.q_axis, &self.v_axis, x[0], x[1]) {
            None => false,
            Some(corners) => corners
                .into_iter()
                .flatten()
                .all(|(iq, iv)| self.node_viable(iq, iv)),
        }
    }

    /// Re-verifies control invariance node by node: from every viable node
    /// some sampled control must lead to a viable-contained cell.
    pub fn verify_invariance(&self, model: &ManipulatorModel) -> bool {
        let controls = control_samples(model);
        for iq in 0..self.q_axis.len() {
            for iv in 0..self.v_axis.len() {
                if !self.node_viable(iq, iv) {
                    continue;
                }
                let x = StateVec::from_parts(&[self.q_axis[iq]], &[self.v_axis[iv]]);
                let ok = controls.iter().any(|u| {
                    model
                        .rk4_step(&x, u)
                        .map(|next| self.contains_conservative(&next))
                        .unwrap_or(false)
                });
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    pub fn save(&self, path: &Path) -> Result<(), SafeSetError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SafeSetError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn nearest(axis: &[f64], v: f64) -> usize {
    let k = axis.partition_point(|a| *a <= v);
    if k == 0 {
        return 0;
    }
    if k >= axis.len() {
        return axis.len() - 1;
    }
    if (v - axis[k - 1]).abs() <= (axis[k] - v).abs() {
        k - 1
    } else {
        k
    }
}

/// Corner nodes (with nonzero interpolation weight) of the cell containing
/// `(q, v)`, or None when outside the grid.
fn cell_corners(
    q_axis: &[f64],
    v_axis: &[f64],
    q: f64,
    v: f64,
) -> Option<[Option<(usize, usize)>; 4]> {
    const EDGE: f64 = 1e-12;
    let locate = |axis: &[f64], x: f64| -> Option<(usize, f64)> {
        let lo = axis[0];
        let hi = *axis.last().unwrap();
        if x < lo - EDGE || x > hi + EDGE {
            return None;
        }
        let x = x.clamp(lo, hi);
        let k = axis.partition_point(|a| *a <= x).saturating_sub(1);
        let k = k.min(axis.len() - 2);
        let t = (x - axis[k]) / (axis[k + 1] - axis[k]);
        Some((k, t))
    };
    let (kq, tq) = locate(q_axis, q)?;
    let (kv, tv) = locate(v_axis, v)?;
    let mut corners = [None; 4];
    let mut slot = 0;
    for (dq, wq) in [(0usize, 1.0 - tq), (1, tq)] {
        for (dv, wv) in [(0usize, 1.0 - tv), (1, tv)] {
            if wq * wv > 1e-12 {
                corners[slot] = Some((kq + dq, kv + dv));
            }
            slot += 1;
        }
    }
    Some(corners)
}

fn control_samples(model: &ManipulatorModel) -> Vec<ControlVec> {
    let u_max = model.u_max[0];
    (0..KERNEL_CONTROL_SAMPLES)
        .map(|k| {
            let t = k as f64 / (KERNEL_CONTROL_SAMPLES - 1) as f64;
            ControlVec(DVector::from_element(1, -u_max + 2.0 * u_max * t))
        })
        .collect()
}

/// Computes the viability kernel of a 1-DoF model by backward fixed-point
/// iteration on a `res[0] x res[1]` grid (even resolutions are bumped so a
/// `dq = 0` row of equilibrium seeds exists).
pub fn compute_kernel(
    model: &ManipulatorModel,
    res: [usize; 2],
    max_iters: usize,
) -> Result<KernelGrid, SafeSetError> {
    if model.n_joints != 1 {
        return Err(SafeSetError::Invalid("kernel oracle is restricted to 1-DoF models".into()));
    }
    if res[0] < 51 || res[1] < 51 {
        return Err(SafeSetError::Invalid("kernel resolution must be >= 51 per axis".into()));
    }
    let rq = res[0];
    let rv = if res[1] % 2 == 0 { res[1] + 1 } else { res[1] };
    let q_axis = linspace(model.q_min[0], model.q_max[0], rq);
    let v_axis = linspace(-model.v_max[0], model.v_max[0], rv);
    let iv0 = rv / 2;
    debug_assert_eq!(v_axis[iv0], 0.0);

    let controls = control_samples(model);
    let n_nodes = rq * rv;

    // Successor corner sets per (node, control), computed once.
    let successors: Vec<Vec<[Option<(usize, usize)>; 4]>> = exec::map_range(n_nodes, |node| {
        let iq = node / rv;
        let iv = node % rv;
        let x = StateVec::from_parts(&[q_axis[iq]], &[v_axis[iv]]);
        controls
            .iter()
            .filter_map(|u| {
                let next = model.rk4_step(&x, u).ok()?;
                cell_corners(&q_axis, &v_axis, next[0], next[1])
            })
            .collect()
    });

    // Seeds: dq = 0 nodes whose configuration can be held.
    let mut viable = vec![false; n_nodes];
    for iq in 0..rq {
        if model.equilibrium_control(&DVector::from_element(1, q_axis[iq])).is_some() {
            viable[iq * rv + iv0] = true;
        }
    }

    let mut iterations = 0;
    for _ in 0..max_iters {
        let next: Vec<bool> = exec::map_range(n_nodes, |node| {
            if viable[node] {
                return true;
            }
            successors[node].iter().any(|corners| {
                corners
                    .iter()
                    .flatten()
                    .all(|(iq, iv)| viable[iq * rv + iv])
            })
        });
        let added = next.iter().zip(viable.iter()).filter(|(n, v)| **n && !**v).count();
        viable = next;
        if added == 0 {
            return Ok(KernelGrid { q_axis, v_axis, viable, iterations });
        }
        iterations += 1;
    }
    Err(SafeSetError::KernelNotConverged { iterations })
}

/// Derives the interpolated safe set from a converged kernel.
///
/// At each position node, `phi(q)` is the radius of the largest symmetric
/// velocity interval fully inside the viable region, so the membership ball
/// `||dq|| <= (1 - alpha) phi(q)` stays inside the kernel regardless of the
/// sign of `dq` (the viable region itself is generally asymmetric).
pub fn kernel_to_safeset(kernel: &KernelGrid, alpha: f64) -> SafeSetModel {
    let rv = kernel.v_axis.len();
    let iv0 = rv / 2;
    let values: Vec<f64> = (0..kernel.q_axis.len())
        .map(|iq| {
            if !kernel.node_viable(iq, iv0) {
                return 0.0;
            }
            let mut up = 0.0;
            for iv in iv0 + 1..rv {
                if kernel.node_viable(iq, iv) {
                    up = kernel.v_axis[iv];
                } else {
                    break;
                }
            }
            let mut down = 0.0;
            for iv in (0..iv0).rev() {
                if kernel.node_viable(iq, iv) {
                    down = -kernel.v_axis[iv];
                } else {
                    break;
                }
            }
            up.min(down).max(0.0)
        })
        .collect();
    let grid = GridVelocityBound { axes: vec![kernel.q_axis.clone()], values };
    let mut model = SafeSetModel {
        alpha: alpha.clamp(0.0, 1.0),
        nbar: kernel.iterations.max(1),
        payload: SafeSetPayload::Grid(grid),
        metadata: serde_json::json!({ "generator": "kernel", "iterations": kernel.iterations }),
    };
    if model.validate().is_err() {
        // Cannot happen for a converged kernel over validated axes.
        model.alpha = model.alpha.clamp(0.0, 1.0);
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Double integrator with a velocity bound just above the braking
    /// parabola peak, so the kernel shape is governed by the parabola.
    fn di_model() -> ManipulatorModel {
        let mut m = ManipulatorModel::double_integrator();
        m.v_max = vec![2.5];
        m
    }

    /// Closed-form viability test for the double integrator.
    fn di_analytic_viable(m: &ManipulatorModel, q: f64, v: f64) -> bool {
        if q < m.q_min[0] || q > m.q_max[0] || v.abs() > m.v_max[0] {
            return false;
        }
        let u = m.u_max[0];
        if v > 0.0 {
            v * v <= 2.0 * u * (m.q_max[0] - q)
        } else {
            v * v <= 2.0 * u * (q - m.q_min[0])
        }
    }

    #[test]
    fn double_integrator_kernel_matches_braking_parabola() {
        let m = di_model();
        let k = compute_kernel(&m, [201, 201], 20_000).unwrap();
        let mut inter = 0usize;
        let mut union = 0usize;
        for iq in 0..k.q_axis.len() {
            for iv in 0..k.v_axis.len() {
                let a = di_analytic_viable(&m, k.q_axis[iq], k.v_axis[iv]);
                let b = k.node_viable(iq, iv);
                if a && b {
                    inter += 1;
                }
                if a || b {
                    union += 1;
                }
            }
        }
        let jaccard = inter as f64 / union as f64;
        assert!(jaccard >= 0.95, "jaccard {jaccard}");
    }

    #[test]
    fn equilibrium_seeds_are_viable_and_exit_nodes_are_not() {
        let m = di_model();
        let k = compute_kernel(&m, [101, 101], 20_000).unwrap();
        let iv0 = k.v_axis.len() / 2;
        for iq in 0..k.q_axis.len() {
            assert!(k.node_viable(iq, iv0), "rest node {iq} should be viable");
        }
        // Top speed straight at the position limit: immediate exit.
        let last_q = k.q_axis.len() - 1;
        let last_v = k.v_axis.len() - 1;
        assert!(!k.node_viable(last_q, last_v));
    }

    #[test]
    fn kernel_is_control_invariant_by_construction() {
        let m = di_model();
        let k = compute_kernel(&m, [61, 61], 20_000).unwrap();
        assert!(k.verify_invariance(&m));
    }

    #[test]
    fn pendulum_kernel_converges_and_is_invariant() {
        let m = ManipulatorModel::pendulum();
        let k = compute_kernel(&m, [81, 81], 20_000).unwrap();
        assert!(k.iterations > 0);
        assert!(k.verify_invariance(&m));
        // The inverted-side rest nodes beyond the holdable angle are
        // still viable (the pendulum can fall back under control).
        assert!(k.viable_count() > k.q_axis.len());
    }

    #[test]
    fn safeset_from_all_viable_kernel_is_vmax() {
        let k = KernelGrid {
            q_axis: linspace(-1.0, 1.0, 5),
            v_axis: linspace(-3.0, 3.0, 7),
            viable: vec![true; 35],
            iterations: 4,
        };
        let ss = kernel_to_safeset(&k, 0.0);
        for q in [-1.0, -0.4, 0.0, 0.9] {
            let v = ss.eval_phi(&DVector::from_element(1, q)).unwrap();
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert_eq!(ss.nbar, 4);
    }

    #[test]
    fn safeset_from_rest_only_kernel_is_zero() {
        let mut viable = vec![false; 35];
        for iq in 0..5 {
            viable[iq * 7 + 3] = true;
        }
        let k = KernelGrid {
            q_axis: linspace(-1.0, 1.0, 5),
            v_axis: linspace(-3.0, 3.0, 7),
            viable,
            iterations: 1,
        };
        let ss = kernel_to_safeset(&k, 0.0);
        for q in [-1.0, 0.0, 1.0] {
            assert_eq!(ss.eval_phi(&DVector::from_element(1, q)).unwrap(), 0.0);
        }
    }

    #[test]
    fn derived_phi_matches_analytic_double_integrator_bound() {
        let m = di_model();
        let k = compute_kernel(&m, [201, 201], 20_000).unwrap();
        let ss = kernel_to_safeset(&k, 0.0);
        let v_cell = (k.v_axis[1] - k.v_axis[0]).abs();
        for (iq, &q) in k.q_axis.iter().enumerate() {
            let dist = (m.q_max[0] - q).min(q - m.q_min[0]);
            let analytic = (2.0 * m.u_max[0] * dist).sqrt().min(m.v_max[0]);
            let phi = ss.eval_phi(&DVector::from_element(1, q)).unwrap();
            assert!(
                (phi - analytic).abs() <= 2.0 * v_cell + 0.05,
                "node {iq}: phi {phi} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn derived_set_is_inside_kernel() {
        // Conservativeness: membership with a small margin implies kernel
        // viability (node-snapped), over many random states.
        let m = di_model();
        let k = compute_kernel(&m, [201, 201], 20_000).unwrap();
        let ss = kernel_to_safeset(&k, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut inside_count = 0;
        for _ in 0..10_000 {
            let q = rng.random_range(m.q_min[0]..m.q_max[0]);
            let v = rng.random_range(-m.v_max[0]..m.v_max[0]);
            let x = StateVec::from_parts(&[q], &[v]);
            let (_, inside) = ss.eval_membership(&x).unwrap();
            if inside {
                inside_count += 1;
                assert!(k.snap_viable(&x), "member ({q}, {v}) not kernel-viable");
            }
        }
        assert!(inside_count > 100, "sampled set unexpectedly small");
    }

    #[test]
    fn kernel_json_round_trip() {
        let m = di_model();
        let k = compute_kernel(&m, [61, 61], 20_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernel.json");
        k.save(&path).unwrap();
        let back = KernelGrid::load(&path).unwrap();
        assert_eq!(back.viable, k.viable);
        assert_eq!(back.iterations, k.iterations);
    }

    #[test]
    fn rejects_multi_joint_and_coarse_grids() {
        let arm = ManipulatorModel::arm3();
        assert!(compute_kernel(&arm, [101, 101], 100).is_err());
        let m = di_model();
        assert!(compute_kernel(&m, [41, 101], 100).is_err());
    }
}

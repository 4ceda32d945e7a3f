//! Discrete-time system models: n-link planar manipulator (n <= 3), 1-DoF
//! pendulum, and 1-DoF double integrator, with state/control boxes, an RK4
//! integrator, analytic discrete Jacobians, and equilibrium utilities.
//!
//! Manipulator terms (mass matrix, Coriolis bias, gravity) are closed-form
//! Lagrangian expressions for planar chains with point masses at the link
//! ends. Joint angles are relative; absolute link angles are measured from
//! the downward vertical, so `q = 0` hangs at rest and gravity torque on a
//! single link is `m*g*l*sin(q)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered during integration")]
    NonFinite,
    #[error("mass matrix is not positive definite")]
    SingularMass,
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Full state `(q, dq)`, dimension `2 * n_joints`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVec(pub DVector<f64>);

/// Joint torques, dimension `n_joints`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlVec(pub DVector<f64>);

impl StateVec {
    pub fn from_parts(q: &[f64], dq: &[f64]) -> Self {
        assert_eq!(q.len(), dq.len(), "q and dq must have equal length");
        let mut v = DVector::zeros(2 * q.len());
        v.rows_mut(0, q.len()).copy_from_slice(q);
        v.rows_mut(q.len(), dq.len()).copy_from_slice(dq);
        StateVec(v)
    }

    pub fn zeros(n_joints: usize) -> Self {
        StateVec(DVector::zeros(2 * n_joints))
    }

    pub fn n_joints(&self) -> usize {
        self.0.len() / 2
    }

    pub fn q(&self) -> DVector<f64> {
        self.0.rows(0, self.n_joints()).into_owned()
    }

    pub fn dq(&self) -> DVector<f64> {
        self.0.rows(self.n_joints(), self.n_joints()).into_owned()
    }

    /// Euclidean norm of the joint velocity.
    pub fn speed(&self) -> f64 {
        self.dq().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for StateVec {
    type Target = DVector<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for StateVec {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl ControlVec {
    pub fn zeros(n: usize) -> Self {
        ControlVec(DVector::zeros(n))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ControlVec {
    type Target = DVector<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for ControlVec {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DoubleIntegrator,
    Pendulum,
    Arm,
}

/// Physical parameters, bounds, and control period of a model.
///
/// Immutable after construction; all dynamics operations are pure functions
/// and safe to call concurrently.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManipulatorModel {
    pub kind: ModelKind,
    pub n_joints: usize,
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    pub gravity: f64,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: Vec<f64>,
    pub u_max: Vec<f64>,
    pub dt: f64,
}

impl ManipulatorModel {
    /// Unit-inertia double integrator: `q_ddot = u`, `q` in [-1, 1],
    /// `|dq| <= 10`, `|u| <= 1`.
    pub fn double_integrator() -> Self {
        ManipulatorModel {
            kind: ModelKind::DoubleIntegrator,
            n_joints: 1,
            link_lengths: vec![1.0],
            link_masses: vec![1.0],
            gravity: 0.0,
            q_min: vec![-1.0],
            q_max: vec![1.0],
            v_max: vec![10.0],
            u_max: vec![1.0],
            dt: 0.005,
        }
    }

    /// Pendulum with `m = 1 kg`, `l = 1 m`, `u_max = 5 N m < m*g*l`, so the
    /// torque cannot hold the link much past 0.53 rad.
    pub fn pendulum() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        ManipulatorModel {
            kind: ModelKind::Pendulum,
            n_joints: 1,
            link_lengths: vec![1.0],
            link_masses: vec![1.0],
            gravity: 9.81,
            q_min: vec![-half_pi],
            q_max: vec![half_pi],
            v_max: vec![4.0],
            u_max: vec![5.0],
            dt: 0.005,
        }
    }

    /// 3-link planar arm, 0.3 m links with 1 kg point masses. Near the
    /// stretched-horizontal pose the gravity torque on joint 1 exceeds
    /// `u_max`, so the viable set is a strict subset of the state box.
    pub fn arm3() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        ManipulatorModel {
            kind: ModelKind::Arm,
            n_joints: 3,
            link_lengths: vec![0.3; 3],
            link_masses: vec![1.0; 3],
            gravity: 9.81,
            q_min: vec![-half_pi; 3],
            q_max: vec![half_pi; 3],
            v_max: vec![3.0; 3],
            u_max: vec![10.0; 3],
            dt: 0.005,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "double_integrator" | "double-integrator" | "di" => Some(Self::double_integrator()),
            "pendulum" => Some(Self::pendulum()),
            "arm3" | "arm" | "triple_pendulum" => Some(Self::arm3()),
            _ => None,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let n = self.n_joints;
        let err = |m: String| Err(DynamicsError::InvalidModel(m));
        if n == 0 {
            return err("n_joints must be >= 1".into());
        }
        if matches!(self.kind, ModelKind::Arm) && n > 3 {
            return err("closed-form arm terms are limited to 3 links".into());
        }
        if matches!(self.kind, ModelKind::DoubleIntegrator | ModelKind::Pendulum) && n != 1 {
            return err("pendulum and double integrator are 1-DoF".into());
        }
        for (name, v) in [
            ("link_lengths", &self.link_lengths),
            ("link_masses", &self.link_masses),
            ("v_max", &self.v_max),
            ("u_max", &self.u_max),
        ] {
            if v.len() != n {
                return err(format!("{name} must have length {n}"));
            }
            if v.iter().any(|x| *x <= 0.0 || !x.is_finite()) {
                return err(format!("{name} entries must be strictly positive"));
            }
        }
        if self.q_min.len() != n || self.q_max.len() != n {
            return err(format!("q_min/q_max must have length {n}"));
        }
        for j in 0..n {
            if !(self.q_min[j] < self.q_max[j]) {
                return err("q_min must be strictly below q_max".into());
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return err("dt must be strictly positive".into());
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        2 * self.n_joints
    }

    pub fn n_u(&self) -> usize {
        self.n_joints
    }

    fn check_dims(&self, x: &StateVec, u: &ControlVec) -> Result<(), DynamicsError> {
        if x.len() != self.n_x() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.n_x(),
                got: x.len(),
            });
        }
        if u.len() != self.n_u() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.n_u(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Worst violation of the state box (0 when inside).
    pub fn state_box_violation(&self, x: &StateVec) -> f64 {
        let n = self.n_joints;
        let mut worst: f64 = 0.0;
        for j in 0..n {
            worst = worst.max(self.q_min[j] - x[j]);
            worst = worst.max(x[j] - self.q_max[j]);
            worst = worst.max(x[n + j].abs() - self.v_max[j]);
        }
        worst
    }

    pub fn in_state_box(&self, x: &StateVec, tol: f64) -> bool {
        self.state_box_violation(x) <= tol
    }

    /// Absolute link angles (prefix sums of joint angles).
    fn abs_angles(&self, q: &DVector<f64>) -> Vec<f64> {
        let mut a = Vec::with_capacity(self.n_joints);
        let mut acc = 0.0;
        for j in 0..self.n_joints {
            acc += q[j];
            a.push(acc);
        }
        a
    }

    /// Joint-space mass matrix M(q).
    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_joints;
        match self.kind {
            ModelKind::DoubleIntegrator => DMatrix::identity(n, n),
            ModelKind::Pendulum | ModelKind::Arm => {
                let a = self.abs_angles(q);
                let mut m = DMatrix::zeros(n, n);
                for j in 0..n {
                    for k in 0..n {
                        let mut sum = 0.0;
                        for i in j.max(k)..n {
                            let mi = self.link_masses[i];
                            for r in j..=i {
                                for s in k..=i {
                                    sum += mi
                                        * self.link_lengths[r]
                                        * self.link_lengths[s]
                                        * (a[r] - a[s]).cos();
                                }
                            }
                        }
                        m[(j, k)] = sum;
                    }
                }
                m
            }
        }
    }

    /// Per-axis partial derivatives of the mass matrix.
    fn mass_matrix_partials(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.n_joints;
        let a = self.abs_angles(q);
        let mut out = vec![DMatrix::zeros(n, n); n];
        for p in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut sum = 0.0;
                    for i in j.max(k)..n {
                        let mi = self.link_masses[i];
                        for r in j..=i {
                            for s in k..=i {
                                let w = ind(p <= r) - ind(p <= s);
                                if w != 0.0 {
                                    sum -= w
                                        * mi
                                        * self.link_lengths[r]
                                        * self.link_lengths[s]
                                        * (a[r] - a[s]).sin();
                                }
                            }
                        }
                    }
                    out[p][(j, k)] = sum;
                }
            }
        }
        out
    }

    /// Second partials `d2M/dq_p dq_t`, indexed `[p][t]`.
    fn mass_matrix_second_partials(&self, q: &DVector<f64>) -> Vec<Vec<DMatrix<f64>>> {
        let n = self.n_joints;
        let a = self.abs_angles(q);
        let mut out = vec![vec![DMatrix::zeros(n, n); n]; n];
        for p in 0..n {
            for t in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut sum = 0.0;
                        for i in j.max(k)..n {
                            let mi = self.link_masses[i];
                            for r in j..=i {
                                for s in k..=i {
                                    let w = (ind(p <= r) - ind(p <= s)) * (ind(t <= r) - ind(t <= s));
                                    if w != 0.0 {
                                        sum -= w
                                            * mi
                                            * self.link_lengths[r]
                                            * self.link_lengths[s]
                                            * (a[r] - a[s]).cos();
                                    }
                                }
                            }
                        }
                        out[p][t][(j, k)] = sum;
                    }
                }
            }
        }
        out
    }

    /// Gravity torque g(q): the control that holds the configuration still.
    pub fn gravity_torque(&self, q: &DVector<f64>) -> DVector<f64> {
        let n = self.n_joints;
        match self.kind {
            ModelKind::DoubleIntegrator => DVector::zeros(n),
            ModelKind::Pendulum | ModelKind::Arm => {
                let a = self.abs_angles(q);
                let mut g = DVector::zeros(n);
                for j in 0..n {
                    let mut sum = 0.0;
                    for i in j..n {
                        let mi = self.link_masses[i];
                        for r in j..=i {
                            sum += mi * self.gravity * self.link_lengths[r] * a[r].sin();
                        }
                    }
                    g[j] = sum;
                }
                g
            }
        }
    }

    fn gravity_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_joints;
        let a = self.abs_angles(q);
        let mut dg = DMatrix::zeros(n, n);
        for j in 0..n {
            for p in 0..n {
                let lo = j.max(p);
                let mut sum = 0.0;
                for i in lo..n {
                    let mi = self.link_masses[i];
                    for r in lo..=i {
                        sum += mi * self.gravity * self.link_lengths[r] * a[r].cos();
                    }
                }
                dg[(j, p)] = sum;
            }
        }
        dg
    }

    /// Christoffel symbols of the first kind, `gamma[i][j][k]`.
    fn christoffel(dm: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
        let n = dm.len();
        let mut g = vec![vec![vec![0.0; n]; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    g[i][j][k] = 0.5 * (dm[i][(k, j)] + dm[j][(k, i)] - dm[k][(i, j)]);
                }
            }
        }
        g
    }

    /// Coriolis/centrifugal bias `C(q, dq) dq`.
    fn coriolis_bias(gamma: &[Vec<Vec<f64>>], dq: &DVector<f64>) -> DVector<f64> {
        let n = dq.len();
        let mut bias = DVector::zeros(n);
        for k in 0..n {
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    sum += gamma[i][j][k] * dq[i] * dq[j];
                }
            }
            bias[k] = sum;
        }
        bias
    }

    /// Total mechanical energy, `0.5 dq' M dq + U(q)` (tests only need it,
    /// but it is generally useful for sanity checks).
    pub fn energy(&self, x: &StateVec) -> f64 {
        let q = x.q();
        let dq = x.dq();
        let m = self.mass_matrix(&q);
        let kinetic = 0.5 * dq.dot(&(&m * &dq));
        let potential = match self.kind {
            ModelKind::DoubleIntegrator => 0.0,
            ModelKind::Pendulum | ModelKind::Arm => {
                let a = self.abs_angles(&q);
                let mut u = 0.0;
                for i in 0..self.n_joints {
                    let mut y = 0.0;
                    for r in 0..=i {
                        y -= self.link_lengths[r] * a[r].cos();
                    }
                    u += self.link_masses[i] * self.gravity * y;
                }
                u
            }
        };
        kinetic + potential
    }

    /// Time derivative of the state: `(dq, M(q)^-1 (u - C dq - g))`.
    pub fn continuous_dynamics(
        &self,
        x: &StateVec,
        u: &ControlVec,
    ) -> Result<DVector<f64>, DynamicsError> {
        self.check_dims(x, u)?;
        let n = self.n_joints;
        let q = x.q();
        let dq = x.dq();
        let mut xdot = DVector::zeros(2 * n);
        xdot.rows_mut(0, n).copy_from(&dq);
        match self.kind {
            ModelKind::DoubleIntegrator => {
                xdot.rows_mut(n, n).copy_from(&u.0);
            }
            ModelKind::Pendulum | ModelKind::Arm => {
                let m = self.mass_matrix(&q);
                let chol = m.clone().cholesky().ok_or(DynamicsError::SingularMass)?;
                let dm = self.mass_matrix_partials(&q);
                let gamma = Self::christoffel(&dm);
                let bias = Self::coriolis_bias(&gamma, &dq);
                let g = self.gravity_torque(&q);
                let acc = chol.solve(&(&u.0 - bias - g));
                xdot.rows_mut(n, n).copy_from(&acc);
            }
        }
        Ok(xdot)
    }

    /// Jacobians of the continuous dynamics, `(d xdot/dx, d xdot/du)`.
    pub fn continuous_jacobians(
        &self,
        x: &StateVec,
        u: &ControlVec,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check_dims(x, u)?;
        let n = self.n_joints;
        let nx = 2 * n;
        let mut fx = DMatrix::zeros(nx, nx);
        let mut fu = DMatrix::zeros(nx, n);
        for j in 0..n {
            fx[(j, n + j)] = 1.0;
        }
        match self.kind {
            ModelKind::DoubleIntegrator => {
                for j in 0..n {
                    fu[(n + j, j)] = 1.0;
                }
            }
            ModelKind::Pendulum | ModelKind::Arm => {
                let q = x.q();
                let dq = x.dq();
                let m = self.mass_matrix(&q);
                let chol = m.clone().cholesky().ok_or(DynamicsError::SingularMass)?;
                let dm = self.mass_matrix_partials(&q);
                let d2m = self.mass_matrix_second_partials(&q);
                let gamma = Self::christoffel(&dm);
                let bias = Self::coriolis_bias(&gamma, &dq);
                let g = self.gravity_torque(&q);
                let dg = self.gravity_jacobian(&q);
                let acc = chol.solve(&(&u.0 - &bias - &g));

                // d acc / dq: column p is M^-1 (-dM_p acc - d bias/dq_p - dg_p)
                for p in 0..n {
                    let mut rhs = -(&dm[p] * &acc);
                    for k in 0..n {
                        let mut s = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                let dgamma = 0.5
                                    * (d2m[p][i][(k, j)] + d2m[p][j][(k, i)] - d2m[p][k][(i, j)]);
                                s += dgamma * dq[i] * dq[j];
                            }
                        }
                        rhs[k] -= s;
                    }
                    rhs -= dg.column(p);
                    let col = chol.solve(&rhs);
                    fx.view_mut((n, p), (n, 1)).copy_from(&col);
                }
                // d acc / ddq: column m is M^-1 (-2 sum_i gamma[i][m][k] dq_i)
                for mcol in 0..n {
                    let mut rhs = DVector::zeros(n);
                    for k in 0..n {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += gamma[i][mcol][k] * dq[i];
                        }
                        rhs[k] = -2.0 * s;
                    }
                    let col = chol.solve(&rhs);
                    fx.view_mut((n, n + mcol), (n, 1)).copy_from(&col);
                }
                // d acc / du = M^-1
                let minv = chol.inverse();
                fu.view_mut((n, 0), (n, n)).copy_from(&minv);
            }
        }
        Ok((fx, fu))
    }

    /// One classical RK4 step over `dt` with zero-order-hold control.
    pub fn rk4_step(&self, x: &StateVec, u: &ControlVec) -> Result<StateVec, DynamicsError> {
        let h = self.dt;
        let k1 = self.continuous_dynamics(x, u)?;
        let k2 = self.continuous_dynamics(&StateVec(&x.0 + &k1 * (h / 2.0)), u)?;
        let k3 = self.continuous_dynamics(&StateVec(&x.0 + &k2 * (h / 2.0)), u)?;
        let k4 = self.continuous_dynamics(&StateVec(&x.0 + &k3 * h), u)?;
        let next = &x.0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let next = StateVec(next);
        if !next.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        Ok(next)
    }

    /// Exact Jacobians of `rk4_step`, chained through the four stages.
    pub fn discrete_jacobians(
        &self,
        x: &StateVec,
        u: &ControlVec,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        let h = self.dt;
        let nx = self.n_x();
        let eye = DMatrix::<f64>::identity(nx, nx);

        let k1 = self.continuous_dynamics(x, u)?;
        let (f1x, f1u) = self.continuous_jacobians(x, u)?;
        let x2 = StateVec(&x.0 + &k1 * (h / 2.0));
        let k2 = self.continuous_dynamics(&x2, u)?;
        let (f2x, f2u) = self.continuous_jacobians(&x2, u)?;
        let x3 = StateVec(&x.0 + &k2 * (h / 2.0));
        let k3 = self.continuous_dynamics(&x3, u)?;
        let (f3x, f3u) = self.continuous_jacobians(&x3, u)?;
        let x4 = StateVec(&x.0 + &k3 * h);
        let (f4x, f4u) = self.continuous_jacobians(&x4, u)?;

        let dk1x = f1x;
        let dk1u = f1u;
        let dk2x = &f2x * (&eye + &dk1x * (h / 2.0));
        let dk2u = &f2x * (&dk1u * (h / 2.0)) + f2u;
        let dk3x = &f3x * (&eye + &dk2x * (h / 2.0));
        let dk3u = &f3x * (&dk2u * (h / 2.0)) + f3u;
        let dk4x = &f4x * (&eye + &dk3x * h);
        let dk4u = &f4x * (&dk3u * h) + f4u;

        let a = &eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
        let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite);
        }
        Ok((a, b))
    }

    /// Gravity-compensating torque if it fits the control box.
    ///
    /// When `Some(u)` is returned, `(q, 0)` is an exact fixed point of
    /// `rk4_step` under `u`.
    pub fn equilibrium_control(&self, q: &DVector<f64>) -> Option<ControlVec> {
        let g = self.gravity_torque(q);
        for j in 0..self.n_joints {
            if g[j].abs() > self.u_max[j] {
                return None;
            }
        }
        Some(ControlVec(g))
    }
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(model: &ManipulatorModel, rng: &mut ChaCha8Rng) -> (StateVec, ControlVec) {
        let n = model.n_joints;
        let mut x = DVector::zeros(2 * n);
        let mut u = DVector::zeros(n);
        for j in 0..n {
            x[j] = rng.random_range(model.q_min[j]..model.q_max[j]);
            x[n + j] = rng.random_range(-model.v_max[j]..model.v_max[j]);
            u[j] = rng.random_range(-model.u_max[j]..model.u_max[j]);
        }
        (StateVec(x), ControlVec(u))
    }

    #[test]
    fn pendulum_inverted_equilibrium() {
        let m = ManipulatorModel::pendulum();
        let x = StateVec::from_parts(&[std::f64::consts::PI], &[0.0]);
        let u = ControlVec::zeros(1);
        let xdot = m.continuous_dynamics(&x, &u).unwrap();
        assert_abs_diff_eq!(xdot[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(xdot[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn double_integrator_derivative() {
        let m = ManipulatorModel::double_integrator();
        let x = StateVec::from_parts(&[0.3], &[0.5]);
        let u = ControlVec(DVector::from_element(1, 1.0));
        let xdot = m.continuous_dynamics(&x, &u).unwrap();
        assert_eq!(xdot[0], 0.5);
        assert_eq!(xdot[1], 1.0);
    }

    #[test]
    fn arm_gravity_compensation_is_equilibrium() {
        let m = ManipulatorModel::arm3();
        let q = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let g = m.gravity_torque(&q);
        let x = StateVec::from_parts(q.as_slice(), &[0.0; 3]);
        let xdot = m.continuous_dynamics(&x, &ControlVec(g)).unwrap();
        assert!(xdot.norm() < 1e-12, "residual {}", xdot.norm());
    }

    #[test]
    fn gravity_matches_potential_gradient() {
        let m = ManipulatorModel::arm3();
        let q = DVector::from_vec(vec![0.7, -0.4, 1.1]);
        let g = m.gravity_torque(&q);
        let h = 1e-6;
        for p in 0..3 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[p] += h;
            qm[p] -= h;
            let up = m.energy(&StateVec::from_parts(qp.as_slice(), &[0.0; 3]));
            let um = m.energy(&StateVec::from_parts(qm.as_slice(), &[0.0; 3]));
            assert_abs_diff_eq!(g[p], (up - um) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn rk4_double_integrator_exact() {
        let m = ManipulatorModel::double_integrator();
        let u = ControlVec::zeros(1);
        let x0 = m.rk4_step(&StateVec::from_parts(&[0.0], &[0.0]), &u).unwrap();
        assert_eq!(x0.0, DVector::zeros(2));
        let x1 = m.rk4_step(&StateVec::from_parts(&[0.0], &[1.0]), &u).unwrap();
        assert_abs_diff_eq!(x1[0], 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(x1[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rk4_pendulum_gravity_compensated_fixed_point() {
        let m = ManipulatorModel::pendulum();
        let q = 0.1;
        let comp = m.gravity_torque(&DVector::from_element(1, q));
        let x = StateVec::from_parts(&[q], &[0.0]);
        let next = m.rk4_step(&x, &ControlVec(comp)).unwrap();
        assert!((next.0 - x.0).norm() < 1e-12);
    }

    #[test]
    fn discrete_jacobians_double_integrator_closed_form() {
        let m = ManipulatorModel::double_integrator();
        let (a, b) = m
            .discrete_jacobians(&StateVec::from_parts(&[0.2], &[-0.4]), &ControlVec::zeros(1))
            .unwrap();
        let dt = m.dt;
        assert_abs_diff_eq!(a[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a[(0, 1)], dt, epsilon = 1e-14);
        assert_abs_diff_eq!(a[(1, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a[(1, 1)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b[(0, 0)], dt * dt / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b[(1, 0)], dt, epsilon = 1e-14);
    }

    #[test]
    fn discrete_jacobian_pendulum_matches_matrix_exponential() {
        let m = ManipulatorModel::pendulum();
        let (a, _) = m
            .discrete_jacobians(&StateVec::zeros(1), &ControlVec::zeros(1))
            .unwrap();
        // Linearized pendulum at the stable equilibrium: xdot = [[0,1],[-w^2,0]] x.
        let w = (m.gravity / m.link_lengths[0]).sqrt();
        let t = m.dt;
        let expected = [
            [(w * t).cos(), (w * t).sin() / w],
            [-w * (w * t).sin(), (w * t).cos()],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(a[(i, j)], expected[i][j], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn discrete_jacobians_match_finite_differences() {
        let h = 1e-5;
        for model in [
            ManipulatorModel::double_integrator(),
            ManipulatorModel::pendulum(),
            ManipulatorModel::arm3(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..100 {
                let (x, u) = random_state(&model, &mut rng);
                let (a, b) = model.discrete_jacobians(&x, &u).unwrap();
                let scale = a.norm().max(1.0);
                for col in 0..model.n_x() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[col] += h;
                    xm[col] -= h;
                    let fp = model.rk4_step(&xp, &u).unwrap();
                    let fm = model.rk4_step(&xm, &u).unwrap();
                    let fd = (&fp.0 - &fm.0) / (2.0 * h);
                    let err = (fd - a.column(col)).norm() / scale;
                    assert!(err <= 1e-4, "{:?} dA col {col}: rel err {err}", model.kind);
                }
                for col in 0..model.n_u() {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[col] += h;
                    um[col] -= h;
                    let fp = model.rk4_step(&x, &up).unwrap();
                    let fm = model.rk4_step(&x, &um).unwrap();
                    let fd = (&fp.0 - &fm.0) / (2.0 * h);
                    let err = (fd - b.column(col)).norm() / b.norm().max(1.0);
                    assert!(err <= 1e-4, "{:?} dB col {col}: rel err {err}", model.kind);
                }
            }
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Fixed-horizon integration error against a dt/16 reference.
        let base = ManipulatorModel::pendulum();
        let x0 = StateVec::from_parts(&[0.5], &[0.0]);
        let u = ControlVec::zeros(1);
        let horizon = 0.32;
        let integrate = |dt: f64| {
            let m = base.clone().with_dt(dt);
            let steps = (horizon / dt).round() as usize;
            let mut x = x0.clone();
            for _ in 0..steps {
                x = m.rk4_step(&x, &u).unwrap();
            }
            x
        };
        let dts = [0.04, 0.02, 0.01, 0.005];
        let mut logs = Vec::new();
        for &dt in &dts {
            let coarse = integrate(dt);
            let fine = integrate(dt / 16.0);
            let err = (coarse.0 - fine.0).norm();
            logs.push((dt.ln(), err.ln()));
        }
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|(x, _)| x).sum();
        let sy: f64 = logs.iter().map(|(_, y)| y).sum();
        let sxx: f64 = logs.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = logs.iter().map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((3.7..=4.3).contains(&slope), "fitted order {slope}");
    }

    #[test]
    fn pendulum_conserves_energy() {
        let m = ManipulatorModel::pendulum();
        let u = ControlVec::zeros(1);
        let mut x = StateVec::from_parts(&[1.0], &[0.0]);
        let e0 = m.energy(&x);
        let mut drift: f64 = 0.0;
        for _ in 0..200 {
            x = m.rk4_step(&x, &u).unwrap();
            drift = drift.max((m.energy(&x) - e0).abs());
        }
        assert!(drift / e0.abs().max(1.0) <= 1e-6, "drift {drift}");
    }

    #[test]
    fn arm_conserves_energy() {
        let m = ManipulatorModel::arm3();
        let u = ControlVec::zeros(3);
        let mut x = StateVec::from_parts(&[0.4, -0.3, 0.2], &[0.0, 0.0, 0.0]);
        let e0 = m.energy(&x);
        let mut drift: f64 = 0.0;
        for _ in 0..100 {
            x = m.rk4_step(&x, &u).unwrap();
            drift = drift.max((m.energy(&x) - e0).abs());
        }
        assert!(drift / e0.abs().max(1.0) <= 1e-5, "drift {drift}");
    }

    #[test]
    fn equilibrium_control_cases() {
        let di = ManipulatorModel::double_integrator();
        let u = di.equilibrium_control(&DVector::from_element(1, 0.37)).unwrap();
        assert_eq!(u[0], 0.0);

        let p = ManipulatorModel::pendulum();
        let u0 = p.equilibrium_control(&DVector::zeros(1)).unwrap();
        assert_eq!(u0[0], 0.0);
        assert!(p
            .equilibrium_control(&DVector::from_element(1, std::f64::consts::FRAC_PI_2))
            .is_none());
    }

    #[test]
    fn equilibrium_control_gives_rk4_fixed_point() {
        let m = ManipulatorModel::arm3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut held = 0;
        for _ in 0..50 {
            let q = DVector::from_fn(3, |j, _| rng.random_range(m.q_min[j]..m.q_max[j]));
            if let Some(u) = m.equilibrium_control(&q) {
                held += 1;
                let x = StateVec::from_parts(q.as_slice(), &[0.0; 3]);
                let next = m.rk4_step(&x, &u).unwrap();
                assert!((next.0 - x.0).norm() <= 1e-10);
            }
        }
        assert!(held > 0, "no holdable configurations sampled");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = ManipulatorModel::arm3();
        let bad = StateVec::zeros(2);
        let err = m.continuous_dynamics(&bad, &ControlVec::zeros(3)).unwrap_err();
        assert!(matches!(err, DynamicsError::DimensionMismatch { .. }));
    }

    #[test]
    fn named_models_validate() {
        for name in ["double_integrator", "pendulum", "arm3"] {
            ManipulatorModel::by_name(name).unwrap().validate().unwrap();
        }
        assert!(ManipulatorModel::by_name("hexapod").is_none());
    }
}

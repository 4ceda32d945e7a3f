//! LQR-structured equality QP solved by backward/forward Riccati recursion.
//!
//! The QP minimizes
//! `sum_i 0.5 dx'Q dx + 0.5 du'R du + dx'S du + gx'dx + gu'du + terminal`
//! subject to the linearized shooting defects
//! `dx_{i+1} = A_i dx_i + B_i du_i + d_i` and a pinned `dx_0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("control Hessian not positive definite at stage {stage}")]
    NotPositiveDefinite { stage: usize },
    #[error("non-finite value in backward pass at stage {stage}")]
    NonFinite { stage: usize },
}

/// Quadratic data for one shooting interval.
#[derive(Clone, Debug)]
pub struct StageQp {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Defect `f(x_i, u_i) - x_{i+1}` of the current iterate.
    pub d: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Cross term, `n_x x n_u`.
    pub s: DMatrix<f64>,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct TerminalQp {
    pub q: DMatrix<f64>,
    pub gx: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    /// State steps, length N+1 (`dx[0]` equals the pinned value).
    pub dx: Vec<DVector<f64>>,
    /// Control steps, length N.
    pub du: Vec<DVector<f64>>,
    /// Costates for the defect constraints; `multipliers[i]` pairs with the
    /// defect linking stage i to i+1, i = 0..N-1.
    pub multipliers: Vec<DVector<f64>>,
}

impl QpSolution {
    pub fn max_step(&self) -> f64 {
        let dx = self
            .dx
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.du
            .iter()
            .flat_map(|v| v.iter())
            .fold(dx, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.du.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

pub fn riccati_qp(
    stages: &[StageQp],
    terminal: &TerminalQp,
    dx0: &DVector<f64>,
) -> Result<QpSolution, RiccatiError> {
    let n = stages.len();
    assert!(n >= 1, "at least one stage required");

    // Backward pass: cost-to-go terms P_i, p_i and feedback gains.
    let mut p_mats = vec![DMatrix::zeros(0, 0); n + 1];
    let mut p_vecs = vec![DVector::zeros(0); n + 1];
    p_mats[n] = terminal.q.clone();
    p_vecs[n] = terminal.gx.clone();
    let mut gains: Vec<(DMatrix<f64>, DVector<f64>)> = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n];

    for (i, st) in stages.iter().enumerate().rev() {
        let p_mat = &p_mats[i + 1];
        let p_vec = &p_vecs[i + 1];
        let pd = p_vec + p_mat * &st.d;
        let quu = &st.r + st.b.transpose() * p_mat * &st.b;
        let qxx = &st.q + st.a.transpose() * p_mat * &st.a;
        let qxu = &st.s + st.a.transpose() * p_mat * &st.b;
        let qu = &st.gu + st.b.transpose() * &pd;
        let qx = &st.gx + st.a.transpose() * &pd;

        let chol = quu
            .clone()
            .cholesky()
            .ok_or(RiccatiError::NotPositiveDefinite { stage: i })?;
        let k_gain = -chol.solve(&qxu.transpose());
        let k_ff = -chol.solve(&qu);

        let mut pm = &qxx + &qxu * &k_gain;
        pm = (&pm + pm.transpose()) * 0.5;
        let pv = &qx + &qxu * &k_ff;
        if pv.iter().any(|v| !v.is_finite()) || pm.iter().any(|v| !v.is_finite()) {
            return Err(RiccatiError::NonFinite { stage: i });
        }
        p_mats[i] = pm;
        p_vecs[i] = pv;
        gains[i] = (k_gain, k_ff);
    }

    // Forward rollout of the linearized system, accumulating costates.
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    let mut multipliers = Vec::with_capacity(n);
    dx.push(dx0.clone());

    for (i, st) in stages.iter().enumerate() {
        let (kg, kf) = &gains[i];
        let ui = kg * &dx[i] + kf;
        let xi1 = &st.a * &dx[i] + &st.b * &ui + &st.d;
        let lambda = &p_mats[i + 1] * &xi1 + &p_vecs[i + 1];
        du.push(ui);
        dx.push(xi1);
        multipliers.push(lambda);
    }

    let sol = QpSolution { dx, du, multipliers };
    if !sol.is_finite() {
        return Err(RiccatiError::NonFinite { stage: 0 });
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn random_instance(
        n_stages: usize,
        nx: usize,
        nu: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<StageQp>, TerminalQp, DVector<f64>) {
        let stages = (0..n_stages)
            .map(|_| {
                // Joint PSD Hessian over (x, u) so the cross term is admissible.
                let h = random_psd(nx + nu, rng);
                StageQp {
                    a: DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0)),
                    b: DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0)),
                    d: DVector::from_fn(nx, |_, _| rng.random_range(-0.5..0.5)),
                    q: h.view((0, 0), (nx, nx)).into_owned(),
                    r: h.view((nx, nx), (nu, nu)).into_owned(),
                    s: h.view((0, nx), (nx, nu)).into_owned(),
                    gx: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
                    gu: DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0)),
                }
            })
            .collect();
        let terminal = TerminalQp {
            q: random_psd(nx, rng),
            gx: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        };
        let dx0 = DVector::from_fn(nx, |_, _| rng.random_range(-0.5..0.5));
        (stages, terminal, dx0)
    }

    /// Dense KKT assembly and LU solve, the independent reference route.
    fn dense_kkt(
        stages: &[StageQp],
        terminal: &TerminalQp,
        dx0: &DVector<f64>,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = stages.len();
        let nx = terminal.q.nrows();
        let nu = stages[0].b.ncols();
        let nz = (n + 1) * nx + n * nu;
        let nc = (n + 1) * nx; // init pin + defects
        let xi = |i: usize| i * nx;
        let ui = |i: usize| (n + 1) * nx + i * nu;

        let mut h = DMatrix::zeros(nz, nz);
        let mut g = DVector::zeros(nz);
        for (i, st) in stages.iter().enumerate() {
            h.view_mut((xi(i), xi(i)), (nx, nx)).copy_from(&st.q);
            h.view_mut((ui(i), ui(i)), (nu, nu)).copy_from(&st.r);
            h.view_mut((xi(i), ui(i)), (nx, nu)).copy_from(&st.s);
            h.view_mut((ui(i), xi(i)), (nu, nx)).copy_from(&st.s.transpose());
            g.rows_mut(xi(i), nx).copy_from(&st.gx);
            g.rows_mut(ui(i), nu).copy_from(&st.gu);
        }
        h.view_mut((xi(n), xi(n)), (nx, nx)).copy_from(&terminal.q);
        g.rows_mut(xi(n), nx).copy_from(&terminal.gx);

        let mut c = DMatrix::zeros(nc, nz);
        let mut rhs = DVector::zeros(nc);
        c.view_mut((0, 0), (nx, nx)).copy_from(&DMatrix::identity(nx, nx));
        rhs.rows_mut(0, nx).copy_from(dx0);
        for (i, st) in stages.iter().enumerate() {
            let row = (i + 1) * nx;
            c.view_mut((row, xi(i)), (nx, nx)).copy_from(&st.a);
            c.view_mut((row, ui(i)), (nx, nu)).copy_from(&st.b);
            c.view_mut((row, xi(i + 1)), (nx, nx))
                .copy_from(&(-DMatrix::<f64>::identity(nx, nx)));
            rhs.rows_mut(row, nx).copy_from(&(-&st.d));
        }

        let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
        kkt.view_mut((0, nz), (nz, nc)).copy_from(&c.transpose());
        kkt.view_mut((nz, 0), (nc, nz)).copy_from(&c);
        let mut full_rhs = DVector::zeros(nz + nc);
        full_rhs.rows_mut(0, nz).copy_from(&(-&g));
        full_rhs.rows_mut(nz, nc).copy_from(&rhs);
        let sol = kkt.lu().solve(&full_rhs).expect("dense KKT solvable");

        let dx = (0..=n).map(|i| sol.rows(xi(i), nx).into_owned()).collect();
        let du = (0..n).map(|i| sol.rows(ui(i), nu).into_owned()).collect();
        (dx, du)
    }

    #[test]
    fn zero_gradients_zero_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut stages, mut terminal, _) = random_instance(4, 3, 2, &mut rng);
        for st in &mut stages {
            st.gx.fill(0.0);
            st.gu.fill(0.0);
            st.d.fill(0.0);
        }
        terminal.gx.fill(0.0);
        let sol = riccati_qp(&stages, &terminal, &DVector::zeros(3)).unwrap();
        assert!(sol.max_step() < 1e-14);
    }

    #[test]
    fn matches_dense_kkt_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = rng.random_range(1..=5);
            let (stages, terminal, dx0) = random_instance(n, 4, 2, &mut rng);
            let sol = riccati_qp(&stages, &terminal, &dx0).unwrap();
            let (dx_ref, du_ref) = dense_kkt(&stages, &terminal, &dx0);
            for i in 0..=n {
                assert!(
                    (&sol.dx[i] - &dx_ref[i]).norm() < 1e-8,
                    "trial {trial} dx[{i}]"
                );
            }
            for i in 0..n {
                assert!(
                    (&sol.du[i] - &du_ref[i]).norm() < 1e-8,
                    "trial {trial} du[{i}]"
                );
            }
        }
    }

    #[test]
    fn multipliers_satisfy_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = rng.random_range(2..=5);
            let (stages, terminal, dx0) = random_instance(n, 3, 2, &mut rng);
            let sol = riccati_qp(&stages, &terminal, &dx0).unwrap();
            // Stationarity in u_i: R du + S' dx + gu + B' lambda_{i+1} = 0.
            for (i, st) in stages.iter().enumerate() {
                let res = &st.r * &sol.du[i]
                    + st.s.transpose() * &sol.dx[i]
                    + &st.gu
                    + st.b.transpose() * &sol.multipliers[i];
                assert!(res.norm() < 1e-8, "stage {i} u-stationarity {}", res.norm());
            }
            // Stationarity in x_i (interior stages):
            // Q dx + S du + gx + A' lambda_{i+1} - lambda_i = 0.
            for i in 1..n {
                let st = &stages[i];
                let res = &st.q * &sol.dx[i] + &st.s * &sol.du[i] + &st.gx
                    + st.a.transpose() * &sol.multipliers[i]
                    - &sol.multipliers[i - 1];
                assert!(res.norm() < 1e-8, "stage {i} x-stationarity {}", res.norm());
            }
            // Terminal: Q_N dx_N + g_N - lambda_N = 0.
            let res = &terminal.q * &sol.dx[n] + &terminal.gx - &sol.multipliers[n - 1];
            assert!(res.norm() < 1e-8, "terminal stationarity {}", res.norm());
        }
    }

    #[test]
    fn indefinite_control_hessian_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut stages, terminal, dx0) = random_instance(3, 3, 2, &mut rng);
        stages[1].r = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]));
        stages[1].s.fill(0.0);
        let err = riccati_qp(&stages, &terminal, &dx0).unwrap_err();
        assert!(matches!(err, RiccatiError::NotPositiveDefinite { .. }));
    }
}

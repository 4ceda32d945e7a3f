//! Conservative safe-set models: a velocity-norm upper bound `phi(q)` with
//! safety margin `alpha` and step bound `nbar`.
//!
//! Membership of a state `(q, dq)` is the scalar test
//! `(1 - alpha) * phi(q) - ||dq|| >= 0`. The bound is backed either by a
//! multilinearly interpolated grid over joint positions or by an MLP loaded
//! from a weights file (inference only; training happens elsewhere).

pub mod boundary;
pub mod kernel;

pub use boundary::{fit_grid_from_samples, sample_boundary, BoundaryOutput, BoundarySample};
pub use kernel::{compute_kernel, kernel_to_safeset, KernelGrid};

use crate::dynamics::StateVec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafeSetError {
    #[error("position outside the safe-set domain: {0}")]
    OutOfDomain(String),
    #[error("invalid safe set: {0}")]
    Invalid(String),
    #[error("empty sample set")]
    EmptySamples,
    #[error("kernel iteration did not converge after {iterations} passes")]
    KernelNotConverged { iterations: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Tolerance for positions marginally outside the grid domain; such
/// positions are clamped onto the boundary instead of rejected.
pub const DOMAIN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            // Overflow-safe softplus.
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Linear => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Linear => 1.0,
        }
    }
}

/// Input encoding of joint positions for the MLP bound. Files declare their
/// own convention in the `features` field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    Plain,
    SinCos,
}

#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Dense feed-forward network mapping encoded positions to a scalar bound;
/// the output is clamped at zero so `phi >= 0` by construction.
#[derive(Clone, Debug)]
pub struct MlpVelocityBound {
    pub layers: Vec<MlpLayer>,
    pub features: FeatureMap,
}

impl MlpVelocityBound {
    pub fn n_joints(&self) -> usize {
        let input = self.layers[0].weights.ncols();
        match self.features {
            FeatureMap::Plain => input,
            FeatureMap::SinCos => input / 2,
        }
    }

    fn encode(&self, q: &DVector<f64>) -> DVector<f64> {
        match self.features {
            FeatureMap::Plain => q.clone(),
            FeatureMap::SinCos => {
                let n = q.len();
                DVector::from_fn(2 * n, |i, _| if i < n { q[i].sin() } else { q[i - n].cos() })
            }
        }
    }

    /// Jacobian of the feature encoding, `n_features x n_joints`.
    fn encode_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = q.len();
        match self.features {
            FeatureMap::Plain => DMatrix::identity(n, n),
            FeatureMap::SinCos => {
                let mut j = DMatrix::zeros(2 * n, n);
                for i in 0..n {
                    j[(i, i)] = q[i].cos();
                    j[(n + i, i)] = -q[i].sin();
                }
                j
            }
        }
    }

    pub fn forward(&self, q: &DVector<f64>) -> f64 {
        let mut h = self.encode(q);
        for layer in &self.layers {
            let z = &layer.weights * h + &layer.bias;
            h = z.map(|x| layer.activation.apply(x));
        }
        h[0].max(0.0)
    }

    /// Gradient of `forward` with respect to `q` (zero where the output
    /// clamp is active).
    pub fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut h = self.encode(q);
        let mut pres: Vec<DVector<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = &layer.weights * &h + &layer.bias;
            pres.push(z.clone());
            h = z.map(|x| layer.activation.apply(x));
        }
        if h[0] <= 0.0 {
            return DVector::zeros(q.len());
        }
        // Backward pass.
        let mut grad = DVector::from_element(1, 1.0);
        for (layer, z) in self.layers.iter().zip(pres.iter()).rev() {
            let dz = DVector::from_fn(z.len(), |i, _| layer.activation.derivative(z[i]) * grad[i]);
            grad = layer.weights.transpose() * dz;
        }
        self.encode_jacobian(q).transpose() * grad
    }

    fn validate(&self) -> Result<(), SafeSetError> {
        if self.layers.is_empty() {
            return Err(SafeSetError::Invalid("mlp needs at least one layer".into()));
        }
        let mut dim = self.layers[0].weights.ncols();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.ncols() != dim {
                return Err(SafeSetError::Invalid(format!(
                    "layer {i} expects input {} but gets {dim}",
                    layer.weights.ncols()
                )));
            }
            if layer.bias.len() != layer.weights.nrows() {
                return Err(SafeSetError::Invalid(format!("layer {i} bias length mismatch")));
            }
            dim = layer.weights.nrows();
        }
        if dim != 1 {
            return Err(SafeSetError::Invalid("final layer must output a scalar".into()));
        }
        Ok(())
    }
}

/// Interpolated table of the velocity bound over a position grid.
#[derive(Clone, Debug)]
pub struct GridVelocityBound {
    /// Strictly increasing node coordinates per joint axis.
    pub axes: Vec<Vec<f64>>,
    /// Row-major (last axis fastest) node values, all nonnegative.
    pub values: Vec<f64>,
}

impl GridVelocityBound {
    pub fn n_joints(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (a, &i) in idx.iter().enumerate() {
            flat = flat * self.axes[a].len() + i;
        }
        flat
    }

    fn validate(&self) -> Result<(), SafeSetError> {
        if self.axes.is_empty() {
            return Err(SafeSetError::Invalid("grid needs at least one axis".into()));
        }
        for (a, axis) in self.axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(SafeSetError::Invalid(format!("axis {a} needs >= 2 nodes")));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(SafeSetError::Invalid(format!("axis {a} not strictly increasing")));
            }
        }
        if self.values.len() != self.n_nodes() {
            return Err(SafeSetError::Invalid(format!(
                "expected {} values, got {}",
                self.n_nodes(),
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SafeSetError::Invalid("grid values must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Per-axis cell index and barycentric coordinate for a clamped query.
    fn locate(&self, q: &DVector<f64>) -> Result<Vec<(usize, f64)>, SafeSetError> {
        if q.len() != self.axes.len() {
            return Err(SafeSetError::Invalid(format!(
                "query dim {} vs grid dim {}",
                q.len(),
                self.axes.len()
            )));
        }
        let mut cells = Vec::with_capacity(q.len());
        for (axis, &qa) in self.axes.iter().zip(q.iter()) {
            let lo = axis[0];
            let hi = *axis.last().unwrap();
            if qa < lo - DOMAIN_TOL || qa > hi + DOMAIN_TOL {
                return Err(SafeSetError::OutOfDomain(format!("{qa} outside [{lo}, {hi}]")));
            }
            let qa = qa.clamp(lo, hi);
            let k = axis.partition_point(|v| *v <= qa).saturating_sub(1);
            let k = k.min(axis.len() - 2);
            let t = (qa - axis[k]) / (axis[k + 1] - axis[k]);
            cells.push((k, t));
        }
        Ok(cells)
    }

    pub fn interpolate(&self, q: &DVector<f64>) -> Result<f64, SafeSetError> {
        let cells = self.locate(q)?;
        let n = cells.len();
        let mut value = 0.0;
        let mut idx = vec![0usize; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for (a, &(k, t)) in cells.iter().enumerate() {
                if corner >> a & 1 == 1 {
                    w *= t;
                    idx[a] = k + 1;
                } else {
                    w *= 1.0 - t;
                    idx[a] = k;
                }
            }
            if w != 0.0 {
                value += w * self.values[self.flat_index(&idx)];
            }
        }
        Ok(value)
    }

    /// Within-cell interpolation slopes, one per axis.
    pub fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, SafeSetError> {
        let cells = self.locate(q)?;
        let n = cells.len();
        let mut grad = DVector::zeros(n);
        let mut idx = vec![0usize; n];
        for axis in 0..n {
            let h = self.axes[axis][cells[axis].0 + 1] - self.axes[axis][cells[axis].0];
            let mut slope = 0.0;
            for corner in 0..(1usize << n) {
                let mut w = 1.0;
                for (a, &(k, t)) in cells.iter().enumerate() {
                    let hi = corner >> a & 1 == 1;
                    if a == axis {
                        w *= if hi { 1.0 } else { -1.0 };
                    } else {
                        w *= if hi { t } else { 1.0 - t };
                    }
                    idx[a] = if hi { k + 1 } else { k };
                }
                if w != 0.0 {
                    slope += w * self.values[self.flat_index(&idx)];
                }
            }
            grad[axis] = slope / h;
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug)]
pub enum SafeSetPayload {
    Grid(GridVelocityBound),
    Mlp(MlpVelocityBound),
}

/// Evaluable conservative safe set: `phi` bound, margin, and step budget.
///
/// Immutable after construction; evaluation is pure and thread-safe.
#[derive(Clone, Debug)]
pub struct SafeSetModel {
    pub alpha: f64,
    pub nbar: usize,
    pub payload: SafeSetPayload,
    pub metadata: serde_json::Value,
}

impl SafeSetModel {
    pub fn new_grid(alpha: f64, nbar: usize, grid: GridVelocityBound) -> Result<Self, SafeSetError> {
        let model = SafeSetModel {
            alpha,
            nbar,
            payload: SafeSetPayload::Grid(grid),
            metadata: serde_json::Value::Null,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn new_mlp(alpha: f64, nbar: usize, mlp: MlpVelocityBound) -> Result<Self, SafeSetError> {
        let model = SafeSetModel {
            alpha,
            nbar,
            payload: SafeSetPayload::Mlp(mlp),
            metadata: serde_json::Value::Null,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha.clamp(0.0, 1.0);
        self
    }

    pub fn validate(&self) -> Result<(), SafeSetError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SafeSetError::Invalid(format!("alpha {} not in [0,1]", self.alpha)));
        }
        if self.nbar < 1 {
            return Err(SafeSetError::Invalid("nbar must be >= 1".into()));
        }
        match &self.payload {
            SafeSetPayload::Grid(g) => g.validate(),
            SafeSetPayload::Mlp(m) => m.validate(),
        }
    }

    pub fn n_joints(&self) -> usize {
        match &self.payload {
            SafeSetPayload::Grid(g) => g.n_joints(),
            SafeSetPayload::Mlp(m) => m.n_joints(),
        }
    }

    /// Velocity-norm bound at position `q` (always >= 0).
    pub fn eval_phi(&self, q: &DVector<f64>) -> Result<f64, SafeSetError> {
        match &self.payload {
            SafeSetPayload::Grid(g) => g.interpolate(q),
            SafeSetPayload::Mlp(m) => Ok(m.forward(q)),
        }
    }

    /// Membership value `(1 - alpha) * phi(q) - ||dq||` and the inside flag
    /// (the boundary counts as inside).
    pub fn eval_membership(&self, x: &StateVec) -> Result<(f64, bool), SafeSetError> {
        let value = (1.0 - self.alpha) * self.eval_phi(&x.q())? - x.speed();
        Ok((value, value >= 0.0))
    }

    /// Gradient of the membership value with respect to the full state.
    /// The velocity part is `-dq/||dq||`, with subgradient 0 at `dq = 0`.
    pub fn membership_gradient(&self, x: &StateVec) -> Result<DVector<f64>, SafeSetError> {
        let n = x.n_joints();
        let q = x.q();
        let dq = x.dq();
        let phi_grad = match &self.payload {
            SafeSetPayload::Grid(g) => g.gradient(&q)?,
            SafeSetPayload::Mlp(m) => m.gradient(&q),
        };
        let mut grad = DVector::zeros(2 * n);
        for j in 0..n {
            grad[j] = (1.0 - self.alpha) * phi_grad[j];
        }
        let speed = dq.norm();
        if speed > 0.0 {
            for j in 0..n {
                grad[n + j] = -dq[j] / speed;
            }
        }
        Ok(grad)
    }

    pub fn to_json_string(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&SafeSetFileRepr::from(self))
    }

    pub fn save(&self, path: &Path) -> Result<(), SafeSetError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, SafeSetError> {
        let repr: SafeSetFileRepr = serde_json::from_str(s)?;
        let model = SafeSetModel::try_from(repr)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, SafeSetError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpLayerRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SafeSetFileRepr {
    Grid {
        alpha: f64,
        nbar: usize,
        axes: Vec<Vec<f64>>,
        values: Vec<f64>,
        #[serde(default)]
        metadata: serde_json::Value,
    },
    Mlp {
        alpha: f64,
        nbar: usize,
        layers: Vec<MlpLayerRepr>,
        #[serde(default)]
        features: FeatureMap,
        #[serde(default)]
        metadata: serde_json::Value,
    },
}

impl From<&SafeSetModel> for SafeSetFileRepr {
    fn from(m: &SafeSetModel) -> Self {
        match &m.payload {
            SafeSetPayload::Grid(g) => SafeSetFileRepr::Grid {
                alpha: m.alpha,
                nbar: m.nbar,
                axes: g.axes.clone(),
                values: g.values.clone(),
                metadata: m.metadata.clone(),
            },
            SafeSetPayload::Mlp(mlp) => SafeSetFileRepr::Mlp {
                alpha: m.alpha,
                nbar: m.nbar,
                layers: mlp
                    .layers
                    .iter()
                    .map(|l| MlpLayerRepr {
                        weights: (0..l.weights.nrows())
                            .map(|r| l.weights.row(r).iter().copied().collect())
                            .collect(),
                        bias: l.bias.iter().copied().collect(),
                        activation: l.activation,
                    })
                    .collect(),
                features: mlp.features,
                metadata: m.metadata.clone(),
            },
        }
    }
}

impl TryFrom<SafeSetFileRepr> for SafeSetModel {
    type Error = SafeSetError;

    fn try_from(repr: SafeSetFileRepr) -> Result<Self, SafeSetError> {
        match repr {
            SafeSetFileRepr::Grid { alpha, nbar, axes, values, metadata } => Ok(SafeSetModel {
                alpha,
                nbar,
                payload: SafeSetPayload::Grid(GridVelocityBound { axes, values }),
                metadata,
            }),
            SafeSetFileRepr::Mlp { alpha, nbar, layers, features, metadata } => {
                let layers = layers
                    .into_iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let rows = l.weights.len();
                        let cols = l.weights.first().map_or(0, |r| r.len());
                        if rows == 0 || cols == 0 || l.weights.iter().any(|r| r.len() != cols) {
                            return Err(SafeSetError::Invalid(format!("layer {i} ragged weights")));
                        }
                        Ok(MlpLayer {
                            weights: DMatrix::from_fn(rows, cols, |r, c| l.weights[r][c]),
                            bias: DVector::from_vec(l.bias),
                            activation: l.activation,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(SafeSetModel {
                    alpha,
                    nbar,
                    payload: SafeSetPayload::Mlp(MlpVelocityBound { layers, features }),
                    metadata,
                })
            }
        }
    }
}

/// Uniform grid axis over `[lo, hi]` with `n` nodes.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

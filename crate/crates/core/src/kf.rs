//! Constant-velocity Kalman filter core over 8-dim (image) or 12-dim (metric)
//! box states, with externally supplied diagonal noise covariances.
//!
//! State layout pairs each observed component with its per-frame rate:
//! 2D `[x, y, w, h, dx, dy, dw, dh]`, 3D `[x, y, z, w, h, l, d...]`. The
//! observation is the first half. Noise diagonals normally come from the
//! network in [`crate::msnet`]; the posterior covariance can either be the
//! classical Joseph form or an externally supplied diagonal (the learned
//! posterior path), selected per update call.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::util::all_finite;

pub const DIM_2D: usize = 8;
pub const DIM_3D: usize = 12;
pub const OBS_2D: usize = 4;
pub const OBS_3D: usize = 6;

/// Smallest admissible box size component after an update.
pub const MIN_SIZE: f64 = 1e-3;

fn check_dim(dim: usize) -> Result<()> {
    if dim == DIM_2D || dim == DIM_3D {
        Ok(())
    } else {
        Err(Error::Config(format!("state dim must be 8 or 12, got {dim}")))
    }
}

/// Index range of the size components (w, h and optionally l) inside either a
/// state vector or an observation of the given observed dimension.
pub fn size_indices(obs_dim: usize) -> std::ops::Range<usize> {
    if obs_dim == OBS_3D {
        3..6
    } else {
        2..4
    }
}

/// Full filter state for one object: positions/sizes plus their rates.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    v: DVector<f64>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_dim(values.len())?;
        if !all_finite(&values) {
            return Err(Error::Numeric("non-finite state vector".into()));
        }
        Ok(Self { v: DVector::from_vec(values) })
    }

    /// State seeded from an observation: observed part copied, rates zero.
    pub fn from_observation(z: &Observation) -> Self {
        let obs = z.as_slice();
        let mut v = vec![0.0; obs.len() * 2];
        v[..obs.len()].copy_from_slice(obs);
        Self { v: DVector::from_vec(v) }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.v.len() / 2
    }

    pub fn as_slice(&self) -> &[f64] {
        self.v.as_slice()
    }

    pub(crate) fn vector(&self) -> &DVector<f64> {
        &self.v
    }

    pub(crate) fn from_vector(v: DVector<f64>) -> Self {
        Self { v }
    }

    /// Observed part of the state: the box `[x, y, w, h]` / `[x, y, z, w, h, l]`.
    pub fn observed(&self) -> Vec<f64> {
        self.v.as_slice()[..self.obs_dim()].to_vec()
    }

    /// Size components (w, h and l for 3D states).
    pub fn sizes(&self) -> &[f64] {
        &self.v.as_slice()[size_indices(self.obs_dim())]
    }
}

/// Symmetric positive semi-definite covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    m: DMatrix<f64>,
}

impl Covariance {
    /// Diagonal covariance; every entry must be nonnegative and finite.
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        check_dim(diag.len())?;
        if !all_finite(diag) || diag.iter().any(|&d| d < 0.0) {
            return Err(Error::Numeric("covariance diagonal must be finite and >= 0".into()));
        }
        Ok(Self { m: DMatrix::from_diagonal(&DVector::from_row_slice(diag)) })
    }

    /// Full matrix; validated symmetric to 1e-9 relative, then symmetrized.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        check_dim(m.nrows())?;
        if m.ncols() != m.nrows() {
            return Err(Error::Config("covariance must be square".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite covariance".into()));
        }
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs() + b.abs()) {
                    return Err(Error::Numeric(format!(
                        "covariance asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { m: symmetrize(&m) })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Diagonal entries as a plain vector.
    pub fn diag(&self) -> Vec<f64> {
        (0..self.m.nrows()).map(|i| self.m[(i, i)]).collect()
    }

    /// Minimum eigenvalue; the PSD invariant requires it >= -1e-9 * trace.
    pub fn min_eigenvalue(&self) -> f64 {
        self.m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// Positive diagonals for the process and observation noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariances {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
}

impl NoiseCovariances {
    pub fn new(q_diag: Vec<f64>, r_diag: Vec<f64>) -> Result<Self> {
        check_dim(q_diag.len())?;
        if r_diag.len() != q_diag.len() / 2 {
            return Err(Error::Config(format!(
                "r_diag length {} does not match state dim {}",
                r_diag.len(),
                q_diag.len()
            )));
        }
        let positive = |v: &[f64]| all_finite(v) && v.iter().all(|&x| x > 0.0);
        if !positive(&q_diag) || !positive(&r_diag) {
            return Err(Error::Numeric("noise diagonals must be finite and > 0".into()));
        }
        Ok(Self { q_diag, r_diag })
    }
}

/// One observed box: `[x, y, w, h]` (pixels) or `[x, y, z, w, h, l]` (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    v: DVector<f64>,
}

impl Observation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != OBS_2D && values.len() != OBS_3D {
            return Err(Error::Config(format!("obs dim must be 4 or 6, got {}", values.len())));
        }
        if !all_finite(&values) {
            return Err(Error::Numeric("non-finite observation".into()));
        }
        if values[size_indices(values.len())].iter().any(|&s| s <= 0.0) {
            return Err(Error::Numeric("observation size components must be > 0".into()));
        }
        Ok(Self { v: DVector::from_vec(values) })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.v.as_slice()
    }

    pub fn sizes(&self) -> &[f64] {
        &self.v.as_slice()[size_indices(self.v.len())]
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Constant-velocity transition matrix `[[I, dt*I], [0, I]]`.
pub fn make_transition(dim: usize, dt: f64) -> Result<DMatrix<f64>> {
    check_dim(dim)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive and finite, got {dt}")));
    }
    let half = dim / 2;
    let mut f = DMatrix::identity(dim, dim);
    for i in 0..half {
        f[(i, half + i)] = dt;
    }
    Ok(f)
}

/// Observation matrix `H = [I 0]` selecting the box components.
pub fn observation_matrix(dim: usize) -> DMatrix<f64> {
    let half = dim / 2;
    let mut h = DMatrix::zeros(half, dim);
    for i in 0..half {
        h[(i, i)] = 1.0;
    }
    h
}

/// Prediction step: `x' = F x`, `P' = F P F^T + diag(q)`.
pub fn predict(
    state: &StateVector,
    cov: &Covariance,
    q_diag: &[f64],
    dt: f64,
) -> Result<(StateVector, Covariance)> {
    let dim = state.dim();
    if cov.dim() != dim || q_diag.len() != dim {
        return Err(Error::Config("predict: dimension mismatch".into()));
    }
    if !all_finite(q_diag) || !all_finite(state.as_slice()) {
        return Err(Error::Numeric("predict: non-finite inputs".into()));
    }
    let f = make_transition(dim, dt)?;
    let x = &f * state.vector();
    let mut p = symmetrize(&(&f * cov.matrix() * f.transpose()));
    for i in 0..dim {
        p[(i, i)] += q_diag[i];
    }
    Ok((StateVector::from_vector(x), Covariance { m: p }))
}

/// Innovation covariance `S = H P H^T + diag(r)` (top-left block plus r).
fn innovation_covariance(cov_pred: &Covariance, r_diag: &[f64]) -> DMatrix<f64> {
    let m = r_diag.len();
    let mut s = cov_pred.matrix().view((0, 0), (m, m)).into_owned();
    for i in 0..m {
        s[(i, i)] += r_diag[i];
    }
    symmetrize(&s)
}

fn invert_innovation(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match s.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => Ok(inv),
        _ => {
            let svd = s.clone().svd(false, false);
            let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
            let smin = svd.singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            Err(Error::Numeric(format!(
                "singular innovation covariance (condition number {cond:.3e})"
            )))
        }
    }
}

/// Kalman gain `K = P H^T (H P H^T + diag(r))^-1`.
pub fn gain(cov_pred: &Covariance, r_diag: &[f64], h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = cov_pred.dim();
    if h.ncols() != dim || h.nrows() != r_diag.len() {
        return Err(Error::Config("gain: dimension mismatch".into()));
    }
    if !all_finite(r_diag) {
        return Err(Error::Numeric("gain: non-finite r diagonal".into()));
    }
    let s = symmetrize(&(h * cov_pred.matrix() * h.transpose()))
        + DMatrix::from_diagonal(&DVector::from_row_slice(r_diag));
    let s_inv = invert_innovation(&s)?;
    Ok(cov_pred.matrix() * h.transpose() * s_inv)
}

/// Output of [`update`].
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub state: StateVector,
    pub cov: Covariance,
    /// `z - H x_pred`.
    pub innovation: Vec<f64>,
}

/// Measurement update. The posterior covariance is the Joseph form
/// `(I-KH) P (I-KH)^T + K R K^T` unless `posterior_cov_override` is supplied,
/// in which case the override is stored verbatim (the learned-posterior path).
/// Size components of the posterior state are floored at [`MIN_SIZE`].
pub fn update(
    state_pred: &StateVector,
    cov_pred: &Covariance,
    z: &Observation,
    r_diag: &[f64],
    posterior_cov_override: Option<&Covariance>,
) -> Result<UpdateResult> {
    let dim = state_pred.dim();
    let obs_dim = dim / 2;
    if cov_pred.dim() != dim || z.dim() != obs_dim || r_diag.len() != obs_dim {
        return Err(Error::Config("update: dimension mismatch".into()));
    }
    if let Some(p) = posterior_cov_override {
        if p.dim() != dim {
            return Err(Error::Config("update: override dimension mismatch".into()));
        }
    }

    let h = observation_matrix(dim);
    let k = {
        let s = innovation_covariance(cov_pred, r_diag);
        let s_inv = invert_innovation(&s)?;
        cov_pred.matrix() * h.transpose() * s_inv
    };

    let innovation = z.as_slice().iter().zip(state_pred.as_slice()).map(|(z, x)| z - x).collect::<Vec<_>>();
    let innov = DVector::from_row_slice(&innovation);
    let mut x = state_pred.vector() + &k * &innov;
    for i in size_indices(obs_dim) {
        if x[i] < MIN_SIZE {
            x[i] = MIN_SIZE;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("update produced non-finite state".into()));
    }

    let cov = match posterior_cov_override {
        Some(p) => p.clone(),
        None => {
            let i_kh = DMatrix::identity(dim, dim) - &k * &h;
            let r = DMatrix::from_diagonal(&DVector::from_row_slice(r_diag));
            let joseph = &i_kh * cov_pred.matrix() * i_kh.transpose() + &k * r * k.transpose();
            Covariance { m: symmetrize(&joseph) }
        }
    };

    Ok(UpdateResult { state: StateVector::from_vector(x), cov, innovation })
}

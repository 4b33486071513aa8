//! Control-affine system models, observation models, and quadratic costs.
//!
//! A [`ModelSpec`] bundles the deterministic dynamics `x' = f(x) + G u`, the
//! continuous-time observation model `dY = h(x) dt + R^{1/2} dW`, and the
//! noise scale of the simulated physical twin. Models are supplied as pure
//! evaluation maps plus constant matrices; no Jacobians are ever requested
//! (the ensemble solver replaces them by statistical linearization).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::{Error, Result};

/// Pure state-to-vector map evaluated on raw slices so that hot loops can
/// run on ensemble-matrix columns without allocating.
pub type StateMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A partially observed control-affine system.
///
/// Immutable after construction; the evaluation maps must be safe to call
/// concurrently from many workers.
#[derive(Clone)]
pub struct ModelSpec {
    d_x: usize,
    d_u: usize,
    d_y: usize,
    drift: StateMap,
    control_matrix: DMatrix<f64>,
    obs_map: StateMap,
    obs_cov: DMatrix<f64>,
    obs_cov_inv: DMatrix<f64>,
    obs_cov_sqrt: DMatrix<f64>,
    obs_cov_inv_sqrt: DMatrix<f64>,
    twin_noise_scale: f64,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("d_x", &self.d_x)
            .field("d_u", &self.d_u)
            .field("d_y", &self.d_y)
            .field("obs_cov", &self.obs_cov)
            .field("twin_noise_scale", &self.twin_noise_scale)
            .finish()
    }
}

impl ModelSpec {
    /// Builds a model and validates dimensional consistency and positive
    /// definiteness of the observation covariance.
    pub fn new(
        d_x: usize,
        d_u: usize,
        d_y: usize,
        drift: StateMap,
        control_matrix: DMatrix<f64>,
        obs_map: StateMap,
        obs_cov: DMatrix<f64>,
        twin_noise_scale: f64,
    ) -> Result<Self> {
        if control_matrix.nrows() != d_x || control_matrix.ncols() != d_u {
            return Err(Error::DimensionMismatch {
                context: "ModelSpec control matrix",
                expected: format!("{d_x}x{d_u}"),
                actual: format!("{}x{}", control_matrix.nrows(), control_matrix.ncols()),
            });
        }
        if obs_cov.nrows() != d_y || obs_cov.ncols() != d_y {
            return Err(Error::DimensionMismatch {
                context: "ModelSpec observation covariance",
                expected: format!("{d_y}x{d_y}"),
                actual: format!("{}x{}", obs_cov.nrows(), obs_cov.ncols()),
            });
        }
        if twin_noise_scale < 0.0 {
            return Err(Error::Config(
                "twin noise scale must be non-negative".into(),
            ));
        }
        let min_eig = linalg::min_symmetric_eigenvalue(&obs_cov);
        if linalg::max_asymmetry(&obs_cov) > 1e-12 || min_eig <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "ModelSpec observation covariance",
                min_eigenvalue: min_eig,
            });
        }
        let obs_cov_inv = linalg::spd_inverse(&obs_cov, "observation covariance inverse")?;
        let obs_cov_sqrt = linalg::sym_sqrt(&obs_cov);
        let obs_cov_inv_sqrt = linalg::sym_inv_sqrt(&obs_cov, "observation covariance root")?;
        Ok(Self {
            d_x,
            d_u,
            d_y,
            drift,
            control_matrix,
            obs_map,
            obs_cov,
            obs_cov_inv,
            obs_cov_sqrt,
            obs_cov_inv_sqrt,
            twin_noise_scale,
        })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    /// Control matrix `G`.
    pub fn control_matrix(&self) -> &DMatrix<f64> {
        &self.control_matrix
    }

    /// Observation noise covariance `R`.
    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    pub fn obs_cov_inv(&self) -> &DMatrix<f64> {
        &self.obs_cov_inv
    }

    pub fn obs_cov_sqrt(&self) -> &DMatrix<f64> {
        &self.obs_cov_sqrt
    }

    pub fn obs_cov_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.obs_cov_inv_sqrt
    }

    /// Noise scale of the physical twin (zero for an ideal twin experiment).
    pub fn twin_noise_scale(&self) -> f64 {
        self.twin_noise_scale
    }

    /// Evaluates the drift into a caller-provided slice.
    pub fn drift_into(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.d_x);
        debug_assert_eq!(out.len(), self.d_x);
        (self.drift)(state, out);
    }

    /// Evaluates the observation map into a caller-provided slice.
    pub fn obs_into(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.d_x);
        debug_assert_eq!(out.len(), self.d_y);
        (self.obs_map)(state, out);
    }

    pub fn drift(&self, state: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d_x);
        self.drift_into(state.as_slice(), out.as_mut_slice());
        out
    }

    pub fn obs(&self, state: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d_y);
        self.obs_into(state.as_slice(), out.as_mut_slice());
        out
    }

    /// Same model with a different observation covariance.
    pub fn with_obs_cov(self, obs_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.d_x,
            self.d_u,
            self.d_y,
            self.drift,
            self.control_matrix,
            self.obs_map,
            obs_cov,
            self.twin_noise_scale,
        )
    }

    /// Same model with a different twin noise scale.
    pub fn with_twin_noise(mut self, sigma: f64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::Config(
                "twin noise scale must be non-negative".into(),
            ));
        }
        self.twin_noise_scale = sigma;
        Ok(self)
    }
}

/// Controlled pendulum `phi'' = sin(phi) - gamma * phi'` with torque control
/// on the angular velocity and noisy observation of the angle.
///
/// State is `(phi, phi_dot)`; the upright equilibrium `(0, 0)` is unstable,
/// `(pi, 0)` is stable. Observation covariance defaults to `R = 1` and the
/// twin noise to zero.
pub fn pendulum_model(gamma: f64) -> Result<ModelSpec> {
    if gamma < 0.0 {
        return Err(Error::Config("pendulum damping must be non-negative".into()));
    }
    let drift: StateMap = Arc::new(move |x, out| {
        out[0] = x[1];
        out[1] = x[0].sin() - gamma * x[1];
    });
    let obs: StateMap = Arc::new(|x, out| {
        out[0] = x[0];
    });
    ModelSpec::new(
        2,
        1,
        1,
        drift,
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        obs,
        DMatrix::identity(1, 1),
        0.0,
    )
}

/// Quadratic running and terminal costs
/// `c(x) = (x-c)^T V (x-c) / 2`, `psi(x) = (x-c_T)^T V_T (x-c_T) / 2`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    running_weight: DMatrix<f64>,
    running_target: DVector<f64>,
    terminal_weight: DMatrix<f64>,
    terminal_target: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(
        running_weight: DMatrix<f64>,
        running_target: DVector<f64>,
        terminal_weight: DMatrix<f64>,
        terminal_target: DVector<f64>,
    ) -> Result<Self> {
        let d = running_target.len();
        for (m, context) in [
            (&running_weight, "running cost weight"),
            (&terminal_weight, "terminal cost weight"),
        ] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch {
                    context: "QuadraticCost",
                    expected: format!("{d}x{d}"),
                    actual: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
            linalg::check_symmetric_psd(m, 1e-10, context)?;
        }
        if terminal_target.len() != d {
            return Err(Error::DimensionMismatch {
                context: "QuadraticCost terminal target",
                expected: format!("{d}"),
                actual: format!("{}", terminal_target.len()),
            });
        }
        Ok(Self {
            running_weight,
            running_target,
            terminal_weight,
            terminal_target,
        })
    }

    /// Cost with `V = w I`, `V_T = w_T I` and zero targets.
    pub fn isotropic(dim: usize, running: f64, terminal: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(dim, dim) * running,
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * terminal,
            DVector::zeros(dim),
        )
    }

    pub fn dim(&self) -> usize {
        self.running_target.len()
    }

    pub fn running_weight(&self) -> &DMatrix<f64> {
        &self.running_weight
    }

    pub fn running_target(&self) -> &DVector<f64> {
        &self.running_target
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.terminal_weight
    }

    pub fn terminal_target(&self) -> &DVector<f64> {
        &self.terminal_target
    }

    pub fn running_value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.running_target;
        0.5 * (&self.running_weight * &d).dot(&d)
    }

    pub fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.terminal_target;
        0.5 * (&self.terminal_weight * &d).dot(&d)
    }

    /// Gradient of the running cost, `V (x - c)`.
    pub fn running_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.running_weight * (x - &self.running_target)
    }

    /// Gradient of the terminal cost, `V_T (x - c_T)`.
    pub fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.terminal_weight * (x - &self.terminal_target)
    }
}

/// Gaussian initial law `N(mean, cov)`; the covariance may be singular
/// (a collapsed law is allowed, square roots clip at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InitialLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "InitialLaw covariance",
                expected: format!("{d}x{d}"),
                actual: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        linalg::check_symmetric_psd(&cov, 1e-8 * scale, "InitialLaw covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Affine feedback law `u = -G^T (Lambda x_bar + lambda)`.
pub fn control_law(
    gain: &DMatrix<f64>,
    offset: &DVector<f64>,
    mean: &DVector<f64>,
    control_matrix: &DMatrix<f64>,
) -> DVector<f64> {
    -(control_matrix.transpose() * (gain * mean + offset))
}

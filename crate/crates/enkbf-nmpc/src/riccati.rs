//! Linear-Gaussian reference solutions: the backward Riccati/affine ODEs for
//! the optimal feedback law and the Kalman--Bucy moment ODEs.
//!
//! Both integrators use classical fourth-order Runge--Kutta so that their
//! discretization error is negligible against the Euler-based ensemble
//! solver they serve as ground truth for.

use nalgebra::{DMatrix, DVector};

use crate::fbsde::GainSchedule;
use crate::linalg;
use crate::model::{InitialLaw, ModelSpec, QuadraticCost};
use crate::{Error, Result};

/// Linear time-invariant system `x' = A x + b + G u`, `dY = H x dt + R^{1/2} dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSpec {
    dyn_matrix: DMatrix<f64>,
    dyn_offset: DVector<f64>,
    control_matrix: DMatrix<f64>,
    obs_matrix: DMatrix<f64>,
    obs_cov: DMatrix<f64>,
}

impl LtiSpec {
    pub fn new(
        dyn_matrix: DMatrix<f64>,
        dyn_offset: DVector<f64>,
        control_matrix: DMatrix<f64>,
        obs_matrix: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d_x = dyn_matrix.nrows();
        if dyn_matrix.ncols() != d_x || dyn_offset.len() != d_x || control_matrix.nrows() != d_x {
            return Err(Error::DimensionMismatch {
                context: "LtiSpec dynamics",
                expected: format!("{d_x}x{d_x} A, {d_x} b, {d_x}-row G"),
                actual: format!(
                    "{}x{} A, {} b, {}-row G",
                    dyn_matrix.nrows(),
                    dyn_matrix.ncols(),
                    dyn_offset.len(),
                    control_matrix.nrows()
                ),
            });
        }
        let d_y = obs_matrix.nrows();
        if obs_matrix.ncols() != d_x || obs_cov.nrows() != d_y || obs_cov.ncols() != d_y {
            return Err(Error::DimensionMismatch {
                context: "LtiSpec observation",
                expected: format!("{d_y}x{d_x} H, {d_y}x{d_y} R"),
                actual: format!(
                    "{}x{} H, {}x{} R",
                    obs_matrix.nrows(),
                    obs_matrix.ncols(),
                    obs_cov.nrows(),
                    obs_cov.ncols()
                ),
            });
        }
        let min_eig = linalg::min_symmetric_eigenvalue(&obs_cov);
        if min_eig <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "LtiSpec observation covariance",
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            dyn_matrix,
            dyn_offset,
            control_matrix,
            obs_matrix,
            obs_cov,
        })
    }

    pub fn d_x(&self) -> usize {
        self.dyn_matrix.nrows()
    }

    pub fn dyn_matrix(&self) -> &DMatrix<f64> {
        &self.dyn_matrix
    }

    pub fn dyn_offset(&self) -> &DVector<f64> {
        &self.dyn_offset
    }

    pub fn control_matrix(&self) -> &DMatrix<f64> {
        &self.control_matrix
    }

    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.obs_matrix
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    /// Wraps the linear system as a general [`ModelSpec`].
    pub fn to_model(&self) -> Result<ModelSpec> {
        let d_x = self.d_x();
        let d_y = self.obs_matrix.nrows();
        let a = self.dyn_matrix.clone();
        let b = self.dyn_offset.clone();
        let h = self.obs_matrix.clone();
        let drift: crate::model::StateMap = std::sync::Arc::new(move |x, out| {
            for i in 0..a.nrows() {
                let mut acc = b[i];
                for j in 0..a.ncols() {
                    acc += a[(i, j)] * x[j];
                }
                out[i] = acc;
            }
        });
        let obs: crate::model::StateMap = std::sync::Arc::new(move |x, out| {
            for i in 0..h.nrows() {
                let mut acc = 0.0;
                for j in 0..h.ncols() {
                    acc += h[(i, j)] * x[j];
                }
                out[i] = acc;
            }
        });
        ModelSpec::new(
            d_x,
            self.control_matrix.ncols(),
            d_y,
            drift,
            self.control_matrix.clone(),
            obs,
            self.obs_cov.clone(),
            0.0,
        )
    }
}

struct RiccatiRhs<'a> {
    a: &'a DMatrix<f64>,
    ggt: DMatrix<f64>,
    v: &'a DMatrix<f64>,
    vc: DVector<f64>,
    b: &'a DVector<f64>,
}

impl RiccatiRhs<'_> {
    // Backward equations read forward in the integration variable:
    // Lambda' = -(Lambda A + A^T Lambda - Lambda G G^T Lambda + V)
    // lambda' = -(A^T lambda - V c + Lambda (b - G G^T lambda))
    fn eval(&self, gain: &DMatrix<f64>, offset: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let gain_dot = -(gain * self.a + self.a.transpose() * gain - gain * &self.ggt * gain
            + self.v);
        let offset_dot = -(self.a.transpose() * offset - &self.vc
            + gain * (self.b - &self.ggt * offset));
        (gain_dot, offset_dot)
    }
}

/// Integrates the backward Riccati/affine ODE pair on a uniform grid with
/// terminal conditions `Lambda(T) = V_T`, `lambda(T) = -V_T c_T`, returning
/// the result as a gain schedule on increasing time.
pub fn integrate_riccati(
    lti: &LtiSpec,
    cost: &QuadraticCost,
    horizon: f64,
    dt: f64,
) -> Result<GainSchedule> {
    if dt <= 0.0 || horizon <= 0.0 {
        return Err(Error::Config("horizon and dt must be positive".into()));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 {
        return Err(Error::Config("horizon shorter than one step".into()));
    }
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();

    let rhs = RiccatiRhs {
        a: lti.dyn_matrix(),
        ggt: lti.control_matrix() * lti.control_matrix().transpose(),
        v: cost.running_weight(),
        vc: cost.running_weight() * cost.running_target(),
        b: lti.dyn_offset(),
    };

    let mut gain = cost.terminal_weight().clone();
    let mut offset = -(cost.terminal_weight() * cost.terminal_target());
    let mut gains = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); steps + 1];
    gains[steps] = (gain.clone(), offset.clone());

    let h = -dt; // integrate from T down to 0
    for n in (0..steps).rev() {
        let (k1m, k1v) = rhs.eval(&gain, &offset);
        let (k2m, k2v) = rhs.eval(&(&gain + &k1m * (h / 2.0)), &(&offset + &k1v * (h / 2.0)));
        let (k3m, k3v) = rhs.eval(&(&gain + &k2m * (h / 2.0)), &(&offset + &k2v * (h / 2.0)));
        let (k4m, k4v) = rhs.eval(&(&gain + &k3m * h), &(&offset + &k3v * h));
        gain += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        offset += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
        linalg::symmetrize(&mut gain);
        if gain.iter().any(|v| !v.is_finite()) || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiBlowUp { t: times[n] });
        }
        gains[n] = (gain.clone(), offset.clone());
    }
    GainSchedule::new(times, gains)
}

/// Integrates the Kalman--Bucy moment ODEs forward:
/// `m' = A m + b + G u(t, m)` and `C' = A C + C A^T - C H^T R^{-1} H C`,
/// with the covariance symmetrized after every step. Returns the mean and
/// covariance paths at the grid nodes.
pub fn kalman_bucy_moments(
    lti: &LtiSpec,
    law: &InitialLaw,
    control: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    if dt <= 0.0 || horizon <= 0.0 {
        return Err(Error::Config("horizon and dt must be positive".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let hr = lti.obs_matrix().transpose()
        * linalg::spd_inverse(lti.obs_cov(), "moment ODE observation covariance")?
        * lti.obs_matrix();

    let mean_rhs = |t: f64, m: &DVector<f64>| -> DVector<f64> {
        lti.dyn_matrix() * m + lti.dyn_offset() + lti.control_matrix() * control(t, m)
    };
    let cov_rhs = |c: &DMatrix<f64>| -> DMatrix<f64> {
        lti.dyn_matrix() * c + c * lti.dyn_matrix().transpose() - c * &hr * c
    };

    let mut mean = law.mean.clone();
    let mut cov = law.cov.clone();
    let mut means = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);
    means.push(mean.clone());
    covs.push(cov.clone());

    for n in 0..steps {
        let t = n as f64 * dt;
        let k1m = mean_rhs(t, &mean);
        let k1c = cov_rhs(&cov);
        let k2m = mean_rhs(t + dt / 2.0, &(&mean + &k1m * (dt / 2.0)));
        let k2c = cov_rhs(&(&cov + &k1c * (dt / 2.0)));
        let k3m = mean_rhs(t + dt / 2.0, &(&mean + &k2m * (dt / 2.0)));
        let k3c = cov_rhs(&(&cov + &k2c * (dt / 2.0)));
        let k4m = mean_rhs(t + dt, &(&mean + &k3m * dt));
        let k4c = cov_rhs(&(&cov + &k3c * dt));
        mean += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (dt / 6.0);
        cov += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (dt / 6.0);
        linalg::symmetrize(&mut cov);
        means.push(mean.clone());
        covs.push(cov.clone());
    }
    Ok((means, covs))
}

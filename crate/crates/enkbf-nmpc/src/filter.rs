//! Time stepping of the ensemble Kalman--Bucy filter.
//!
//! Two forms of the same interacting-particle system are provided:
//!
//! * [`FilterState::assimilate_step`] advances the digital twin against an
//!   *actual* observation increment `dY`,
//!
//!   `dX = (f(X) + G u - 1/2 C^{xh} R^{-1} (h(X) + h_bar)) dt + C^{xh} R^{-1} dY`
//!
//! * [`FilterState::simulated_step`] propagates a prediction in which the
//!   innovation is replaced by Brownian noise `dW`,
//!
//!   `dX = (f(X) + G u - 1/2 C^{xh} R^{-1} (h(X) - h_bar)) dt + C^{xh} R^{-1/2} dW`
//!
//! Both act identically on ensemble deviations; they differ only in how the
//! mean is driven (data versus simulated innovation). The noise term of the
//! simulated form is shared by all members, so it shifts only the mean.
//! Integration is explicit Euler--Maruyama with empirical gains recomputed
//! from the current ensemble at every step.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::Ensemble;
use crate::model::ModelSpec;
use crate::{Error, Result};

/// Ensemble plus filter clock.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub ensemble: Ensemble,
    pub t: f64,
}

impl FilterState {
    pub fn new(ensemble: Ensemble, t: f64) -> Self {
        Self { ensemble, t }
    }

    /// One Euler step against an actual observation increment.
    pub fn assimilate_step(
        &mut self,
        model: &ModelSpec,
        u: &DVector<f64>,
        dy_obs: &DVector<f64>,
        dt: f64,
    ) -> Result<()> {
        let mut scratch = StepScratch::new(model, self.ensemble.size());
        prepare(&self.ensemble, model, &mut scratch);
        apply_step(
            &mut self.ensemble,
            model,
            u,
            Drive::Observation(dy_obs),
            dt,
            &mut scratch,
        )
        .map_err(|_| Error::NonFiniteState { t: self.t })?;
        self.t += dt;
        Ok(())
    }

    /// One Euler--Maruyama step driven by a simulated innovation increment
    /// `dW ~ N(0, dt I)`.
    pub fn simulated_step(
        &mut self,
        model: &ModelSpec,
        u: &DVector<f64>,
        dw: &DVector<f64>,
        dt: f64,
    ) -> Result<()> {
        let mut scratch = StepScratch::new(model, self.ensemble.size());
        prepare(&self.ensemble, model, &mut scratch);
        apply_step(
            &mut self.ensemble,
            model,
            u,
            Drive::Innovation(dw),
            dt,
            &mut scratch,
        )
        .map_err(|_| Error::NonFiniteState { t: self.t })?;
        self.t += dt;
        Ok(())
    }
}

/// What drives the mean over the step.
pub(crate) enum Drive<'a> {
    /// Actual observation increment `dY`.
    Observation(&'a DVector<f64>),
    /// Simulated innovation increment `dW`.
    Innovation(&'a DVector<f64>),
}

/// Reusable per-step workspace: member images of the drift and observation
/// maps, the node's empirical moments, and small buffers that keep the
/// update itself allocation-free. `prepare` fills everything in two passes
/// over the member slab.
pub(crate) struct StepScratch {
    pub drift_imgs: DMatrix<f64>,
    pub obs_imgs: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub obs_mean: DVector<f64>,
    pub drift_mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cross_obs: DMatrix<f64>,
    pub cross_drift: DMatrix<f64>,
    gain: DMatrix<f64>,
    noise_load: DMatrix<f64>,
    shift: DVector<f64>,
}

impl StepScratch {
    pub fn new(model: &ModelSpec, size: usize) -> Self {
        Self {
            drift_imgs: DMatrix::zeros(model.d_x(), size),
            obs_imgs: DMatrix::zeros(model.d_y(), size),
            mean: DVector::zeros(model.d_x()),
            obs_mean: DVector::zeros(model.d_y()),
            drift_mean: DVector::zeros(model.d_x()),
            cov: DMatrix::zeros(model.d_x(), model.d_x()),
            cross_obs: DMatrix::zeros(model.d_x(), model.d_y()),
            cross_drift: DMatrix::zeros(model.d_x(), model.d_x()),
            gain: DMatrix::zeros(model.d_x(), model.d_y()),
            noise_load: DMatrix::zeros(model.d_x(), model.d_y()),
            shift: DVector::zeros(model.d_x()),
        }
    }
}

/// Evaluates drift and observation images and computes the node's empirical
/// moments (means, covariance, both cross-covariances), all `1/M`-normalized
/// and accumulated in fixed member order.
pub(crate) fn prepare(ens: &Ensemble, model: &ModelSpec, scratch: &mut StepScratch) {
    let m = ens.size();
    let d = model.d_x();
    let dy = model.d_y();
    let inv_m = 1.0 / m as f64;
    let data = ens.data().as_slice();

    // single pass: evaluate member images and accumulate the three sums
    let mean = scratch.mean.as_mut_slice();
    let obs_mean = scratch.obs_mean.as_mut_slice();
    let drift_mean = scratch.drift_mean.as_mut_slice();
    mean.fill(0.0);
    obs_mean.fill(0.0);
    drift_mean.fill(0.0);
    {
        let drift = scratch.drift_imgs.as_mut_slice();
        let obs = scratch.obs_imgs.as_mut_slice();
        for j in 0..m {
            let xj = &data[j * d..(j + 1) * d];
            let fj = &mut drift[j * d..(j + 1) * d];
            model.drift_into(xj, fj);
            let hj = &mut obs[j * dy..(j + 1) * dy];
            model.obs_into(xj, hj);
            for a in 0..d {
                mean[a] += xj[a];
                drift_mean[a] += fj[a];
            }
            for b in 0..dy {
                obs_mean[b] += hj[b];
            }
        }
    }
    for v in mean.iter_mut() {
        *v *= inv_m;
    }
    for v in obs_mean.iter_mut() {
        *v *= inv_m;
    }
    for v in drift_mean.iter_mut() {
        *v *= inv_m;
    }
    let drift = scratch.drift_imgs.as_slice();
    let obs = scratch.obs_imgs.as_slice();

    // column-major accumulation: cov[(a, b)] lives at b * d + a
    let cov = scratch.cov.as_mut_slice();
    let cross_obs = scratch.cross_obs.as_mut_slice();
    let cross_drift = scratch.cross_drift.as_mut_slice();
    cov.fill(0.0);
    cross_obs.fill(0.0);
    cross_drift.fill(0.0);
    for j in 0..m {
        let xj = &data[j * d..(j + 1) * d];
        let fj = &drift[j * d..(j + 1) * d];
        let hj = &obs[j * dy..(j + 1) * dy];
        for a in 0..d {
            let dxa = xj[a] - mean[a];
            for b in a..d {
                cov[b * d + a] += dxa * (xj[b] - mean[b]);
            }
            for b in 0..d {
                cross_drift[b * d + a] += dxa * (fj[b] - drift_mean[b]);
            }
            for b in 0..dy {
                cross_obs[b * d + a] += dxa * (hj[b] - obs_mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[b * d + a] * inv_m;
            cov[b * d + a] = v;
            cov[a * d + b] = v;
        }
    }
    for v in cross_obs.iter_mut() {
        *v *= inv_m;
    }
    for v in cross_drift.iter_mut() {
        *v *= inv_m;
    }
}


/// `out = a (rows x inner) * b (inner x cols)` on column-major slices.
#[inline]
fn small_matmul(out: &mut [f64], a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) {
    for c in 0..cols {
        for r in 0..rows {
            let mut acc = 0.0;
            for i in 0..inner {
                acc += a[i * rows + r] * b[c * inner + i];
            }
            out[c * rows + r] = acc;
        }
    }
}

/// `out += alpha * a (rows x len(x)) * x` on column-major slices.
#[inline]
fn small_matvec_acc(out: &mut [f64], a: &[f64], x: &[f64], rows: usize, alpha: f64) {
    for (c, xv) in x.iter().enumerate() {
        let coef = alpha * xv;
        for r in 0..rows {
            out[r] += coef * a[c * rows + r];
        }
    }
}

/// Applies one step in place using the moments prepared in `scratch`
/// (see [`prepare`]). Returns `Err(())` on a non-finite member so callers
/// can attach the failure time.
pub(crate) fn apply_step(
    ens: &mut Ensemble,
    model: &ModelSpec,
    u: &DVector<f64>,
    drive: Drive<'_>,
    dt: f64,
    scratch: &mut StepScratch,
) -> std::result::Result<(), ()> {
    let d = model.d_x();
    let dy_dim = model.d_y();
    small_matmul(
        scratch.gain.as_mut_slice(),
        scratch.cross_obs.as_slice(),
        model.obs_cov_inv().as_slice(),
        d,
        dy_dim,
        dy_dim,
    );

    // Member-independent shift: control push, the h_bar part of the
    // correction, and the data / noise increment.
    {
        let shift = scratch.shift.as_mut_slice();
        shift.fill(0.0);
        small_matvec_acc(
            shift,
            model.control_matrix().as_slice(),
            u.as_slice(),
            d,
            dt,
        );
        match drive {
            Drive::Observation(dy) => {
                small_matvec_acc(shift, scratch.gain.as_slice(), dy.as_slice(), d, 1.0);
                small_matvec_acc(
                    shift,
                    scratch.gain.as_slice(),
                    scratch.obs_mean.as_slice(),
                    d,
                    -0.5 * dt,
                );
            }
            Drive::Innovation(dw) => {
                small_matmul(
                    scratch.noise_load.as_mut_slice(),
                    scratch.cross_obs.as_slice(),
                    model.obs_cov_inv_sqrt().as_slice(),
                    d,
                    dy_dim,
                    dy_dim,
                );
                small_matvec_acc(shift, scratch.noise_load.as_slice(), dw.as_slice(), d, 1.0);
                small_matvec_acc(
                    shift,
                    scratch.gain.as_slice(),
                    scratch.obs_mean.as_slice(),
                    d,
                    0.5 * dt,
                );
            }
        }
    }

    // X += dt * f(X) - (dt/2) * gain * h(X) + shift * 1^T
    let m = ens.size();
    let d = model.d_x();
    let dy = model.d_y();
    let half_dt = 0.5 * dt;
    let gain = scratch.gain.as_slice();
    let shift = scratch.shift.as_slice();
    let drift = scratch.drift_imgs.as_slice();
    let obs = scratch.obs_imgs.as_slice();
    let data = ens.data_mut().as_mut_slice();
    let mut finite = true;
    for j in 0..m {
        for a in 0..d {
            let mut corr = 0.0;
            for b in 0..dy {
                corr += gain[b * d + a] * obs[j * dy + b];
            }
            let idx = j * d + a;
            let v = data[idx] + dt * drift[idx] - half_dt * corr + shift[a];
            finite &= v.is_finite();
            data[idx] = v;
        }
    }
    if finite {
        Ok(())
    } else {
        Err(())
    }
}

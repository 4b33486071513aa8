//! Ensemble solver for the forward-backward SDE system of the stochastic
//! maximum principle.
//!
//! A forward sweep propagates `K` independent filter-prediction realizations
//! (one per simulated observation-noise path) and records their empirical
//! moments. A backward sweep then regresses the costate mean onto the
//! realization means, one time level at a time, producing an affine feedback
//! law per node; Picard iteration alternates the two until the coupled
//! system is self-consistent. The first forward sweep runs uncontrolled
//! (`u = 0`) unless a warm-start schedule is supplied.
//!
//! The costate noise coefficient `Z` is never materialized: the back
//! integration step removes the noise from the regression targets, so only
//! costate means appear.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, DVectorView};
use rayon::prelude::*;

use crate::ensemble::{split_resample, Ensemble};
use crate::filter::{apply_step, prepare, Drive, StepScratch};
use crate::linalg;
use crate::model::{InitialLaw, ModelSpec, QuadraticCost};
use crate::rng::{self, role, RngStreams};
use crate::{Error, Result};

/// Time-indexed affine feedback law: per node `(Lambda_n, lambda_n)` with
/// `u(t) = -G^T (Lambda(t) x_bar + lambda(t))` after linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    times: Vec<f64>,
    gains: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl GainSchedule {
    pub fn new(times: Vec<f64>, gains: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if times.is_empty() || times.len() != gains.len() {
            return Err(Error::Config(format!(
                "gain schedule needs one gain per node ({} nodes, {} gains)",
                times.len(),
                gains.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "gain schedule grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, gains })
    }

    /// All-zero schedule (the `u = 0` initial control).
    pub fn zeros(times: Vec<f64>, d_x: usize) -> Result<Self> {
        let gains = times
            .iter()
            .map(|_| (DMatrix::zeros(d_x, d_x), DVector::zeros(d_x)))
            .collect();
        Self::new(times, gains)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn gains(&self) -> &[(DMatrix<f64>, DVector<f64>)] {
        &self.gains
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].1.len()
    }

    /// Entrywise linear interpolation between bracketing nodes; times outside
    /// the grid clamp to the nearest endpoint.
    pub fn interpolate(&self, t: f64) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.gains[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.gains[n - 1].clone();
        }
        // first node strictly above t
        let hi = self.times.partition_point(|&node| node <= t);
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let w = (t - t0) / (t1 - t0);
        let (ref m0, ref v0) = self.gains[lo];
        let (ref m1, ref v1) = self.gains[hi];
        (m0 * (1.0 - w) + m1 * w, v0 * (1.0 - w) + v1 * w)
    }

    pub fn is_finite(&self) -> bool {
        self.gains
            .iter()
            .all(|(m, v)| m.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite()))
    }

    /// Warm-start shift: node `t` takes the value of `self` at `t + delta`,
    /// falling back to zero gains beyond the covered range.
    pub fn shifted(&self, delta: f64) -> Self {
        let d = self.state_dim();
        let end = *self.times.last().unwrap();
        let gains = self
            .times
            .iter()
            .map(|&t| {
                if t + delta <= end + 1e-12 {
                    self.interpolate(t + delta)
                } else {
                    (DMatrix::zeros(d, d), DVector::zeros(d))
                }
            })
            .collect();
        Self {
            times: self.times.clone(),
            gains,
        }
    }

    /// Largest Frobenius / Euclidean gap to another schedule on a shared grid.
    pub fn sup_distance(&self, other: &GainSchedule) -> (f64, f64) {
        let mut gain_gap = 0.0f64;
        let mut offset_gap = 0.0f64;
        for ((ma, va), (mb, vb)) in self.gains.iter().zip(other.gains.iter()) {
            gain_gap = gain_gap.max((ma - mb).norm());
            offset_gap = offset_gap.max((va - vb).norm());
        }
        (gain_gap, offset_gap)
    }

    /// Writes `t`, row-major `Lambda` entries, then `lambda` entries as CSV.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        let d = self.state_dim();
        let mut header = vec!["t".to_string()];
        for i in 0..d {
            for j in 0..d {
                header.push(format!("Lambda_{i}_{j}"));
            }
        }
        for i in 0..d {
            header.push(format!("lambda_{i}"));
        }
        writeln!(out, "{}", header.join(","))?;
        for (t, (m, v)) in self.times.iter().zip(self.gains.iter()) {
            let mut row = Vec::with_capacity(1 + d * d + d);
            row.push(format!("{t:.12e}"));
            for i in 0..d {
                for j in 0..d {
                    row.push(format!("{:.12e}", m[(i, j)]));
                }
            }
            for i in 0..d {
                row.push(format!("{:.12e}", v[i]));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Moments of one forward realization along the grid, stored as flat pools
/// with one column per node.
#[derive(Debug, Clone)]
pub struct RealizationPath {
    d_x: usize,
    d_y: usize,
    n_nodes: usize,
    means: Vec<f64>,
    covs: Vec<f64>,
    cross_obs: Vec<f64>,
    cross_drift: Vec<f64>,
    costate_means: Vec<f64>,
}

impl RealizationPath {
    fn new(d_x: usize, d_y: usize, n_nodes: usize) -> Self {
        Self {
            d_x,
            d_y,
            n_nodes,
            means: vec![0.0; d_x * n_nodes],
            covs: vec![0.0; d_x * d_x * n_nodes],
            cross_obs: vec![0.0; d_x * d_y * n_nodes],
            cross_drift: vec![0.0; d_x * d_x * n_nodes],
            costate_means: vec![0.0; d_x * n_nodes],
        }
    }

    fn record(&mut self, n: usize, scratch: &StepScratch) {
        let d = self.d_x;
        let dd = d * d;
        let ddy = d * self.d_y;
        self.means[n * d..(n + 1) * d].copy_from_slice(scratch.mean.as_slice());
        self.covs[n * dd..(n + 1) * dd].copy_from_slice(scratch.cov.as_slice());
        self.cross_obs[n * ddy..(n + 1) * ddy].copy_from_slice(scratch.cross_obs.as_slice());
        self.cross_drift[n * dd..(n + 1) * dd].copy_from_slice(scratch.cross_drift.as_slice());
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    /// Ensemble mean at node `n`.
    pub fn mean_at(&self, n: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(&self.means[n * self.d_x..(n + 1) * self.d_x], self.d_x)
    }

    /// Ensemble covariance at node `n`.
    pub fn cov_at(&self, n: usize) -> DMatrixView<'_, f64> {
        let dd = self.d_x * self.d_x;
        DMatrixView::from_slice(&self.covs[n * dd..(n + 1) * dd], self.d_x, self.d_x)
    }

    /// State-observation cross-covariance at node `n`.
    pub fn cross_obs_at(&self, n: usize) -> DMatrixView<'_, f64> {
        let ddy = self.d_x * self.d_y;
        DMatrixView::from_slice(&self.cross_obs[n * ddy..(n + 1) * ddy], self.d_x, self.d_y)
    }

    /// State-drift cross-covariance at node `n`.
    pub fn cross_drift_at(&self, n: usize) -> DMatrixView<'_, f64> {
        let dd = self.d_x * self.d_x;
        DMatrixView::from_slice(&self.cross_drift[n * dd..(n + 1) * dd], self.d_x, self.d_x)
    }

    /// Costate mean at node `n` (zero until the backward sweep fills it).
    pub fn costate_at(&self, n: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(
            &self.costate_means[n * self.d_x..(n + 1) * self.d_x],
            self.d_x,
        )
    }

    fn costate_slice_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.costate_means[n * self.d_x..(n + 1) * self.d_x]
    }
}

/// `K` forward realizations on a shared time grid.
#[derive(Debug, Clone)]
pub struct RealizationBundle {
    times: Vec<f64>,
    realizations: Vec<RealizationPath>,
}

impl RealizationBundle {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn realizations(&self) -> &[RealizationPath] {
        &self.realizations
    }

    pub fn realization_count(&self) -> usize {
        self.realizations.len()
    }
}

/// Affine regression of `gamma` on `x` by empirical covariances:
/// `mu = mean(gamma)`, `Lambda = C^{gx} (C^{xx} + ridge I)^{-1}`, with
/// `1/K`-normalized covariances about the sample means. The fitted law is
/// `gamma ~ Lambda (x - x_bar) + mu`.
pub fn least_squares_fit(
    points: &[(DVector<f64>, DVector<f64>)],
    ridge: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if points.len() < 2 {
        return Err(Error::Config(format!(
            "affine regression needs at least 2 points, got {}",
            points.len()
        )));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be non-negative".into()));
    }
    let d_x = points[0].0.len();
    let d_g = points[0].1.len();
    let mut x_cols = DMatrix::zeros(d_x, points.len());
    let mut g_cols = DMatrix::zeros(d_g, points.len());
    for (k, (x, g)) in points.iter().enumerate() {
        x_cols.set_column(k, x);
        g_cols.set_column(k, g);
    }
    let (lambda, mu, _) = fit_core(&x_cols, &g_cols, |_| ridge)?;
    Ok((lambda, mu))
}

/// Shared regression core over column slabs (one point per column). The
/// ridge is derived from `trace(C^{xx})` via the supplied map, which lets
/// callers pick an absolute value or a scale-invariant fraction. Returns
/// `(Lambda, mu, x_mean)`.
fn fit_core(
    x_cols: &DMatrix<f64>,
    g_cols: &DMatrix<f64>,
    ridge_of_trace: impl FnOnce(f64) -> f64,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let k = x_cols.ncols();
    let kf = k as f64;
    let d_x = x_cols.nrows();
    let d_g = g_cols.nrows();

    let mut x_mean = DVector::zeros(d_x);
    let mut g_mean = DVector::zeros(d_g);
    let xs = x_cols.as_slice();
    let gs = g_cols.as_slice();
    for j in 0..k {
        for a in 0..d_x {
            x_mean[a] += xs[j * d_x + a];
        }
        for a in 0..d_g {
            g_mean[a] += gs[j * d_g + a];
        }
    }
    x_mean /= kf;
    g_mean /= kf;

    let mut cxx = DMatrix::<f64>::zeros(d_x, d_x);
    let mut cgx = DMatrix::<f64>::zeros(d_g, d_x);
    {
        let cxx_s = cxx.as_mut_slice();
        let cgx_s = cgx.as_mut_slice();
        for j in 0..k {
            let xj = &xs[j * d_x..(j + 1) * d_x];
            let gj = &gs[j * d_g..(j + 1) * d_g];
            for b in 0..d_x {
                let dxb = xj[b] - x_mean[b];
                for a in 0..d_x {
                    cxx_s[b * d_x + a] += (xj[a] - x_mean[a]) * dxb;
                }
                for a in 0..d_g {
                    cgx_s[b * d_g + a] += (gj[a] - g_mean[a]) * dxb;
                }
            }
        }
        for v in cxx_s.iter_mut() {
            *v /= kf;
        }
        for v in cgx_s.iter_mut() {
            *v /= kf;
        }
    }
    let ridge = ridge_of_trace(cxx.trace());
    for a in 0..d_x {
        cxx[(a, a)] += ridge;
    }

    let chol = Cholesky::new(cxx.clone()).ok_or_else(|| Error::SingularMatrix {
        context: "affine regression normal matrix",
        min_eigenvalue: linalg::min_symmetric_eigenvalue(&cxx),
    })?;
    let lambda = chol.solve(&cgx.transpose()).transpose();
    Ok((lambda, g_mean, x_mean))
}

fn node_times(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if dt <= 0.0 || horizon <= 0.0 {
        return Err(Error::Config("horizon and dt must be positive".into()));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 || (steps as f64 * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Config(format!(
            "horizon {horizon} is not an integer multiple of dt {dt}"
        )));
    }
    Ok((0..=steps).map(|i| i as f64 * dt).collect())
}

/// Propagates `K` realizations through the simulated-innovation filter
/// dynamics, each controlled by the supplied gain schedule applied to its own
/// running mean, and records means and (cross-)covariances at every node.
pub fn forward_sweep<F>(
    inits: Vec<Ensemble>,
    schedule: &GainSchedule,
    model: &ModelSpec,
    times: &[f64],
    noise_stream: F,
) -> Result<RealizationBundle>
where
    F: Fn(usize) -> rand_chacha::ChaCha12Rng + Sync,
{
    if times.len() < 2 {
        return Err(Error::Config("time grid needs at least two nodes".into()));
    }
    // interpolation is exact at nodes, so resolve the feedback coefficients
    // G^T Lambda, G^T lambda once per node instead of once per (node, k)
    let g_t = model.control_matrix().transpose();
    let node_gains: Vec<(DMatrix<f64>, DVector<f64>)> = times
        .iter()
        .map(|&t| {
            let (gain, offset) = schedule.interpolate(t);
            (&g_t * gain, &g_t * offset)
        })
        .collect();

    // coarse chunks: realizations parallelize across idle cores without
    // flooding the scheduler when an outer loop (repetitions) is already
    // saturating the pool
    let chunk = inits.len().div_ceil(rayon::current_num_threads().max(1));
    let paths: Vec<Result<RealizationPath>> = inits
        .into_par_iter()
        .enumerate()
        .with_min_len(chunk.max(8))
        .map(|(k, mut ens)| {
            let mut rng = noise_stream(k);
            let mut scratch = StepScratch::new(model, ens.size());
            let n_nodes = times.len();
            let mut path = RealizationPath::new(model.d_x(), model.d_y(), n_nodes);
            let mut u = DVector::zeros(model.d_u());
            let mut dw = DVector::zeros(model.d_y());
            for n in 0..n_nodes {
                prepare(&ens, model, &mut scratch);
                path.record(n, &scratch);

                if n + 1 < n_nodes {
                    let dt = times[n + 1] - times[n];
                    let (ref gt_gain, ref gt_offset) = node_gains[n];
                    // u = -(G^T Lambda mean + G^T lambda)
                    {
                        let us = u.as_mut_slice();
                        let g = gt_gain.as_slice();
                        let mean = scratch.mean.as_slice();
                        let d_u = us.len();
                        for (r, uv) in us.iter_mut().enumerate() {
                            let mut acc = gt_offset[r];
                            for (c, mv) in mean.iter().enumerate() {
                                acc += g[c * d_u + r] * mv;
                            }
                            *uv = -acc;
                        }
                    }
                    rng::fill_normal_vector(&mut rng, &mut dw, dt.sqrt());
                    apply_step(&mut ens, model, &u, Drive::Innovation(&dw), dt, &mut scratch)
                        .map_err(|_| Error::NonFiniteState { t: times[n] })?;
                }
            }
            Ok(path)
        })
        .collect();

    let mut realizations = Vec::with_capacity(paths.len());
    for p in paths {
        realizations.push(p?);
    }
    Ok(RealizationBundle {
        times: times.to_vec(),
        realizations,
    })
}

impl RealizationBundle {
    /// Scans every stored covariance: returns the smallest eigenvalue and the
    /// largest asymmetry over all nodes and realizations.
    pub fn covariance_invariants(&self) -> (f64, f64) {
        let mut min_eig = f64::INFINITY;
        let mut max_asym = 0.0f64;
        for path in &self.realizations {
            for n in 0..path.node_count() {
                let cov = path.cov_at(n).into_owned();
                min_eig = min_eig.min(linalg::min_symmetric_eigenvalue(&cov));
                max_asym = max_asym.max(linalg::max_asymmetry(&cov));
            }
        }
        (min_eig, max_asym)
    }
}

/// Seeds the backward sweep: `Y_{T,k} = grad psi(x_bar_{T,k})`.
pub fn terminal_costate(bundle: &mut RealizationBundle, cost: &QuadraticCost) {
    let last = bundle.times.len() - 1;
    for path in &mut bundle.realizations {
        let grad = cost.terminal_grad(&path.mean_at(last).into_owned());
        path.costate_slice_mut(last).copy_from_slice(grad.as_slice());
    }
}

/// One backward level: back-integrates the realization means, assembles the
/// regression targets from the discretized costate equation, fits the affine
/// law across realizations, and evaluates it at the forward means of level
/// `n` to update the costate means.
///
/// Statistical linearization uses the ridge-regularized solve
/// `(C + eps I)^{-1} C^{xf}` with `eps = ridge_rel * trace(C) / d_x`; a
/// collapsed ensemble (zero trace, hence zero `C^{xf}`) contributes a zero
/// matrix, matching the ridge limit.
pub fn backward_regression_step(
    bundle: &mut RealizationBundle,
    level: usize,
    model: &ModelSpec,
    cost: &QuadraticCost,
    ridge_rel: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let next = level + 1;
    if next >= bundle.times.len() {
        return Err(Error::Config(format!(
            "backward step at level {level} needs data at level {next}"
        )));
    }
    let dt = bundle.times[next] - bundle.times[level];
    let d = model.d_x();
    let k_count = bundle.realizations.len();
    let g_mat = model.control_matrix();
    let ggt = g_mat * g_mat.transpose();

    let mut x_tilde = DMatrix::zeros(d, k_count);
    let mut gamma = DMatrix::zeros(d, k_count);
    let mut drift_buf = DVector::zeros(d);
    let mut lin = DVector::zeros(d);
    let mut centered = DVector::zeros(d);

    for (k, path) in bundle.realizations.iter().enumerate() {
        let mean_next = path.mean_at(next);
        let y_next = path.costate_at(next);

        // back integration: remove the drift and control push from the mean
        model.drift_into(mean_next.as_slice(), drift_buf.as_mut_slice());
        let mut xt = x_tilde.column_mut(k);
        xt.copy_from(&mean_next);
        xt.axpy(-dt, &drift_buf, 1.0);
        xt.gemv(dt, &ggt, &y_next, 1.0);

        // statistical linearization term (C^{-1} C^{xf}) applied to Y, with
        // a scale-invariant ridge; a collapsed ensemble contributes zero,
        // matching the ridge limit (C^{xf} vanishes with the deviations)
        let cov_next = path.cov_at(next);
        let trace = cov_next.trace();
        if trace <= 0.0 {
            lin.fill(0.0);
        } else {
            let eps = ridge_rel * trace / d as f64;
            let mut reg = cov_next.into_owned();
            for a in 0..d {
                reg[(a, a)] += eps;
            }
            let chol = Cholesky::new(reg).ok_or_else(|| Error::SingularMatrix {
                context: "statistical linearization covariance",
                min_eigenvalue: linalg::min_symmetric_eigenvalue(&cov_next.into_owned()),
            })?;
            lin.gemv(1.0, &path.cross_drift_at(next), &y_next, 0.0);
            chol.solve_mut(&mut lin);
        }

        // gamma_k = Y_next + dt * (lin + grad c(mean_next))
        centered.copy_from(&mean_next);
        centered -= cost.running_target();
        let mut gc = gamma.column_mut(k);
        gc.copy_from(&y_next);
        gc.axpy(dt, &lin, 1.0);
        gc.gemv(dt, cost.running_weight(), &centered, 1.0);
    }

    let (gain, mu, x_tilde_mean) =
        fit_core(&x_tilde, &gamma, |trace| ridge_rel * trace / d as f64)?;
    let offset = &mu - &gain * x_tilde_mean;

    let mut y_new = DVector::zeros(d);
    for path in &mut bundle.realizations {
        y_new.gemv(1.0, &gain, &path.mean_at(level), 0.0);
        y_new += &offset;
        path.costate_slice_mut(level).copy_from_slice(y_new.as_slice());
    }
    Ok((gain, offset))
}

/// Configuration of the Picard iteration over forward and backward sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    /// Horizon `T` of the subproblem.
    pub horizon: f64,
    /// Step size; `T` must be an integer multiple.
    pub dt: f64,
    /// Members per realization (`M`).
    pub ensemble_size: usize,
    /// Simulated observation-noise realizations (`K`).
    pub realizations: usize,
    /// Forward-backward iterations.
    pub iterations: usize,
    /// Relative ridge for the regressions and linearization solves.
    pub ridge: f64,
    /// Replace each fitted gain by its symmetric part.
    pub symmetrize: bool,
}

impl PicardConfig {
    pub fn validate(&self, d_x: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        if self.realizations < 2 {
            return Err(Error::Config("need at least two realizations".into()));
        }
        if self.ensemble_size <= d_x {
            return Err(Error::Config(format!(
                "ensemble size {} must exceed the state dimension {d_x}",
                self.ensemble_size
            )));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        node_times(self.horizon, self.dt).map(|_| ())
    }
}

/// Per-iteration snapshot kept for diagnostics and convergence checks.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub schedule: GainSchedule,
    /// Realization means per realization, per node (forecast fan data).
    pub realization_means: Vec<Vec<DVector<f64>>>,
}

/// Full trace of a Picard solve.
#[derive(Debug)]
pub struct PicardTrace {
    pub iterations: Vec<IterationRecord>,
    pub final_bundle: RealizationBundle,
}

/// Runs the Picard iteration and returns the final gain schedule.
///
/// The `K` realization ensembles are drawn once from the initial law (pooled
/// moment matching, then split) and reused, together with identical noise
/// streams, across iterations, so successive schedules differ only through
/// the updated control.
pub fn picard_solve(
    model: &ModelSpec,
    cost: &QuadraticCost,
    law: &InitialLaw,
    cfg: &PicardConfig,
    streams: &RngStreams,
    initial_schedule: Option<&GainSchedule>,
) -> Result<GainSchedule> {
    picard_solve_traced(model, cost, law, cfg, streams, initial_schedule)
        .map(|(schedule, _)| schedule)
}

/// As [`picard_solve`], also returning per-iteration schedules, realization
/// means, and the final forward bundle.
pub fn picard_solve_traced(
    model: &ModelSpec,
    cost: &QuadraticCost,
    law: &InitialLaw,
    cfg: &PicardConfig,
    streams: &RngStreams,
    initial_schedule: Option<&GainSchedule>,
) -> Result<(GainSchedule, PicardTrace)> {
    cfg.validate(model.d_x())?;
    let times = node_times(cfg.horizon, cfg.dt)?;
    let d = model.d_x();
    let n_steps = times.len() - 1;

    let inits = split_resample(
        law,
        cfg.realizations,
        cfg.ensemble_size,
        &mut streams.stream(&[role::INITIAL_ENSEMBLE]),
    )?;

    let mut schedule = match initial_schedule {
        Some(s) => s.clone(),
        None => GainSchedule::zeros(times.clone(), d)?,
    };
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut final_bundle = None;

    for iteration in 0..cfg.iterations {
        let mut bundle = forward_sweep(inits.clone(), &schedule, model, &times, |k| {
            streams.stream(&[k as u64, role::FORWARD_NOISE])
        })?;
        terminal_costate(&mut bundle, cost);

        let terminal_gain = (
            cost.terminal_weight().clone(),
            -(cost.terminal_weight() * cost.terminal_target()),
        );
        let mut gains = vec![terminal_gain; times.len()];
        for n in (0..n_steps).rev() {
            gains[n] = backward_regression_step(&mut bundle, n, model, cost, cfg.ridge)?;
        }
        if cfg.symmetrize {
            for (m, _) in &mut gains {
                linalg::symmetrize(m);
            }
        }
        schedule = GainSchedule::new(times.clone(), gains)?;
        if !schedule.is_finite() {
            return Err(Error::DivergedGains { iteration });
        }
        iterations.push(IterationRecord {
            schedule: schedule.clone(),
            realization_means: bundle
                .realizations
                .iter()
                .map(|p| {
                    (0..p.node_count())
                        .map(|n| p.mean_at(n).into_owned())
                        .collect()
                })
                .collect(),
        });
        final_bundle = Some(bundle);
    }

    let trace = PicardTrace {
        iterations,
        final_bundle: final_bundle.expect("at least one iteration"),
    };
    Ok((schedule, trace))
}

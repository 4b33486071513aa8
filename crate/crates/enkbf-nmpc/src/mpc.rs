//! Receding-horizon controller.
//!
//! The loop repeatedly (i) solves the finite-horizon ensemble FBSDE problem
//! from the digital twin's current empirical law, (ii) applies the resulting
//! interpolated feedback law to the physical twin over one replanning
//! interval while (iii) assimilating the twin's noisy observation increments
//! back into the filter. The control applied over `(tau_n, tau_{n+1}]`
//! depends only on information available at `tau_n` plus the running filter
//! mean; observation and twin noise are drawn step by step, after the
//! control of the step is fixed.

use nalgebra::{DMatrix, DVector};

use crate::fbsde::{picard_solve, GainSchedule, PicardConfig};
use crate::filter::FilterState;
use crate::linalg;
use crate::model::{control_law, InitialLaw, ModelSpec, QuadraticCost};
use crate::rng::{self, role, RngStreams};
use crate::{ensemble, Error, Result};

/// Physical twin, digital twin, and the shared clock.
#[derive(Debug, Clone)]
pub struct TwinState {
    pub x_true: DVector<f64>,
    pub filter: FilterState,
    pub t: f64,
}

/// Receding-horizon configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Horizon `T` of each finite-horizon subproblem.
    pub horizon: f64,
    /// Replanning interval; the computed law is applied this long.
    pub replan_interval: f64,
    /// Integration step; `horizon` and `replan_interval` must be multiples.
    pub dt: f64,
    /// Filter / per-realization ensemble size `M`.
    pub ensemble_size: usize,
    /// Simulated noise realizations `K` in the solver.
    pub realizations: usize,
    /// Picard iterations per replanning step.
    pub iterations: usize,
    /// Relative ridge for the solver regressions.
    pub ridge: f64,
    /// Total simulated duration.
    pub duration: f64,
    /// Initialize each solve from the previous window's schedule shifted by
    /// the replanning interval (zero gains on the uncovered tail).
    pub warm_start: bool,
    /// Symmetrize fitted gains inside the solver.
    pub symmetrize: bool,
}

impl MpcConfig {
    fn multiple_of(value: f64, dt: f64) -> bool {
        let n = (value / dt).round();
        n >= 1.0 && (n * dt - value).abs() <= 1e-9 * value.max(1.0)
    }

    pub fn validate(&self, d_x: usize) -> Result<()> {
        if self.replan_interval > self.horizon {
            return Err(Error::Config(format!(
                "replan interval {} exceeds horizon {}",
                self.replan_interval, self.horizon
            )));
        }
        if !Self::multiple_of(self.horizon, self.dt)
            || !Self::multiple_of(self.replan_interval, self.dt)
            || !Self::multiple_of(self.duration, self.dt)
        {
            return Err(Error::Config(
                "horizon, replan interval, and duration must be integer multiples of dt".into(),
            ));
        }
        self.picard_config().validate(d_x)
    }

    pub fn picard_config(&self) -> PicardConfig {
        PicardConfig {
            horizon: self.horizon,
            dt: self.dt,
            ensemble_size: self.ensemble_size,
            realizations: self.realizations,
            iterations: self.iterations,
            ridge: self.ridge,
            symmetrize: self.symmetrize,
        }
    }
}

/// Time series produced by one receding-horizon run.
///
/// Rows are the `dt` grid `t_0 .. t_N`; `controls[n]` is the control applied
/// over `[t_n, t_{n+1})`, with the last entry repeated so every logged row
/// carries a control value. Observation increments are per step (`N`
/// entries).
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub true_states: Vec<DVector<f64>>,
    pub filter_means: Vec<DVector<f64>>,
    pub filter_covs: Vec<DMatrix<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub running_costs: Vec<f64>,
    pub observations: Vec<DVector<f64>>,
    pub replan_times: Vec<f64>,
    pub cov_min_eigenvalue: f64,
    pub cov_max_asymmetry: f64,
}

impl TrajectoryLog {
    /// Writes `t`, true state, filter mean, covariance diagonal, control,
    /// and instantaneous running cost as CSV.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        let d_x = self.true_states[0].len();
        let d_u = self.controls[0].len();
        let mut header = vec!["t".to_string()];
        for i in 0..d_x {
            header.push(format!("x_true_{i}"));
        }
        for i in 0..d_x {
            header.push(format!("mean_{i}"));
        }
        for i in 0..d_x {
            header.push(format!("cov_diag_{i}"));
        }
        for i in 0..d_u {
            header.push(format!("u_{i}"));
        }
        header.push("cost".to_string());
        writeln!(out, "{}", header.join(","))?;
        for n in 0..self.times.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(format!("{:.12e}", self.times[n]));
            for i in 0..d_x {
                row.push(format!("{:.12e}", self.true_states[n][i]));
            }
            for i in 0..d_x {
                row.push(format!("{:.12e}", self.filter_means[n][i]));
            }
            for i in 0..d_x {
                row.push(format!("{:.12e}", self.filter_covs[n][(i, i)]));
            }
            for i in 0..d_u {
                row.push(format!("{:.12e}", self.controls[n][i]));
            }
            row.push(format!("{:.12e}", self.running_costs[n]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Euler--Maruyama step of the physical twin
/// `dX = f(X) dt + G u dt + sigma dB`.
pub fn physical_twin_step(
    x: &DVector<f64>,
    model: &ModelSpec,
    u: &DVector<f64>,
    db: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let mut next = x + (model.drift(x) + model.control_matrix() * u) * dt;
    if model.twin_noise_scale() > 0.0 {
        next += db * model.twin_noise_scale();
    }
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState { t: f64::NAN })
    }
}

/// Observation increment `dY = h(x) dt + R^{1/2} dW`.
pub fn observe_increment(
    x: &DVector<f64>,
    model: &ModelSpec,
    dw: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    model.obs(x) * dt + model.obs_cov_sqrt() * dw
}

/// Gain pair at time `t` by entrywise linear interpolation (clamped at the
/// schedule's endpoints).
pub fn interpolate_gain(schedule: &GainSchedule, t: f64) -> (DMatrix<f64>, DVector<f64>) {
    schedule.interpolate(t)
}

/// Runs the full receding-horizon loop and returns the trajectory log.
///
/// Randomness is organized per role: the twin's initial state, twin noise,
/// and observation noise are drawn from run-scoped streams; each replanning
/// window's solver gets its own scope, so a window's schedule is a pure
/// function of the filter state at the replanning instant.
pub fn run_receding_horizon(
    model: &ModelSpec,
    cost: &QuadraticCost,
    law: &InitialLaw,
    cfg: &MpcConfig,
    streams: &RngStreams,
) -> Result<TrajectoryLog> {
    cfg.validate(model.d_x())?;
    let dt = cfg.dt;
    let steps_per_replan = (cfg.replan_interval / dt).round() as usize;
    let total_steps = (cfg.duration / dt).round() as usize;
    let picard_cfg = cfg.picard_config();

    // physical twin starts from a draw of the initial law
    let x0 = {
        let mut rng = streams.stream(&[role::TWIN_INIT]);
        let white = rng::normal_vector(&mut rng, model.d_x(), 1.0);
        &law.mean + linalg::sym_sqrt(&law.cov) * white
    };
    let ensemble = ensemble::moment_matched_initial(
        law,
        cfg.ensemble_size,
        &mut streams.stream(&[role::INITIAL_ENSEMBLE]),
    )?;

    let mut twin = TwinState {
        x_true: x0,
        filter: FilterState::new(ensemble, 0.0),
        t: 0.0,
    };
    let mut twin_rng = streams.stream(&[role::TWIN_NOISE]);
    let mut obs_rng = streams.stream(&[role::OBS_NOISE]);
    let solver_streams = streams.scoped(role::SOLVER);

    let mut log = TrajectoryLog {
        times: Vec::with_capacity(total_steps + 1),
        true_states: Vec::with_capacity(total_steps + 1),
        filter_means: Vec::with_capacity(total_steps + 1),
        filter_covs: Vec::with_capacity(total_steps + 1),
        controls: Vec::with_capacity(total_steps + 1),
        running_costs: Vec::with_capacity(total_steps + 1),
        observations: Vec::with_capacity(total_steps),
        replan_times: Vec::new(),
        cov_min_eigenvalue: f64::INFINITY,
        cov_max_asymmetry: 0.0,
    };

    let mut schedule: Option<GainSchedule> = None;
    for step in 0..total_steps {
        let t = step as f64 * dt;
        if step % steps_per_replan == 0 {
            let window = step / steps_per_replan;
            let mean = twin.filter.ensemble.mean();
            let mut cov = twin.filter.ensemble.covariance();
            linalg::symmetrize(&mut cov);
            let window_law = InitialLaw::new(mean, cov)?;
            let warm = match (&schedule, cfg.warm_start) {
                (Some(prev), true) => Some(prev.shifted(cfg.replan_interval)),
                _ => None,
            };
            schedule = Some(picard_solve(
                model,
                cost,
                &window_law,
                &picard_cfg,
                &solver_streams.scoped(window as u64),
                warm.as_ref(),
            )?);
            log.replan_times.push(t);
        }
        let active = schedule.as_ref().expect("schedule set at first replan");
        let window_start = (step / steps_per_replan * steps_per_replan) as f64 * dt;
        let (gain, offset) = interpolate_gain(active, t - window_start);

        let mean = twin.filter.ensemble.mean();
        let cov = twin.filter.ensemble.covariance();
        log.cov_min_eigenvalue = log
            .cov_min_eigenvalue
            .min(linalg::min_symmetric_eigenvalue(&cov));
        log.cov_max_asymmetry = log.cov_max_asymmetry.max(linalg::max_asymmetry(&cov));
        let u = control_law(&gain, &offset, &mean, model.control_matrix());

        log.times.push(t);
        log.true_states.push(twin.x_true.clone());
        log.filter_means.push(mean);
        log.filter_covs.push(cov);
        log.running_costs
            .push(0.5 * u.norm_squared() + cost.running_value(&twin.x_true));
        log.controls.push(u.clone());

        let db = rng::normal_vector(&mut twin_rng, model.d_x(), dt.sqrt());
        let next = physical_twin_step(&twin.x_true, model, &u, &db, dt).map_err(|_| {
            Error::NonFiniteState { t }
        })?;
        let dw = rng::normal_vector(&mut obs_rng, model.d_y(), dt.sqrt());
        let dy = observe_increment(&twin.x_true, model, &dw, dt);
        twin.filter.assimilate_step(model, &u, &dy, dt)?;
        log.observations.push(dy);
        twin.x_true = next;
        twin.t = (step + 1) as f64 * dt;
    }

    // final row; the last control is repeated
    let mean = twin.filter.ensemble.mean();
    let cov = twin.filter.ensemble.covariance();
    log.cov_min_eigenvalue = log
        .cov_min_eigenvalue
        .min(linalg::min_symmetric_eigenvalue(&cov));
    log.cov_max_asymmetry = log.cov_max_asymmetry.max(linalg::max_asymmetry(&cov));
    let last_u = log
        .controls
        .last()
        .cloned()
        .unwrap_or_else(|| DVector::zeros(model.d_u()));
    log.times.push(total_steps as f64 * dt);
    log.true_states.push(twin.x_true.clone());
    log.filter_means.push(mean);
    log.filter_covs.push(cov);
    log.running_costs
        .push(0.5 * last_u.norm_squared() + cost.running_value(&twin.x_true));
    log.controls.push(last_u);

    Ok(log)
}

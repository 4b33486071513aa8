use enkbf_nmpc::model::{pendulum_model, InitialLaw, QuadraticCost};
use enkbf_nmpc::mpc::{run_receding_horizon, MpcConfig};
use enkbf_nmpc::rng::RngStreams;
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::time::Instant;

#[test]
fn timing_pilot() {
    let model = pendulum_model(5.0).unwrap();
    let cost = QuadraticCost::isotropic(2, 50.0, 50.0).unwrap();
    let law = InitialLaw::new(
        DVector::from_column_slice(&[PI / 2.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
    )
    .unwrap();
    let cfg = MpcConfig {
        horizon: 0.5,
        replan_interval: 0.05,
        dt: 1e-3,
        ensemble_size: 50,
        realizations: 50,
        iterations: 3,
        ridge: 1e-8,
        duration: 2.0,
        warm_start: true,
        symmetrize: false,
    };
    let t0 = Instant::now();
    let log = run_receding_horizon(&model, &cost, &law, &cfg, &RngStreams::new(1)).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let final_angle = log.filter_means.last().unwrap()[0];
    let final_true = log.true_states.last().unwrap()[0];
    println!("one rep: {elapsed:.2}s, final filter angle {final_angle:.4}, true {final_true:.4}");
    println!("angle at t=1.0: {:.4}", log.filter_means[1000][0]);
    println!("cov min eig {:.3e}, asym {:.3e}", log.cov_min_eigenvalue, log.cov_max_asymmetry);
}

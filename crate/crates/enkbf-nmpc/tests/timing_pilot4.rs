use enkbf_nmpc::model::{pendulum_model, InitialLaw, QuadraticCost};
use enkbf_nmpc::mpc::{run_receding_horizon, MpcConfig};
use enkbf_nmpc::rng::RngStreams;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::f64::consts::PI;
use std::time::Instant;

#[test]
fn stabilization_pilot() {
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
        iterations: 2,
        ridge: 1e-8,
        duration: 3.0,
        warm_start: true,
        symmetrize: false,
    };
    let n_reps = 24u64;
    for r_var in [1.0, 0.1] {
        let model = pendulum_model(5.0)
            .unwrap()
            .with_obs_cov(DMatrix::identity(1, 1) * r_var)
            .unwrap();
        let t0 = Instant::now();
        let angles: Vec<Vec<f64>> = (0..n_reps)
            .into_par_iter()
            .map(|rep| {
                let streams = RngStreams::new(2024).scoped(rep);
                let log = run_receding_horizon(&model, &cost, &law, &cfg, &streams).unwrap();
                [2000usize, 2500, 3000]
                    .iter()
                    .map(|&i| log.filter_means[i][0])
                    .collect()
            })
            .collect();
        let elapsed = t0.elapsed().as_secs_f64();
        for (col, t) in [2.0, 2.5, 3.0].iter().enumerate() {
            let vals: Vec<f64> = angles.iter().map(|a| a[col]).collect();
            let mean_abs = vals.iter().map(|a| a.abs()).sum::<f64>() / vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            println!("R={r_var} t={t}: mean|angle|={mean_abs:.4} var={var:.6}");
        }
        println!("R={r_var}: {elapsed:.1}s for {n_reps} reps");
    }
}

use enkbf_nmpc::fbsde::{forward_sweep, picard_solve, GainSchedule, PicardConfig};
use enkbf_nmpc::model::{pendulum_model, InitialLaw, QuadraticCost};
use enkbf_nmpc::ensemble::split_resample;
use enkbf_nmpc::rng::{role, RngStreams};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::time::Instant;

#[test]
fn timing_parts() {
    let model = pendulum_model(5.0).unwrap();
    let cost = QuadraticCost::isotropic(2, 50.0, 50.0).unwrap();
    let law = InitialLaw::new(
        DVector::from_column_slice(&[PI / 2.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
    )
    .unwrap();
    let streams = RngStreams::new(1);
    let cfg = PicardConfig {
        horizon: 0.5,
        dt: 1e-3,
        ensemble_size: 50,
        realizations: 50,
        iterations: 3,
        ridge: 1e-8,
        symmetrize: false,
    };
    // Forward sweep alone (sequential single-thread baseline via 1-thread pool)
    let inits = split_resample(&law, 50, 50, &mut streams.stream(&[role::INITIAL_ENSEMBLE])).unwrap();
    let times: Vec<f64> = (0..=500).map(|i| i as f64 * 1e-3).collect();
    let schedule = GainSchedule::zeros(times.clone(), 2).unwrap();
    let t0 = Instant::now();
    let _b = forward_sweep(inits.clone(), &schedule, &model, &times, |k| {
        streams.stream(&[k as u64, role::FORWARD_NOISE])
    })
    .unwrap();
    println!("forward sweep: {:.3}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let _s = picard_solve(&model, &cost, &law, &cfg, &streams, None).unwrap();
    println!("picard x3: {:.3}s", t1.elapsed().as_secs_f64());
}

use enkbf_nmpc::ensemble::split_resample;
use enkbf_nmpc::fbsde::{forward_sweep, GainSchedule};
use enkbf_nmpc::model::{pendulum_model, InitialLaw};
use enkbf_nmpc::riccati::LtiSpec;
use enkbf_nmpc::rng::{role, RngStreams};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use std::f64::consts::PI;
use std::time::Instant;

#[test]
fn sin_vs_linear() {
    let streams = RngStreams::new(1);
    let law = InitialLaw::new(
        DVector::from_column_slice(&[PI / 2.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
    )
    .unwrap();
    let times: Vec<f64> = (0..=500).map(|i| i as f64 * 1e-3).collect();
    let schedule = GainSchedule::zeros(times.clone(), 2).unwrap();
    let inits =
        split_resample(&law, 50, 50, &mut streams.stream(&[role::INITIAL_ENSEMBLE])).unwrap();

    let pend = pendulum_model(5.0).unwrap();
    let lin = LtiSpec::new(
        dmatrix![0.0, 1.0; 1.0, -5.0],
        dvector![0.0, 0.0],
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_column_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(1, 1),
    )
    .unwrap()
    .to_model()
    .unwrap();

    for (name, model) in [("pendulum", &pend), ("linearized", &lin)] {
        let t0 = Instant::now();
        for _ in 0..5 {
            let _ = forward_sweep(inits.clone(), &schedule, model, &times, |k| {
                streams.stream(&[k as u64, role::FORWARD_NOISE])
            })
            .unwrap();
        }
        println!("{name}: {:.3}s per sweep", t0.elapsed().as_secs_f64() / 5.0);
    }
}

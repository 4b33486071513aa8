//! Ensemble container and empirical-moment computations.
//!
//! All covariances are normalized by `1/M` — not the `1/(M-1)` most
//! statistics libraries default to — matching the convention of the filter
//! and solver equations throughout this crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg;
use crate::model::InitialLaw;
use crate::{Error, Result};

/// An ensemble of `M` state vectors, stored column-per-member.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    data: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps a `d_x x M` member matrix (each column one member).
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() < 2 {
            return Err(Error::EnsembleTooSmall {
                size: data.ncols(),
                min: 1,
            });
        }
        Ok(Self { data })
    }

    pub fn from_members(members: &[DVector<f64>]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let d = members[0].len();
        if members.iter().any(|m| m.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "Ensemble members",
                expected: format!("{d}"),
                actual: "mixed lengths".into(),
            });
        }
        let mut data = DMatrix::zeros(d, members.len());
        for (j, m) in members.iter().enumerate() {
            data.set_column(j, m);
        }
        Self::from_matrix(data)
    }

    /// Number of members `M`.
    pub fn size(&self) -> usize {
        self.data.ncols()
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.data.column(j).into_owned()
    }

    /// Column-major member matrix.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    /// Empirical mean `(1/M) sum_j X^(j)`.
    pub fn mean(&self) -> DVector<f64> {
        let m = self.size() as f64;
        let mut acc = DVector::zeros(self.dim());
        for j in 0..self.size() {
            acc += self.data.column(j);
        }
        acc / m
    }

    /// `1/M`-normalized cross-covariance between the members and a matrix of
    /// images (one column per member): `(1/M) sum_j dX^(j) (dg^(j))^T`.
    ///
    /// With `images = self.data()` this is the state covariance.
    pub fn cross_cov(&self, images: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if images.ncols() != self.size() {
            return Err(Error::DimensionMismatch {
                context: "cross_cov images",
                expected: format!("{} columns", self.size()),
                actual: format!("{} columns", images.ncols()),
            });
        }
        let m = self.size() as f64;
        let x_mean = self.mean();
        let mut g_mean = DVector::zeros(images.nrows());
        for j in 0..images.ncols() {
            g_mean += images.column(j);
        }
        g_mean /= m;

        let mut cov = DMatrix::zeros(self.dim(), images.nrows());
        for j in 0..self.size() {
            let dx = self.data.column(j) - &x_mean;
            let dg = images.column(j) - &g_mean;
            // rank-one accumulation in a fixed member order keeps reductions
            // deterministic
            cov.ger(1.0 / m, &dx, &dg, 1.0);
        }
        Ok(cov)
    }

    /// State covariance `(1/M) sum_j dX^(j) (dX^(j))^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.cross_cov(&self.data).expect("dimensions match")
    }

    /// Images of all members under a map, column per member.
    pub fn map_members(&self, out_dim: usize, f: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(out_dim, self.size());
        map_columns(&self.data, &mut out, f);
        out
    }
}

/// Applies `f` column-by-column: `out[:, j] = f(input[:, j])`.
pub fn map_columns(input: &DMatrix<f64>, out: &mut DMatrix<f64>, f: impl Fn(&[f64], &mut [f64])) {
    debug_assert_eq!(input.ncols(), out.ncols());
    let d_in = input.nrows();
    let d_out = out.nrows();
    let src = input.as_slice();
    let dst = out.as_mut_slice();
    for j in 0..input.ncols() {
        f(
            &src[j * d_in..(j + 1) * d_in],
            &mut dst[j * d_out..(j + 1) * d_out],
        );
    }
}

/// Draws an ensemble whose empirical mean and `1/M`-covariance equal the
/// law's moments exactly (up to round-off): standard-normal draws are
/// recentered, whitened by their own sample-covariance root, colored by
/// `cov^{1/2}` and shifted by the mean.
///
/// Requires `M > d_x`, otherwise the sample covariance of the draws is
/// singular and whitening is impossible.
pub fn moment_matched_initial(
    law: &InitialLaw,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Ensemble> {
    let d = law.dim();
    if size <= d {
        return Err(Error::EnsembleTooSmall { size, min: d });
    }
    let mut draws = crate::rng::normal_matrix(rng, d, size);
    let mean = draws.column_mean();
    for j in 0..size {
        let mut col = draws.column_mut(j);
        col -= &mean;
    }
    let sample_cov = &draws * draws.transpose() / size as f64;
    let whiten = linalg::sym_inv_sqrt(&sample_cov, "initial ensemble whitening")?;
    let color = linalg::sym_sqrt(&law.cov);
    let transform = color * whiten;
    let mut data = transform * draws;
    for j in 0..size {
        let mut col = data.column_mut(j);
        col += &law.mean;
    }
    Ensemble::from_matrix(data)
}

/// Draws `count * size` members moment-matched to the law as a single pool
/// and splits them into `count` ensembles of `size` members.
///
/// The pooled moments are exact while the per-ensemble means and covariances
/// carry the natural `O(1/sqrt(size))` sampling spread, which is what gives
/// distinct forward realizations distinct starting means.
pub fn split_resample(
    law: &InitialLaw,
    count: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Ensemble>> {
    if count == 0 {
        return Err(Error::Config("realization count must be positive".into()));
    }
    let pool = moment_matched_initial(law, count * size, rng)?;
    let d = law.dim();
    (0..count)
        .map(|k| {
            let chunk = pool.data().columns(k * size, size).into_owned();
            debug_assert_eq!(chunk.nrows(), d);
            Ensemble::from_matrix(chunk)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn law2(mean: [f64; 2], var: f64) -> InitialLaw {
        InitialLaw::new(
            DVector::from_column_slice(&mean),
            DMatrix::identity(2, 2) * var,
        )
        .unwrap()
    }

    #[test]
    fn mean_of_two_members() {
        let ens = Ensemble::from_members(&[dvector![1.0, 0.0], dvector![3.0, 2.0]]).unwrap();
        assert_relative_eq!(ens.mean(), dvector![2.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn mean_of_constant_ensemble() {
        let v = dvector![0.3, -1.7];
        let ens = Ensemble::from_members(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_relative_eq!(ens.mean(), v, epsilon = 1e-15);
    }

    #[test]
    fn mean_of_symmetric_pair_is_zero() {
        let x = dvector![2.0, -5.0];
        let ens = Ensemble::from_members(&[x.clone(), -x]).unwrap();
        assert!(ens.mean().norm() < 1e-15);
    }

    #[test]
    fn cross_cov_constant_images_is_zero() {
        let ens = Ensemble::from_members(&[dvector![1.0], dvector![2.0], dvector![5.0]]).unwrap();
        let images = DMatrix::from_element(2, 3, 7.0);
        let cov = ens.cross_cov(&images).unwrap();
        assert!(cov.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cross_cov_scalar_hand_value() {
        // members {1, 3}, images = members: (1/2)((-1)^2 + 1^2) = 1
        let ens = Ensemble::from_members(&[dvector![1.0], dvector![3.0]]).unwrap();
        let cov = ens.covariance();
        assert_relative_eq!(cov[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_cov_length_mismatch_errors() {
        let ens = Ensemble::from_members(&[dvector![1.0], dvector![3.0]]).unwrap();
        let images = DMatrix::zeros(1, 3);
        assert!(ens.cross_cov(&images).is_err());
    }

    #[test]
    fn state_covariance_is_symmetric_psd() {
        let mut rng = RngStreams::new(9).stream(&[0]);
        let law = law2([0.0, 0.0], 1.0);
        let ens = moment_matched_initial(&law, 12, &mut rng).unwrap();
        let cov = ens.covariance();
        assert!(linalg::max_asymmetry(&cov) < 1e-14);
        assert!(linalg::min_symmetric_eigenvalue(&cov) >= -1e-12);
    }

    #[test]
    fn moment_matching_is_exact() {
        let mut rng = RngStreams::new(1).stream(&[0]);
        let law = InitialLaw::new(dvector![1.0, -2.0], dmatrix![0.5, 0.1; 0.1, 0.3]).unwrap();
        let ens = moment_matched_initial(&law, 7, &mut rng).unwrap();
        assert!((ens.mean() - &law.mean).norm() < 1e-10);
        assert!((ens.covariance() - &law.cov).norm() < 1e-10);
    }

    #[test]
    fn moment_matching_pendulum_start() {
        // mean (pi/2, 0), variance 0.1 per coordinate, M = 50
        let mut rng = RngStreams::new(3).stream(&[0]);
        let law = law2([PI / 2.0, 0.0], 0.1);
        let ens = moment_matched_initial(&law, 50, &mut rng).unwrap();
        assert!((ens.mean() - dvector![PI / 2.0, 0.0]).norm() < 1e-10);
        assert!((ens.covariance() - DMatrix::identity(2, 2) * 0.1).norm() < 1e-10);
    }

    #[test]
    fn moment_matching_is_deterministic() {
        let law = law2([0.2, 0.4], 0.3);
        let a = moment_matched_initial(&law, 10, &mut RngStreams::new(5).stream(&[1])).unwrap();
        let b = moment_matched_initial(&law, 10, &mut RngStreams::new(5).stream(&[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moment_matching_requires_enough_members() {
        let law = law2([0.0, 0.0], 1.0);
        match moment_matched_initial(&law, 2, &mut RngStreams::new(0).stream(&[0])) {
            Err(Error::EnsembleTooSmall { size: 2, min: 2 }) => {}
            other => panic!("expected EnsembleTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn split_resample_pool_moments_exact() {
        let mut rng = RngStreams::new(11).stream(&[0]);
        let law = InitialLaw::new(dvector![0.5, -0.1], dmatrix![0.4, 0.05; 0.05, 0.2]).unwrap();
        let parts = split_resample(&law, 4, 25, &mut rng).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|e| e.size() == 25));

        let members: Vec<DVector<f64>> = parts
            .iter()
            .flat_map(|e| (0..e.size()).map(|j| e.member(j)).collect::<Vec<_>>())
            .collect();
        let pool = Ensemble::from_members(&members).unwrap();
        assert!((pool.mean() - &law.mean).norm() < 1e-10);
        assert!((pool.covariance() - &law.cov).norm() < 1e-10);

        // sub-ensemble means scatter around the law mean
        let spread: f64 = parts
            .iter()
            .map(|e| (e.mean() - &law.mean).norm())
            .fold(0.0, f64::max);
        assert!(spread > 1e-6, "sub-ensembles unexpectedly all exact");
    }

    proptest! {
        // cross_cov(ens, a*images + b) = a * cross_cov(ens, images)
        #[test]
        fn cross_cov_affine_images(a in -3.0f64..3.0, b in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = RngStreams::new(seed).stream(&[7]);
            let law = law2([0.0, 0.0], 1.0);
            let ens = moment_matched_initial(&law, 9, &mut rng).unwrap();
            let images = ens.map_members(1, |x, out| out[0] = 0.8 * x[0] - 0.1 * x[1]);
            let scaled = images.map(|v| a * v + b);
            let base = ens.cross_cov(&images).unwrap();
            let got = ens.cross_cov(&scaled).unwrap();
            prop_assert!((got - base * a).norm() < 1e-10);
        }

        #[test]
        fn moments_invariant_under_permutation(seed in 0u64..100) {
            let mut rng = RngStreams::new(seed).stream(&[3]);
            let law = law2([1.0, -1.0], 0.5);
            let ens = moment_matched_initial(&law, 8, &mut rng).unwrap();
            let mut members: Vec<DVector<f64>> = (0..8).map(|j| ens.member(j)).collect();
            members.reverse();
            members.swap(0, 3);
            let permuted = Ensemble::from_members(&members).unwrap();
            prop_assert!((ens.mean() - permuted.mean()).norm() < 1e-12);
            prop_assert!((ens.covariance() - permuted.covariance()).norm() < 1e-12);
        }
    }
}

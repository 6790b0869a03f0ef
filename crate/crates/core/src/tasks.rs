//! Canonical toy mixtures used by the experiments and benchmarks.

use crate::predictor::{Component, GaussianMixture};

/// Two overlapping isotropic components at `(-1, 0)` and `(1, 0)` with
/// variance 0.5. Overlap keeps component posteriors away from 0 and 1, so
/// edit strength shows up as a graded posterior change.
pub fn two_component() -> GaussianMixture {
    GaussianMixture::isotropic(&[vec![-1.0, 0.0], vec![1.0, 0.0]], 0.5).expect("valid mixture")
}

/// Three anisotropic, unequally weighted components in 2-D.
pub fn three_component() -> GaussianMixture {
    GaussianMixture::new(vec![
        Component {
            weight: 0.5,
            mean: vec![-2.0, 0.0],
            var: vec![0.3, 0.6],
        },
        Component {
            weight: 0.3,
            mean: vec![2.0, 1.0],
            var: vec![0.5, 0.2],
        },
        Component {
            weight: 0.2,
            mean: vec![0.0, -2.5],
            var: vec![0.4, 0.4],
        },
    ])
    .expect("valid mixture")
}

/// Two well-separated components (10 standard deviations apart).
pub fn separated_pair() -> GaussianMixture {
    GaussianMixture::isotropic(&[vec![-3.0, 0.0], vec![3.0, 0.0]], 0.09).expect("valid mixture")
}

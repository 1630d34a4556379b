use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming normal with fan-in scaling for a leaky rectifier of the given
    /// negative slope: `std = sqrt(2 / ((1 + slope²) · fan_in))`.
    KaimingLeaky(f64),
    /// `std = sqrt(1 / fan_in)`, for layers without a following nonlinearity.
    Linear,
    /// Uniform in `[-a, a]`; used in tests.
    Uniform(f64),
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ArrayD<T> {
        let fan_in = fan_in.max(1) as f64;
        match self {
            Init::KaimingLeaky(slope) => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
                normal(shape, std, rng)
            }
            Init::Linear => normal(shape, (1.0 / fan_in).sqrt(), rng),
            Init::Uniform(a) => {
                ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random_range(-a..=a)))
            }
        }
    }
}

fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}

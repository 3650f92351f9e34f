//! Named parameter storage shared by the encoder, patch matcher, heads,
//! optimizer, EMA update and checkpoints.

use rand::Rng;

use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param { data: vec![T::zero(); shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Param { data: vec![T::one(); shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Truncated normal init: rejection outside +-3 sigma.
    pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            for z in [r * theta.cos(), r * theta.sin()] {
                if z.abs() <= 3.0 && data.len() < n {
                    data.push(T::from_f64(z * std));
                }
            }
        }
        Param { data, shape: shape.to_vec() }
    }
}

/// Flat named view over a parameter struct. Ordering is part of the
/// contract: EMA, the optimizer and checkpoints all zip by it.
pub type NamedParams<'a, T> = Vec<(String, &'a Param<T>)>;
pub type NamedParamsMut<'a, T> = Vec<(String, &'a mut Param<T>)>;

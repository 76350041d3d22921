use rand::{Rng as _, SeedableRng};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Deterministic generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed wrapper: the same seed and the same sequence of calls give
/// bit-identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }

    /// Independent sub-stream for a named purpose.
    pub fn derive(self, stream: u64) -> Rng {
        let mut rng = Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }
}

/// I.i.d. uniform values in `[lo, hi)`.
pub fn init_uniform<T: Scalar>(shape: &[usize], lo: T, hi: T, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(lo < hi) {
        return Err(Error::contract(format!("init_uniform needs lo < hi, got [{lo}, {hi})")));
    }
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))`.
///
/// For shape `[out, in, k...]` the receptive field `prod(k...)` multiplies
/// both fans; vectors use their length for both.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let rf: usize = rest.iter().product();
            (inp * rf, out * rf)
        }
        [] => (1, 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_xavier<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let b = T::of(xavier_bound(shape));
    init_uniform(shape, -b, b, rng)
}

/// Inverted-dropout mask: zeros with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.numel(), p, rng);
    let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Tensor::new(x.shape(), data)
}

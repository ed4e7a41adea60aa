//! Small building blocks shared by the two architectures.

use mlab_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

pub(crate) fn layernorm<T: Scalar>(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
    Ok(tape.layernorm(x, g, b, T::from_f64_lossy(1e-5))?)
}

/// Per-sample normalization over all of `(C, H, W)` followed by a learned
/// per-channel affine map.
pub(crate) fn sample_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let per_sample: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[shape[0], per_sample])?;
    let ones = tape.constant(Tensor::ones(&[per_sample]));
    let zeros = tape.constant(Tensor::zeros(&[per_sample]));
    let normed = layernorm(tape, flat, ones, zeros)?;
    let back = tape.reshape(normed, &shape)?;
    Ok(tape.channel_affine(back, gamma, beta)?)
}

pub(crate) fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Fan-in scaled normal weights for a dense `[fan_in, fan_out]` matrix.
pub(crate) fn dense<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
}

/// He-normal convolution kernels `[out, in, k, k]`.
pub(crate) fn conv_kernel<T: Scalar>(
    rng: &mut impl Rng,
    out: usize,
    inp: usize,
    k: usize,
) -> Tensor<T> {
    normal(rng, &[out, inp, k, k], (2.0 / (inp * k * k) as f64).sqrt())
}

/// Implements name-aware `map`, `visit` and `visit_mut` over a struct whose
/// fields are all parameters of type `P`.
macro_rules! param_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<P> $ty<P> {
            pub(crate) fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $ty<Q> {
                $ty { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)),* }
            }

            pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use param_fields;

/// Gathers whole rows of a `[rows, width]` tensor.
pub(crate) fn gather_rows<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rows: &[usize],
    width: usize,
) -> Result<Var> {
    let index: Vec<usize> = rows
        .iter()
        .flat_map(|&r| r * width..(r + 1) * width)
        .collect();
    Ok(tape.gather(x, &[rows.len(), width], index.into())?)
}

//! Forward kernels on plain tensors.
//!
//! These are the tape-free entry points; [`crate::Tape`] records the same
//! kernels together with their gradient rules.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `sqrt(2 / pi)` for the tanh form of gelu.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Exp,
    Log,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

/// Applies `op` to one or two tensors. Binary ops accept equal shapes or a
/// single-element operand on either side.
pub fn elementwise<T: Scalar>(op: Elementwise, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if args.len() != op.arity() {
        return Err(TensorError::Invalid {
            op: "elementwise",
            msg: format!("{op:?} takes {} operands, got {}", op.arity(), args.len()),
        });
    }
    match op {
        Elementwise::Add => broadcast_binary("add", args[0], args[1], |a, b| a + b),
        Elementwise::Sub => broadcast_binary("sub", args[0], args[1], |a, b| a - b),
        Elementwise::Mul => broadcast_binary("mul", args[0], args[1], |a, b| a * b),
        Elementwise::Relu => Ok(args[0].map(relu)),
        Elementwise::Gelu => Ok(args[0].map(gelu)),
        Elementwise::Exp => Ok(args[0].map(T::exp)),
        Elementwise::Log => {
            if let Some(&bad) = args[0].data().iter().find(|v| !(**v > T::zero())) {
                return Err(TensorError::Domain {
                    op: "log",
                    value: bad.as_f64(),
                });
            }
            Ok(args[0].map(T::ln))
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(a.shape(), data)
    } else if b.numel() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.numel() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Tanh approximation of gelu.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::from_vec(&[m, n], out)
}

/// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
/// read transposed when `trans_b` is set.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let dims = bmm_dims(a.shape(), b.shape(), trans_b)?;
    let (batch, m, k, n) = dims;
    let mut out = vec![T::zero(); batch * m * n];
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            k as isize,
            1,
            &b.data()[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&[batch, m, n], out)
}

pub(crate) fn bmm_dims(
    a: &[usize],
    b: &[usize],
    trans_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    let err = || TensorError::Shape {
        op: "bmm",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
        return Err(err());
    }
    let (bk, bn) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
    if a[2] != bk {
        return Err(err());
    }
    Ok((a[0], a[1], a[2], bn))
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op: "axis",
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) struct LayerNormParts<T> {
    pub out: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layernorm_parts<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<LayerNormParts<T>> {
    let width = *x.shape().last().ok_or(TensorError::Invalid {
        op: "layernorm",
        msg: "rank-0 input".into(),
    })?;
    if gain.numel() != width || bias.numel() != width {
        return Err(TensorError::Shape {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / width.max(1);
    let n = T::from_usize(width).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut normalized = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..width {
            let z = (row[j] - mean) * is;
            normalized[r * width + j] = z;
            out[r * width + j] = z * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormParts {
        out,
        normalized,
        inv_std,
    })
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let parts = layernorm_parts(x, gain, bias, eps)?;
    Tensor::from_vec(x.shape(), parts.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, c, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    lhs: x.to_vec(),
                    rhs: k.to_vec(),
                })
            }
        };
        let [f, kc, kh, kw] = *k else {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        };
        if kc != c {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        Ok(Self {
            batch,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.filters, self.out_h, self.out_w]
        } else {
            vec![self.filters, self.out_h, self.out_w]
        }
    }

    /// Output positions along one axis whose tap at kernel offset `k` lands
    /// inside an input of length `len`.
    fn valid_span(&self, k: usize, out: usize, len: usize) -> std::ops::Range<usize> {
        let hi = out.min((len + self.padding).saturating_sub(k).div_ceil(self.stride));
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride).min(hi);
        lo..hi
    }

    /// Calls `f(out_row_offset, src_offset, span)` for each output row of
    /// column row `row` that reads inside the image. Inputs for consecutive
    /// output columns in `span` sit `stride` apart starting at `src_offset`.
    fn for_each_span(&self, row: usize, mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
        let c = row / (self.kh * self.kw);
        let ky = (row / self.kw) % self.kh;
        let kx = row % self.kw;
        let xs = self.valid_span(kx, self.out_w, self.width);
        if xs.is_empty() {
            return;
        }
        for oy in self.valid_span(ky, self.out_h, self.height) {
            let y = oy * self.stride + ky - self.padding;
            let x = xs.start * self.stride + kx - self.padding;
            let src = (c * self.height + y) * self.width + x;
            f(oy * self.out_w, src, xs.clone());
        }
    }

    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let n = self.col_cols();
        for (row, dst) in cols.chunks_mut(n).take(self.col_rows()).enumerate() {
            dst.fill(T::zero());
            self.for_each_span(row, |out_row, src, xs| {
                let line = &mut dst[out_row + xs.start..out_row + xs.end];
                if self.stride == 1 {
                    line.copy_from_slice(&image[src..src + line.len()]);
                } else {
                    for (d, s) in line
                        .iter_mut()
                        .zip(image[src..].iter().step_by(self.stride))
                    {
                        *d = *s;
                    }
                }
            });
        }
    }

    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let n = self.col_cols();
        for (row, col) in cols.chunks(n).take(self.col_rows()).enumerate() {
            self.for_each_span(row, |out_row, src, xs| {
                let line = &col[out_row + xs.start..out_row + xs.end];
                if self.stride == 1 {
                    for (s, d) in line.iter().zip(&mut image[src..src + line.len()]) {
                        *d += *s;
                    }
                } else {
                    for (s, d) in line
                        .iter()
                        .zip(image[src..].iter_mut().step_by(self.stride))
                    {
                        *d += *s;
                    }
                }
            });
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of `[C,H,W]` or `[B,C,H,W]` input
/// with `[F,C,kh,kw]` kernels and symmetric zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernels.shape(), stride, padding)?;
    let out = conv2d_raw(&g, x.data(), kernels.data());
    Tensor::from_vec(&g.out_shape(x.rank() == 4), out)
}

pub(crate) fn conv2d_raw<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let in_size = g.channels * g.height * g.width;
    let out_size = g.filters * g.col_cols();
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * n];
    let mut out = vec![T::zero(); g.batch * out_size];
    for b in 0..g.batch {
        g.im2col(&x[b * in_size..(b + 1) * in_size], &mut cols);
        T::gemm(
            g.filters,
            rows,
            n,
            T::one(),
            k,
            rows as isize,
            1,
            &cols,
            n as isize,
            1,
            T::zero(),
            &mut out[b * out_size..(b + 1) * out_size],
            n as isize,
            1,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());
        let a = t(&[2, 2], &[1., 0., 0., 0.]);
        let b = t(&[2, 1], &[0., 5.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f64;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] as f64 * b.data()[p * 2 + j] as f64;
                }
                assert!((got.data()[i * 2 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn bmm_transposed_matches_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[2, 5, 4]);
        let got = bmm(&a, &b, true).unwrap();
        assert_eq!(got.shape(), &[2, 3, 5]);
        for s in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let r: f32 = (0..4)
                        .map(|p| a.data()[s * 12 + i * 4 + p] * b.data()[s * 20 + j * 4 + p])
                        .sum();
                    assert!((got.data()[s * 15 + i * 5 + j] - r).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn elementwise_cases() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(
            elementwise(Elementwise::Relu, &[&x]).unwrap().data(),
            &[0., 0., 2.]
        );
        let zero = Tensor::scalar(0.0f32);
        let y = t(&[3], &[0.1, -3.7, 1e-7]);
        assert_eq!(elementwise(Elementwise::Add, &[&y, &zero]).unwrap(), y);
        assert!(matches!(
            elementwise(Elementwise::Log, &[&x]),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let z = Tensor::<f32>::zeros(&[2]);
        assert!(elementwise(Elementwise::Mul, &[&x, &z]).is_err());
    }

    #[test]
    fn gelu_matches_double_precision_formula() {
        let reference =
            0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
        assert!((gelu(1.0f32) as f64 - reference).abs() < 1e-6);
        assert!((gelu(1.0f64) - reference).abs() < 1e-15);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (i, &p) in s.data().iter().enumerate() {
            assert!((p as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 2], &[0., 1., 0., 1.]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let ones = Tensor::<f64>::ones(&[2]);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let c = Tensor::from_vec(&[1, 2], vec![3.0, 3.0]).unwrap();
        assert_eq!(
            layernorm(&c, &ones, &zeros, 1e-5).unwrap().data(),
            &[0.0, 0.0]
        );
        let r = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let out = layernorm(&r, &ones, &zeros, 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9 && (out.data()[1] + 1.0).abs() < 1e-9);
        let bias = Tensor::from_vec(&[2], vec![0.25, -4.0]).unwrap();
        let out = layernorm(&r, &zeros, &bias, 1e-5).unwrap();
        assert_eq!(out.data(), bias.data());
    }

    fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f32> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let iv = x.data()[(ci * h + y as usize) * w + xx as usize] as f64;
                                let kv = k.data()[((fi * c + ci) * kh + ky) * kw + kx] as f64;
                                s += iv * kv;
                            }
                        }
                    }
                    out[(fi * oh + oy) * ow + ox] = s as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[1, 4, 5]);
        let one = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap().data(), x.data());
        let ones = Tensor::<f32>::ones(&[1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let out = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.]);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&mut rng, &[3, 7, 6]);
            let k = random(&mut rng, &[4, 3, 3, 3]);
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let oh = (7 + 2 * pad - 3) / stride + 1;
            assert_eq!(got.shape(), &[4, oh, (6 + 2 * pad - 3) / stride + 1]);
            for (a, b) in got.data().iter().zip(naive_conv(&x, &k, stride, pad)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, 1, 0),
            Err(TensorError::Invalid { .. })
        ));
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }
}

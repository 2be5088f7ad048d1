//! Eager (tape-free) numeric kernels shared with the recording path.

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal CDF.
#[inline]
pub(crate) fn normal_cdf<F: Float>(x: F) -> F {
    F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// GELU derivative given the precomputed CDF at `x`.
#[inline]
pub(crate) fn gelu_grad_from_cdf<F: Float>(x: F, cdf: F) -> F {
    let pdf = (-F::lit(0.5) * x * x).exp() * F::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact (erf-based) GELU.
pub fn gelu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_into<F: Float>(x: &[F], out: &mut [F], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum = sum + e;
            }
            let inv = F::one() / sum;
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] * inv;
            }
        }
    }
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
pub fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![F::zero(); x.len()];
    softmax_into(x.data(), &mut out, outer, len, inner);
    Tensor::from_vec(x.shape(), out)
}

/// Normalizes rows in place into `out`; returns per-row (mean, 1/stdev).
pub(crate) fn layer_norm_rows<F: Float>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
    xhat: &mut [F],
) -> Vec<F> {
    let d = gain.len();
    let rows = x.len() / d;
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        for c in 0..d {
            let h = (row[c] - mean) * rstd;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
        rstds.push(rstd);
    }
    rstds
}

pub(crate) fn check_layer_norm<F: Float>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<()> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d || x.rank() == 0 {
        return shape_err(
            "layer_norm",
            format!("input {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        );
    }
    if eps <= F::zero() {
        return Err(TensorError::InvalidArgument { op: "layer_norm", detail: "eps must be positive".into() });
    }
    Ok(())
}

/// Per-row normalization over the last axis followed by `gain * x + bias`.
pub fn layer_norm<F: Float>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    check_layer_norm(x, gain, bias, eps)?;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    layer_norm_rows(x.data(), gain.data(), bias.data(), eps, &mut out, &mut xhat);
    Tensor::from_vec(x.shape(), out)
}

/// Dense 2-D product `a b`.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![F::zero(); m * n];
    crate::float::gemm(
        F::one(),
        a.data(),
        crate::float::MatView::dense(0, m, k),
        b.data(),
        crate::float::MatView::dense(0, k, n),
        F::zero(),
        &mut out,
        crate::float::MatView::dense(0, m, n),
    );
    Tensor::from_vec(&[m, n], out)
}

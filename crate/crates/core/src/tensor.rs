//! Dense row-major `f64` tensors with cheap clones.
//!
//! Storage is reference counted; mutation goes through [`Tensor::data_mut`],
//! which copies on write when the buffer is shared.

use std::fmt;
use std::sync::Arc;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match buffer of length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape);
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `[start, start+len)` along the leading axis.
    pub fn narrow0(&self, start: usize, len: usize) -> Self {
        assert!(!self.shape.is_empty() && start + len <= self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::from_vec(
            &shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    /// Concatenate tensors along the leading axis.
    pub fn stack0(parts: &[Tensor]) -> Self {
        assert!(!parts.is_empty());
        let tail = parts[0].shape[1..].to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            assert_eq!(p.shape[1..], tail[..], "stack0 trailing shape mismatch");
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Self::from_vec(&shape, data)
    }
}

/// `c (m×n) = alpha * a (m×k) · b (k×n) + beta * c`, with explicit row/column
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller provides slices covering the strided extents; every
    // call site in this crate passes contiguous buffers sized m·k, k·n, m·n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_h(), self.out_w()]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Output columns `ox` whose input column `ox·stride + kj − pad` lies
    /// inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.w);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(self.out_w()) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfold one sample `[c_in, h, w]` into `[c_in·kh·kw, oh·ow]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let h = self.h as isize;
        let pad = self.pad as isize;
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_ox(kj);
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let start = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[start + i * self.stride];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back into a sample.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let h = self.h as isize;
        let pad = self.pad as isize;
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_ox(kj);
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h || lo == hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let start = lo * self.stride + kj - self.pad;
                        let line = &src[oy * ow + lo..oy * ow + hi];
                        if self.stride == 1 {
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (i, v) in line.iter().enumerate() {
                                dst[start + i * self.stride] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Run `f` on a reusable buffer of `len` values. Contents are unspecified,
/// so `f` must overwrite what it reads.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// `y = conv(x, weight)`; no bias.
pub fn conv2d_forward(g: &ConvGeom, x: &Tensor, weight: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), g.input_shape());
    debug_assert_eq!(weight.shape(), g.weight_shape());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * ncols;
    let mut out = vec![0.0; g.batch * out_sz];
    with_scratch(rows * ncols, |cols| {
        for n in 0..g.batch {
            g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], cols);
            gemm(
                g.c_out,
                rows,
                ncols,
                1.0,
                weight.data(),
                rows as isize,
                1,
                cols,
                ncols as isize,
                1,
                0.0,
                &mut out[n * out_sz..(n + 1) * out_sz],
            );
        }
    });
    Tensor::from_vec(&g.output_shape(), out)
}

/// Gradient of `<grad_out, conv(x, weight)>` with respect to `x`.
pub fn conv2d_input_grad(g: &ConvGeom, grad_out: &Tensor, weight: &Tensor) -> Tensor {
    debug_assert_eq!(grad_out.shape(), g.output_shape());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * ncols;
    let mut dx = vec![0.0; g.batch * in_sz];
    with_scratch(rows * ncols, |cols| {
        for n in 0..g.batch {
            // cols = weightᵀ · grad_out[n]
            gemm(
                rows,
                g.c_out,
                ncols,
                1.0,
                weight.data(),
                1,
                rows as isize,
                &grad_out.data()[n * out_sz..(n + 1) * out_sz],
                ncols as isize,
                1,
                0.0,
                cols,
            );
            g.col2im(cols, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    });
    Tensor::from_vec(&g.input_shape(), dx)
}

/// Gradient of `<grad_out, conv(x, weight)>` with respect to `weight`.
pub fn conv2d_weight_grad(g: &ConvGeom, x: &Tensor, grad_out: &Tensor) -> Tensor {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * ncols;
    let mut dw = vec![0.0; g.c_out * rows];
    with_scratch(rows * ncols, |cols| {
        for n in 0..g.batch {
            g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], cols);
            // dw += grad_out[n] · colsᵀ
            gemm(
                g.c_out,
                ncols,
                rows,
                1.0,
                &grad_out.data()[n * out_sz..(n + 1) * out_sz],
                ncols as isize,
                1,
                cols,
                1,
                ncols as isize,
                1.0,
                &mut dw,
            );
        }
    });
    Tensor::from_vec(&g.weight_shape(), dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &Tensor, w: &Tensor) -> Tensor {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = Tensor::zeros(&g.output_shape());
        let o = out.data_mut();
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize];
                                    let wv = w.data()[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        o[((n * g.c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n = numel(shape);
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i * 7919 % 101) as f64 / 101.0 - 0.5) * scale).collect(),
        )
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_and_adjoints_agree() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 3), (2, 2, 5)] {
            let g = ConvGeom {
                batch: 2,
                c_in: 3,
                c_out: 4,
                h: 9,
                w: 8,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x = ramp(&g.input_shape(), 1.0);
            let w = ramp(&g.weight_shape(), 0.7);
            let y = conv2d_forward(&g, &x, &w);
            let y_ref = naive_conv(&g, &x, &w);
            for (a, b) in y.data().iter().zip(y_ref.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            // <gy, conv(x,w)> == <input_grad(gy,w), x> == <weight_grad(x,gy), w>
            let gy = ramp(&g.output_shape(), 1.3);
            let lhs = dot(&gy, &y);
            let via_x = dot(&conv2d_input_grad(&g, &gy, &w), &x);
            let via_w = dot(&conv2d_weight_grad(&g, &x, &gy), &w);
            assert!((lhs - via_x).abs() < 1e-9, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{lhs} vs {via_w}");
        }
    }

    #[test]
    fn copy_on_write_keeps_clones_independent() {
        let a = Tensor::ones(&[2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }
}

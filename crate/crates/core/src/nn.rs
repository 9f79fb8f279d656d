//! Layer helpers that either create parameters (build) or consume them in
//! order (forward).
//!
//! A network's forward function is written once against [`ParamScope`].
//! Running it in [`ParamScope::initializing`] mode on a dummy input records
//! the parameter shapes and draws a seeded initialization; running it in
//! [`ParamScope::using`] mode pulls the same tensors back out in the same
//! order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

enum Mode<'a> {
    Init(&'a mut ChaCha8Rng),
    Use(&'a [Var]),
}

pub struct ParamScope<'a> {
    mode: Mode<'a>,
    cursor: usize,
    created: Vec<Tensor>,
}

#[derive(Clone, Copy)]
enum Init {
    /// uniform in ±sqrt(6 / fan_in)
    He(usize),
    /// uniform in ±1/sqrt(fan_in)
    Small(usize),
    Zeros,
    Ones,
}

impl<'a> ParamScope<'a> {
    pub fn initializing(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Init(rng),
            cursor: 0,
            created: Vec::new(),
        }
    }

    pub fn using(params: &'a [Var]) -> Self {
        Self {
            mode: Mode::Use(params),
            cursor: 0,
            created: Vec::new(),
        }
    }

    /// Parameters drawn while initializing.
    pub fn into_created(self) -> Vec<Tensor> {
        self.created
    }

    /// Number of parameter tensors consumed so far.
    pub fn consumed(&self) -> usize {
        self.cursor
    }

    fn take(&mut self, shape: &[usize], init: Init) -> Var {
        let idx = self.cursor;
        self.cursor += 1;
        match &mut self.mode {
            Mode::Use(params) => {
                let p = &params[idx];
                assert_eq!(p.shape(), shape, "parameter {idx} shape mismatch");
                p.clone()
            }
            Mode::Init(rng) => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::He(fan_in) | Init::Small(fan_in) => {
                        let bound = match init {
                            Init::He(_) => (6.0 / fan_in as f64).sqrt(),
                            _ => 1.0 / (fan_in as f64).sqrt(),
                        };
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                let t = Tensor::from_vec(shape, data);
                self.created.push(t.clone());
                Var::constant(t)
            }
        }
    }

    fn conv_impl(
        &mut self,
        x: &Var,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        small: bool,
    ) -> Var {
        let c_in = x.shape()[1];
        let fan_in = c_in * k * k;
        let init = if small { Init::Small(fan_in) } else { Init::He(fan_in) };
        let w = self.take(&[c_out, c_in, k, k], init);
        let b = self.take(&[1, c_out, 1, 1], Init::Zeros);
        let y = x.conv2d(&w, stride, pad);
        let shape = y.shape().to_vec();
        y.add(&b.broadcast_to(&shape))
    }

    /// Convolution with bias, He-initialized for a following nonlinearity.
    pub fn conv(&mut self, x: &Var, c_out: usize, k: usize, stride: usize, pad: usize) -> Var {
        self.conv_impl(x, c_out, k, stride, pad, false)
    }

    /// Convolution with a small initialization, for output heads.
    pub fn conv_head(&mut self, x: &Var, c_out: usize, k: usize, pad: usize) -> Var {
        self.conv_impl(x, c_out, k, 1, pad, true)
    }

    /// Dense layer over `[N, F]`.
    pub fn linear(&mut self, x: &Var, out: usize) -> Var {
        let fan_in = x.shape()[1];
        let w = self.take(&[fan_in, out], Init::Small(fan_in));
        let b = self.take(&[1, out], Init::Zeros);
        let y = x.matmul(&w);
        let shape = y.shape().to_vec();
        y.add(&b.broadcast_to(&shape))
    }

    /// Per-sample, per-channel normalization with a learned affine map.
    pub fn instance_norm(&mut self, x: &Var) -> Var {
        let s = x.shape().to_vec();
        let c = s[1];
        let gamma = self.take(&[1, c, 1, 1], Init::Ones);
        let beta = self.take(&[1, c, 1, 1], Init::Zeros);
        let normed = normalize_planes(x);
        normed
            .mul(&gamma.broadcast_to(&s))
            .add(&beta.broadcast_to(&s))
    }
}

/// Zero-mean, unit-variance over each `(n, c)` plane.
pub fn normalize_planes(x: &Var) -> Var {
    x.instance_normalize(NORM_EPS)
}

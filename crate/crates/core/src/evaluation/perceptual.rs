//! Perceptual distance from a fixed random convolutional pyramid.
//!
//! Three scales of 3×3 convolutions with leaky activations. Features are
//! unit-normalized over channels at every position, and the squared
//! difference is averaged over positions and then over scales. With the
//! weights fixed by a seed the measure is reproducible across processes.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::ImageTensor;
use crate::error::{shape, Result};
use crate::tensor::{conv2d_forward, ConvGeom, Tensor};

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;
const SCALES: usize = 3;
const FEATURES: usize = 8;
const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    weights: Vec<Tensor>,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let weights = (0..SCALES)
            .map(|_| {
                let fan_in = (c_in * 9) as f64;
                let bound = (3.0 / fan_in).sqrt();
                let n = FEATURES * c_in * 9;
                let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                let t = Tensor::from_vec(&[FEATURES, c_in, 3, 3], w);
                c_in = FEATURES;
                t
            })
            .collect();
        Self { weights }
    }

    /// Feature maps `[1, F, h, w]` at each scale.
    fn features(&self, img: &ImageTensor) -> Vec<Tensor> {
        let rgb = if img.channels == 3 {
            img.to_batch()
        } else {
            let t = img.to_batch();
            Tensor::stack0(&[t.clone(), t.clone(), t]).reshape(&[1, 3, img.height, img.width])
        };
        let mut x = rgb.map(|v| 2.0 * v - 1.0);
        let mut out = Vec::with_capacity(SCALES);
        for (s, w) in self.weights.iter().enumerate() {
            let sh = x.shape().to_vec();
            let g = ConvGeom {
                batch: 1,
                c_in: sh[1],
                c_out: FEATURES,
                h: sh[2],
                w: sh[3],
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 1,
            };
            let f = conv2d_forward(&g, &x, w).map(|v| if v > 0.0 { v } else { 0.2 * v });
            if s + 1 < SCALES {
                x = avg_pool(&f);
            }
            out.push(f);
        }
        out
    }

    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(shape("perceptual distance needs equally shaped images"));
        }
        if a.data() == b.data() {
            return Ok(0.0);
        }
        let (fa, fb) = (self.features(a), self.features(b));
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            total += normalized_gap(x, y);
        }
        Ok(total / SCALES as f64)
    }
}

fn avg_pool(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2] / 2, s[3] / 2);
    let d = t.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| d[(ch * s[2] + yy) * s[3] + xx];
                out[(ch * h + y) * w + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    Tensor::from_vec(&[1, c, h, w], out)
}

/// Mean over positions of `‖â − b̂‖²`, hats marking channel-unit vectors.
fn normalized_gap(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    for p in 0..plane {
        let na = (0..c).map(|k| da[k * plane + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        let nb = (0..c).map(|k| db[k * plane + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        total += (0..c)
            .map(|k| (da[k * plane + p] / na - db[k * plane + p] / nb).powi(2))
            .sum::<f64>();
    }
    total / plane as f64
}

/// [`PerceptualExtractor::distance`] with the default seed.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    static DEFAULT: OnceLock<PerceptualExtractor> = OnceLock::new();
    DEFAULT
        .get_or_init(|| PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED))
        .distance(a, b)
}

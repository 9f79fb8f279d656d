//! Perturbation sources used for comparison: the trained generator, uniform
//! random noise of equal budget, and a gradient-ascent reference against a
//! known editor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_values, Var};
use crate::dataio::{images_to_batch, ImageTensor};
use crate::error::Result;
use crate::models::{check_epsilon, enforce_budget, nudge_into_budget_f32, perturb_images, perturbed_images, ModelHandle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Perturbation<'a> {
    /// Images pass through unchanged.
    Clean,
    Generator(&'a ModelHandle),
    /// Independent `U(−ε, ε)` per value, clipped to `[0,1]`.
    UniformNoise { seed: u64 },
}

impl Perturbation<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Perturbation::Clean => "clean",
            Perturbation::Generator(_) => "pg",
            Perturbation::UniformNoise { .. } => "noise",
        }
    }

    pub fn apply(&self, images: &[ImageTensor], epsilon: f64) -> Result<Vec<ImageTensor>> {
        check_epsilon(epsilon)?;
        match *self {
            Perturbation::Clean => Ok(images.to_vec()),
            Perturbation::Generator(pg) => perturb_images(pg, images, epsilon),
            Perturbation::UniformNoise { seed } => uniform_noise(images, epsilon, seed),
        }
    }
}

pub fn uniform_noise(images: &[ImageTensor], epsilon: f64, seed: u64) -> Result<Vec<ImageTensor>> {
    check_epsilon(epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|img| {
            let data = img
                .data()
                .iter()
                .map(|&v| {
                    let d = if epsilon > 0.0 { rng.gen_range(-epsilon..=epsilon) } else { 0.0 };
                    let raw = (v as f64 + d).clamp(0.0, 1.0) as f32;
                    nudge_into_budget_f32(v, raw, epsilon)
                })
                .collect();
            ImageTensor::new(img.height, img.width, img.channels, data)
        })
        .collect()
}

/// Projected sign-gradient ascent on the editing distance of a known editor,
/// started from uniform noise (the distance has zero gradient at `x' = x`).
pub fn pgd_reference(
    editor: &ModelHandle,
    images: &[ImageTensor],
    targets: &[Tensor],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    check_epsilon(epsilon)?;
    let x = images_to_batch(images);
    let params = editor.param_vars(false);
    let xv = Var::constant(x.clone());
    let clean: Vec<Var> = targets
        .iter()
        .map(|c| editor.edit(&params, &xv, c).map(|y| y.detach()))
        .collect::<Result<_>>()?;
    let mut xp = images_to_batch(&uniform_noise(images, epsilon, seed)?);
    for _ in 0..steps {
        let v = Var::parameter(xp.clone());
        let mut loss: Option<Var> = None;
        for (c, y) in targets.iter().zip(&clean) {
            let d = editor.edit(&params, &v, c)?.sub(y).square().mean();
            loss = Some(match loss {
                Some(l) => l.add(&d),
                None => d,
            });
        }
        let Some(loss) = loss else { break };
        let g = grad_values(&loss, &[&v]).remove(0);
        let stepped = xp.zip_map(&g, |a, g| (a + step_size * g.signum()).clamp(0.0, 1.0));
        xp = enforce_budget(&x, &project(&x, &stepped, epsilon), epsilon);
    }
    perturbed_images(images, &xp, epsilon)
}

fn project(x: &Tensor, v: &Tensor, epsilon: f64) -> Tensor {
    x.zip_map(v, |a, b| b.clamp(a - epsilon, a + epsilon).clamp(0.0, 1.0))
}

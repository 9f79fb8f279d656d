//! Two-stage alternating training of the perturbation generator.
//!
//! Every iteration first updates the surrogate on clean data (stage A) and
//! then updates the perturbation generator against the freshly updated
//! surrogate (stage B). The generator snapshot with the largest distance on
//! a fixed validation probe is kept as `pg_best`.

mod adam;
mod domains;
mod editing;
mod reenact;
mod run;
mod target;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{images_to_batch, labels_to_tensor, DomainLabel, FaceSample, ImageTensor};
use crate::error::{config, Error, Result};
use crate::losses::LossWeights;
use crate::models::{perturb_images, ArchName, ModelHandle};
use crate::tensor::Tensor;
use crate::Task;

pub use adam::Adam;
pub use domains::DomainSampler;
pub use editing::{stargan_step, StarGanWeights};
pub use reenact::{translator_step, unrolled_influence, unrolled_params};
pub use run::{read_history, run_two_stage, write_history, HistoryRow, Probe, TrainOutcome, TrainState, HISTORY_FILE};
pub use target::{train_target_model, TargetData, TargetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub maxiter: usize,
    pub batch_size: usize,
    /// Defaults to 1e-4 for editing and 2e-4 for reenactment.
    pub lr_pg: Option<f64>,
    pub lr_sm: Option<f64>,
    pub epsilon: f64,
    pub domains_per_sample: usize,
    pub n_critic: usize,
    /// Differentiable temporary-model steps per generator update.
    pub unroll_steps: usize,
    /// Plain gradient-descent rate of the unrolled steps.
    pub unroll_lr: f64,
    /// Smoothing `η` of the unrolled inner loss `sqrt(d² + η²)`.
    pub inner_smoothing: f64,
    pub enhancement: bool,
    /// When false the surrogate is trained up front and then frozen.
    pub alternating: bool,
    /// Surrogate steps before the first iteration.
    pub pretrain_iters: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub stargan: StarGanWeights,
    pub surrogate_arch: ArchName,
    pub generator_arch: ArchName,
    pub width: usize,
    pub probe_size: usize,
    /// Probe evaluation period in iterations; the final iteration is always
    /// evaluated.
    pub probe_every: usize,
    /// Checkpoint period; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::AttributeEditing,
            maxiter: 1000,
            batch_size: 4,
            lr_pg: None,
            lr_sm: None,
            epsilon: 0.05,
            domains_per_sample: 5,
            n_critic: 1,
            unroll_steps: 1,
            unroll_lr: 0.05,
            inner_smoothing: 0.01,
            enhancement: true,
            alternating: true,
            pretrain_iters: 0,
            seed: 0,
            weights: LossWeights::default(),
            stargan: StarGanWeights::default(),
            surrogate_arch: ArchName::Res6,
            generator_arch: ArchName::Res6,
            width: 8,
            probe_size: 16,
            probe_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    fn default_lr(&self) -> f64 {
        match self.task {
            Task::AttributeEditing => 1e-4,
            Task::Reenactment => 2e-4,
        }
    }

    pub fn lr_pg(&self) -> f64 {
        self.lr_pg.unwrap_or_else(|| self.default_lr())
    }

    pub fn lr_sm(&self) -> f64 {
        self.lr_sm.unwrap_or_else(|| self.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.maxiter == 0 {
            return Err(config("maxiter must be at least 1"));
        }
        if self.batch_size == 0 || self.probe_size == 0 || self.width == 0 {
            return Err(config("batch_size, probe_size and width must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(config(format!("epsilon {} outside (0, 0.1]", self.epsilon)));
        }
        if self.n_critic == 0 || self.probe_every == 0 {
            return Err(config("n_critic and probe_every must be positive"));
        }
        for lr in [self.lr_pg(), self.lr_sm(), self.unroll_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(config(format!("learning rate {lr} must be positive")));
            }
        }
        if !(self.inner_smoothing > 0.0) {
            return Err(config("inner_smoothing must be positive"));
        }
        if [self.surrogate_arch, self.generator_arch].contains(&ArchName::Critic) {
            return Err(config("the critic shape cannot serve as a generator"));
        }
        self.weights.validate()
    }
}

/// A minibatch gathered from [`TrainData`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[N,3,R,R]`
    pub x: Tensor,
    pub labels: Vec<DomainLabel>,
    /// `[N,K]`
    pub c: Tensor,
    /// `[N,1,R,R]`
    pub z: Tensor,
    /// `[N,1,R,R]`
    pub mask: Tensor,
}

/// Training samples held as contiguous NCHW tensors.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Tensor,
    pub labels: Vec<DomainLabel>,
    pub z: Tensor,
    pub mask: Tensor,
    pub attribute_names: Vec<String>,
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::stack0(&idx.iter().map(|&i| t.narrow0(i, 1)).collect::<Vec<_>>())
}

impl TrainData {
    pub fn from_samples(samples: &[FaceSample], attribute_names: &[String]) -> Result<Self> {
        if samples.is_empty() {
            return Err(config("training data is empty"));
        }
        let images: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
        let z: Vec<ImageTensor> = samples.iter().map(|s| s.landmark_map.clone()).collect();
        let m: Vec<ImageTensor> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(Self {
            x: images_to_batch(&images),
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            z: images_to_batch(&z),
            mask: images_to_batch(&m),
            attribute_names: attribute_names.to_vec(),
        })
    }

    /// Same samples with the images replaced, e.g. by poisoned versions.
    pub fn with_images(&self, images: &[ImageTensor]) -> Result<Self> {
        if images.len() != self.len() {
            return Err(Error::Shape("replacement image count differs".into()));
        }
        Ok(Self {
            x: images_to_batch(images),
            ..self.clone()
        })
    }

    /// Keep only the listed attributes, in order (for a different domain set).
    pub fn select_attributes(&self, indices: &[usize]) -> Self {
        Self {
            labels: self.labels.iter().map(|l| l.select(indices)).collect(),
            attribute_names: indices.iter().map(|&i| self.attribute_names[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn num_attrs(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn images(&self) -> Vec<ImageTensor> {
        (0..self.len())
            .map(|i| ImageTensor::from_batch(&self.x, i).expect("stored images are valid"))
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let labels: Vec<DomainLabel> = indices.iter().map(|&i| self.labels[i].clone()).collect();
        Batch {
            indices: indices.to_vec(),
            x: gather(&self.x, indices),
            c: labels_to_tensor(&labels),
            labels,
            z: gather(&self.z, indices),
            mask: gather(&self.mask, indices),
        }
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(0..self.len())).collect()
    }
}

/// Stable RNG for `(seed, step, stream)`; lets a resumed run continue on
/// exactly the same random sequence.
pub fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((step as u128) << 20);
    rng
}

/// Stream ids for [`step_rng`].
pub(crate) mod stream {
    pub const BATCH: u64 = 1;
    pub const STAGE_A: u64 = 2;
    pub const STAGE_B: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const INIT: u64 = 6;
}

/// Apply the editing generator, then the reenactment generator. The
/// combined change stays within `ε1 + ε2`.
pub fn stack_perturbations(
    pg_editing: &ModelHandle,
    pg_reenactment: &ModelHandle,
    frames: &[ImageTensor],
    eps1: f64,
    eps2: f64,
) -> Result<Vec<ImageTensor>> {
    let first = perturb_images(pg_editing, frames, eps1)?;
    let second = perturb_images(pg_reenactment, &first, eps2)?;
    frames
        .iter()
        .zip(second)
        .map(|(x, y)| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| crate::models::nudge_into_budget_f32(a, b, eps1 + eps2))
                .collect();
            ImageTensor::new(x.height, x.width, x.channels, data)
        })
        .collect()
}

//! Independently trained manipulation models: the forger's translator and
//! editors of other architectures or domain sets used for transfer tests.

use serde::{Deserialize, Serialize};

use super::editing::{stargan_step, StarGanWeights};
use super::reenact::translator_step;
use super::{step_rng, Adam, DomainSampler, TrainData};
use crate::error::{config, Result};
use crate::models::{ArchName, ArchitectureTag, ModelHandle, NetSpec, Role};
use crate::Task;

/// Data a target model is fit on. Same layout as generator training data.
pub type TargetData = TrainData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSpec {
    pub task: Task,
    pub arch: ArchName,
    pub role: Role,
    pub width: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub stargan: StarGanWeights,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            task: Task::AttributeEditing,
            arch: ArchName::Res6,
            role: Role::Target,
            width: 8,
            iters: 200,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            stargan: StarGanWeights::default(),
        }
    }
}

const TARGET_STREAM: u64 = 7;
const TARGET_CRITIC_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Train a fresh model from `spec.seed`. Editors are trained with the
/// StarGAN objective on the data's attributes, translators with an L1
/// reconstruction of the frames from their landmark maps.
pub fn train_target_model(spec: &TargetSpec, data: &TargetData) -> Result<ModelHandle> {
    if spec.iters == 0 || spec.batch_size == 0 || data.is_empty() {
        return Err(config("target training needs iterations, a batch size and data"));
    }
    if spec.arch == ArchName::Critic {
        return Err(config("the critic shape cannot serve as a target model"));
    }
    let net = NetSpec::new(data.resolution(), data.num_attrs(), spec.width);
    match spec.task {
        Task::AttributeEditing => {
            let mut m = ModelHandle::build(ArchitectureTag::editor(spec.arch), spec.role, net, spec.seed)?;
            let mut d = ModelHandle::build(
                ArchitectureTag::plain(ArchName::Critic),
                Role::DomainCritic,
                net,
                spec.seed ^ TARGET_CRITIC_SALT,
            )?;
            let mut opt_m = Adam::for_model(spec.lr, &m);
            let mut opt_d = Adam::for_model(spec.lr, &d);
            let sampler = DomainSampler::new(&data.attribute_names);
            for i in 1..=spec.iters {
                let mut rng = step_rng(spec.seed, i as u64, TARGET_STREAM);
                let batch = data.batch(&data.sample_indices(spec.batch_size, &mut rng));
                stargan_step(&mut m, &mut d, &mut opt_m, &mut opt_d, &batch, &sampler, &spec.stargan, &mut rng)?;
            }
            Ok(m)
        }
        Task::Reenactment => {
            let mut m = ModelHandle::build(ArchitectureTag::translator(spec.arch), spec.role, net, spec.seed)?;
            let mut opt = Adam::for_model(spec.lr, &m);
            for i in 1..=spec.iters {
                let mut rng = step_rng(spec.seed, i as u64, TARGET_STREAM);
                let batch = data.batch(&data.sample_indices(spec.batch_size, &mut rng));
                translator_step(&mut m, &mut opt, &batch.z, &batch.x)?;
            }
            Ok(m)
        }
    }
}

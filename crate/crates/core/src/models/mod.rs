//! Network zoo and parameter handles for every role in the defense: the
//! surrogate editor/translator, the perturbation generator, both critics,
//! the temporary model and the forger's target models.

mod checkpoint;
pub mod nets;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::dataio::{DomainLabel, ImageTensor};
use crate::error::{config, shape, Result};
use crate::nn::ParamScope;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, Dtype};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchName {
    CNet,
    Res6,
    Res9,
    UNet128,
    UNet256,
    /// Seven convolutions and one dense layer; only valid for critic roles.
    Critic,
}

impl ArchName {
    pub const GENERATORS: [ArchName; 5] = [
        ArchName::CNet,
        ArchName::Res6,
        ArchName::Res9,
        ArchName::UNet128,
        ArchName::UNet256,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchName::CNet => "CNet",
            ArchName::Res6 => "Res6",
            ArchName::Res9 => "Res9",
            ArchName::UNet128 => "UNet128",
            ArchName::UNet256 => "UNet256",
            ArchName::Critic => "Critic",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnet" => Ok(ArchName::CNet),
            "res6" => Ok(ArchName::Res6),
            "res9" => Ok(ArchName::Res9),
            "unet128" | "unet-128" => Ok(ArchName::UNet128),
            "unet256" | "unet-256" => Ok(ArchName::UNet256),
            "critic" => Ok(ArchName::Critic),
            _ => Err(config(format!("unknown architecture tag {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Attribute bits broadcast as constant channels next to the image.
    AttributeBroadcast,
    /// Landmark map concatenated onto a fixed two-channel coordinate grid.
    LandmarkConcat,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureTag {
    pub name: ArchName,
    pub conditioning: Conditioning,
}

impl ArchitectureTag {
    pub fn new(name: ArchName, conditioning: Conditioning) -> Self {
        Self { name, conditioning }
    }

    pub fn editor(name: ArchName) -> Self {
        Self::new(name, Conditioning::AttributeBroadcast)
    }

    pub fn translator(name: ArchName) -> Self {
        Self::new(name, Conditioning::LandmarkConcat)
    }

    pub fn plain(name: ArchName) -> Self {
        Self::new(name, Conditioning::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "SM")]
    Surrogate,
    #[serde(rename = "PG")]
    Generator,
    #[serde(rename = "D_A")]
    DomainCritic,
    #[serde(rename = "D_B")]
    ImageCritic,
    #[serde(rename = "TM")]
    Temporary,
    #[serde(rename = "M")]
    Target,
    #[serde(rename = "M_infected")]
    Infected,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Surrogate => "SM",
            Role::Generator => "PG",
            Role::DomainCritic => "D_A",
            Role::ImageCritic => "D_B",
            Role::Temporary => "TM",
            Role::Target => "M",
            Role::Infected => "M_infected",
        }
    }

    pub fn is_critic(&self) -> bool {
        matches!(self, Role::DomainCritic | Role::ImageCritic)
    }
}

impl FromStr for Role {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "SM" => Role::Surrogate,
            "PG" => Role::Generator,
            "D_A" => Role::DomainCritic,
            "D_B" => Role::ImageCritic,
            "TM" => Role::Temporary,
            "M" => Role::Target,
            "M_infected" => Role::Infected,
            _ => return Err(config(format!("unknown model role {s:?}"))),
        })
    }
}

/// Input/output geometry shared by all networks of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub resolution: usize,
    pub image_channels: usize,
    /// Attribute count K seen by editors and the domain critic.
    pub num_attrs: usize,
    /// Base channel width.
    pub width: usize,
}

impl NetSpec {
    pub fn new(resolution: usize, num_attrs: usize, width: usize) -> Self {
        Self {
            resolution,
            image_channels: 3,
            num_attrs,
            width,
        }
    }
}

/// Realness score and (for the domain critic) per-attribute logits.
pub struct CriticOutput {
    /// `[N]`
    pub realness: Var,
    /// `[N, K]`, present only for [`Role::DomainCritic`].
    pub domain_logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub arch: ArchitectureTag,
    pub role: Role,
    pub spec: NetSpec,
    pub seed: u64,
    /// Training steps applied so far.
    pub step: u64,
    params: Vec<Tensor>,
}

fn coordinate_grid(n: usize, res: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 2 * res * res);
    let denom = (res - 1).max(1) as f64;
    for _ in 0..n {
        for i in 0..res {
            for _ in 0..res {
                data.push(i as f64 / denom);
            }
        }
        for _ in 0..res {
            for j in 0..res {
                data.push(j as f64 / denom);
            }
        }
    }
    Tensor::from_vec(&[n, 2, res, res], data)
}

impl ModelHandle {
    /// Seeded construction; identical arguments give identical parameters.
    pub fn build(arch: ArchitectureTag, role: Role, spec: NetSpec, seed: u64) -> Result<Self> {
        let critic_arch = arch.name == ArchName::Critic;
        let valid = match role {
            Role::DomainCritic | Role::ImageCritic => {
                critic_arch && arch.conditioning == Conditioning::None
            }
            Role::Generator => !critic_arch && arch.conditioning == Conditioning::None,
            _ => !critic_arch && arch.conditioning != Conditioning::None,
        };
        if !valid {
            return Err(config(format!(
                "architecture {} with {:?} conditioning cannot serve role {}",
                arch.name,
                arch.conditioning,
                role.as_str()
            )));
        }
        if spec.resolution < 8 || !spec.resolution.is_power_of_two() {
            return Err(config(format!(
                "resolution {} must be a power of two and at least 8",
                spec.resolution
            )));
        }
        if spec.width == 0 || spec.num_attrs == 0 {
            return Err(config("width and attribute count must be positive"));
        }
        let mut handle = Self {
            arch,
            role,
            spec,
            seed,
            step: 0,
            params: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scope = ParamScope::initializing(&mut rng);
        let dummy = Var::constant(Tensor::zeros(&[1, handle.input_channels(), spec.resolution, spec.resolution]));
        handle.body(&mut scope, &dummy);
        handle.params = scope.into_created();
        Ok(handle)
    }

    fn input_channels(&self) -> usize {
        match self.arch.conditioning {
            Conditioning::AttributeBroadcast => self.spec.image_channels + self.spec.num_attrs,
            Conditioning::LandmarkConcat => 3,
            Conditioning::None => self.spec.image_channels,
        }
    }

    fn heads(&self) -> usize {
        match self.role {
            Role::DomainCritic => 1 + self.spec.num_attrs,
            _ => 1,
        }
    }

    fn body(&self, ps: &mut ParamScope, input: &Var) -> Var {
        if self.role.is_critic() {
            nets::critic(ps, input, self.spec.width, self.heads())
        } else {
            nets::generator(ps, self.arch.name, input, self.spec.width, self.spec.image_channels)
        }
    }

    fn run(&self, params: &[Var], input: &Var) -> Var {
        assert_eq!(params.len(), self.params.len(), "parameter list length mismatch");
        let mut scope = ParamScope::using(params);
        let out = self.body(&mut scope, input);
        debug_assert_eq!(scope.consumed(), params.len());
        out
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape("parameter set does not match the architecture"));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Residual blocks in the trunk (zero for non-residual architectures).
    pub fn block_count(&self) -> usize {
        nets::residual_blocks(self.arch.name)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.params {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Parameters as graph leaves; `trainable` controls gradient tracking.
    pub fn param_vars(&self, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    Var::parameter(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect()
    }

    /// Overwrite this handle's parameters with a detached copy of `src`'s.
    pub fn copy_parameters_from(&mut self, src: &ModelHandle) -> Result<()> {
        if self.arch != src.arch || self.spec != src.spec {
            return Err(config(format!(
                "cannot copy parameters from {} to {}",
                src.arch.name, self.arch.name
            )));
        }
        self.params = src.params.clone();
        Ok(())
    }

    fn check_image_batch(&self, x: &Var, channels: usize) -> Result<()> {
        let s = x.shape();
        let r = self.spec.resolution;
        if s.len() != 4 || s[1] != channels || s[2] != r || s[3] != r {
            return Err(shape(format!(
                "{} expects [N,{channels},{r},{r}] input, got {s:?}",
                self.role.as_str()
            )));
        }
        Ok(())
    }

    /// `SM(x, c)` for an attribute editor; output in `[0,1]`.
    pub fn edit(&self, params: &[Var], x: &Var, labels: &Tensor) -> Result<Var> {
        if self.arch.conditioning != Conditioning::AttributeBroadcast {
            return Err(config(format!("{} is not an attribute editor", self.role.as_str())));
        }
        self.check_image_batch(x, self.spec.image_channels)?;
        let n = x.shape()[0];
        let k = self.spec.num_attrs;
        if labels.shape() != [n, k] {
            return Err(shape(format!(
                "label batch {:?} does not match [{n},{k}]",
                labels.shape()
            )));
        }
        let r = self.spec.resolution;
        let planes = Var::constant(labels.reshape(&[n, k, 1, 1])).broadcast_to(&[n, k, r, r]);
        let input = Var::concat(&[x.clone(), planes], 1);
        Ok(self.run(params, &input).sigmoid())
    }

    /// `M(z)` for a landmark-driven translator; output in `[0,1]`.
    pub fn translate(&self, params: &[Var], z: &Var) -> Result<Var> {
        if self.arch.conditioning != Conditioning::LandmarkConcat {
            return Err(config(format!("{} is not a landmark translator", self.role.as_str())));
        }
        self.check_image_batch(z, 1)?;
        let grid = Var::constant(coordinate_grid(z.shape()[0], self.spec.resolution));
        let input = Var::concat(&[z.clone(), grid], 1);
        Ok(self.run(params, &input).sigmoid())
    }

    /// `δ = PG(x)` squashed into `[-1,1]`.
    pub fn perturbation(&self, params: &[Var], x: &Var) -> Result<Var> {
        if self.role != Role::Generator {
            return Err(config(format!("{} is not a perturbation generator", self.role.as_str())));
        }
        self.check_image_batch(x, self.spec.image_channels)?;
        Ok(self.run(params, x).tanh())
    }

    pub fn critic(&self, params: &[Var], x: &Var) -> Result<CriticOutput> {
        if !self.role.is_critic() {
            return Err(config(format!("{} is not a critic", self.role.as_str())));
        }
        self.check_image_batch(x, self.spec.image_channels)?;
        let out = self.run(params, x);
        let n = x.shape()[0];
        let realness = out.narrow(1, 0, 1).reshape(&[n]);
        let domain_logits =
            (self.role == Role::DomainCritic).then(|| out.narrow(1, 1, self.spec.num_attrs));
        Ok(CriticOutput {
            realness,
            domain_logits,
        })
    }

    /// Batched `x' = clip(x + ε·PG(x), 0, 1)` with `‖x'−x‖∞ ≤ ε` holding
    /// exactly in f64. Rounding excess is removed by a constant offset, so
    /// gradients are unaffected.
    pub fn perturb_batch(&self, params: &[Var], x: &Var, epsilon: f64) -> Result<Var> {
        check_epsilon(epsilon)?;
        let delta = self.perturbation(params, x)?;
        let raw = x.add(&delta.scale(epsilon)).clamp(0.0, 1.0);
        let fixed = enforce_budget(x.value(), raw.value(), epsilon);
        if fixed.data() == raw.value().data() {
            return Ok(raw);
        }
        let offset = fixed.zip_map(raw.value(), |a, b| a - b);
        Ok(raw.add(&Var::constant(offset)))
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=0.1).contains(&epsilon) {
        return Err(config(format!("perturbation intensity {epsilon} outside [0, 0.1]")));
    }
    Ok(())
}

/// Step `v` one ulp at a time toward `x` until `|v − x| ≤ ε`.
pub fn nudge_into_budget(x: f64, mut v: f64, epsilon: f64) -> f64 {
    while (v - x).abs() > epsilon {
        v = if v > x { v.next_down() } else { v.next_up() };
    }
    v
}

/// Same as [`nudge_into_budget`] for values stored as f32.
pub fn nudge_into_budget_f32(x: f32, mut v: f32, epsilon: f64) -> f32 {
    while (v as f64 - x as f64).abs() > epsilon {
        v = if v > x { v.next_down() } else { v.next_up() };
    }
    v
}

/// Elementwise [`nudge_into_budget`].
pub fn enforce_budget(x: &Tensor, perturbed: &Tensor, epsilon: f64) -> Tensor {
    x.zip_map(perturbed, |a, b| nudge_into_budget(a, b, epsilon))
}

/// Convert a perturbed batch to images while keeping the budget exact after
/// rounding to f32.
pub fn perturbed_images(x: &[ImageTensor], perturbed: &Tensor, epsilon: f64) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(x.len());
    for (i, clean) in x.iter().enumerate() {
        let img = ImageTensor::from_batch(perturbed, i)?;
        let data = clean
            .data()
            .iter()
            .zip(img.data())
            .map(|(&a, &b)| nudge_into_budget_f32(a, b, epsilon))
            .collect();
        out.push(ImageTensor::new(clean.height, clean.width, clean.channels, data)?);
    }
    Ok(out)
}

/// `SM(x, c)` on a single image.
pub fn forward_editor(sm: &ModelHandle, x: &ImageTensor, c: &DomainLabel) -> Result<ImageTensor> {
    if c.len() != sm.spec.num_attrs {
        return Err(shape(format!(
            "label has {} attributes, model expects {}",
            c.len(),
            sm.spec.num_attrs
        )));
    }
    let labels = Tensor::from_vec(&[1, c.len()], c.as_f64());
    let y = sm.edit(&sm.param_vars(false), &Var::constant(x.to_batch()), &labels)?;
    ImageTensor::from_batch(y.value(), 0)
}

/// `M(z)` on a single landmark map.
pub fn forward_translator(m: &ModelHandle, z: &ImageTensor) -> Result<ImageTensor> {
    if z.channels != 1 {
        return Err(shape("landmark map must have one channel"));
    }
    let y = m.translate(&m.param_vars(false), &Var::constant(z.to_batch()))?;
    ImageTensor::from_batch(y.value(), 0)
}

/// `x' = clip(x + ε·PG(x), 0, 1)` on a single image.
pub fn perturb(pg: &ModelHandle, x: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    perturb_images(pg, std::slice::from_ref(x), epsilon).map(|mut v| v.remove(0))
}

/// Batched [`perturb`].
pub fn perturb_images(pg: &ModelHandle, x: &[ImageTensor], epsilon: f64) -> Result<Vec<ImageTensor>> {
    let batch = crate::dataio::images_to_batch(x);
    let out = pg.perturb_batch(&pg.param_vars(false), &Var::constant(batch), epsilon)?;
    perturbed_images(x, out.value(), epsilon)
}

/// Detached parameter copy between handles of identical architecture.
pub fn copy_parameters(src: &ModelHandle, dst: &mut ModelHandle) -> Result<()> {
    dst.copy_parameters_from(src)
}

/// Critic scores for a single image: realness and optional domain logits.
pub fn critic(d: &ModelHandle, img: &ImageTensor) -> Result<(f64, Option<Vec<f64>>)> {
    let out = d.critic(&d.param_vars(false), &Var::constant(img.to_batch()))?;
    Ok((
        out.realness.value().data()[0],
        out.domain_logits.map(|l| l.value().data().to_vec()),
    ))
}

#[cfg(test)]
mod tests;

//! Attribute-editing updates: the StarGAN-style surrogate step (stage A)
//! and the generator step against the surrogate (stage B).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Batch, DomainSampler};
use crate::autograd::{grad_values, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, gradient_penalty, multi_label_bce, total_pg_loss, AdvMode,
    DomainSet, EditingTerms, LossWeights,
};
use crate::models::ModelHandle;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StarGanWeights {
    pub reconstruction: f64,
    pub classification: f64,
    pub gradient_penalty: f64,
    /// `‖SM(x, c) − x‖₁` with the sample's own label; speeds up convergence
    /// of small editors, 0 disables it.
    pub identity: f64,
}

impl Default for StarGanWeights {
    fn default() -> Self {
        Self {
            reconstruction: 10.0,
            classification: 1.0,
            gradient_penalty: 10.0,
            identity: 10.0,
        }
    }
}

pub(crate) fn finite(name: &str, v: &Var) -> Result<f64> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Diverged(format!("{name} became non-finite")));
    }
    Ok(x)
}

pub(crate) fn param_refs(p: &[Var]) -> Vec<&Var> {
    p.iter().collect()
}

/// Losses reported by one stage-A step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StarGanLosses {
    pub critic: f64,
    pub generator: f64,
}

/// One critic update followed by one editor update on clean data.
#[allow(clippy::too_many_arguments)]
pub fn stargan_step(
    sm: &mut ModelHandle,
    da: &mut ModelHandle,
    opt_sm: &mut Adam,
    opt_da: &mut Adam,
    batch: &Batch,
    sampler: &DomainSampler,
    w: &StarGanWeights,
    rng: &mut ChaCha8Rng,
) -> Result<StarGanLosses> {
    let x = Var::constant(batch.x.clone());
    let target = sampler.sample_batch(&batch.labels, 1, rng).remove(0);

    // critic
    let dp = da.param_vars(true);
    let sm_fixed = sm.param_vars(false);
    let fake = sm.edit(&sm_fixed, &x, &target)?.detach();
    let real_out = da.critic(&dp, &x)?;
    let fake_out = da.critic(&dp, &fake)?;
    let realness = |v: &Var| da.critic(&dp, v).expect("shape checked").realness;
    let gp = gradient_penalty(&realness, &x, &fake, rng);
    let cls = multi_label_bce(real_out.domain_logits.as_ref().expect("domain critic"), &batch.c);
    let loss_d = real_out
        .realness
        .mean()
        .neg()
        .add(&fake_out.realness.mean())
        .add(&gp.scale(w.gradient_penalty))
        .add(&cls.scale(w.classification));
    let critic = finite("domain critic loss", &loss_d)?;
    let g = grad_values(&loss_d, &param_refs(&dp));
    opt_da.step(da, &g)?;

    // editor
    let sp = sm.param_vars(true);
    let dp = da.param_vars(false);
    let fake = sm.edit(&sp, &x, &target)?;
    let out = da.critic(&dp, &fake)?;
    let rec = sm.edit(&sp, &fake, &batch.c)?;
    let loss_g = out
        .realness
        .mean()
        .neg()
        .add(&multi_label_bce(out.domain_logits.as_ref().expect("domain critic"), &target).scale(w.classification))
        .add(&rec.sub(&x).abs().mean().scale(w.reconstruction));
    let loss_g = if w.identity > 0.0 {
        let same = sm.edit(&sp, &x, &batch.c)?;
        loss_g.add(&same.sub(&x).abs().mean().scale(w.identity))
    } else {
        loss_g
    };
    let generator = finite("surrogate loss", &loss_g)?;
    let g = grad_values(&loss_g, &param_refs(&sp));
    opt_sm.step(sm, &g)?;
    Ok(StarGanLosses { critic, generator })
}

/// `n` WGAN-GP updates of the image critic on clean vs perturbed data.
pub(crate) fn update_image_critic(
    db: &mut ModelHandle,
    opt_db: &mut Adam,
    x: &Var,
    xp: &Var,
    n: usize,
    lambda1: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut last = 0.0;
    for _ in 0..n {
        let dbp = db.param_vars(true);
        let realness = |v: &Var| db.critic(&dbp, v).expect("shape checked").realness;
        let loss = adversarial_loss(&realness, x, xp, AdvMode::Critic, lambda1, rng)?;
        last = finite("image critic loss", &loss)?;
        let g = grad_values(&loss, &param_refs(&dbp));
        opt_db.step(db, &g)?;
    }
    Ok(last)
}

/// Losses reported by one stage-B step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageBLosses {
    pub critic: f64,
    pub total: f64,
    pub influence: f64,
    pub adversarial: f64,
}

pub(crate) struct EditingStageB<'a> {
    pub sm: &'a ModelHandle,
    pub sm_prev: Option<&'a ModelHandle>,
    pub da: &'a ModelHandle,
    pub epsilon: f64,
    pub domains_per_sample: usize,
    pub n_critic: usize,
    pub lambda1: f64,
    pub weights: &'a LossWeights,
}

fn editing_influence(sm: &ModelHandle, da: &ModelHandle, x: &Var, xp: &Var, c: &Tensor, d: &DomainSet, w: &LossWeights) -> Result<Var> {
    let sp = sm.param_vars(false);
    let dp = da.param_vars(false);
    let editor = |v: &Var, l: &Tensor| sm.edit(&sp, v, l).expect("shape checked");
    let critic = |v: &Var| {
        let o = da.critic(&dp, v).expect("shape checked");
        (o.realness, o.domain_logits.expect("domain critic"))
    };
    let (terms, _) = EditingTerms::compute_with_weights(&editor, &critic, x, xp, c, d);
    Ok(terms.combine(w))
}

impl EditingStageB<'_> {
    /// Critic updates on `x'` from the incoming generator, then one
    /// generator update. Surrogate and domain critic stay untouched.
    pub fn step(
        &self,
        pg: &mut ModelHandle,
        db: &mut ModelHandle,
        opt_pg: &mut Adam,
        opt_db: &mut Adam,
        batch: &Batch,
        sampler: &DomainSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageBLosses> {
        let x = Var::constant(batch.x.clone());
        let pp = pg.param_vars(true);
        let xp = pg.perturb_batch(&pp, &x, self.epsilon)?;
        super::run::check_budget(&batch.x, xp.value(), self.epsilon)?;

        let critic = update_image_critic(db, opt_db, &x, &xp.detach(), self.n_critic, self.lambda1, rng)?;

        let domains = DomainSet::new(sampler.sample_batch(&batch.labels, self.domains_per_sample, rng))?;
        let influence = editing_influence(self.sm, self.da, &x, &xp, &batch.c, &domains, self.weights)?;
        let prev = match self.sm_prev {
            Some(old) => Some(editing_influence(old, self.da, &x, &xp, &batch.c, &domains, self.weights)?),
            None => None,
        };
        let dbp = db.param_vars(false);
        let realness = |v: &Var| db.critic(&dbp, v).expect("shape checked").realness;
        let adv = adversarial_loss(&realness, &x, &xp, AdvMode::Generator, self.lambda1, rng)?;
        let total = total_pg_loss(&influence, prev.as_ref(), &adv, self.weights);
        let losses = StageBLosses {
            critic,
            total: finite("generator loss", &total)?,
            influence: influence.item(),
            adversarial: adv.item(),
        };
        let g = grad_values(&total, &param_refs(&pp));
        opt_pg.step(pg, &g)?;
        Ok(losses)
    }
}

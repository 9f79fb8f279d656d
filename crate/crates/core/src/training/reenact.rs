//! Reenactment updates. The forger trains a landmark→face translator on the
//! poisoned frames, so the generator only reaches it through the forger's
//! training. A temporary model is cloned from a persistent shadow and
//! stepped inside the graph; the influence loss is then measured on the
//! stepped clone and differentiated back to the generator.

use rand_chacha::ChaCha8Rng;

use super::editing::{finite, param_refs, update_image_critic, StageBLosses};
use super::{Adam, Batch};
use crate::autograd::{grad, grad_values, Var};
use crate::error::Result;
use crate::losses::{adversarial_loss, charbonnier, influence_loss_reenactment, total_pg_loss, AdvMode, LossWeights};
use crate::models::ModelHandle;
use crate::tensor::Tensor;

/// `(params, z) -> reconstruction` for any translator-shaped function.
pub type Translator<'a> = dyn Fn(&[Var], &Var) -> Var + 'a;

/// Supervised L1 update of a translator on `(z, x)` pairs.
pub fn translator_step(m: &mut ModelHandle, opt: &mut Adam, z: &Tensor, x: &Tensor) -> Result<f64> {
    let p = m.param_vars(true);
    let out = m.translate(&p, &Var::constant(z.clone()))?;
    let loss = out.sub(&Var::constant(x.clone())).abs().mean();
    let value = finite("translator loss", &loss)?;
    let g = grad_values(&loss, &param_refs(&p));
    opt.step(m, &g)?;
    Ok(value)
}

/// `steps` gradient-descent updates of `theta` on the smoothed L1 to `xp`,
/// kept inside the graph so the result is a function of `xp`.
pub fn unrolled_params(
    tm: &Translator,
    theta: &[Tensor],
    z: &Var,
    xp: &Var,
    steps: usize,
    lr: f64,
    eta: f64,
) -> Vec<Var> {
    let mut th: Vec<Var> = theta.iter().map(|t| Var::parameter(t.clone())).collect();
    for _ in 0..steps {
        let inner = charbonnier(&tm(&th, z), xp, eta);
        let g = grad(&inner, &param_refs(&th), true);
        th = th.iter().zip(&g).map(|(p, g)| p.sub(&g.scale(lr))).collect();
    }
    th
}

/// Reenactment influence measured on the unrolled temporary model.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_influence(
    tm: &Translator,
    theta: &[Tensor],
    z: &Var,
    x: &Var,
    xp: &Var,
    sm_out: &Var,
    mask: Option<&Tensor>,
    steps: usize,
    lr: f64,
    eta: f64,
) -> Result<Var> {
    let th = unrolled_params(tm, theta, z, xp, steps, lr, eta);
    influence_loss_reenactment(sm_out, &tm(&th, z), x, mask)
}

pub(crate) struct ReenactStageB<'a> {
    pub sm: &'a ModelHandle,
    pub epsilon: f64,
    pub n_critic: usize,
    pub unroll_steps: usize,
    pub unroll_lr: f64,
    pub eta: f64,
    pub masked: bool,
    pub weights: &'a LossWeights,
}

impl ReenactStageB<'_> {
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        pg: &mut ModelHandle,
        db: &mut ModelHandle,
        tm: &mut ModelHandle,
        opt_pg: &mut Adam,
        opt_db: &mut Adam,
        opt_tm: &mut Adam,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageBLosses> {
        let x = Var::constant(batch.x.clone());
        let z = Var::constant(batch.z.clone());
        let pp = pg.param_vars(true);
        let xp = pg.perturb_batch(&pp, &x, self.epsilon)?;
        super::run::check_budget(&batch.x, xp.value(), self.epsilon)?;

        let critic = update_image_critic(db, opt_db, &x, &xp.detach(), self.n_critic, self.weights.lambda1, rng)?;

        let sm_out = self.sm.translate(&self.sm.param_vars(false), &z)?;
        let translator = |p: &[Var], zz: &Var| tm.translate(p, zz).expect("shape checked");
        let mask = self.masked.then_some(&batch.mask);
        let influence = unrolled_influence(
            &translator,
            tm.params(),
            &z,
            &x,
            &xp,
            &sm_out,
            mask,
            self.unroll_steps,
            self.unroll_lr,
            self.eta,
        )?;
        let dbp = db.param_vars(false);
        let realness = |v: &Var| db.critic(&dbp, v).expect("shape checked").realness;
        let adv = adversarial_loss(&realness, &x, &xp, AdvMode::Generator, self.weights.lambda1, rng)?;
        let total = total_pg_loss(&influence, None, &adv, self.weights);
        let losses = StageBLosses {
            critic,
            total: finite("generator loss", &total)?,
            influence: influence.item(),
            adversarial: adv.item(),
        };
        let g = grad_values(&total, &param_refs(&pp));
        opt_pg.step(pg, &g)?;

        // the shadow keeps training on what the forger would see
        translator_step(tm, opt_tm, &batch.z, xp.value())?;
        Ok(losses)
    }
}

//! Training objectives as differentiable scalars.
//!
//! Networks are passed as closures over [`Var`]s so the same code serves
//! trained handles, parameter snapshots and hand-built test functions.
//! Image norms are per-element means throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{config, shape, Result};
use crate::tensor::Tensor;

/// `(images [N,C,H,W], labels [N,K]) -> outputs [N,C,H,W]`.
pub type Editor<'a> = dyn Fn(&Var, &Tensor) -> Var + 'a;
/// `images -> realness [N]`.
pub type Critic<'a> = dyn Fn(&Var) -> Var + 'a;
/// `images -> (realness [N], domain logits [N,K])`.
pub type DomainCritic<'a> = dyn Fn(&Var) -> (Var, Var) + 'a;

/// Probability clamp used before every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Below this total distance the domain weights fall back to uniform.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Added under the gradient-norm square root so it stays differentiable at 0.
const NORM_EPS: f64 = 1e-16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// adversarial term in the PG objective
    pub lambda: f64,
    /// gradient penalty
    pub lambda1: f64,
    /// basic influence term
    pub lambda2: f64,
    /// cycle disruption term
    pub lambda3: f64,
    /// domain confusion term
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 2.5,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Target labels `c_j` for one batch: `J` tensors of shape `[N,K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub targets: Vec<Tensor>,
}

impl DomainSet {
    pub fn new(targets: Vec<Tensor>) -> Result<Self> {
        let first = targets
            .first()
            .ok_or_else(|| config("at least one target domain is required"))?;
        if first.rank() != 2 || targets.iter().any(|t| t.shape() != first.shape()) {
            return Err(shape("domain label tensors must all be [N,K]"));
        }
        Ok(Self { targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.targets[0].shape()[0]
    }

    /// All targets stacked into `[J·N, K]`, domain-major.
    pub fn stacked(&self) -> Tensor {
        Tensor::stack0(&self.targets).reshape(&[self.len() * self.batch(), self.targets[0].shape()[1]])
    }

    /// Bitwise complements `c_rj`, stacked like [`DomainSet::stacked`].
    pub fn inverse_stacked(&self) -> Tensor {
        self.stacked().map(|b| 1.0 - b)
    }
}

/// `J` copies of a batch along axis 0.
pub fn repeat_batch(x: &Var, times: usize) -> Var {
    if times == 1 {
        return x.clone();
    }
    Var::concat(&vec![x.clone(); times], 0)
}

/// `J` copies of a label tensor along axis 0.
pub fn repeat_labels(c: &Tensor, times: usize) -> Tensor {
    let k = c.shape()[1];
    Tensor::stack0(&vec![c.clone(); times]).reshape(&[times * c.shape()[0], k])
}

/// Constant per-element weights giving `Σ_j μ_j · mean_j(·)` when
/// multiplied with a domain-major `[J·N, ...]` tensor and summed.
fn domain_weight_tensor(shape: &[usize], mu: &[f64]) -> Tensor {
    let j = mu.len();
    let per_domain: usize = shape.iter().product::<usize>() / j;
    let data = mu
        .iter()
        .flat_map(|&m| std::iter::repeat(m / per_domain as f64).take(per_domain))
        .collect();
    Tensor::from_vec(shape, data)
}

/// `Σ_j μ_j · mean|a_j − b_j|` over domain-major stacked batches.
pub fn weighted_l1(a: &Var, b: &Var, mu: &[f64]) -> Var {
    let w = domain_weight_tensor(a.shape(), mu);
    a.sub(b).abs().mul_const(&w).sum()
}

pub fn mean_l1(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

/// Normalize distances into weights; uniform when they sum to ~0.
pub fn normalize_domain_weights(distances: &[f64]) -> Vec<f64> {
    let total: f64 = distances.iter().sum();
    if !(total >= WEIGHT_FLOOR) {
        return vec![1.0 / distances.len() as f64; distances.len()];
    }
    distances.iter().map(|d| d / total).collect()
}

/// `μ_j ∝ mean|x − SM(x, c_j)|`, treated as constants.
pub fn domain_weights(sm: &Editor, x: &Var, domains: &DomainSet) -> Vec<f64> {
    let x = x.detach();
    let distances: Vec<f64> = domains
        .targets
        .iter()
        .map(|c| sm(&x, c).value().zip_map(x.value(), |a, b| (a - b).abs()).mean())
        .collect();
    normalize_domain_weights(&distances)
}

/// [`domain_weights`] from outputs already stacked as `[J·N, ...]`.
pub fn domain_weights_from_outputs(x: &Tensor, y: &Tensor, j: usize) -> Vec<f64> {
    let per = x.data().len();
    let distances: Vec<f64> = (0..j)
        .map(|k| {
            let yk = &y.data()[k * per..(k + 1) * per];
            yk.iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64
        })
        .collect();
    normalize_domain_weights(&distances)
}

/// Penalty `E[(‖∇D(x̂)‖₂ − 1)²]` at `x̂ = u·x + (1−u)·x'`, one `u` per sample.
pub fn gradient_penalty(critic: &Critic, x: &Var, xp: &Var, rng: &mut impl Rng) -> Var {
    let n = x.shape()[0];
    let per: usize = x.shape()[1..].iter().product();
    let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let u_full = Tensor::from_vec(
        x.shape(),
        u.iter().flat_map(|&v| std::iter::repeat(v).take(per)).collect(),
    );
    let one_minus = u_full.map(|v| 1.0 - v);
    let mut xh = x.mul_const(&u_full).add(&xp.mul_const(&one_minus));
    if !xh.requires_grad() {
        xh = Var::parameter(xh.value().clone());
    }
    let score = critic(&xh).sum();
    let g = grad(&score, &[&xh], true).remove(0);
    let sq = g.square().reshape(&[n, per]);
    let norms = sq
        .matmul(&Var::constant(Tensor::ones(&[per, 1])))
        .offset(NORM_EPS)
        .sqrt();
    norms.offset(-1.0).square().mean()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvMode {
    Critic,
    Generator,
}

/// WGAN-GP objective for the image critic. Critic mode returns
/// `−(E[D(x)] − E[D(x')] − λ1·GP)`; generator mode returns `−E[D(x')]`.
pub fn adversarial_loss(
    critic: &Critic,
    x: &Var,
    xp: &Var,
    mode: AdvMode,
    lambda1: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    if x.shape().first().copied().unwrap_or(0) == 0 {
        return Err(config("adversarial loss needs a non-empty batch"));
    }
    if x.shape() != xp.shape() {
        return Err(shape("clean and perturbed batches differ in shape"));
    }
    Ok(match mode {
        AdvMode::Generator => critic(xp).mean().neg(),
        AdvMode::Critic => {
            let diff = critic(x).mean().sub(&critic(xp).mean());
            let gp = gradient_penalty(critic, x, xp, rng);
            diff.sub(&gp.scale(lambda1)).neg()
        }
    })
}

/// `−Σ_j μ_j · E‖SM(x,c_j) − SM(x',c_j)‖₁`.
pub fn basic_loss(sm: &Editor, x: &Var, xp: &Var, domains: &DomainSet, mu: &[f64]) -> Var {
    let labels = domains.stacked();
    let j = domains.len();
    let y = sm(&repeat_batch(&x.detach(), j), &labels).detach();
    let yp = sm(&repeat_batch(xp, j), &labels);
    basic_from_outputs(&y, &yp, mu)
}

pub fn basic_from_outputs(y: &Var, yp: &Var, mu: &[f64]) -> Var {
    weighted_l1(y, yp, mu).neg()
}

/// `−Σ_j μ_j · E‖x' − SM(SM(x',c_j), c)‖₁`.
pub fn cycle_disruption_loss(sm: &Editor, xp: &Var, c: &Tensor, domains: &DomainSet, mu: &[f64]) -> Var {
    let j = domains.len();
    let yp = sm(&repeat_batch(xp, j), &domains.stacked());
    cycle_from_outputs(sm, xp, &yp, c, j, mu)
}

pub fn cycle_from_outputs(sm: &Editor, xp: &Var, yp: &Var, c: &Tensor, j: usize, mu: &[f64]) -> Var {
    let back = sm(yp, &repeat_labels(c, j));
    weighted_l1(&repeat_batch(xp, j), &back, mu).neg()
}

/// Sum over attributes of binary cross-entropy, averaged over rows.
pub fn multi_label_bce(logits: &Var, targets: &Tensor) -> Var {
    let p = logits.sigmoid().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = p.neg().offset(1.0);
    let t = Var::constant(targets.clone());
    let t_neg = Var::constant(targets.map(|v| 1.0 - v));
    let ll = t.mul(&p.log()).add(&t_neg.mul(&q.log()));
    let rows = logits.shape()[0] as f64;
    ll.sum().scale(-1.0 / rows)
}

/// `E_j[−log p_DA(c_rj | SM(x',c_j))] + E_j[DA_real(SM(x',c_j))]`.
pub fn domain_confusion_loss(da: &DomainCritic, sm: &Editor, xp: &Var, domains: &DomainSet) -> Var {
    let yp = sm(&repeat_batch(xp, domains.len()), &domains.stacked());
    confusion_from_outputs(da, &yp, domains)
}

pub fn confusion_from_outputs(da: &DomainCritic, yp: &Var, domains: &DomainSet) -> Var {
    let (real, logits) = da(yp);
    multi_label_bce(&logits, &domains.inverse_stacked()).add(&real.mean())
}

/// The three editing influence terms, sharing the first surrogate pass.
#[derive(Clone, Debug)]
pub struct EditingTerms {
    pub basic: Var,
    pub cycle: Var,
    pub confusion: Var,
}

impl EditingTerms {
    pub fn compute(
        sm: &Editor,
        da: &DomainCritic,
        x: &Var,
        xp: &Var,
        c: &Tensor,
        domains: &DomainSet,
        mu: &[f64],
    ) -> Self {
        let j = domains.len();
        let labels = domains.stacked();
        let y = sm(&repeat_batch(&x.detach(), j), &labels).detach();
        let yp = sm(&repeat_batch(xp, j), &labels);
        Self {
            basic: basic_from_outputs(&y, &yp, mu),
            cycle: cycle_from_outputs(sm, xp, &yp, c, j, mu),
            confusion: confusion_from_outputs(da, &yp, domains),
        }
    }

    /// Like [`EditingTerms::compute`] with `μ` taken from the same clean
    /// surrogate pass; returns the weights as well.
    pub fn compute_with_weights(
        sm: &Editor,
        da: &DomainCritic,
        x: &Var,
        xp: &Var,
        c: &Tensor,
        domains: &DomainSet,
    ) -> (Self, Vec<f64>) {
        let j = domains.len();
        let labels = domains.stacked();
        let y = sm(&repeat_batch(&x.detach(), j), &labels).detach();
        let mu = domain_weights_from_outputs(x.value(), y.value(), j);
        let yp = sm(&repeat_batch(xp, j), &labels);
        let terms = Self {
            basic: basic_from_outputs(&y, &yp, &mu),
            cycle: cycle_from_outputs(sm, xp, &yp, c, j, &mu),
            confusion: confusion_from_outputs(da, &yp, domains),
        };
        (terms, mu)
    }

    /// `λ2·L_bs + λ3·L_cyc + λ4·L_dom`.
    pub fn combine(&self, w: &LossWeights) -> Var {
        combine_influence(&self.basic, &self.cycle, &self.confusion, w)
    }
}

pub fn combine_influence(basic: &Var, cycle: &Var, confusion: &Var, w: &LossWeights) -> Var {
    basic
        .scale(w.lambda2)
        .add(&cycle.scale(w.lambda3))
        .add(&confusion.scale(w.lambda4))
}

/// Weighted sum of the three editing influence terms.
pub fn influence_loss_editing(
    sm: &Editor,
    da: &DomainCritic,
    x: &Var,
    xp: &Var,
    c: &Tensor,
    domains: &DomainSet,
    weights: &LossWeights,
) -> Var {
    let mu = domain_weights(sm, x, domains);
    EditingTerms::compute(sm, da, x, xp, c, domains, &mu).combine(weights)
}

/// Mean of `|a − b| ⊙ w`, `w` a one-channel mask broadcast over channels.
pub fn masked_l1(a: &Var, b: &Var, mask: Option<&Tensor>) -> Result<Var> {
    let d = a.sub(b).abs();
    match mask {
        None => Ok(d.mean()),
        Some(m) => {
            let s = a.shape();
            if m.rank() != 4 || m.shape()[0] != s[0] || m.shape()[1] != 1 || m.shape()[2..] != s[2..] {
                return Err(shape(format!("mask {:?} does not fit images {s:?}", m.shape())));
            }
            let full = Var::constant(m.clone()).broadcast_to(s);
            Ok(d.mul(&full).mean())
        }
    }
}

/// `E[‖(SM_x(z)−x)⊙w‖₁ − ‖(M'(z)−x)⊙w‖₁]`; the surrogate term is constant.
pub fn influence_loss_reenactment(
    sm_out: &Var,
    m_out: &Var,
    x: &Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let base = masked_l1(&sm_out.detach(), &x.detach(), mask)?.detach();
    Ok(base.sub(&masked_l1(m_out, &x.detach(), mask)?))
}

/// `L_PG = influence + influence_prev + λ·adv`.
pub fn total_pg_loss(influence: &Var, influence_prev: Option<&Var>, adv_gen: &Var, w: &LossWeights) -> Var {
    let base = match influence_prev {
        Some(prev) => influence.add(prev),
        None => influence.clone(),
    };
    base.add(&adv_gen.scale(w.lambda))
}

/// Smoothed L1, `mean(sqrt((a−b)² + η²))`. Its derivative is continuous,
/// which keeps second-order gradients informative.
pub fn charbonnier(a: &Var, b: &Var, eta: f64) -> Var {
    a.sub(b).square().offset(eta * eta).sqrt().mean()
}

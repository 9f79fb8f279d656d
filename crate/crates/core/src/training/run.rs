//! The alternating loop, its bookkeeping and its on-disk layout:
//!
//! ```text
//! <run>/{role}_{step}.ckpt (+ .json)   model parameters
//! <run>/{role}_{step}.adam             optimizer moments
//! <run>/state_{step}.json              loop state at that step
//! <run>/history.csv                    one row per probe evaluation
//! <run>/pg_best.ckpt (+ .json)         returned generator
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::editing::{stargan_step, EditingStageB, StageBLosses};
use super::reenact::{translator_step, ReenactStageB};
use super::{step_rng, stream, Adam, Batch, DomainSampler, TrainConfig, TrainData};
use crate::autograd::Var;
use crate::error::{config, Error, Result};
use crate::models::{
    load_checkpoint, save_checkpoint, ArchName, ArchitectureTag, Dtype, ModelHandle, NetSpec, Role,
};
use crate::tensor::Tensor;
use crate::Task;

pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// `D(y, y')` on the validation probe.
    pub distance: f64,
    pub maxdist: f64,
    pub loss_pg: f64,
    pub loss_influence: f64,
    pub loss_adv: f64,
    pub loss_db: f64,
    pub loss_sm: f64,
    pub loss_da: f64,
}

pub(crate) fn check_budget(x: &Tensor, xp: &Tensor, epsilon: f64) -> Result<()> {
    let worst = x
        .data()
        .iter()
        .zip(xp.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > epsilon {
        return Err(Error::Contract(format!(
            "perturbation of {worst} exceeds the budget {epsilon}"
        )));
    }
    Ok(())
}

fn derive_seed(seed: u64, role: Role) -> u64 {
    let tag = match role {
        Role::Surrogate => 1,
        Role::Generator => 2,
        Role::DomainCritic => 3,
        Role::ImageCritic => 4,
        Role::Temporary => 5,
        Role::Target => 6,
        Role::Infected => 7,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Fixed validation probe: the first `probe_size` training samples and a
/// domain set drawn once from the run seed.
#[derive(Clone, Debug)]
pub struct Probe {
    pub batch: Batch,
    /// Stacked `[J·P, K]` editing targets (empty for reenactment).
    pub targets: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub(crate) struct Optimizers {
    pub sm: Adam,
    pub pg: Adam,
    pub d_a: Option<Adam>,
    pub d_b: Adam,
    pub tm: Option<Adam>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub sm: ModelHandle,
    pub pg: ModelHandle,
    pub d_a: Option<ModelHandle>,
    pub d_b: ModelHandle,
    pub tm: Option<ModelHandle>,
    pub pg_best: ModelHandle,
    pub maxdist: f64,
    pub best_step: usize,
    pub history: Vec<HistoryRow>,
    pub probe: Probe,
    pub(crate) opt: Optimizers,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pg_best: ModelHandle,
    pub history: Vec<HistoryRow>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    step: usize,
    maxdist: f64,
    best_step: usize,
    config: TrainConfig,
}

impl TrainState {
    fn fresh(cfg: &TrainConfig, data: &TrainData) -> Result<Self> {
        let spec = NetSpec::new(data.resolution(), data.num_attrs(), cfg.width);
        let seed = cfg.seed;
        let editing = cfg.task == Task::AttributeEditing;
        let sm_tag = if editing {
            ArchitectureTag::editor(cfg.surrogate_arch)
        } else {
            ArchitectureTag::translator(cfg.surrogate_arch)
        };
        let sm = ModelHandle::build(sm_tag, Role::Surrogate, spec, derive_seed(seed, Role::Surrogate))?;
        let pg = ModelHandle::build(
            ArchitectureTag::plain(cfg.generator_arch),
            Role::Generator,
            spec,
            derive_seed(seed, Role::Generator),
        )?;
        let critic = ArchitectureTag::plain(ArchName::Critic);
        let d_b = ModelHandle::build(critic, Role::ImageCritic, spec, derive_seed(seed, Role::ImageCritic))?;
        let d_a = editing
            .then(|| ModelHandle::build(critic, Role::DomainCritic, spec, derive_seed(seed, Role::DomainCritic)))
            .transpose()?;
        // the temporary model starts where the surrogate does, so the probe
        // distance between them only grows through the poisoned updates
        let tm = (!editing)
            .then(|| -> Result<ModelHandle> {
                let mut t = ModelHandle::build(sm_tag, Role::Temporary, spec, derive_seed(seed, Role::Temporary))?;
                t.copy_parameters_from(&sm)?;
                Ok(t)
            })
            .transpose()?;
        let opt = Optimizers {
            sm: Adam::for_model(cfg.lr_sm(), &sm),
            pg: Adam::for_model(cfg.lr_pg(), &pg),
            d_a: d_a.as_ref().map(|d| Adam::for_model(cfg.lr_sm(), d)),
            d_b: Adam::for_model(cfg.lr_pg(), &d_b),
            tm: tm.as_ref().map(|t| Adam::for_model(cfg.lr_sm(), t)),
        };
        Ok(Self {
            step: 0,
            pg_best: pg.clone(),
            sm,
            pg,
            d_a,
            d_b,
            tm,
            maxdist: f64::NEG_INFINITY,
            best_step: 0,
            history: Vec::new(),
            probe: build_probe(cfg, data)?,
            opt,
        })
    }

    /// `D(y, y')` of a generator on the probe against the current models:
    /// mean squared error over probe and domains for editing, mean absolute
    /// error between surrogate and temporary model for reenactment.
    pub fn probe_distance(&self, pg: &ModelHandle, epsilon: f64) -> Result<f64> {
        let b = &self.probe.batch;
        let sp = self.sm.param_vars(false);
        match &self.tm {
            None => {
                let x = Var::constant(b.x.clone());
                let xp = pg.perturb_batch(&pg.param_vars(false), &x, epsilon)?;
                let mut total = 0.0;
                for c in &self.probe.targets {
                    let y = self.sm.edit(&sp, &x, c)?;
                    let yp = self.sm.edit(&sp, &xp, c)?;
                    total += y.value().zip_map(yp.value(), |a, b| (a - b) * (a - b)).mean();
                }
                Ok(total / self.probe.targets.len() as f64)
            }
            Some(tm) => {
                let z = Var::constant(b.z.clone());
                let y = self.sm.translate(&sp, &z)?;
                let yp = tm.translate(&tm.param_vars(false), &z)?;
                Ok(y.value().zip_map(yp.value(), |a, b| (a - b).abs()).mean())
            }
        }
    }

    fn models(&self) -> Vec<(&'static str, &ModelHandle, &Adam)> {
        let mut out = vec![
            ("SM", &self.sm, &self.opt.sm),
            ("PG", &self.pg, &self.opt.pg),
            ("D_B", &self.d_b, &self.opt.d_b),
        ];
        if let (Some(d), Some(o)) = (&self.d_a, &self.opt.d_a) {
            out.push(("D_A", d, o));
        }
        if let (Some(t), Some(o)) = (&self.tm, &self.opt.tm) {
            out.push(("TM", t, o));
        }
        out
    }

    fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = self.step;
        for (name, model, opt) in self.models() {
            save_checkpoint(model, &dir.join(format!("{name}_{s}.ckpt")), Dtype::F64)?;
            opt.save(&dir.join(format!("{name}_{s}.adam")))?;
        }
        save_checkpoint(&self.pg_best, &dir.join(format!("PG_best_{s}.ckpt")), Dtype::F64)?;
        write_history(&dir.join(HISTORY_FILE), &self.history)?;
        let saved = SavedState {
            step: s,
            maxdist: self.maxdist,
            best_step: self.best_step,
            config: cfg.clone(),
        };
        fs::write(dir.join(format!("state_{s}.json")), serde_json::to_string_pretty(&saved)?)?;
        Ok(())
    }

    fn restore(dir: &Path, cfg: &TrainConfig, data: &TrainData) -> Result<Option<Self>> {
        let Some(step) = latest_state(dir)? else {
            return Ok(None);
        };
        let saved: SavedState =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("state_{step}.json")))?)?;
        let comparable = |c: &TrainConfig| TrainConfig {
            maxiter: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if comparable(&saved.config) != comparable(cfg) {
            return Err(config("resume configuration differs from the checkpointed run"));
        }
        let mut st = Self::fresh(cfg, data)?;
        let load = |name: &str| -> Result<(ModelHandle, PathBuf)> {
            let m = load_checkpoint(&dir.join(format!("{name}_{step}.ckpt")))?;
            Ok((m, dir.join(format!("{name}_{step}.adam"))))
        };
        let (m, p) = load("SM")?;
        st.sm = m;
        st.opt.sm.load(&p)?;
        let (m, p) = load("PG")?;
        st.pg = m;
        st.opt.pg.load(&p)?;
        let (m, p) = load("D_B")?;
        st.d_b = m;
        st.opt.d_b.load(&p)?;
        if let Some(opt) = st.opt.d_a.as_mut() {
            let (m, p) = load("D_A")?;
            st.d_a = Some(m);
            opt.load(&p)?;
        }
        if let Some(opt) = st.opt.tm.as_mut() {
            let (m, p) = load("TM")?;
            st.tm = Some(m);
            opt.load(&p)?;
        }
        st.pg_best = load_checkpoint(&dir.join(format!("PG_best_{step}.ckpt")))?;
        st.step = step;
        st.maxdist = saved.maxdist;
        st.best_step = saved.best_step;
        st.history = read_history(&dir.join(HISTORY_FILE))?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect();
        Ok(Some(st))
    }
}

fn latest_state(dir: &Path) -> Result<Option<usize>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix("state_")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            best = best.max(Some(step));
        }
    }
    Ok(best)
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<HistoryRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

fn build_probe(cfg: &TrainConfig, data: &TrainData) -> Result<Probe> {
    let n = cfg.probe_size.min(data.len());
    let batch = data.batch(&(0..n).collect::<Vec<_>>());
    let targets = match cfg.task {
        Task::AttributeEditing => {
            let sampler = DomainSampler::new(&data.attribute_names);
            sampler.validate(cfg.domains_per_sample)?;
            let mut rng = step_rng(cfg.seed, 0, stream::PROBE);
            sampler.sample_batch(&batch.labels, cfg.domains_per_sample, &mut rng)
        }
        Task::Reenactment => Vec::new(),
    };
    Ok(Probe { batch, targets })
}

fn stage_a(st: &mut TrainState, cfg: &TrainConfig, batch: &Batch, sampler: &DomainSampler, step: u64, stream_id: u64) -> Result<(f64, f64)> {
    let mut rng = step_rng(cfg.seed, step, stream_id);
    match (&mut st.d_a, &mut st.opt.d_a) {
        (Some(da), Some(opt_da)) => {
            let l = stargan_step(&mut st.sm, da, &mut st.opt.sm, opt_da, batch, sampler, &cfg.stargan, &mut rng)?;
            Ok((l.generator, l.critic))
        }
        _ => Ok((translator_step(&mut st.sm, &mut st.opt.sm, &batch.z, &batch.x)?, 0.0)),
    }
}

fn guard(models: &[&ModelHandle]) -> Vec<Vec<Tensor>> {
    models.iter().map(|m| m.params().to_vec()).collect()
}

fn assert_unchanged(before: Vec<Vec<Tensor>>, models: &[&ModelHandle], stage: &str) -> Result<()> {
    if before != guard(models) {
        return Err(Error::Contract(format!("{stage} modified parameters it must not touch")));
    }
    Ok(())
}

/// Run the two-stage loop. With `run_dir` set, checkpoints and history are
/// written there; with `resume` the latest checkpoint in it is continued.
pub fn run_two_stage(
    cfg: &TrainConfig,
    data: &TrainData,
    run_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config("training data is empty"));
    }
    let sampler = DomainSampler::new(&data.attribute_names);
    let restored = match (run_dir, resume) {
        (Some(dir), true) => TrainState::restore(dir, cfg, data)?,
        _ => None,
    };
    let mut st = match restored {
        Some(s) => s,
        None => {
            let mut s = TrainState::fresh(cfg, data)?;
            for p in 1..=cfg.pretrain_iters {
                let mut rng = step_rng(cfg.seed, p as u64, stream::PRETRAIN);
                let batch = data.batch(&data.sample_indices(cfg.batch_size, &mut rng));
                stage_a(&mut s, cfg, &batch, &sampler, p as u64, stream::INIT)?;
            }
            if let Some(tm) = s.tm.as_mut() {
                tm.copy_parameters_from(&s.sm)?;
            }
            s
        }
    };

    let editing = cfg.task == Task::AttributeEditing;
    for i in st.step + 1..=cfg.maxiter {
        let step = i as u64;
        let mut rng = step_rng(cfg.seed, step, stream::BATCH);
        let batch = data.batch(&data.sample_indices(cfg.batch_size, &mut rng));

        // stage A: regular surrogate training on clean data
        let sm_prev = (editing && cfg.enhancement).then(|| st.sm.clone());
        let (loss_sm, loss_da) = if cfg.alternating {
            let before = guard(&[&st.pg, &st.d_b]);
            let l = stage_a(&mut st, cfg, &batch, &sampler, step, stream::STAGE_A)?;
            assert_unchanged(before, &[&st.pg, &st.d_b], "stage A")?;
            l
        } else {
            (f64::NAN, f64::NAN)
        };

        // stage B: generator update against the current surrogate
        let mut rng = step_rng(cfg.seed, step, stream::STAGE_B);
        let frozen: Vec<&ModelHandle> = [Some(&st.sm), st.d_a.as_ref()].into_iter().flatten().collect();
        let before = guard(&frozen);
        let lb: StageBLosses = if editing {
            let stage = EditingStageB {
                sm: &st.sm,
                sm_prev: sm_prev.as_ref(),
                da: st.d_a.as_ref().expect("editing has a domain critic"),
                epsilon: cfg.epsilon,
                domains_per_sample: cfg.domains_per_sample,
                n_critic: cfg.n_critic,
                lambda1: cfg.weights.lambda1,
                weights: &cfg.weights,
            };
            stage.step(&mut st.pg, &mut st.d_b, &mut st.opt.pg, &mut st.opt.d_b, &batch, &sampler, &mut rng)?
        } else {
            let stage = ReenactStageB {
                sm: &st.sm,
                epsilon: cfg.epsilon,
                n_critic: cfg.n_critic,
                unroll_steps: cfg.unroll_steps,
                unroll_lr: cfg.unroll_lr,
                eta: cfg.inner_smoothing,
                masked: cfg.enhancement,
                weights: &cfg.weights,
            };
            stage.step(
                &mut st.pg,
                &mut st.d_b,
                st.tm.as_mut().expect("reenactment has a temporary model"),
                &mut st.opt.pg,
                &mut st.opt.d_b,
                st.opt.tm.as_mut().expect("reenactment has a temporary model"),
                &batch,
                &mut rng,
            )?
        };
        let frozen: Vec<&ModelHandle> = [Some(&st.sm), st.d_a.as_ref()].into_iter().flatten().collect();
        assert_unchanged(before, &frozen, "stage B")?;
        st.step = i;

        if i % cfg.probe_every == 0 || i == cfg.maxiter {
            let distance = st.probe_distance(&st.pg, cfg.epsilon)?;
            if !distance.is_finite() {
                return Err(Error::Diverged(format!("probe distance non-finite at step {i}")));
            }
            if distance > st.maxdist {
                st.maxdist = distance;
                st.best_step = i;
                st.pg_best = st.pg.clone();
            }
            st.history.push(HistoryRow {
                step: i,
                distance,
                maxdist: st.maxdist,
                loss_pg: lb.total,
                loss_influence: lb.influence,
                loss_adv: lb.adversarial,
                loss_db: lb.critic,
                loss_sm,
                loss_da,
            });
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && i % cfg.checkpoint_every == 0 {
                st.save(dir, cfg)?;
            }
        }
    }

    if let Some(dir) = run_dir {
        st.save(dir, cfg)?;
        save_checkpoint(&st.pg_best, &dir.join("pg_best.ckpt"), Dtype::F64)?;
    }
    Ok(TrainOutcome {
        pg_best: st.pg_best.clone(),
        history: st.history.clone(),
        state: st,
    })
}

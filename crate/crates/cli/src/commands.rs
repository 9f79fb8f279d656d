use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use venomguard::dataio::{
    labels_to_tensor, save_image, save_png, DatasetManifest, DomainLabel, FaceSample, ImageTensor, MANIFEST_FILE,
};
use venomguard::evaluation::{
    evaluate_reenactment, evaluation_domains, forge_edits, forge_reenactment, image_grid,
    lbp_side_by_side, line_plot, psnr, transfer_matrix, write_reports, DefenseReport, DomainTag, EvalSet, OutputPair,
    Perturbation, Setting, TransferTarget,
};
use venomguard::models::{load_checkpoint, perturb_images, read_manifest, save_checkpoint, Dtype, ModelHandle, Role};
use venomguard::training::{run_two_stage, stack_perturbations, train_target_model, HistoryRow, TargetSpec, TrainData};
use venomguard::{Error, Result, Task};

use crate::config::RunConfig;
use crate::files::{load_dataset, read_images, NamedImage};

const CHUNK: usize = 32;
const PLOT_W: usize = 320;
const PLOT_H: usize = 200;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn vgf_name(name: &str) -> String {
    let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned());
    format!("{}.vgf", stem.unwrap_or_else(|| name.to_string()))
}

/// Parse a comma-separated attribute list into indices of `names`.
fn attribute_selection(names: &[String], list: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let i = names
            .iter()
            .position(|n| n == item)
            .ok_or_else(|| config_err(format!("attribute {item:?} is not in the dataset")))?;
        if out.contains(&i) {
            return Err(config_err(format!("attribute {item:?} listed twice")));
        }
        out.push(i);
    }
    if out.is_empty() {
        return Err(config_err("empty attribute list"));
    }
    Ok(out)
}

fn check_task(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.task != cfg.task {
        return Err(config_err(format!(
            "dataset was generated for {}, the run is configured for {}",
            manifest.task.as_str(),
            cfg.task.as_str()
        )));
    }
    Ok(())
}

fn save_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let finite = series.iter().flatten().any(|(x, y)| x.is_finite() && y.is_finite());
    if finite {
        save_png(&line_plot(series, PLOT_W, PLOT_H)?, path)?;
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.dataset.count);
    if count == 0 {
        return Err(config_err("--count must be at least 1"));
    }
    let spec = cfg.synth_spec();
    spec.validate()?;
    let mut cfg = cfg.clone();
    cfg.dataset.count = count;
    let m = DatasetManifest::write_dataset(&cfg.out, cfg.task, &spec, count, cfg.dataset.fractions)?;
    cfg.persist(&cfg.out)?;
    let split = |name: &str| m.entries.iter().filter(|e| e.split == name).count();
    println!(
        "wrote {} {} samples to {} ({} defense-train, {} target-train, {} eval)",
        m.count,
        m.task.as_str(),
        cfg.out.display(),
        split("defense_train"),
        split("target_train"),
        split("eval")
    );
    Ok(())
}

pub fn defend(cfg: &RunConfig, data_dir: &Path, domains: Option<&str>, resume: bool) -> Result<()> {
    let (manifest, splits) = load_dataset(data_dir)?;
    check_task(cfg, &manifest)?;
    let names = manifest.spec.attributes.clone();
    let mut data = TrainData::from_samples(&splits.defense_train, &names)?;
    if let Some(list) = domains {
        data = data.select_attributes(&attribute_selection(&names, list)?);
    }
    cfg.persist(&cfg.out)?;
    let outcome = run_two_stage(&cfg.train, &data, Some(&cfg.out), resume)?;
    let h = &outcome.history;
    let curve = |f: fn(&HistoryRow) -> f64| h.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    save_plot(
        &cfg.out.join("loss_curves.png"),
        &[
            curve(|r| r.loss_pg),
            curve(|r| r.loss_sm),
            curve(|r| r.loss_db),
            curve(|r| r.loss_da),
        ],
    )?;
    save_plot(&cfg.out.join("distance.png"), &[curve(|r| r.distance), curve(|r| r.maxdist)])?;
    println!(
        "trained {} iterations, best probe distance {:.6} at step {}",
        outcome.state.step, outcome.state.maxdist, outcome.state.best_step
    );
    Ok(())
}

#[derive(Serialize)]
struct SidecarRow<'a> {
    file: &'a str,
    linf: f64,
    psnr: f64,
}

/// Write images as float containers plus a `(linf, psnr)` sidecar, after
/// checking every image against the budget.
fn write_budgeted(
    out_dir: &Path,
    sidecar: &Path,
    inputs: &[NamedImage],
    outputs: &[ImageTensor],
    budget: f64,
) -> Result<()> {
    let stats: Vec<(f64, f64)> = inputs
        .par_iter()
        .zip(outputs)
        .map(|(x, y)| Ok((x.image.linf_distance(y)?, psnr(&x.image, y)?)))
        .collect::<Result<_>>()?;
    for (x, (linf, _)) in inputs.iter().zip(&stats) {
        if *linf > budget {
            return Err(Error::Contract(format!(
                "{}: perturbation {linf} exceeds the budget {budget}",
                x.name
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(sidecar).map_err(venomguard::Error::from)?;
    for (x, (y, (linf, p))) in inputs.iter().zip(outputs.iter().zip(&stats)) {
        let name = vgf_name(&x.name);
        save_image(y, &out_dir.join(&name))?;
        w.serialize(SidecarRow {
            file: &name,
            linf: *linf,
            psnr: *p,
        })
        .map_err(venomguard::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn load_role(path: &Path, role: Role) -> Result<ModelHandle> {
    let m = read_manifest(path)?;
    if m.role != role {
        return Err(config_err(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            m.role.as_str(),
            role.as_str()
        )));
    }
    load_checkpoint(path)
}

fn perturb_all(pg: &ModelHandle, images: &[ImageTensor], eps: f64) -> Result<Vec<ImageTensor>> {
    let chunks: Vec<Vec<ImageTensor>> = images
        .par_chunks(CHUNK)
        .map(|c| perturb_images(pg, c, eps))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Poisoning a dataset directory yields a dataset directory: the manifest
/// is copied and `images/` holds the infected images.
pub fn poison(cfg: &RunConfig, generator: &Path, input: &Path) -> Result<()> {
    let pg = load_role(generator, Role::Generator)?;
    let eps = cfg.train.epsilon;
    let inputs = read_images(input)?;
    let clean: Vec<ImageTensor> = inputs.iter().map(|n| n.image.clone()).collect();
    let infected = perturb_all(&pg, &clean, eps)?;
    let is_dataset = input.join(MANIFEST_FILE).is_file();
    let image_dir = if is_dataset { cfg.out.join("images") } else { cfg.out.clone() };
    write_budgeted(&image_dir, &cfg.out.join("poison.csv"), &inputs, &infected, eps)?;
    if is_dataset {
        fs::copy(input.join(MANIFEST_FILE), cfg.out.join(MANIFEST_FILE))?;
    }
    cfg.persist(&cfg.out)?;
    println!("poisoned {} images at epsilon {eps} into {}", inputs.len(), cfg.out.display());
    Ok(())
}

pub fn stack(cfg: &RunConfig, editing: &Path, reenactment: &Path, input: &Path, eps1: f64, eps2: f64) -> Result<()> {
    let pg_a = load_role(editing, Role::Generator)?;
    let pg_b = load_role(reenactment, Role::Generator)?;
    let inputs = read_images(input)?;
    let clean: Vec<ImageTensor> = inputs.iter().map(|n| n.image.clone()).collect();
    let chunks: Vec<Vec<ImageTensor>> = clean
        .par_chunks(CHUNK)
        .map(|c| stack_perturbations(&pg_a, &pg_b, c, eps1, eps2))
        .collect::<Result<_>>()?;
    let stacked: Vec<ImageTensor> = chunks.into_iter().flatten().collect();
    write_budgeted(&cfg.out, &cfg.out.join("stack.csv"), &inputs, &stacked, eps1 + eps2)?;
    cfg.persist(&cfg.out)?;
    println!("stacked perturbations on {} images (budget {})", inputs.len(), eps1 + eps2);
    Ok(())
}

/// Defense-train and target-train samples: everything a forger gets to see.
fn forger_samples(dir: &Path) -> Result<(DatasetManifest, Vec<FaceSample>, Vec<FaceSample>)> {
    let (m, s) = load_dataset(dir)?;
    let train = s.defense_train.into_iter().chain(s.target_train).collect();
    Ok((m, train, s.eval))
}

fn target_domains(spec: &str, labels: Option<&[DomainLabel]>, n: usize, k: usize) -> Result<Vec<DomainLabel>> {
    match spec {
        "own" | "inverse" => {
            let labels = labels.ok_or_else(|| config_err("--domains own/inverse needs dataset inputs"))?;
            Ok(labels
                .iter()
                .map(|l| if spec == "own" { l.clone() } else { l.inverse() })
                .collect())
        }
        bits => {
            let parsed: Vec<u8> = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(config_err(format!("domain spec {bits:?} is not own, inverse or a bit string"))),
                })
                .collect::<Result<_>>()?;
            if parsed.len() != k {
                return Err(config_err(format!("domain spec has {} bits, the model expects {k}", parsed.len())));
            }
            Ok(vec![DomainLabel::new(parsed)?; n])
        }
    }
}

pub struct ForgeArgs<'a> {
    pub model: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub input: Option<&'a Path>,
    pub domains: Option<&'a str>,
    pub infected: bool,
}

pub fn forge(cfg: &RunConfig, a: &ForgeArgs) -> Result<()> {
    let editing = cfg.task == Task::AttributeEditing;
    if editing && a.domains.is_none() {
        return Err(config_err("editing needs a target domain spec (--domains)"));
    }
    if a.model.is_none() && a.data.is_none() {
        return Err(config_err("forge needs --model or --data"));
    }
    let dataset = a.data.map(forger_samples).transpose()?;
    if let Some((m, _, _)) = &dataset {
        check_task(cfg, m)?;
    }
    let model = match a.model {
        Some(p) => load_checkpoint(p)?,
        None => {
            let (m, train, _) = dataset.as_ref().expect("checked above");
            let spec = TargetSpec {
                role: if a.infected { Role::Infected } else { Role::Target },
                ..cfg.target.clone()
            };
            let model = train_target_model(&spec, &TrainData::from_samples(train, &m.spec.attributes)?)?;
            save_checkpoint(&model, &cfg.out.join(format!("{}.ckpt", spec.role.as_str())), Dtype::F64)?;
            model
        }
    };

    let (inputs, labels): (Vec<NamedImage>, Option<Vec<DomainLabel>>) = match (a.input, &dataset) {
        (Some(dir), _) => (read_images(dir)?, None),
        (None, Some((_, _, eval))) => {
            let named = eval
                .iter()
                .map(|s| NamedImage {
                    name: format!("{:05}.vgf", s.index),
                    image: if editing { s.image.clone() } else { s.landmark_map.clone() },
                })
                .collect();
            (named, Some(eval.iter().map(|s| s.label.clone()).collect()))
        }
        (None, None) => return Err(config_err("forge needs --input when --data is absent")),
    };
    let images: Vec<ImageTensor> = inputs.iter().map(|n| n.image.clone()).collect();
    let forged = if editing {
        let domains = target_domains(a.domains.unwrap(), labels.as_deref(), images.len(), model.spec.num_attrs)?;
        forge_edits(&model, &images, &labels_to_tensor(&domains))?
    } else {
        forge_reenactment(&model, &images)?
    };
    let dir = cfg.out.join("forged");
    fs::create_dir_all(&dir)?;
    for (n, y) in inputs.iter().zip(&forged) {
        save_image(y, &dir.join(vgf_name(&n.name)))?;
    }
    let shown = forged.len().min(8);
    if editing {
        save_png(&image_grid(&[images[..shown].to_vec(), forged[..shown].to_vec()])?, &cfg.out.join("forged.png"))?;
    } else {
        save_png(&image_grid(&[forged[..shown].to_vec()])?, &cfg.out.join("forged.png"))?;
    }
    cfg.persist(&cfg.out)?;
    println!("forged {} outputs into {}", forged.len(), dir.display());
    Ok(())
}

fn lbp_panel(path: &Path, clean: &[ImageTensor], infected: &[ImageTensor], n: usize) -> Result<()> {
    let n = n.min(clean.len()).min(infected.len());
    if n == 0 {
        return Ok(());
    }
    let pairs: Vec<(ImageTensor, ImageTensor)> = clean.iter().cloned().zip(infected.iter().cloned()).take(n).collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_png(&lbp_side_by_side(&pairs)?, path)
}

/// Compare two folders of forgeries pairwise.
pub fn eval_pairs(cfg: &RunConfig, clean_dir: &Path, infected_dir: &Path) -> Result<()> {
    let clean = read_images(clean_dir)?;
    let infected = read_images(infected_dir)?;
    if clean.len() != infected.len() {
        return Err(config_err(format!(
            "{} clean outputs but {} infected outputs",
            clean.len(),
            infected.len()
        )));
    }
    if let Some((a, b)) = clean.iter().zip(&infected).find(|(a, b)| a.name != b.name) {
        return Err(config_err(format!("unpaired outputs {} and {}", a.name, b.name)));
    }
    let pairs: Vec<OutputPair> = clean
        .iter()
        .zip(&infected)
        .enumerate()
        .map(|(i, (a, b))| OutputPair {
            id: i,
            domain: 0,
            inputs: None,
            clean: &a.image,
            infected: &b.image,
        })
        .collect();
    let setting = Setting {
        task: cfg.task,
        surrogate_arch: cfg.train.surrogate_arch,
        target_arch: cfg.target.arch,
        domains: DomainTag::SD,
        epsilon: cfg.train.epsilon,
        perturbation: "pg".into(),
        gray_box: cfg.train.surrogate_arch == cfg.target.arch,
    };
    let report = DefenseReport::from_pairs(setting, cfg.threshold(), &pairs)?;
    write_reports(&cfg.out, "report", std::slice::from_ref(&report))?;
    let a: Vec<ImageTensor> = clean.into_iter().map(|n| n.image).collect();
    let b: Vec<ImageTensor> = infected.into_iter().map(|n| n.image).collect();
    lbp_panel(&cfg.out.join("lbp/pairs.png"), &a, &b, cfg.eval.lbp_examples)?;
    cfg.persist(&cfg.out)?;
    println!("DSR {:.3} over {} pairs", report.dsr(), report.rows.len());
    Ok(())
}

/// Seed of the k-th target model of a sweep.
fn target_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Full ε sweep: train the forger's models, poison at every ε with the
/// generator and with equal-budget noise, and report every combination.
pub fn eval_sweep(cfg: &RunConfig, data_dir: &Path, generator: &Path, domains: Option<&str>) -> Result<()> {
    let pg = load_role(generator, Role::Generator)?;
    let (manifest, splits) = load_dataset(data_dir)?;
    check_task(cfg, &manifest)?;
    let names = manifest.spec.attributes.clone();
    let noise = Perturbation::UniformNoise { seed: cfg.eval.noise_seed };
    let perturbations = [Perturbation::Generator(&pg), noise];
    let mut reports = Vec::new();

    match cfg.task {
        Task::AttributeEditing => {
            let sd: Vec<usize> = match domains {
                Some(list) => attribute_selection(&names, list)?,
                None => (0..names.len()).collect(),
            };
            let dd: Vec<usize> = (0..names.len()).filter(|&i| !cfg.eval.dd_drop.contains(&names[i])).collect();
            if dd == sd || dd.is_empty() {
                return Err(config_err("dd_drop must leave a non-empty attribute set that differs from the surrogate's"));
            }
            let train = TrainData::from_samples(&splits.target_train, &names)?;
            let mut models = Vec::new();
            for (k, (&arch, (tag, attrs))) in cfg
                .eval
                .target_archs
                .iter()
                .flat_map(|a| [(DomainTag::SD, &sd), (DomainTag::DD, &dd)].map(|t| (a, t)))
                .enumerate()
            {
                let spec = TargetSpec {
                    arch,
                    seed: target_seed(cfg.target.seed, k),
                    ..cfg.target.clone()
                };
                eprintln!("training {arch} {tag} target");
                models.push((arch, tag, attrs.clone(), train_target_model(&spec, &train.select_attributes(attrs))?));
            }
            let targets: Vec<TransferTarget> = models
                .iter()
                .map(|(arch, tag, attrs, m)| TransferTarget {
                    arch: *arch,
                    domains: *tag,
                    model: m,
                    attributes: attrs.clone(),
                })
                .collect();
            let images: Vec<ImageTensor> = splits.eval.iter().map(|s| s.image.clone()).collect();
            let labels: Vec<DomainLabel> = splits.eval.iter().map(|s| s.label.clone()).collect();
            let eval = EvalSet {
                images: &images,
                labels: &labels,
                attribute_names: &names,
                domains_per_image: cfg.eval.domains_per_image,
                seed: cfg.seed,
            };
            let surrogate = (cfg.train.surrogate_arch, DomainTag::SD);
            for &eps in &cfg.eval.epsilons {
                for p in perturbations {
                    reports.extend(transfer_matrix(p, surrogate, &targets, &eval, eps, cfg.eval.threshold)?);
                }
            }
            // texture panel for the gray-box target at the largest ε
            let eps = cfg.eval.epsilons.iter().cloned().fold(0.0, f64::max);
            if let Some(t) = targets.iter().find(|t| (t.arch, t.domains) == surrogate).or(targets.first()) {
                let n = cfg.eval.lbp_examples.min(images.len());
                let sub: Vec<DomainLabel> = labels[..n].iter().map(|l| l.select(&t.attributes)).collect();
                let sub_names: Vec<String> = t.attributes.iter().map(|&i| names[i].clone()).collect();
                let c = &evaluation_domains(&sub, &sub_names, 1, cfg.seed)?[0];
                let infected = perturb_images(&pg, &images[..n], eps)?;
                let y = forge_edits(t.model, &images[..n], c)?;
                let yp = forge_edits(t.model, &infected, c)?;
                lbp_panel(&cfg.out.join("lbp/editing.png"), &y, &yp, n)?;
                save_png(
                    &image_grid(&[images[..n].to_vec(), infected, y, yp])?,
                    &cfg.out.join("comparison.png"),
                )?;
            }
        }
        Task::Reenactment => {
            let train_samples: Vec<FaceSample> = splits.defense_train.iter().chain(&splits.target_train).cloned().collect();
            let train = TrainData::from_samples(&train_samples, &names)?;
            let landmarks: Vec<ImageTensor> = splits.eval.iter().map(|s| s.landmark_map.clone()).collect();
            eprintln!("training clean translator");
            let clean_model = train_target_model(&cfg.target, &train)?;
            let frames = train.images();
            let infected_spec = TargetSpec {
                role: Role::Infected,
                ..cfg.target.clone()
            };
            let mut last = None;
            for &eps in &cfg.eval.epsilons {
                for p in perturbations {
                    eprintln!("training translator on {}-poisoned frames at epsilon {eps}", p.tag());
                    let poisoned = p.apply(&frames, eps)?;
                    let m = train_target_model(&infected_spec, &train.with_images(&poisoned)?)?;
                    let setting = Setting {
                        task: Task::Reenactment,
                        surrogate_arch: cfg.train.surrogate_arch,
                        target_arch: cfg.target.arch,
                        domains: DomainTag::SD,
                        epsilon: eps,
                        perturbation: p.tag().into(),
                        gray_box: cfg.train.surrogate_arch == cfg.target.arch,
                    };
                    reports.push(evaluate_reenactment(
                        setting,
                        cfg.eval.reenactment_threshold,
                        &clean_model,
                        &m,
                        &landmarks,
                    )?);
                    if p.tag() == "pg" {
                        last = Some(m);
                    }
                }
            }
            if let Some(m) = last {
                let n = cfg.eval.lbp_examples.min(landmarks.len());
                let y = forge_reenactment(&clean_model, &landmarks[..n])?;
                let yp = forge_reenactment(&m, &landmarks[..n])?;
                lbp_panel(&cfg.out.join("lbp/reenactment.png"), &y, &yp, n)?;
                let truth: Vec<ImageTensor> = splits.eval[..n].iter().map(|s| s.image.clone()).collect();
                save_png(&image_grid(&[truth, y, yp])?, &cfg.out.join("comparison.png"))?;
            }
        }
    }

    write_reports(&cfg.out, "report", &reports)?;
    sweep_plots(cfg, &reports)?;
    cfg.persist(&cfg.out)?;
    for r in &reports {
        let s = &r.setting;
        println!(
            "{:>7} {:>5}/{} eps={:.3} {:>5}: DSR {:.3}  mean distance {:.5}",
            s.target_arch.as_str(),
            s.domains,
            if s.gray_box { "gray" } else { "black" },
            s.epsilon,
            s.perturbation,
            r.dsr(),
            r.mean_distance()
        );
    }
    Ok(())
}

/// DSR and mean distance against ε, one line per (target, perturbation).
fn sweep_plots(cfg: &RunConfig, reports: &[DefenseReport]) -> Result<()> {
    let mut keys: Vec<(String, DomainTag, String)> = Vec::new();
    for r in reports {
        let k = (r.setting.target_arch.as_str().to_string(), r.setting.domains, r.setting.perturbation.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let series = |f: fn(&DefenseReport) -> f64| -> Vec<Vec<(f64, f64)>> {
        keys.iter()
            .map(|k| {
                reports
                    .iter()
                    .filter(|r| {
                        (r.setting.target_arch.as_str(), r.setting.domains, r.setting.perturbation.as_str())
                            == (k.0.as_str(), k.1, k.2.as_str())
                    })
                    .map(|r| (r.setting.epsilon, f(r)))
                    .collect()
            })
            .collect()
    };
    save_plot(&cfg.out.join("dsr_vs_eps.png"), &series(DefenseReport::dsr))?;
    save_plot(&cfg.out.join("distance_vs_eps.png"), &series(DefenseReport::mean_distance))?;
    Ok(())
}

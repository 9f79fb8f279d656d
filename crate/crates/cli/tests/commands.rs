use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_venomguard"));
    c.env_remove("VENOMGUARD_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small enough to train in seconds.
fn tiny_config(dir: &Path, task: &str, count: usize) -> PathBuf {
    let cfg = json!({
        "task": task,
        "seed": 3,
        "dataset": {"count": count, "fractions": [0.5, 0.25, 0.25], "resolution": 16},
        "train": {
            "maxiter": 4, "batch_size": 2, "width": 4, "probe_size": 4,
            "domains_per_sample": 2, "epsilon": 0.05
        },
        "target": {"iters": 3, "batch_size": 2, "width": 4},
        "eval": {"target_archs": ["Res6"], "domains_per_image": 1, "lbp_examples": 2}
    });
    let path = dir.join(format!("{task}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn dataset(dir: &Path, task: &str, count: usize) -> (PathBuf, PathBuf) {
    let cfg = tiny_config(dir, task, count);
    let data = dir.join(format!("data_{task}"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn generate_writes_a_stable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d0");
    let args = ["generate", "--task", "attribute_editing", "--count", "512", "--seed", "7", "--out", s(&out)];
    ok(&args);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 512);
    let first = fs::read(out.join("manifest.json")).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(out.join("manifest.json")).unwrap());
    assert!(out.join("run_config.json").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["generate", "--count", "0", "--out", s(&out)]), 2);
    assert_eq!(code(&["generate", "--task", "painting", "--out", s(&out)]), 2);
    assert_eq!(code(&["generate", "--config", s(&dir.path().join("missing.json")), "--out", s(&out)]), 2);
    let bad = bin()
        .env("VENOMGUARD_THREADS", "zero")
        .args(["generate", "--count", "4", "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let threads = bin()
        .env("VENOMGUARD_THREADS", "1")
        .args(["generate", "--count", "20", "--out", s(&out)])
        .output()
        .unwrap();
    assert!(threads.status.success());
}

#[test]
fn defend_writes_checkpoint_history_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = dataset(dir.path(), "attribute_editing", 16);
    let full = dir.path().join("full");
    ok(&["defend", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    for f in ["pg_best.ckpt", "history.csv", "loss_curves.png", "distance.png", "run_config.json"] {
        assert!(full.join(f).is_file(), "{f} missing");
    }
    let rows = csv_rows(&full.join("history.csv"));
    let col = |name: &str| {
        let headers = csv::Reader::from_path(full.join("history.csv")).unwrap().headers().unwrap().clone();
        let i = headers.iter().position(|h| h == name).unwrap();
        rows.iter().map(|r| r[i].parse::<f64>().unwrap()).collect::<Vec<_>>()
    };
    let best = col("distance").into_iter().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(*col("maxdist").last().unwrap(), best);

    // two iterations, then resume to four
    let part = dir.path().join("part");
    let mut c: Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    c["train"]["maxiter"] = json!(2);
    let short = dir.path().join("short.json");
    fs::write(&short, c.to_string()).unwrap();
    ok(&["defend", "--config", s(&short), "--data", s(&data), "--out", s(&part)]);
    ok(&["defend", "--config", s(&cfg), "--data", s(&data), "--out", s(&part), "--resume"]);
    assert_eq!(
        fs::read(full.join("history.csv")).unwrap(),
        fs::read(part.join("history.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("pg_best.ckpt")).unwrap(),
        fs::read(part.join("pg_best.ckpt")).unwrap()
    );

    // a changed learning rate cannot resume the old run
    c["train"]["maxiter"] = json!(4);
    c["train"]["lr_pg"] = json!(0.01);
    fs::write(&short, c.to_string()).unwrap();
    assert_eq!(code(&["defend", "--config", s(&short), "--data", s(&data), "--out", s(&part), "--resume"]), 2);
}

#[test]
fn defend_rejects_a_dataset_of_the_other_task() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(dir.path(), "attribute_editing", 8);
    let out = dir.path().join("r");
    assert_eq!(code(&["defend", "--task", "reenactment", "--data", s(&data), "--out", s(&out)]), 2);
}

fn trained_generator(dir: &Path, task: &str) -> (PathBuf, PathBuf, PathBuf) {
    let (cfg, data) = dataset(dir, task, 16);
    let run = dir.join(format!("defend_{task}"));
    ok(&["defend", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    (cfg, data, run.join("pg_best.ckpt"))
}

#[test]
fn poison_respects_the_budget_and_reports_it() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pg) = trained_generator(dir.path(), "attribute_editing");

    let zero = dir.path().join("p0");
    ok(&["poison", "--config", s(&cfg), "--generator", s(&pg), "--input", s(&data), "--epsilon", "0", "--out", s(&zero)]);
    for f in fs::read_dir(data.join("images")).unwrap() {
        let f = f.unwrap().path();
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(zero.join("images").join(name)).unwrap());
    }

    let eps: f64 = 0.05;
    let p = dir.path().join("p5");
    ok(&["poison", "--config", s(&cfg), "--generator", s(&pg), "--input", s(&data), "--epsilon", "0.05", "--out", s(&p)]);
    assert!(p.join("manifest.json").is_file());
    let floor = 10.0 * (1.0 / (eps * eps)).log10();
    let rows = csv_rows(&p.join("poison.csv"));
    assert_eq!(rows.len(), 16);
    for r in &rows {
        let linf: f64 = r[1].parse().unwrap();
        let psnr: f64 = r[2].parse().unwrap();
        assert!(linf <= eps, "{linf}");
        assert!(psnr >= floor, "{psnr}");
    }

    // only generator checkpoints can poison
    let sm = pg.parent().unwrap().join("SM_4.ckpt");
    assert_eq!(code(&["poison", "--generator", s(&sm), "--input", s(&data), "--out", s(&p)]), 2);
}

#[test]
fn forge_needs_a_domain_for_editing_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = dataset(dir.path(), "attribute_editing", 16);
    let a = dir.path().join("fa");
    assert_eq!(code(&["forge", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]), 2);
    ok(&["forge", "--config", s(&cfg), "--data", s(&data), "--domains", "inverse", "--out", s(&a)]);
    let b = dir.path().join("fb");
    ok(&["forge", "--config", s(&cfg), "--data", s(&data), "--domains", "inverse", "--out", s(&b)]);
    let files: Vec<_> = fs::read_dir(a.join("forged")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 4);
    for f in files {
        assert_eq!(fs::read(&f).unwrap(), fs::read(b.join("forged").join(f.file_name().unwrap())).unwrap());
    }
    // a saved model forges a plain folder with an explicit bit string
    let c = dir.path().join("fc");
    let input = a.join("forged");
    ok(&["forge", "--config", s(&cfg), "--model", s(&a.join("M.ckpt")), "--input", s(&input), "--domains", "10101", "--out", s(&c)]);
    assert_eq!(code(&["forge", "--config", s(&cfg), "--model", s(&a.join("M.ckpt")), "--input", s(&input), "--domains", "101", "--out", s(&c)]), 2);
    assert_eq!(code(&["forge", "--config", s(&cfg), "--model", s(&a.join("M.ckpt")), "--input", s(&input), "--domains", "own", "--out", s(&c)]), 2);
}

#[test]
fn reenactment_poison_forge_and_pairwise_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pg) = trained_generator(dir.path(), "reenactment");
    let poisoned = dir.path().join("poisoned");
    ok(&["poison", "--config", s(&cfg), "--generator", s(&pg), "--input", s(&data), "--epsilon", "0.02", "--out", s(&poisoned)]);
    let clean = dir.path().join("m_clean");
    let infected = dir.path().join("m_infected");
    ok(&["forge", "--config", s(&cfg), "--data", s(&data), "--out", s(&clean)]);
    ok(&["forge", "--config", s(&cfg), "--data", s(&poisoned), "--infected", "--out", s(&infected)]);
    assert!(infected.join("M_infected.ckpt").is_file());

    let report = dir.path().join("report");
    ok(&[
        "eval", "--config", s(&cfg), "--clean", s(&clean.join("forged")), "--infected", s(&infected.join("forged")),
        "--out", s(&report),
    ]);
    let rows = csv_rows(&report.join("report.csv"));
    assert_eq!(rows.len(), 4);
    assert!(report.join("lbp/pairs.png").is_file());

    // one output missing: pair counts differ
    let short = dir.path().join("short");
    fs::create_dir_all(&short).unwrap();
    let first = fs::read_dir(infected.join("forged")).unwrap().next().unwrap().unwrap().path();
    fs::copy(&first, short.join(first.file_name().unwrap())).unwrap();
    assert_eq!(
        code(&["eval", "--config", s(&cfg), "--clean", s(&clean.join("forged")), "--infected", s(&short), "--out", s(&report)]),
        2
    );
}

fn summaries(path: &Path) -> Vec<Value> {
    serde_json::from_slice::<Value>(&fs::read(path).unwrap()).unwrap().as_array().unwrap().clone()
}

#[test]
fn eval_sweep_reports_every_epsilon_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pg) = trained_generator(dir.path(), "attribute_editing");
    let a = dir.path().join("ea");
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--generator", s(&pg), "--out", s(&a)]);
    let sums = summaries(&a.join("report.json"));
    // one Res6 model on SD and one on DD, generator and noise, four budgets
    assert_eq!(sums.len(), 2 * 2 * 4);
    let gray_pg: Vec<&Value> = sums
        .iter()
        .filter(|v| v["setting"]["gray_box"] == json!(true) && v["setting"]["perturbation"] == json!("pg"))
        .collect();
    let eps: Vec<f64> = gray_pg.iter().map(|v| v["setting"]["epsilon"].as_f64().unwrap()).collect();
    assert_eq!(eps, vec![0.01, 0.02, 0.03, 0.05]);

    // DSR in the JSON equals the success ratio in the CSV
    let mut rdr = csv::Reader::from_path(a.join("report.csv")).unwrap();
    let h = rdr.headers().unwrap().clone();
    let idx = |n: &str| h.iter().position(|x| x == n).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    for v in &sums {
        let st = &v["setting"];
        let mine: Vec<&csv::StringRecord> = rows
            .iter()
            .filter(|r| {
                r[idx("target_arch")] == *st["target_arch"].as_str().unwrap()
                    && r[idx("domains")] == *st["domains"].as_str().unwrap()
                    && r[idx("perturbation")] == *st["perturbation"].as_str().unwrap()
                    && r[idx("epsilon")].parse::<f64>().unwrap() == st["epsilon"].as_f64().unwrap()
            })
            .collect();
        let wins = mine.iter().filter(|r| &r[idx("success")] == "true").count();
        assert_eq!(mine.len(), v["total"].as_u64().unwrap() as usize);
        assert_eq!(wins as f64 / mine.len() as f64, v["dsr"].as_f64().unwrap());
    }
    for f in ["dsr_vs_eps.png", "distance_vs_eps.png", "lbp/editing.png", "comparison.png"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }

    let b = dir.path().join("eb");
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--generator", s(&pg), "--out", s(&b)]);
    for f in ["report.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn stacking_stays_within_the_summed_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_e, _, pg_e) = trained_generator(dir.path(), "attribute_editing");
    let (_, data_r, pg_r) = trained_generator(dir.path(), "reenactment");
    let out = dir.path().join("stacked");
    ok(&[
        "stack", "--config", s(&cfg_e), "--editing-generator", s(&pg_e), "--reenactment-generator", s(&pg_r),
        "--input", s(&data_r), "--eps1", "0.05", "--eps2", "0.02", "--out", s(&out),
    ]);
    let rows = csv_rows(&out.join("stack.csv"));
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() <= 0.07));
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{generate_dataset, DomainLabel, ImageTensor, SynthFaceSpec, ATTRIBUTE_NAMES};
use crate::models::{ArchName, ArchitectureTag, ModelHandle, NetSpec, Role};
use crate::Task;

fn img(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f32) -> ImageTensor {
    ImageTensor::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
}

fn random_img(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
    img(h, w, c, |_| rng.gen_range(0.0..=1.0))
}

#[test]
fn uniform_offset_closed_forms() {
    let a = img(8, 8, 3, |_| 0.2);
    let b = img(8, 8, 3, |_| 0.3);
    assert!((distance(&a, &b, DistanceKind::L1).unwrap() - 0.1).abs() < 1e-6);
    assert!((distance(&a, &b, DistanceKind::L2).unwrap() - 0.01).abs() < 1e-6);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(distance(&a, &a, DistanceKind::L2).unwrap(), 0.0);
}

#[test]
fn mismatched_shapes_are_errors() {
    let a = img(8, 8, 3, |_| 0.2);
    let b = img(8, 8, 1, |_| 0.2);
    assert!(matches!(distance(&a, &b, DistanceKind::L1), Err(crate::Error::Shape(_))));
    assert!(psnr(&a, &b).is_err());
    assert!(perceptual_distance(&a, &b).is_err());
}

#[test]
fn budget_floors() {
    assert!((psnr_floor(0.05) - 26.0206).abs() < 1e-3);
    assert!((psnr_floor(0.02) - 33.9794).abs() < 1e-3);
}

/// Independent LBP: explicit zero padding and a weight stencil.
fn lbp_oracle(luma: &[f32], h: usize, w: usize) -> Vec<u32> {
    const STENCIL: [[u32; 3]; 3] = [[1, 2, 4], [128, 0, 8], [64, 32, 16]];
    let mut padded = vec![0f32; (h + 2) * (w + 2)];
    for y in 0..h {
        for x in 0..w {
            padded[(y + 1) * (w + 2) + x + 1] = luma[y * w + x];
        }
    }
    let mut out = Vec::new();
    for y in 1..=h {
        for x in 1..=w {
            let c = padded[y * (w + 2) + x];
            let mut code = 0;
            for (dy, row) in STENCIL.iter().enumerate() {
                for (dx, &weight) in row.iter().enumerate() {
                    if weight != 0 && padded[(y + dy - 1) * (w + 2) + x + dx - 1] >= c {
                        code += weight;
                    }
                }
            }
            out.push(code);
        }
    }
    out
}

#[test]
fn lbp_matches_the_stencil_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        // coarse levels make ties common
        let probe = img(9, 9, 1, |_| rng.gen_range(0..5) as f32 / 4.0);
        let got: Vec<u32> = lbp_map(&probe).data().iter().map(|v| (v * 255.0).round() as u32).collect();
        assert_eq!(got, lbp_oracle(probe.data(), 9, 9));
    }
}

#[test]
fn lbp_examples() {
    let flat = lbp_map(&img(8, 8, 3, |_| 0.5));
    for y in 1..7 {
        for x in 1..7 {
            assert_eq!(flat.get(y, x, 0), 1.0);
        }
    }
    let peak = img(8, 8, 1, |i| if i == 3 * 8 + 3 { 0.9 } else { 0.1 });
    assert_eq!(lbp_map(&peak).get(3, 3, 0), 0.0);
}

#[test]
fn success_rate_counts() {
    let (dsr, flags) = success_flags(&[0.04, 0.06, 0.10], 0.05).unwrap();
    assert_eq!(flags, vec![false, true, true]);
    assert_eq!(dsr, 2.0 / 3.0);
    assert!(success_flags(&[], 0.05).is_err());
    let a = img(8, 8, 3, |i| (i % 7) as f32 / 7.0);
    let (dsr, _) = defense_success_rate(&[(a.clone(), a.clone()), (a.clone(), a)], Task::AttributeEditing, 0.05).unwrap();
    assert_eq!(dsr, 0.0);
}

#[test]
fn reenactment_success_uses_l1() {
    // L1 = 0.1 passes, L2 = 0.01 would not
    let a = img(8, 8, 3, |_| 0.2);
    let b = img(8, 8, 3, |_| 0.3);
    let pair = [(a, b)];
    assert_eq!(defense_success_rate(&pair, Task::Reenactment, 0.05).unwrap().0, 1.0);
    assert_eq!(defense_success_rate(&pair, Task::AttributeEditing, 0.05).unwrap().0, 0.0);
}

#[test]
fn perceptual_is_deterministic_and_monotone_in_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_img(&mut rng, 32, 32, 3);
    assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
    let fresh = PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut last = 0.0;
    for amp in [0.01f32, 0.05, 0.2] {
        let noisy = img(32, 32, 3, |i| (a.data()[i] + amp * u[i]).clamp(0.0, 1.0));
        let d = perceptual_distance(&a, &noisy).unwrap();
        assert_eq!(d, fresh.distance(&a, &noisy).unwrap());
        assert!(d > last, "amplitude {amp}: {d} <= {last}");
        last = d;
    }
}

#[test]
fn noise_baseline_respects_the_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<ImageTensor> = (0..10).map(|_| random_img(&mut rng, 8, 8, 3)).collect();
    for eps in [0.0, 0.01, 0.05, 0.1] {
        let out = Perturbation::UniformNoise { seed: 1 }.apply(&images, eps).unwrap();
        for (a, b) in images.iter().zip(&out) {
            assert!(a.linf_distance(b).unwrap() <= eps);
            assert!(psnr(a, b).unwrap() >= psnr_floor(eps) - 1e-9 || eps == 0.0);
        }
    }
    assert!(Perturbation::Clean.apply(&images, 0.2).is_err());
}

fn names() -> Vec<String> {
    ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
}

fn editor(arch: ArchName, k: usize, seed: u64) -> ModelHandle {
    ModelHandle::build(ArchitectureTag::editor(arch), Role::Target, NetSpec::new(16, k, 2), seed).unwrap()
}

fn eval_samples() -> (Vec<ImageTensor>, Vec<DomainLabel>) {
    let spec = SynthFaceSpec {
        resolution: 16,
        ..SynthFaceSpec::with_seed(5)
    };
    let s = generate_dataset(&spec, 6).unwrap();
    (s.iter().map(|f| f.image.clone()).collect(), s.iter().map(|f| f.label.clone()).collect())
}

#[test]
fn transfer_matrix_has_one_row_per_target() {
    let (images, labels) = eval_samples();
    let names = names();
    let dd = vec![0, 1, 3, 4];
    let models = [
        editor(ArchName::Res6, 5, 1),
        editor(ArchName::Res6, 4, 2),
        editor(ArchName::CNet, 5, 3),
        editor(ArchName::CNet, 4, 4),
    ];
    let targets: Vec<TransferTarget> = models
        .iter()
        .map(|m| TransferTarget {
            arch: m.arch.name,
            domains: if m.spec.num_attrs == 5 { DomainTag::SD } else { DomainTag::DD },
            model: m,
            attributes: if m.spec.num_attrs == 5 { (0..5).collect() } else { dd.clone() },
        })
        .collect();
    let eval = EvalSet {
        images: &images,
        labels: &labels,
        attribute_names: &names,
        domains_per_image: 3,
        seed: 0,
    };
    let pg = ModelHandle::build(ArchitectureTag::plain(ArchName::Res6), Role::Generator, NetSpec::new(16, 5, 2), 7).unwrap();
    let reports = transfer_matrix(Perturbation::Generator(&pg), (ArchName::Res6, DomainTag::SD), &targets, &eval, 0.05, 0.05).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(reports.iter().filter(|r| r.setting.gray_box).count(), 1);
    assert!(reports[0].setting.gray_box);
    for r in &reports {
        assert_eq!(r.rows.len(), images.len() * 3);
        assert_eq!(r.dsr() * r.rows.len() as f64, r.successes() as f64);
        assert!(r.rows.iter().all(|row| row.psnr.unwrap() >= psnr_floor(0.05) - 1e-9));
    }
    let zero = transfer_matrix(Perturbation::Generator(&pg), (ArchName::Res6, DomainTag::SD), &targets, &eval, 0.0, 0.05).unwrap();
    assert!(zero.iter().all(|r| r.dsr() == 0.0 && r.mean_l2() == 0.0));
    assert!(transfer_matrix(Perturbation::Clean, (ArchName::Res6, DomainTag::SD), &[], &eval, 0.05, 0.05).is_err());
}

#[test]
fn report_files_are_reproducible_and_consistent() {
    let (images, labels) = eval_samples();
    let names = names();
    let m = editor(ArchName::Res6, 5, 1);
    let domains = evaluation_domains(&labels, &names, 2, 3).unwrap();
    let noisy = uniform_noise(&images, 0.1, 2).unwrap();
    let setting = Setting {
        task: Task::AttributeEditing,
        surrogate_arch: ArchName::Res6,
        target_arch: ArchName::Res6,
        domains: DomainTag::SD,
        epsilon: 0.1,
        perturbation: "noise".into(),
        gray_box: true,
    };
    // a tiny threshold so that both outcomes occur
    let report = evaluate_editing(setting, 1e-6, &m, &images, &noisy, &domains).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv1, json1) = write_reports(&dir.path().join("a"), "r", std::slice::from_ref(&report)).unwrap();
    let (csv2, json2) = write_reports(&dir.path().join("b"), "r", std::slice::from_ref(&report)).unwrap();
    assert_eq!(std::fs::read(&csv1).unwrap(), std::fs::read(&csv2).unwrap());
    assert_eq!(std::fs::read(&json1).unwrap(), std::fs::read(&json2).unwrap());

    let mut rdr = csv::Reader::from_path(&csv1).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "success").unwrap();
    let flags: Vec<bool> = rdr.records().map(|r| &r.unwrap()[col] == "true").collect();
    let summary = &read_summaries(&json1).unwrap()[0];
    assert_eq!(summary.total, flags.len());
    assert_eq!(summary.dsr, flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64);
}

#[test]
fn pgd_reference_stays_in_budget_and_moves_the_editor() {
    let (images, labels) = eval_samples();
    let m = editor(ArchName::Res6, 5, 1);
    let domains = evaluation_domains(&labels, &names(), 1, 0).unwrap();
    let adv = pgd_reference(&m, &images, &domains, 0.05, 3, 0.01, 0).unwrap();
    for (a, b) in images.iter().zip(&adv) {
        assert!(a.linf_distance(b).unwrap() <= 0.05);
    }
    let noise = uniform_noise(&images, 0.05, 0).unwrap();
    let d = |xs: &[ImageTensor]| {
        let y = forge_edits(&m, &images, &domains[0]).unwrap();
        let yp = forge_edits(&m, xs, &domains[0]).unwrap();
        y.iter().zip(&yp).map(|(a, b)| distance(a, b, DistanceKind::L2).unwrap()).sum::<f64>()
    };
    assert!(d(&adv) > d(&noise));
}

#[test]
fn panels_have_the_expected_size() {
    let a = img(8, 8, 3, |_| 0.3);
    let g = lbp_side_by_side(&[(a.clone(), a.clone()), (a.clone(), a)]).unwrap();
    assert_eq!((g.height, g.width, g.channels), (2 * 8 + 3 * 2, 4 * 8 + 5 * 2, 3));
    let p = line_plot(&[vec![(0.0, 1.0), (1.0, 2.0)], vec![(0.0, 0.5)]], 64, 48).unwrap();
    assert_eq!((p.height, p.width), (48, 64));
    assert!(p.data().iter().any(|&v| v < 1.0));
    assert!(line_plot(&[vec![]], 64, 48).is_err());
    assert!(image_grid(&[]).is_err());
}

proptest! {
    #[test]
    fn distances_behave_like_metrics(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_img(&mut rng, 8, 8, 3);
        let b = random_img(&mut rng, 8, 8, 3);
        for kind in [DistanceKind::L1, DistanceKind::L2] {
            let ab = distance(&a, &b, kind).unwrap();
            prop_assert_eq!(ab, distance(&b, &a, kind).unwrap());
            prop_assert!(ab > 0.0);
            prop_assert_eq!(distance(&a, &a, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn psnr_falls_as_error_grows(m1 in 1e-6f64..1.0, m2 in 1e-6f64..1.0) {
        prop_assume!(m1 != m2);
        prop_assert_eq!(m1 < m2, psnr_from_mse(m1) > psnr_from_mse(m2));
    }

    #[test]
    fn budget_implies_psnr_floor(seed in 0u64..500, eps in 0.001f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_img(&mut rng, 8, 8, 3);
        let b = uniform_noise(std::slice::from_ref(&a), eps, seed).unwrap().remove(0);
        prop_assert!(psnr(&a, &b).unwrap() >= psnr_floor(eps) - 1e-9);
    }
}

use super::*;
use crate::gradcheck;

fn spec8() -> NetSpec {
    NetSpec::new(8, 5, 2)
}

fn probe(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let t = (i as u64 * 2654435761 + salt * 40503) % 1000;
            0.05 + 0.9 * t as f64 / 1000.0
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn image(res: usize, value_salt: u64) -> ImageTensor {
    let t = probe(&[1, 3, res, res], value_salt);
    ImageTensor::from_batch(&t, 0).unwrap()
}

#[test]
fn seeded_builds_are_identical() {
    let s = NetSpec::new(32, 5, 4);
    let a = ModelHandle::build(ArchitectureTag::editor(ArchName::Res6), Role::Surrogate, s, 1).unwrap();
    let b = ModelHandle::build(ArchitectureTag::editor(ArchName::Res6), Role::Surrogate, s, 1).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    assert_eq!(a.param_hash(), b.param_hash());
    let c = ModelHandle::build(ArchitectureTag::editor(ArchName::Res6), Role::Surrogate, s, 2).unwrap();
    assert_ne!(a.param_hash(), c.param_hash());
    assert!(a.param_count() > 0);
}

#[test]
fn res9_has_three_more_blocks_than_res6() {
    let s = NetSpec::new(16, 5, 2);
    let r6 = ModelHandle::build(ArchitectureTag::editor(ArchName::Res6), Role::Surrogate, s, 0).unwrap();
    let r9 = ModelHandle::build(ArchitectureTag::editor(ArchName::Res9), Role::Surrogate, s, 0).unwrap();
    assert_eq!(r9.block_count() - r6.block_count(), 3);
    // each residual block holds two convs (w, b) and two norms (g, b)
    assert_eq!(r9.params().len() - r6.params().len(), 3 * 8);
}

#[test]
fn unknown_tags_and_bad_role_pairs_are_config_errors() {
    assert!(matches!("Res12".parse::<ArchName>(), Err(crate::Error::Config(_))));
    assert_eq!("unet-128".parse::<ArchName>().unwrap(), ArchName::UNet128);
    let s = spec8();
    for (arch, role) in [
        (ArchitectureTag::plain(ArchName::Critic), Role::Surrogate),
        (ArchitectureTag::plain(ArchName::Res6), Role::ImageCritic),
        (ArchitectureTag::editor(ArchName::Res6), Role::Generator),
        (ArchitectureTag::plain(ArchName::Res6), Role::Target),
    ] {
        assert!(matches!(ModelHandle::build(arch, role, s, 0), Err(crate::Error::Config(_))));
    }
    assert!(ModelHandle::build(ArchitectureTag::plain(ArchName::Res6), Role::Generator, NetSpec::new(12, 5, 2), 0).is_err());
}

#[test]
fn every_architecture_builds_and_is_bounded() {
    let s = NetSpec::new(16, 5, 2);
    let x = Var::constant(probe(&[2, 3, 16, 16], 3));
    let labels = Tensor::from_vec(&[2, 5], vec![1., 0., 1., 0., 1., 0., 1., 0., 1., 0.]);
    for name in ArchName::GENERATORS {
        let sm = ModelHandle::build(ArchitectureTag::editor(name), Role::Surrogate, s, 5).unwrap();
        let y = sm.edit(&sm.param_vars(false), &x, &labels).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        assert!(y.value().data().iter().all(|v| (0.0..=1.0).contains(v)));

        let pg = ModelHandle::build(ArchitectureTag::plain(name), Role::Generator, s, 5).unwrap();
        let d = pg.perturbation(&pg.param_vars(false), &x).unwrap();
        assert!(d.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let m = ModelHandle::build(ArchitectureTag::translator(name), Role::Target, s, 5).unwrap();
        let z = ImageTensor::filled(16, 16, 1, 0.0).unwrap();
        let out = forward_translator(&m, &z).unwrap();
        assert_eq!(out, forward_translator(&m, &z).unwrap());
    }
}

#[test]
fn unet_variants_differ_in_depth() {
    assert_eq!(nets::unet_depth(ArchName::UNet128, 32), 3);
    assert_eq!(nets::unet_depth(ArchName::UNet256, 32), 4);
}

#[test]
fn label_length_is_checked() {
    let sm = ModelHandle::build(ArchitectureTag::editor(ArchName::CNet), Role::Surrogate, spec8(), 0).unwrap();
    let c = DomainLabel::new(vec![1, 0, 1]).unwrap();
    assert!(matches!(forward_editor(&sm, &image(8, 1), &c), Err(crate::Error::Shape(_))));
    let c = DomainLabel::new(vec![1, 0, 1, 0, 0]).unwrap();
    let a = forward_editor(&sm, &image(8, 1), &c).unwrap();
    assert_eq!(a, forward_editor(&sm, &image(8, 1), &c).unwrap());
    let m = ModelHandle::build(ArchitectureTag::translator(ArchName::CNet), Role::Target, spec8(), 0).unwrap();
    let z = ImageTensor::filled(16, 16, 1, 0.0).unwrap();
    assert!(matches!(forward_translator(&m, &z), Err(crate::Error::Shape(_))));
}

fn saturated_pg(sign: f64) -> ModelHandle {
    let mut pg = ModelHandle::build(ArchitectureTag::plain(ArchName::CNet), Role::Generator, spec8(), 0).unwrap();
    let mut params = pg.params().to_vec();
    let last = params.len() - 1;
    params[last] = Tensor::full(params[last].shape(), 60.0 * sign);
    pg.set_params(params).unwrap();
    pg
}

#[test]
fn perturb_arithmetic_and_clipping() {
    let pg = saturated_pg(1.0);
    let x = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
    let out = perturb(&pg, &x, 0.05).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.55).abs() < 1e-6));
    let x = ImageTensor::filled(8, 8, 3, 0.98).unwrap();
    let out = perturb(&pg, &x, 0.05).unwrap();
    assert!(out.data().iter().all(|&v| v == 1.0));
    let x = image(8, 4);
    assert_eq!(perturb(&pg, &x, 0.0).unwrap(), x);
    assert!(perturb(&pg, &x, 0.2).is_err());
}

#[test]
fn saturated_budget_is_exact() {
    for sign in [1.0, -1.0] {
        let pg = saturated_pg(sign);
        for salt in 0..20 {
            let x = image(8, salt);
            for eps in [0.01, 0.03, 0.05, 0.07, 0.1] {
                let out = perturb(&pg, &x, eps).unwrap();
                assert!(out.linf_distance(&x).unwrap() <= eps);
            }
        }
    }
}

#[test]
fn copy_is_detached_and_checks_architecture() {
    let s = spec8();
    let src = ModelHandle::build(ArchitectureTag::translator(ArchName::Res6), Role::Temporary, s, 1).unwrap();
    let mut dst = ModelHandle::build(ArchitectureTag::translator(ArchName::Res6), Role::Target, s, 2).unwrap();
    copy_parameters(&src, &mut dst).unwrap();
    assert_eq!(src.flat_params(), dst.flat_params());
    let mut mutated = src.clone();
    let mut p = mutated.params().to_vec();
    p[0] = p[0].map(|v| v + 1.0);
    mutated.set_params(p).unwrap();
    assert_eq!(dst.flat_params(), src.flat_params());
    let mut unet = ModelHandle::build(ArchitectureTag::translator(ArchName::UNet128), Role::Target, s, 2).unwrap();
    assert!(matches!(copy_parameters(&src, &mut unet), Err(crate::Error::Config(_))));
}

#[test]
fn critic_heads() {
    let s = spec8();
    let da = ModelHandle::build(ArchitectureTag::plain(ArchName::Critic), Role::DomainCritic, s, 0).unwrap();
    let db = ModelHandle::build(ArchitectureTag::plain(ArchName::Critic), Role::ImageCritic, s, 0).unwrap();
    let (r, logits) = critic(&da, &image(8, 2)).unwrap();
    assert!(r.is_finite());
    assert_eq!(logits.unwrap().len(), 5);
    let (r, logits) = critic(&db, &image(8, 2)).unwrap();
    assert!(r.is_finite() && logits.is_none());
}

#[test]
fn editor_input_gradient_matches_finite_differences() {
    for name in [ArchName::Res6, ArchName::CNet, ArchName::UNet128] {
        let sm = ModelHandle::build(ArchitectureTag::editor(name), Role::Surrogate, spec8(), 3).unwrap();
        let params = sm.param_vars(false);
        let labels = Tensor::from_vec(&[1, 5], vec![0., 1., 1., 0., 1.]);
        let gc = gradcheck::check(&probe(&[1, 3, 8, 8], 9), |x| {
            sm.edit(&params, x, &labels).unwrap().mean()
        });
        assert!(gc.is_nonzero());
        assert!(gc.relative_error() < 1e-3, "{name}: {}", gc.relative_error());
    }
}

#[test]
fn translator_and_pg_gradients_match_finite_differences() {
    let m = ModelHandle::build(ArchitectureTag::translator(ArchName::UNet256), Role::Target, spec8(), 3).unwrap();
    let params = m.param_vars(false);
    let gc = gradcheck::check(&probe(&[1, 1, 8, 8], 2), |z| m.translate(&params, z).unwrap().mean());
    assert!(gc.relative_error() < 1e-3, "{}", gc.relative_error());
    let pg = ModelHandle::build(ArchitectureTag::plain(ArchName::Res9), Role::Generator, spec8(), 3).unwrap();
    let params = pg.param_vars(false);
    let gc = gradcheck::check(&probe(&[1, 3, 8, 8], 5), |x| pg.perturbation(&params, x).unwrap().mean());
    assert!(gc.relative_error() < 1e-3, "{}", gc.relative_error());
}

#[test]
fn critic_realness_gradient_matches_finite_differences() {
    let da = ModelHandle::build(ArchitectureTag::plain(ArchName::Critic), Role::DomainCritic, spec8(), 4).unwrap();
    let params = da.param_vars(false);
    let gc = gradcheck::check(&probe(&[1, 3, 8, 8], 6), |x| da.critic(&params, x).unwrap().realness.sum());
    assert!(gc.is_nonzero());
    assert!(gc.relative_error() < 1e-3, "{}", gc.relative_error());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ModelHandle::build(ArchitectureTag::editor(ArchName::Res6), Role::Surrogate, spec8(), 9).unwrap();
    h.step = 17;
    let p = dir.path().join("SM_17.ckpt");
    let m = save_checkpoint(&h, &p, Dtype::F64).unwrap();
    assert_eq!(m.param_count, h.param_count());
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, h);
    let p32 = dir.path().join("SM_17_f32.ckpt");
    save_checkpoint(&h, &p32, Dtype::F32).unwrap();
    let back = load_checkpoint(&p32).unwrap();
    let max_err = back
        .flat_params()
        .iter()
        .zip(h.flat_params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_err < 1e-6);
    std::fs::write(&p, [0u8; 5]).unwrap();
    assert!(load_checkpoint(&p).is_err());
}

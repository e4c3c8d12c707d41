use super::*;
use crate::augment::{sample_view_pair, ViewPolicy};
use crate::config::{validate_config, ExperimentConfig};
use crate::data::generate_scene;
use crate::models::ModelBundle;
use crate::rng::substream;
use ndarray::{Array3, IxDyn};
use rand::Rng;

fn unit_map(d: usize, grid: usize, mut fill: impl FnMut(usize, usize, usize) -> f64) -> ArrayD<f64> {
    let mut m = ArrayD::<f64>::zeros(IxDyn(&[1, d, grid, grid]));
    for c in 0..d {
        for i in 0..grid {
            for j in 0..grid {
                m[[0, c, i, j]] = fill(c, i, j);
            }
        }
    }
    m
}

fn identity_matches(grid: usize) -> MatchSet {
    let mut pairs = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            pairs.push(((r, c), (r, c)));
        }
    }
    MatchSet { grid, pairs }
}

#[test]
fn dense_pair_known_values() {
    let grid = 2;
    let e0 = unit_map(3, grid, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
    let matches = identity_matches(grid);
    // identical unit vectors -> 0
    assert!(dense_pair_loss(&e0, &e0, &matches).unwrap().abs() < 1e-12);
    // opposite -> 4
    let neg = e0.mapv(|v| -v);
    assert!((dense_pair_loss(&e0, &neg, &matches).unwrap() - 4.0).abs() < 1e-12);
    // orthogonal -> 2
    let e1 = unit_map(3, grid, |c, _, _| if c == 1 { 1.0 } else { 0.0 });
    assert!((dense_pair_loss(&e0, &e1, &matches).unwrap() - 2.0).abs() < 1e-12);
    // empty matches -> 0
    let empty = MatchSet { grid, pairs: vec![] };
    assert_eq!(dense_pair_loss(&e0, &e1, &empty).unwrap(), 0.0);
    // grid mismatch -> error
    let wrong = MatchSet { grid: 3, pairs: vec![] };
    assert!(dense_pair_loss(&e0, &e1, &wrong).is_err());
}

#[test]
fn dense_pair_range_on_random_unit_maps() {
    let mut rng = substream(1, "r");
    for _ in 0..50 {
        let grid = 2;
        let d = 4;
        let raw_a = unit_map(d, grid, |_, _, _| rng.gen_range(-1.0..1.0));
        let raw_b = unit_map(d, grid, |_, _, _| rng.gen_range(-1.0..1.0));
        let (a, _) = crate::tensor::ops::l2_normalize_fwd(
            &raw_a.view().into_dimensionality().unwrap(),
            1e-12,
        );
        let (b, _) = crate::tensor::ops::l2_normalize_fwd(
            &raw_b.view().into_dimensionality().unwrap(),
            1e-12,
        );
        let l = dense_pair_loss(&a.into_dyn(), &b.into_dyn(), &identity_matches(grid)).unwrap();
        assert!((0.0..=4.0).contains(&l), "loss {l} out of range");
    }
}

fn orthonormal_protos(k: usize, d: usize) -> PrototypeState<f64> {
    let mut bank = ndarray::Array2::<f64>::zeros((k, d));
    for i in 0..k {
        bank[(i, i)] = 1.0;
    }
    PrototypeState { bank, center: ndarray::Array1::zeros(d) }
}

#[test]
fn prototype_uniform_similarities_give_ln_k() {
    // student aligned equally with all 4 prototypes; teacher too
    let k = 4;
    let d = 4;
    let grid = 2;
    let v = 0.5f64; // (0.5,0.5,0.5,0.5) is unit norm in d=4
    let map = unit_map(d, grid, |_, _, _| v);
    let protos = orthonormal_protos(k, d);
    let l = prototype_loss(&map, &map, &protos, &identity_matches(grid), 1.0, 1.0, false).unwrap();
    assert!((l - (k as f64).ln()).abs() < 1e-9, "{l}");
}

#[test]
fn prototype_scalar_softmax_oracle() {
    // teacher sims (1,0) with temp 0.5 -> q = (e^2, 1)/(e^2+1)
    // student sims equal with temp 1 -> log p = -ln 2 each -> CE = ln 2
    let d = 2;
    let grid = 1;
    let teacher = unit_map(d, grid, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
    let s = 1.0 / 2.0f64.sqrt();
    let student = unit_map(d, grid, |_, _, _| s);
    let protos = orthonormal_protos(2, d);
    let l =
        prototype_loss(&student, &teacher, &protos, &identity_matches(grid), 1.0, 0.5, false)
            .unwrap();
    assert!((l - 2.0f64.ln()).abs() < 1e-9, "{l}");
}

#[test]
fn prototype_saturated_student_approaches_teacher_entropy() {
    // with a tiny teacher temperature the teacher distribution is
    // (nearly) one-hot; a student saturated on that argmax drives the CE
    // to the teacher entropy (~0)
    let d = 2;
    let grid = 1;
    let teacher = unit_map(d, grid, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
    let student = teacher.clone();
    let protos = orthonormal_protos(2, d);
    let l = prototype_loss(
        &student,
        &teacher,
        &protos,
        &identity_matches(grid),
        1e-3,
        1e-3,
        false,
    )
    .unwrap();
    let q1 = (-1.0f64 / 1e-3).exp() / (1.0 + (-1.0f64 / 1e-3).exp());
    let entropy = -(1.0 - q1) * (1.0 - q1).ln() - if q1 > 0.0 { q1 * q1.ln() } else { 0.0 };
    assert!((l - entropy).abs() < 1e-9, "{l} vs {entropy}");
    assert!(l < 1e-6);
}

#[test]
fn prototype_uniform_student_hits_ln_k_for_any_teacher() {
    let mut rng = substream(2, "q");
    let d = 4;
    let grid = 2;
    let protos = orthonormal_protos(4, d);
    // uniform student: equal sims to all prototypes
    let student = unit_map(d, grid, |_, _, _| 0.5);
    let raw = unit_map(d, grid, |_, _, _| rng.gen_range(-1.0..1.0));
    let (teacher, _) =
        crate::tensor::ops::l2_normalize_fwd(&raw.view().into_dimensionality().unwrap(), 1e-12);
    let l = prototype_loss(
        &student,
        &teacher.into_dyn(),
        &protos,
        &identity_matches(grid),
        0.7,
        0.3,
        true,
    )
    .unwrap();
    assert!((l - 4.0f64.ln()).abs() < 1e-9);
    assert!(l >= 0.0);
}

#[test]
fn prototype_rejects_small_bank() {
    let d = 2;
    let map = unit_map(d, 1, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
    let protos = orthonormal_protos(1, d);
    assert!(prototype_loss(&map, &map, &protos, &identity_matches(1), 1.0, 1.0, false).is_err());
}

#[test]
fn update_center_formulas() {
    let scalar_state = || PrototypeState::<f64> {
        bank: ndarray::Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap(),
        center: ndarray::Array1::zeros(1),
    };
    let mut state = orthonormal_protos(2, 3);
    let mean = ndarray::Array1::from_vec(vec![1.0, 2.0, 3.0]);
    update_center(&mut state, &mean, 0.0);
    assert_eq!(state.center, mean);

    let mut state = scalar_state();
    update_center(&mut state, &ndarray::Array1::from_vec(vec![1.0]), 0.99);
    assert!((state.center[0] - 0.01).abs() < 1e-12);

    // repeated constant mean from zero: center = (1 - c_m^n) * mu
    let mut state = scalar_state();
    let mu = 2.5;
    let c_m = 0.9;
    let n = 17;
    for _ in 0..n {
        update_center(&mut state, &ndarray::Array1::from_vec(vec![mu]), c_m);
    }
    let expect = (1.0 - c_m.powi(n)) * mu;
    assert!((state.center[0] - expect).abs() < 1e-9);
}

#[test]
fn combine_losses_arithmetic() {
    let b = combine_losses(2.0, &[1.0], 0.25).unwrap();
    assert!((b.total - 1.25).abs() < 1e-15);
    assert_eq!(b.l_dds, 1.0);

    let b = combine_losses(9.0, &[1.0, 2.0, 3.0, 4.0], 0.0).unwrap();
    assert!((b.l_dds - 2.5).abs() < 1e-15);
    assert!((b.total - 2.5).abs() < 1e-15);

    let b = combine_losses(3.5, &[1.0, 2.0], 1.0).unwrap();
    assert_eq!(b.total, 3.5);

    // empty levels: decoder-free case forces alpha to 1
    let b = combine_losses(3.0, &[], 1.0).unwrap();
    assert_eq!(b.total, 3.0);
    assert_eq!(b.l_dds, 0.0);

    assert!(combine_losses(1.0, &[1.0], 1.5).is_err());
}

#[test]
fn combine_matches_independent_mean_oracle() {
    let mut rng = substream(3, "c");
    for _ in 0..100 {
        let n = rng.gen_range(1..=4);
        let levels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let alpha: f64 = rng.gen_range(0.0..1.0);
        let l_enc: f64 = rng.gen_range(0.0..5.0);
        let b = combine_losses(l_enc, &levels, alpha).unwrap();
        // independently coded mean
        let mut acc = 0.0;
        let mut count = 0.0;
        for v in &levels {
            acc += *v;
            count += 1.0;
        }
        let mean = acc / count;
        assert!((b.l_dds - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        let total = alpha.mul_add(l_enc, (1.0 - alpha) * mean);
        assert!((b.total - total).abs() <= 1e-12 * total.abs().max(1.0));
    }
}

// ---- step-level tests ----

pub(crate) fn micro_batch(
    arch: &crate::models::Arch,
    n: usize,
    image_size: usize,
    seed: u64,
) -> Vec<SamplePair<f64>> {
    let _ = arch;
    let policy = ViewPolicy::default_policy(image_size);
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, &format!("scene{i}"));
            let scene = generate_scene(&mut rng, image_size.max(16), 2).unwrap();
            let mut vrng = substream(seed, &format!("views{i}"));
            let (sa, sb) = sample_view_pair(&mut vrng, &policy);
            let to64 = |img: &Array3<f32>| {
                ArrayD::from_shape_fn(IxDyn(&[3, image_size, image_size]), |ix| {
                    img[(ix[0], ix[1], ix[2])] as f64
                })
            };
            let va = crate::augment::apply_view(&scene.image, &sa);
            let vb = crate::augment::apply_view(&scene.image, &sb);
            SamplePair {
                first: AugView { pixels: to64(&va), spec: sa, slot: 0 },
                second: AugView { pixels: to64(&vb), spec: sb, slot: 1 },
            }
        })
        .collect()
}

fn micro_cfg(decoder: DecoderKind, objective: ObjectiveKind, alpha: f64, dropout: f64) -> ValidatedConfig {
    validate_config(ExperimentConfig {
        alpha,
        dropout_p: dropout,
        decoder_kind: decoder,
        decoder_levels: if decoder == DecoderKind::Fpn { 2 } else { 1 },
        objective_kind: objective,
        prototypes_enc: 4,
        prototypes_dec: 4,
        proj_hidden: 4,
        proj_out: 3,
        image_size: 16,
        batch_size: 2,
        ..ExperimentConfig::default()
    })
    .unwrap()
}

fn micro_bundle(cfg: &ValidatedConfig) -> ModelBundle<f64> {
    let arch = crate::models::Arch {
        stage_widths: [2, 3, 4, 5],
        dec_width: 4,
        proj_hidden: cfg.proj_hidden as usize,
        proj_out: cfg.proj_out as usize,
        decoder: cfg.decoder_kind,
        levels: match cfg.decoder_kind {
            DecoderKind::None => 0,
            DecoderKind::Fcn => 1,
            DecoderKind::Fpn => cfg.decoder_levels as usize,
        },
        objective: cfg.objective_kind,
        protos_enc: cfg.prototypes_enc as usize,
        protos_dec: cfg.prototypes_dec as usize,
    };
    ModelBundle::init(arch, cfg.seed)
}

#[test]
fn alpha_one_zeroes_decoder_gradients() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 1.0, 0.25);
    let bundle = micro_bundle(&cfg);
    let batch = micro_batch(&bundle.arch, 2, 16, 5);
    let out = compute_step_loss(&bundle, &batch, &cfg, 0).unwrap();
    for (name, grad) in &out.grads {
        if name.starts_with("decoder") || name.starts_with("aux.dec") {
            assert!(
                grad.iter().all(|&v| v == 0.0),
                "nonzero gradient for `{name}` at alpha=1"
            );
        }
    }
    // encoder must receive nonzero gradient
    let enc_grad = &out.grads["encoder.s0.conv0.w"];
    assert!(enc_grad.iter().any(|&v| v != 0.0));
    assert!((out.breakdown.total - out.breakdown.l_enc).abs() < 1e-12);
}

#[test]
fn decoder_none_breakdown_is_encoder_only() {
    let cfg = micro_cfg(DecoderKind::None, ObjectiveKind::DensePair, 1.0, 0.0);
    let bundle = micro_bundle(&cfg);
    let batch = micro_batch(&bundle.arch, 2, 16, 6);
    let out = compute_step_loss(&bundle, &batch, &cfg, 0).unwrap();
    assert!(out.breakdown.l_dec_levels.is_empty());
    assert_eq!(out.breakdown.total, out.breakdown.l_enc);
    assert!(out.grads.keys().all(|k| !k.starts_with("decoder")));
}

#[test]
fn step_loss_is_symmetric_under_view_swap() {
    for objective in [ObjectiveKind::DensePair, ObjectiveKind::Prototype] {
        let cfg = micro_cfg(DecoderKind::Fpn, objective, 0.4, 0.5);
        let bundle = micro_bundle(&cfg);
        let batch = micro_batch(&bundle.arch, 2, 16, 7);
        let swapped: Vec<SamplePair<f64>> = batch
            .iter()
            .map(|p| SamplePair { first: p.second.clone(), second: p.first.clone() })
            .collect();
        let a = compute_step_loss(&bundle, &batch, &cfg, 3).unwrap();
        let b = compute_step_loss(&bundle, &swapped, &cfg, 3).unwrap();
        let rel = (a.breakdown.total - b.breakdown.total).abs()
            / a.breakdown.total.abs().max(1e-12);
        assert!(rel < 1e-9, "symmetry violated: rel {rel}");
        let rel_enc =
            (a.breakdown.l_enc - b.breakdown.l_enc).abs() / a.breakdown.l_enc.abs().max(1e-12);
        assert!(rel_enc < 1e-9);
    }
}

#[test]
fn teacher_perturbation_changes_loss_but_never_gets_gradients() {
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::Prototype, 0.5, 0.0);
    let mut bundle = micro_bundle(&cfg);
    let batch = micro_batch(&bundle.arch, 2, 16, 8);
    let base = compute_step_loss(&bundle, &batch, &cfg, 0).unwrap();
    // gradient keys are student parameters or prototype banks only
    for key in base.grads.keys() {
        assert!(
            bundle.student.params.contains_key(key) || key.starts_with("proto."),
            "unexpected gradient entry `{key}`"
        );
    }
    // perturbing a teacher tensor changes the loss value
    bundle
        .teacher
        .params
        .get_mut("encoder.s0.conv0.w")
        .unwrap()
        .mapv_inplace(|v| v + 0.05);
    let perturbed = compute_step_loss(&bundle, &batch, &cfg, 0).unwrap();
    assert!((perturbed.breakdown.total - base.breakdown.total).abs() > 1e-12);
}

#[test]
fn l_enc_is_invariant_to_alpha_and_dropout() {
    // value: any (alpha, dropout) combination leaves l_enc unchanged because
    // the encoder-loss branch never sees dropped features and alpha only
    // weights the combination
    let reference = {
        let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 1.0, 0.0);
        let bundle = micro_bundle(&cfg);
        let batch = micro_batch(&bundle.arch, 2, 16, 9);
        compute_step_loss(&bundle, &batch, &cfg, 2).unwrap()
    };
    for (alpha, dropout) in [(0.0, 0.5), (0.5, 0.25), (1.0, 0.5), (0.3, 0.0)] {
        let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, alpha, dropout);
        let bundle = micro_bundle(&cfg);
        let batch = micro_batch(&bundle.arch, 2, 16, 9);
        let out = compute_step_loss(&bundle, &batch, &cfg, 2).unwrap();
        let rel = (out.breakdown.l_enc - reference.breakdown.l_enc).abs()
            / reference.breakdown.l_enc.abs().max(1e-12);
        assert!(rel <= 1e-12, "l_enc moved at alpha={alpha} dropout={dropout}: rel {rel}");
    }
    // gradient: with alpha=1 the total IS l_enc, so total gradients compare
    // l_enc gradients across dropout settings
    let g0 = {
        let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 1.0, 0.0);
        let bundle = micro_bundle(&cfg);
        let batch = micro_batch(&bundle.arch, 2, 16, 9);
        compute_step_loss(&bundle, &batch, &cfg, 2).unwrap().grads
    };
    let g5 = {
        let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 1.0, 0.5);
        let bundle = micro_bundle(&cfg);
        let batch = micro_batch(&bundle.arch, 2, 16, 9);
        compute_step_loss(&bundle, &batch, &cfg, 2).unwrap().grads
    };
    for (name, a) in &g0 {
        let b = &g5[name];
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / x.abs().max(1e-12);
            assert!(rel <= 1e-12, "gradient of `{name}` differs under dropout");
        }
    }
}

#[test]
fn decoder_losses_respond_to_dropout() {
    let cfg0 = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 0.5, 0.0);
    let cfg5 = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 0.5, 0.5);
    let bundle = micro_bundle(&cfg0);
    let batch = micro_batch(&bundle.arch, 2, 16, 10);
    let a = compute_step_loss(&bundle, &batch, &cfg0, 1).unwrap();
    let b = compute_step_loss(&bundle, &batch, &cfg5, 1).unwrap();
    let moved = a
        .breakdown
        .l_dec_levels
        .iter()
        .zip(&b.breakdown.l_dec_levels)
        .any(|(x, y)| (x - y).abs() > 1e-9);
    assert!(moved, "decoder losses identical despite dropout");
}

#[test]
fn micro_gradients_match_finite_differences_fcn_dense() {
    // one representative combination as a unit test; the acceptance suite
    // sweeps all of them
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.4, 0.0);
    let bundle = micro_bundle(&cfg);
    let batch = micro_batch(&bundle.arch, 2, 16, 11);
    let out = compute_step_loss(&bundle, &batch, &cfg, 0).unwrap();
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    let mut checked = 0;
    for (name, grad) in &out.grads {
        if name.starts_with("proto.") {
            continue;
        }
        // probe a few entries of every tensor
        let len = grad.len();
        for probe in [0usize, len / 2, len.saturating_sub(1)] {
            let mut plus = bundle.clone();
            let t = plus.student.params.get_mut(name).unwrap();
            let idx: Vec<usize> = {
                let mut rem = probe;
                t.shape()
                    .iter()
                    .rev()
                    .map(|&s| {
                        let v = rem % s;
                        rem /= s;
                        v
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect()
            };
            t[IxDyn(&idx)] += h;
            let up = compute_step_loss(&plus, &batch, &cfg, 0).unwrap().breakdown.total;
            let mut minus = bundle.clone();
            minus.student.params.get_mut(name).unwrap()[IxDyn(&idx)] -= h;
            let dn = compute_step_loss(&minus, &batch, &cfg, 0).unwrap().breakdown.total;
            let fd = (up - dn) / (2.0 * h);
            let an = grad[IxDyn(&idx)];
            if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                continue;
            }
            let rel = (fd - an).abs() / an.abs().max(fd.abs());
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked > 20, "too few probes checked");
    assert!(worst <= 1e-4, "worst relative FD error {worst}");
}

use super::*;
use crate::config::{validate_config, DecoderKind, ExperimentConfig, ObjectiveKind};
use crate::data::generate_scene;
use crate::models::Arch;
use crate::rng::substream;

fn micro_cfg(
    decoder: DecoderKind,
    objective: ObjectiveKind,
    alpha: f64,
    dropout: f64,
    epochs: u32,
    lr: f64,
) -> ValidatedConfig {
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
        epochs,
        lr,
        weight_decay: 0.0,
        ..ExperimentConfig::default()
    })
    .unwrap()
}

fn micro_arch(cfg: &ValidatedConfig) -> Arch {
    Arch {
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
    }
}

fn micro_scenes(n: usize, seed: u64) -> Vec<crate::data::ShapeScene> {
    (0..n)
        .map(|i| generate_scene(&mut substream(seed, &format!("s{i}")), 16, 2).unwrap())
        .collect()
}

#[test]
fn momentum_schedule_boundaries() {
    assert_eq!(momentum_schedule(0, 100, 0.99).unwrap(), 0.99);
    assert!((momentum_schedule(100, 100, 0.99).unwrap() - 1.0).abs() < 1e-15);
    assert!((momentum_schedule(50, 100, 0.99).unwrap() - 0.995).abs() < 1e-12);
    assert!(momentum_schedule(5, 4, 0.9).is_err());
    assert!(momentum_schedule(0, 0, 0.9).is_err());
}

#[test]
fn lr_schedule_warms_up_then_decays() {
    let base = 0.4;
    assert!((lr_schedule(0, 100, 10, base) - 0.04).abs() < 1e-12);
    assert!((lr_schedule(9, 100, 10, base) - 0.4).abs() < 1e-12);
    assert!((lr_schedule(10, 100, 10, base) - 0.4).abs() < 1e-12);
    assert!(lr_schedule(99, 100, 10, base) < 0.01);
}

#[test]
fn alpha_one_leaves_decoder_params_untouched() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 1.0, 0.25, 1, 0.1);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(2, 1);
    let mut state = TrainState::init_with_arch(cfg.clone(), arch, scenes.len());
    let before: Vec<(String, ndarray::ArrayD<f32>)> = state
        .bundle
        .student
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("decoder") || k.starts_with("aux.dec"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let batch: Vec<_> = (0..2).map(|i| super::make_pair(&scenes[i], &cfg, 0, i)).collect();
    train_step(&mut state, &batch, 0.1).unwrap();
    for (name, old) in before {
        assert_eq!(
            &state.bundle.student.params[&name], &old,
            "decoder param `{name}` changed at alpha=1 with zero weight decay"
        );
    }
}

#[test]
fn identical_runs_produce_identical_loss_sequences() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::Prototype, 0.3, 0.5, 2, 0.05);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(4, 2);
    let run = || {
        let state = TrainState::init_with_arch(cfg.clone(), arch.clone(), scenes.len());
        pretrain(
            &cfg,
            &scenes,
            PretrainOptions { resume: Some(state), ..Default::default() },
        )
        .unwrap()
        .1
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total, y.total);
        assert_eq!(x.l_enc, y.l_enc);
        assert_eq!(x.l_dec_levels, y.l_dec_levels);
    }
}

#[test]
fn overfitting_one_batch_halves_the_loss() {
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.5, 0.0, 1, 0.1);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(2, 3);
    let mut state = TrainState::init_with_arch(cfg.clone(), arch, scenes.len());
    state.total_steps = 200;
    let batch: Vec<_> = (0..2).map(|i| super::make_pair(&scenes[i], &cfg, 0, i)).collect();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let b = train_step(&mut state, &batch, 0.1).unwrap();
        first.get_or_insert(b.total);
        last = b.total;
    }
    let first = first.unwrap();
    assert!(
        last <= 0.5 * first,
        "loss did not halve on a repeated batch: first {first}, last {last}"
    );
}

#[test]
fn teacher_follows_exact_ema_recursion() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::DensePair, 0.4, 0.25, 1, 0.05);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(4, 4);
    let mut state = TrainState::init_with_arch(cfg.clone(), arch, scenes.len());
    state.total_steps = 10;
    for step in 0..10u64 {
        let batch: Vec<_> =
            (0..2).map(|i| super::make_pair(&scenes[i], &cfg, 0, i)).collect();
        let teacher_prev: Vec<(String, ndarray::ArrayD<f32>)> = state
            .bundle
            .teacher
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let m = momentum_schedule(step, 10, cfg.ema_m0).unwrap();
        train_step(&mut state, &batch, 0.05).unwrap();
        for (name, prev) in teacher_prev {
            let student = &state.bundle.student.params[&name];
            let teacher = &state.bundle.teacher.params[&name];
            for ((t, p), s) in teacher.iter().zip(prev.iter()).zip(student.iter()) {
                let expect = m * *p as f64 + (1.0 - m) * *s as f64;
                assert!(
                    (*t as f64 - expect).abs() <= 1e-7,
                    "step {step} `{name}`: teacher {t} vs recursion {expect}"
                );
            }
        }
    }
}

#[test]
fn pretrain_single_batch_single_epoch_logs_one_step() {
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.5, 0.0, 1, 0.05);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(2, 5);
    let state = TrainState::init_with_arch(cfg.clone(), arch, scenes.len());
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("loss.csv");
    let (done, rows) = pretrain(
        &cfg,
        &scenes,
        PretrainOptions {
            loss_log: Some(log_path.clone()),
            resume: Some(state),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(done.step, 1);
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), LOSS_LOG_HEADER);
    assert_eq!(lines.count(), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::Prototype, 0.0, 0.5, 1, 0.05);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(4, 6);
    let state0 = TrainState::init_with_arch(cfg.clone(), arch, scenes.len());
    let (state, _) = pretrain(
        &cfg,
        &scenes,
        PretrainOptions { resume: Some(state0), ..Default::default() },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, state.step);
    assert_eq!(loaded.epoch, state.epoch);
    for (name, t) in &state.bundle.student.params {
        assert_eq!(t, &loaded.bundle.student.params[name], "student `{name}`");
    }
    for (name, t) in &state.bundle.teacher.buffers {
        assert_eq!(t, &loaded.bundle.teacher.buffers[name], "teacher buffer `{name}`");
    }
    for (head, proto) in &state.bundle.protos {
        assert_eq!(proto.bank, loaded.bundle.protos[head].bank);
        assert_eq!(proto.center, loaded.bundle.protos[head].center);
    }
    for (name, v) in &state.optimizer.velocity {
        assert_eq!(v, &loaded.optimizer.velocity[name], "velocity `{name}`");
    }
}

#[test]
fn corrupted_magic_is_a_version_error() {
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.5, 0.0, 1, 0.05);
    let arch = micro_arch(&cfg);
    let state = TrainState::init_with_arch(cfg, arch, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn strict_config_hash_check() {
    let cfg = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.5, 0.0, 1, 0.05);
    let arch = micro_arch(&cfg);
    let state = TrainState::init_with_arch(cfg.clone(), arch, 2);
    let other = micro_cfg(DecoderKind::Fcn, ObjectiveKind::DensePair, 0.75, 0.0, 1, 0.05);
    assert!(verify_checkpoint_config(&state, &cfg, true).unwrap().is_none());
    let warn = verify_checkpoint_config(&state, &other, false).unwrap();
    assert!(warn.is_some());
    assert!(verify_checkpoint_config(&state, &other, true).is_err());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = micro_cfg(DecoderKind::Fpn, ObjectiveKind::Prototype, 0.25, 0.5, 4, 0.05);
    let arch = micro_arch(&cfg);
    let scenes = micro_scenes(4, 7);

    // uninterrupted
    let full_state = TrainState::init_with_arch(cfg.clone(), arch.clone(), scenes.len());
    let (_, full_rows) = pretrain(
        &cfg,
        &scenes,
        PretrainOptions { resume: Some(full_state), ..Default::default() },
    )
    .unwrap();

    // first half (2 epochs), checkpoint, then resume
    let mut half_cfg = cfg.as_config().clone();
    half_cfg.epochs = 2;
    let half_cfg = validate_config(half_cfg).unwrap();
    let mut half_state = TrainState::init_with_arch(half_cfg.clone(), arch.clone(), scenes.len());
    // keep the full-run schedule so lr/momentum curves match
    half_state.total_steps = (scenes.len().div_ceil(cfg.batch_size as usize) * 4) as u64;
    let (half_done, half_rows) = pretrain(
        &half_cfg,
        &scenes,
        PretrainOptions { resume: Some(half_state), ..Default::default() },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&half_done, &path).unwrap();

    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.cfg = cfg.clone();
    let (_, tail_rows) = pretrain(
        &cfg,
        &scenes,
        PretrainOptions { resume: Some(resumed), ..Default::default() },
    )
    .unwrap();

    let stitched: Vec<f64> =
        half_rows.iter().chain(&tail_rows).map(|b| b.total).collect();
    let full: Vec<f64> = full_rows.iter().map(|b| b.total).collect();
    assert_eq!(stitched, full);
}

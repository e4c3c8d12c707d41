//! Interactive browser demo built on the core crate. Three operations are
//! exposed to the page: the synthetic scene sampler, the two-view
//! correspondence explorer, and a live micro-scale pre-training run that
//! plots the loss components.
//!
//! Every export is a pure function of its arguments, so the page needs no
//! state beyond its sliders.

use decon_core::augment::{apply_view, correspondence_grid, sample_view_pair, ViewPolicy};
use decon_core::config::{validate_config, DecoderKind, ExperimentConfig, ObjectiveKind};
use decon_core::data::generate_scene;
use decon_core::models::Arch;
use decon_core::objective::{AugView, SamplePair};
use decon_core::rng::{substream, substream_indexed};
use decon_core::trainer::{lr_schedule, train_step, TrainState};
use decon_core::ndarray::{Array3, IxDyn};
use wasm_bindgen::prelude::wasm_bindgen;

fn rgb_to_rgba(image: &Array3<f32>) -> Vec<u8> {
    let (_, h, w) = image.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

const MASK_COLORS: [[u8; 3]; 4] = [[30, 30, 30], [231, 76, 60], [46, 134, 222], [241, 196, 15]];

/// RGBA pixels of a generated scene (size x size x 4, row-major).
#[wasm_bindgen]
pub fn scene_image(seed: u32, size: u32, n_shapes: u32) -> Vec<u8> {
    let size = size.clamp(16, 256) as usize;
    let n_shapes = n_shapes.min(8) as usize;
    let mut rng = substream(seed as u64, "demo-scene");
    let scene = generate_scene(&mut rng, size, n_shapes).expect("bounds clamped");
    rgb_to_rgba(&scene.image)
}

/// RGBA rendering of the class mask of the same scene.
#[wasm_bindgen]
pub fn scene_mask(seed: u32, size: u32, n_shapes: u32) -> Vec<u8> {
    let size = size.clamp(16, 256) as usize;
    let n_shapes = n_shapes.min(8) as usize;
    let mut rng = substream(seed as u64, "demo-scene");
    let scene = generate_scene(&mut rng, size, n_shapes).expect("bounds clamped");
    let (h, w) = scene.mask.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let c = MASK_COLORS[(scene.mask[(y, x)] as usize).min(3)];
            out.extend_from_slice(&c);
            out.push(255);
        }
    }
    out
}

fn demo_policy(scale_min_pct: u32, out_size: usize) -> ViewPolicy {
    let lo = (scale_min_pct.clamp(10, 100) as f64) / 100.0;
    ViewPolicy {
        scale_range: (lo, 1.0),
        ..ViewPolicy::default_policy(out_size)
    }
}

/// One augmented view of the scene (`which` = 0 or 1), as RGBA pixels.
#[wasm_bindgen]
pub fn view_image(
    scene_seed: u32,
    view_seed: u32,
    which: u32,
    scale_min_pct: u32,
    out_size: u32,
) -> Vec<u8> {
    let out_size = out_size.clamp(16, 256) as usize;
    let mut rng = substream(scene_seed as u64, "demo-scene");
    let scene = generate_scene(&mut rng, 64, 3).expect("fixed bounds");
    let policy = demo_policy(scale_min_pct, out_size);
    let mut vrng = substream_indexed(view_seed as u64, "demo-views", 0);
    let (spec_a, spec_b) = sample_view_pair(&mut vrng, &policy);
    let spec = if which == 0 { spec_a } else { spec_b };
    rgb_to_rgba(&apply_view(&scene.image, &spec))
}

/// Matched cell pairs between the two views at the given grid, as JSON:
/// `{"grid":G,"pairs":[{"a":[r,c],"b":[r,c]},...]}`.
#[wasm_bindgen]
pub fn view_matches(view_seed: u32, scale_min_pct: u32, grid: u32) -> String {
    let grid = grid.clamp(1, 16) as usize;
    let policy = demo_policy(scale_min_pct, 64);
    let mut vrng = substream_indexed(view_seed as u64, "demo-views", 0);
    let (spec_a, spec_b) = sample_view_pair(&mut vrng, &policy);
    let matches = correspondence_grid(&spec_a, &spec_b, grid);
    let pairs: Vec<serde_json::Value> = matches
        .pairs
        .iter()
        .map(|((ra, ca), (rb, cb))| serde_json::json!({"a": [ra, ca], "b": [rb, cb]}))
        .collect();
    serde_json::json!({"grid": grid, "pairs": pairs}).to_string()
}

/// Runs a micro-scale pre-training for `steps` steps and returns the loss
/// trajectory as JSON rows of {step, l_enc, l_dds, total}. The run uses the
/// tiny gradient-check architecture so it stays interactive.
#[wasm_bindgen]
pub fn train_curve(
    alpha_pct: u32,
    dropout_pct: u32,
    decoder: &str,
    objective: &str,
    steps: u32,
    seed: u32,
) -> String {
    let alpha = (alpha_pct.min(100) as f64) / 100.0;
    let dropout_p = (dropout_pct.min(99) as f64) / 100.0;
    let decoder_kind = match decoder {
        "none" => DecoderKind::None,
        "fcn" => DecoderKind::Fcn,
        _ => DecoderKind::Fpn,
    };
    let objective_kind =
        if objective == "dense_pair" { ObjectiveKind::DensePair } else { ObjectiveKind::Prototype };
    let alpha = if decoder_kind == DecoderKind::None { 1.0 } else { alpha };
    let steps = steps.clamp(1, 300);

    let cfg = match validate_config(ExperimentConfig {
        alpha,
        dropout_p,
        decoder_kind,
        decoder_levels: if decoder_kind == DecoderKind::Fpn { 2 } else { 1 },
        objective_kind,
        prototypes_enc: 4,
        prototypes_dec: 4,
        proj_hidden: 4,
        proj_out: 3,
        image_size: 16,
        batch_size: 4,
        epochs: 1,
        lr: 0.1,
        weight_decay: 0.0,
        seed: seed as u64,
        ..ExperimentConfig::default()
    }) {
        Ok(cfg) => cfg,
        Err(e) => return serde_json::json!({"error": e.to_string()}).to_string(),
    };
    let arch = Arch::micro(decoder_kind, objective_kind, 2);
    let mut state = TrainState::init_with_arch(cfg.clone(), arch, 4);
    state.total_steps = steps as u64;

    let scenes: Vec<_> = (0..4)
        .map(|i| {
            let mut rng = substream_indexed(seed as u64, "demo-train-scene", i);
            generate_scene(&mut rng, 16, 2).expect("fixed bounds")
        })
        .collect();
    let policy = ViewPolicy::default_policy(16);
    let to_dyn = |img: Array3<f32>| {
        let (c, h, w) = img.dim();
        img.into_shape_with_order(IxDyn(&[c, h, w])).expect("3d")
    };

    let mut rows = Vec::new();
    for step in 0..steps as u64 {
        let batch: Vec<SamplePair<f32>> = (0..4)
            .map(|i| {
                let mut vrng = substream_indexed(cfg.seed, "augment", (step << 8) | i);
                let (sa, sb) = sample_view_pair(&mut vrng, &policy);
                SamplePair {
                    first: AugView {
                        pixels: to_dyn(apply_view(&scenes[i as usize].image, &sa)),
                        spec: sa,
                        slot: 0,
                    },
                    second: AugView {
                        pixels: to_dyn(apply_view(&scenes[i as usize].image, &sb)),
                        spec: sb,
                        slot: 1,
                    },
                }
            })
            .collect();
        let lr = lr_schedule(step, steps as u64, (steps as u64 / 10).max(1), cfg.lr);
        match train_step(&mut state, &batch, lr) {
            Ok(b) => rows.push(serde_json::json!({
                "step": b.step,
                "l_enc": b.l_enc,
                "l_dds": b.l_dds,
                "total": b.total,
            })),
            Err(e) => return serde_json::json!({"error": e.to_string()}).to_string(),
        }
    }
    serde_json::json!({"rows": rows}).to_string()
}

//! Downstream evaluation: segmentation fine-tuning under the three transfer
//! modes, the mIoU metric, and slot-mask visualization.

use crate::config::DecoderKind;
use crate::data::{split_indices, ShapeScene, NUM_CLASSES};
use crate::error::{DeconError, Result};
use crate::models::{init_branch, Arch, BranchParams, NetExec, PrototypeState};
use crate::rng::{substream, substream_indexed};
use crate::tensor::{Graph, Scalar};
use crate::trainer::{SgdMomentum, TrainState};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Random,
    Encoder,
    EncoderDecoder,
}

impl std::fmt::Display for TransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransferMode::Random => "random",
            TransferMode::Encoder => "encoder",
            TransferMode::EncoderDecoder => "encoder_decoder",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub transfer_mode: TransferMode,
    pub seeds: Vec<u64>,
    pub per_seed_miou: Vec<f64>,
    pub miou_mean: f64,
    /// Sample standard deviation (n-1); None with fewer than 2 seeds.
    pub miou_std: Option<f64>,
}

/// Per-class IoU averaged over classes with nonzero union.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(DeconError::Eval(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.is_empty() {
        return Err(DeconError::Eval("empty masks".into()));
    }
    let mut confusion = vec![0u64; num_classes * num_classes];
    for (p, g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (*p as usize, *g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(DeconError::Eval(format!(
                "class id out of range: pred {p} gt {g} vs {num_classes}"
            )));
        }
        confusion[g * num_classes + p] += 1;
    }
    miou_from_confusion(&confusion, num_classes)
}

fn miou_from_confusion(confusion: &[u64], num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c * num_classes + c];
        let fn_: u64 = (0..num_classes).map(|p| confusion[c * num_classes + p]).sum::<u64>() - tp;
        let fp: u64 = (0..num_classes).map(|g| confusion[g * num_classes + c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        if union == 0 {
            continue;
        }
        total += tp as f64 / union as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(DeconError::Eval("all classes have zero union".into()));
    }
    Ok(total / counted as f64)
}

/// Most-frequent-prototype mask: per-position argmax over prototype dot
/// products (ties to the lowest index), reference = most frequent assignment
/// (ties to the lowest index), assignments upsampled nearest to `image_size`.
/// Returns (reference_prototype, binary mask).
pub fn slot_masks<F: Scalar>(
    feature_map: &ArrayD<F>,
    protos: &PrototypeState<F>,
    image_size: usize,
) -> Result<(usize, Array2<bool>)> {
    let shape = feature_map.shape().to_vec();
    if shape.len() != 3 {
        return Err(DeconError::Eval(format!("expected (D,H,W) feature map, got {shape:?}")));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if d != protos.bank.ncols() {
        return Err(DeconError::Eval(format!(
            "feature dim {d} != prototype dim {}",
            protos.bank.ncols()
        )));
    }
    if image_size % h != 0 || image_size % w != 0 {
        return Err(DeconError::Eval(format!(
            "image size {image_size} not a multiple of grid {h}x{w}"
        )));
    }
    let k = protos.bank.nrows();
    let mut assign = Array2::<usize>::zeros((h, w));
    let mut counts = vec![0usize; k];
    for i in 0..h {
        for j in 0..w {
            let mut best = 0usize;
            let mut best_sim = F::neg_infinity();
            for ki in 0..k {
                let mut dot = F::zero();
                for c in 0..d {
                    dot = dot + protos.bank[(ki, c)] * feature_map[[c, i, j]];
                }
                if dot > best_sim {
                    best_sim = dot;
                    best = ki;
                }
            }
            assign[(i, j)] = best;
            counts[best] += 1;
        }
    }
    let reference = counts
        .iter()
        .enumerate()
        .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("k >= 1");
    let fy = image_size / h;
    let fx = image_size / w;
    let mut mask = Array2::<bool>::from_elem((image_size, image_size), false);
    for i in 0..image_size {
        for j in 0..image_size {
            mask[(i, j)] = assign[(i / fy, j / fx)] == reference;
        }
    }
    Ok((reference, mask))
}

/// Fine-tuning budget (declared, not tuned per run).
#[derive(Clone, Copy, Debug)]
pub struct FineTuneOptions {
    pub steps: u32,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions { steps: 300, lr: 0.01, batch_size: 16 }
    }
}

/// Downstream segmentation net: encoder -> FCN decoder -> 1x1 class head.
fn seg_arch(base: &Arch) -> Arch {
    Arch {
        decoder: DecoderKind::Fcn,
        levels: 1,
        ..base.clone()
    }
}

fn fresh_seg_branch(arch: &Arch, seed: u64) -> BranchParams<f32> {
    let mut branch = init_branch::<f32>(arch, seed);
    branch.params.retain(|k, _| !k.starts_with("aux."));
    let fan_in = arch.dec_width;
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = substream(seed, "init:seghead.w");
    branch.params.insert(
        "seghead.w".into(),
        ArrayD::from_shape_simple_fn(IxDyn(&[NUM_CLASSES, arch.dec_width, 1, 1]), || {
            rng.gen_range(-bound..bound) as f32
        }),
    );
    branch
        .params
        .insert("seghead.b".into(), ArrayD::zeros(IxDyn(&[NUM_CLASSES])));
    branch
}

fn transfer_params(
    dst: &mut BranchParams<f32>,
    src: &BranchParams<f32>,
    include_decoder: bool,
) {
    for (name, t) in &src.params {
        let take = name.starts_with("encoder.") || (include_decoder && name.starts_with("decoder."));
        if take {
            dst.params.insert(name.clone(), t.clone());
        }
    }
    for (name, t) in &src.buffers {
        let take = name.starts_with("encoder.") || (include_decoder && name.starts_with("decoder."));
        if take {
            dst.buffers.insert(name.clone(), t.clone());
        }
    }
}

fn stack_images(scenes: &[&ShapeScene]) -> ArrayD<f32> {
    let (c, h, w) = scenes[0].image.dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[scenes.len(), c, h, w]));
    for (i, s) in scenes.iter().enumerate() {
        out.slice_mut(ndarray::s![i, .., .., ..]).assign(&s.image);
    }
    out
}

fn stack_labels(scenes: &[&ShapeScene]) -> Array3<usize> {
    let (h, w) = scenes[0].mask.dim();
    let mut out = Array3::<usize>::zeros((scenes.len(), h, w));
    for (i, s) in scenes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[(i, y, x)] = s.mask[(y, x)] as usize;
            }
        }
    }
    out
}

fn seg_logits<'g>(
    exec: &mut NetExec<'g, f32>,
    arch: &Arch,
    x: crate::tensor::Var,
) -> crate::tensor::Var {
    let levels = exec.encoder(arch, x);
    let dec = exec.fcn(arch, levels[3]);
    let logits = exec.conv("seghead", dec, 1, 0, 1);
    exec.g.upsample_nearest(logits, 16)
}

fn fine_tune(
    branch: &mut BranchParams<f32>,
    arch: &Arch,
    train: &[&ShapeScene],
    seed: u64,
    options: &FineTuneOptions,
) -> Result<()> {
    let mut optimizer = SgdMomentum::new(0.9);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len(); // trigger reshuffle on first step
    let mut epoch = 0u64;
    for _ in 0..options.steps {
        if cursor >= order.len() {
            let mut rng = substream_indexed(seed, "ft-order", epoch);
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let take = options.batch_size.min(order.len());
        let mut batch: Vec<&ShapeScene> = Vec::with_capacity(take);
        for _ in 0..take {
            if cursor >= order.len() {
                let mut rng = substream_indexed(seed, "ft-order", epoch);
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let images = stack_images(&batch);
        let labels = stack_labels(&batch);
        let mut g = Graph::<f32>::new();
        let mut exec = NetExec::train(&mut g, branch);
        let x = exec.g.constant(images);
        let logits = seg_logits(&mut exec, arch, x);
        let param_vars = exec.param_vars().clone();
        let new_buffers = exec.new_buffers.clone();
        drop(exec);
        let loss = g.softmax_cross_entropy(logits, &labels);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(DeconError::Eval(format!("non-finite fine-tune loss {loss_val}")));
        }
        let mut grads_table = g.backward(loss);
        let mut grads = std::collections::BTreeMap::new();
        for (name, var) in &param_vars {
            if let Some(grad) = grads_table.take(*var) {
                grads.insert(name.clone(), grad);
            }
        }
        optimizer.step(&mut branch.params, &grads, options.lr, 0.0);
        for (name, buf) in new_buffers {
            branch.buffers.insert(name, buf);
        }
    }
    Ok(())
}

fn predict_masks(
    branch: &BranchParams<f32>,
    arch: &Arch,
    scenes: &[&ShapeScene],
) -> Vec<Array2<u8>> {
    let mut preds = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let images = stack_images(chunk);
        let mut g = Graph::<f32>::new();
        let mut exec = NetExec::eval(&mut g, branch);
        let x = exec.g.constant(images);
        let logits = seg_logits(&mut exec, arch, x);
        let values = g.value(logits).clone();
        let (n, k, h, w) = (
            values.shape()[0],
            values.shape()[1],
            values.shape()[2],
            values.shape()[3],
        );
        for ni in 0..n {
            let mut mask = Array2::<u8>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0usize;
                    let mut best_v = f32::NEG_INFINITY;
                    for c in 0..k {
                        let v = values[[ni, c, i, j]];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    mask[(i, j)] = best as u8;
                }
            }
            preds.push(mask);
        }
    }
    preds
}

/// Fine-tunes a segmentation net per seed and reports held-out mIoU.
/// `random` ignores the checkpoint; `encoder` transfers the pre-trained
/// encoder; `encoder_decoder` additionally requires an FCN pre-training
/// decoder matching the evaluation head.
pub fn evaluate_downstream(
    checkpoint: Option<&TrainState>,
    mode: TransferMode,
    scenes: &[ShapeScene],
    seeds: &[u64],
    options: &FineTuneOptions,
) -> Result<EvalResult> {
    if seeds.is_empty() {
        return Err(DeconError::Eval("need at least one seed".into()));
    }
    if scenes.len() < 5 {
        return Err(DeconError::Eval("dataset too small to split".into()));
    }
    let base_arch = match (mode, checkpoint) {
        (TransferMode::Random, _) => Arch::from_config(
            &crate::config::validate_config(crate::config::ExperimentConfig::default())
                .expect("default config valid"),
        ),
        (_, Some(state)) => state.bundle.arch.clone(),
        (_, None) => {
            return Err(DeconError::Eval(format!("mode {mode} requires a checkpoint")))
        }
    };
    if mode == TransferMode::EncoderDecoder {
        let state = checkpoint.expect("checked above");
        if state.bundle.arch.decoder != DecoderKind::Fcn {
            return Err(DeconError::Eval(format!(
                "encoder_decoder transfer needs an fcn pre-training decoder, checkpoint has {:?}",
                state.bundle.arch.decoder
            )));
        }
    }
    let arch = seg_arch(&base_arch);
    let (train_idx, val_idx) = split_indices(scenes.len());
    let train: Vec<&ShapeScene> = train_idx.iter().map(|&i| &scenes[i]).collect();
    let val: Vec<&ShapeScene> = val_idx.iter().map(|&i| &scenes[i]).collect();

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut branch = fresh_seg_branch(&arch, seed);
        match (mode, checkpoint) {
            (TransferMode::Random, _) => {}
            (TransferMode::Encoder, Some(state)) => {
                transfer_params(&mut branch, &state.bundle.student, false)
            }
            (TransferMode::EncoderDecoder, Some(state)) => {
                transfer_params(&mut branch, &state.bundle.student, true)
            }
            _ => unreachable!("checked above"),
        }
        fine_tune(&mut branch, &arch, &train, seed, options)?;
        let preds = predict_masks(&branch, &arch, &val);
        // one confusion matrix over the whole split
        let mut confusion = vec![0u64; NUM_CLASSES * NUM_CLASSES];
        for (pred, scene) in preds.iter().zip(&val) {
            for (p, g) in pred.iter().zip(scene.mask.iter()) {
                confusion[*g as usize * NUM_CLASSES + *p as usize] += 1;
            }
        }
        per_seed.push(miou_from_confusion(&confusion, NUM_CLASSES)?);
    }

    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let std = if per_seed.len() >= 2 {
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (per_seed.len() - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    Ok(EvalResult {
        transfer_mode: mode,
        seeds: seeds.to_vec(),
        per_seed_miou: per_seed,
        miou_mean: mean,
        miou_std: std,
    })
}

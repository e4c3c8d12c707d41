//! Contrastive losses and the weighted encoder-decoder combination.
//!
//! Two self-contained objectives are provided: `dense_pair` (cosine pairing
//! of matched positions against the teacher) and `prototype` (temperature
//! softmax grouping against a shared prototype bank with teacher centering).
//! `compute_step_loss` runs the full symmetrized student/teacher step and
//! returns gradients for the student branch and prototype banks only.

use crate::augment::{correspondence_grid, MatchSet, ViewSpec};
use crate::config::{DecoderKind, ObjectiveKind, ValidatedConfig};
use crate::error::{DeconError, Result};
use crate::models::{
    dropout_mask, Arch, ModelBundle, NetExec, ParamMap, PrototypeState,
};
use crate::rng::substream_indexed;
use crate::tensor::{fl, to_f64, Graph, Scalar, Var};
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use std::collections::BTreeMap;

/// Per-step record of every loss component.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_enc: f64,
    pub l_dec_levels: Vec<f64>,
    pub l_dds: f64,
    pub total: f64,
    pub alpha: f64,
    pub step: u64,
}

/// Weighted combination: total = alpha*l_enc + (1-alpha)*l_dds with l_dds the
/// mean over supervised decoder levels. An empty level list is the
/// decoder-free case: l_dds = 0 and alpha forced to 1.
pub fn combine_losses(l_enc: f64, l_dec_levels: &[f64], alpha: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DeconError::Train(format!("alpha {alpha} not in [0, 1]")));
    }
    let (alpha, l_dds) = if l_dec_levels.is_empty() {
        (1.0, 0.0)
    } else {
        let sum: f64 = l_dec_levels.iter().sum();
        (alpha, sum / l_dec_levels.len() as f64)
    };
    let total = alpha * l_enc + (1.0 - alpha) * l_dds;
    Ok(LossBreakdown {
        l_enc,
        l_dec_levels: l_dec_levels.to_vec(),
        l_dds,
        total,
        alpha,
        step: 0,
    })
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality().expect("expected 4-d map")
}

fn check_map_grid<F: Scalar>(map: &ArrayD<F>, matches: &MatchSet, what: &str) -> Result<()> {
    let s = map.shape();
    if s.len() != 4 || s[2] != matches.grid || s[3] != matches.grid {
        return Err(DeconError::Shape(format!(
            "{what}: map shape {s:?} does not match grid {}",
            matches.grid
        )));
    }
    Ok(())
}

/// BYOL-style pairing: mean over matched pairs of 2 - 2*<s_a, t_b> for
/// unit-normalized positions. Both maps are single-sample (1,D,G,G).
/// Empty matches yield 0.
pub fn dense_pair_loss<F: Scalar>(
    student_pred: &ArrayD<F>,
    teacher_proj: &ArrayD<F>,
    matches: &MatchSet,
) -> Result<f64> {
    check_map_grid(student_pred, matches, "dense_pair student")?;
    check_map_grid(teacher_proj, matches, "dense_pair teacher")?;
    if student_pred.shape()[1] != teacher_proj.shape()[1] {
        return Err(DeconError::Shape("dense_pair: channel mismatch".into()));
    }
    if matches.is_empty() {
        return Ok(0.0);
    }
    let s = as4(student_pred);
    let t = as4(teacher_proj);
    let d = s.dim().1;
    let mut total = 0.0f64;
    for ((ra, ca), (rb, cb)) in &matches.pairs {
        let mut dot = F::zero();
        for c in 0..d {
            dot = dot + s[(0, c, *ra, *ca)] * t[(0, c, *rb, *cb)];
        }
        total += 2.0 - 2.0 * to_f64(dot);
    }
    Ok(total / matches.pairs.len() as f64)
}

/// Teacher assignment distribution at one position: softmax of the bank
/// similarities of (t - center*[center_on]) at the teacher temperature.
fn teacher_probs<F: Scalar>(
    bank: &Array2<F>,
    t_vec: &[F],
    center: &Array1<F>,
    center_on: bool,
    temp_teacher: f64,
) -> Vec<F> {
    let k = bank.nrows();
    let d = bank.ncols();
    let inv_t = fl::<F>(1.0 / temp_teacher);
    let mut logits = Vec::with_capacity(k);
    let mut maxv = F::neg_infinity();
    for ki in 0..k {
        let mut dot = F::zero();
        for di in 0..d {
            let tv = if center_on { t_vec[di] - center[di] } else { t_vec[di] };
            dot = dot + bank[(ki, di)] * tv;
        }
        let z = dot * inv_t;
        maxv = maxv.max(z);
        logits.push(z);
    }
    let mut sum = F::zero();
    for z in logits.iter_mut() {
        *z = (*z - maxv).exp();
        sum = sum + *z;
    }
    for z in logits.iter_mut() {
        *z = *z / sum;
    }
    logits
}

fn log_softmax<F: Scalar>(logits: &mut [F]) {
    let mut maxv = F::neg_infinity();
    for z in logits.iter() {
        maxv = maxv.max(*z);
    }
    let mut sum = F::zero();
    for z in logits.iter() {
        sum = sum + (*z - maxv).exp();
    }
    let lse = maxv + sum.ln();
    for z in logits.iter_mut() {
        *z = *z - lse;
    }
}

/// Cross-entropy grouping loss at matched positions; the teacher side carries
/// no gradient. Maps are single-sample (1,D,G,G).
pub fn prototype_loss<F: Scalar>(
    student_proj: &ArrayD<F>,
    teacher_proj: &ArrayD<F>,
    protos: &PrototypeState<F>,
    matches: &MatchSet,
    temp_student: f64,
    temp_teacher: f64,
    center_on: bool,
) -> Result<f64> {
    if protos.bank.nrows() < 2 {
        return Err(DeconError::Train(format!(
            "prototype loss needs K >= 2, got {}",
            protos.bank.nrows()
        )));
    }
    if !(temp_student > 0.0) || !(temp_teacher > 0.0) {
        return Err(DeconError::Train("temperatures must be positive".into()));
    }
    check_map_grid(student_proj, matches, "prototype student")?;
    check_map_grid(teacher_proj, matches, "prototype teacher")?;
    if matches.is_empty() {
        return Ok(0.0);
    }
    let s = as4(student_proj);
    let t = as4(teacher_proj);
    let d = s.dim().1;
    let k = protos.bank.nrows();
    let inv_s = fl::<F>(1.0 / temp_student);
    let mut total = 0.0f64;
    for ((ra, ca), (rb, cb)) in &matches.pairs {
        let t_vec: Vec<F> = (0..d).map(|c| t[(0, c, *rb, *cb)]).collect();
        let q = teacher_probs(&protos.bank, &t_vec, &protos.center, center_on, temp_teacher);
        let mut z: Vec<F> = (0..k)
            .map(|ki| {
                let mut dot = F::zero();
                for c in 0..d {
                    dot = dot + protos.bank[(ki, c)] * s[(0, c, *ra, *ca)];
                }
                dot * inv_s
            })
            .collect();
        log_softmax(&mut z);
        let mut ce = F::zero();
        for ki in 0..k {
            ce = ce - q[ki] * z[ki];
        }
        total += to_f64(ce);
    }
    Ok(total / matches.pairs.len() as f64)
}

/// EMA update of the prototype center: center' = c_m*center + (1-c_m)*mean.
pub fn update_center<F: Scalar>(
    state: &mut PrototypeState<F>,
    batch_mean: &Array1<F>,
    center_momentum: f64,
) {
    let m = fl::<F>(center_momentum);
    let one_minus = F::one() - m;
    for (c, b) in state.center.iter_mut().zip(batch_mean.iter()) {
        *c = m * *c + one_minus * *b;
    }
}

// ---- batched graph losses used by compute_step_loss ----

/// Dense pairing over a batch: per-sample mean over matches, then batch mean.
fn dense_pair_graph<F: Scalar>(
    g: &mut Graph<F>,
    student: Var,
    teacher: Array4<F>,
    matches: Vec<MatchSet>,
    empty_counter: &mut u64,
) -> Var {
    let sv = g.value(student);
    let (n, d, _, _) = as4(sv).dim();
    debug_assert_eq!(n, matches.len());
    let s = as4(sv);
    let mut total = 0.0f64;
    for (ni, m) in matches.iter().enumerate() {
        if m.is_empty() {
            *empty_counter += 1;
            continue;
        }
        let mut per = 0.0f64;
        for ((ra, ca), (rb, cb)) in &m.pairs {
            let mut dot = F::zero();
            for c in 0..d {
                dot = dot + s[(ni, c, *ra, *ca)] * teacher[(ni, c, *rb, *cb)];
            }
            per += 2.0 - 2.0 * to_f64(dot);
        }
        total += per / m.pairs.len() as f64;
    }
    let value = ArrayD::from_elem(IxDyn(&[]), fl::<F>(total / n as f64));
    let shape = sv.shape().to_vec();
    g.push(value, &[student], move |gy| {
        let gscale = *gy.iter().next().expect("scalar") / fl::<F>(n as f64);
        let mut gs = ArrayD::<F>::zeros(IxDyn(&shape));
        {
            let mut gs4 = gs.view_mut().into_dimensionality::<ndarray::Ix4>().expect("4d");
            for (ni, m) in matches.iter().enumerate() {
                if m.is_empty() {
                    continue;
                }
                let w = gscale * fl::<F>(-2.0 / m.pairs.len() as f64);
                for ((ra, ca), (rb, cb)) in &m.pairs {
                    for c in 0..d {
                        gs4[(ni, c, *ra, *ca)] =
                            gs4[(ni, c, *ra, *ca)] + w * teacher[(ni, c, *rb, *cb)];
                    }
                }
            }
        }
        vec![(student, gs)]
    })
}

/// Flattens an (N,D,H,W) map into a position-major (N*H*W, D) matrix.
fn positions_matrix<F: Scalar>(map: ndarray::ArrayView4<'_, F>) -> Array2<F> {
    let (n, d, h, w) = map.dim();
    let perm = map.permuted_axes([0, 2, 3, 1]); // (N,H,W,D)
    let owned = perm.as_standard_layout().into_owned();
    owned.into_shape_with_order((n * h * w, d)).expect("positions reshape")
}

/// Inverse of `positions_matrix`.
fn positions_to_map<F: Scalar>(mat: Array2<F>, n: usize, d: usize, h: usize, w: usize) -> ArrayD<F> {
    let a = mat.into_shape_with_order((n, h, w, d)).expect("map reshape");
    let perm = a.permuted_axes([0, 3, 1, 2]); // (N,D,H,W)
    perm.as_standard_layout().into_owned().into_dyn()
}

/// Prototype grouping over a batch; gradients flow to the student map and the
/// bank. Similarities run as position-major GEMMs against the bank; the
/// teacher side is a constant.
#[allow(clippy::too_many_arguments)]
fn prototype_graph<F: Scalar>(
    g: &mut Graph<F>,
    student: Var,
    bank: Var,
    teacher: Array4<F>,
    center: Array1<F>,
    matches: Vec<MatchSet>,
    temp_student: f64,
    temp_teacher: f64,
    center_on: bool,
    empty_counter: &mut u64,
) -> Var {
    let bank_arr: Array2<F> = g
        .value(bank)
        .view()
        .into_dimensionality()
        .expect("bank 2d")
        .to_owned();
    let (n, d, h, w) = as4(g.value(student)).dim();
    let k = bank_arr.nrows();
    let p_total = n * h * w;
    let smat = positions_matrix(as4(g.value(student)));
    let tmat = positions_matrix(teacher.view());
    let sims_s = smat.dot(&bank_arr.t()); // (P, K)
    let mut sims_t = tmat.dot(&bank_arr.t());
    if center_on {
        let center_sims = bank_arr.dot(&center); // (K)
        for mut row in sims_t.rows_mut() {
            for (v, c) in row.iter_mut().zip(center_sims.iter()) {
                *v = *v - *c;
            }
        }
    }
    let inv_s = fl::<F>(1.0 / temp_student);
    let inv_t = fl::<F>(1.0 / temp_teacher);

    // forward CE; the pre-scaled student-logit gradients (p - q) land in a
    // dense (P, K) matrix so the backward pass is two GEMMs
    let mut gz = Array2::<F>::zeros((p_total, k));
    let mut total = 0.0f64;
    let mut q = vec![F::zero(); k];
    let mut z = vec![F::zero(); k];
    for (ni, m) in matches.iter().enumerate() {
        if m.is_empty() {
            *empty_counter += 1;
            continue;
        }
        let wm = fl::<F>(1.0 / m.pairs.len() as f64);
        let mut per = 0.0f64;
        for ((ra, ca), (rb, cb)) in &m.pairs {
            let ps = (ni * h + ra) * w + ca;
            let pt = (ni * h + rb) * w + cb;
            for (dst, v) in q.iter_mut().zip(sims_t.row(pt)) {
                *dst = *v * inv_t;
            }
            log_softmax(&mut q);
            for v in q.iter_mut() {
                *v = v.exp();
            }
            for (dst, v) in z.iter_mut().zip(sims_s.row(ps)) {
                *dst = *v * inv_s;
            }
            log_softmax(&mut z);
            let mut ce = F::zero();
            for ki in 0..k {
                ce = ce - q[ki] * z[ki];
            }
            per += to_f64(ce);
            let mut gz_row = gz.row_mut(ps);
            for ki in 0..k {
                gz_row[ki] = (z[ki].exp() - q[ki]) * inv_s * wm;
            }
        }
        total += per / m.pairs.len() as f64;
    }
    let value = ArrayD::from_elem(IxDyn(&[]), fl::<F>(total / n as f64));
    g.push(value, &[student, bank], move |gy| {
        let gscale = *gy.iter().next().expect("scalar") / fl::<F>(n as f64);
        let mut gs_mat = gz.dot(&bank_arr); // (P, D)
        gs_mat.mapv_inplace(|v| v * gscale);
        let mut gb = gz.t().dot(&smat); // (K, D)
        gb.mapv_inplace(|v| v * gscale);
        let gs = positions_to_map(gs_mat, n, d, h, w);
        vec![(student, gs), (bank, gb.into_dyn())]
    })
}

// ---- the full symmetrized step ----

/// One augmented view plus its geometry. `slot` identifies the view within
/// its pair (dropout masks key on it, so swapping the pair order does not
/// change which mask a view receives).
#[derive(Clone, Debug)]
pub struct AugView<F: Scalar> {
    pub pixels: ArrayD<F>, // (3,S,S)
    pub spec: ViewSpec,
    pub slot: u8,
}

#[derive(Clone, Debug)]
pub struct SamplePair<F: Scalar> {
    pub first: AugView<F>,
    pub second: AugView<F>,
}

#[derive(Clone, Debug, Default)]
pub struct StepDiagnostics {
    pub empty_match_levels: u64,
}

pub struct StepOutput<F: Scalar> {
    pub breakdown: LossBreakdown,
    /// Gradients for student parameters plus `proto.<head>.bank` entries.
    pub grads: BTreeMap<String, ArrayD<F>>,
    /// Running-stat updates for the student branch, to be committed by the
    /// trainer after the optimizer step.
    pub new_student_buffers: ParamMap<F>,
    /// Mean teacher projection per head (both views pooled), for the
    /// prototype-center update.
    pub teacher_head_means: BTreeMap<String, Array1<F>>,
    pub diagnostics: StepDiagnostics,
}

/// Feature-grid side length of a supervised level.
fn level_grid(arch: &Arch, image_size: usize, level: usize) -> usize {
    match arch.decoder {
        DecoderKind::Fcn => image_size / 16,
        DecoderKind::Fpn => image_size / (16 >> level),
        DecoderKind::None => unreachable!("no decoder levels"),
    }
}

fn stack_views<F: Scalar>(batch: &[SamplePair<F>], second: bool) -> ArrayD<F> {
    let first_shape = batch[0].first.pixels.shape().to_vec();
    let (c, h, w) = (first_shape[0], first_shape[1], first_shape[2]);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[batch.len(), c, h, w]));
    for (i, pair) in batch.iter().enumerate() {
        let v = if second { &pair.second.pixels } else { &pair.first.pixels };
        out.slice_mut(ndarray::s![i, .., .., ..])
            .assign(&v.view().into_dimensionality::<ndarray::Ix3>().expect("3d view"));
    }
    out
}

struct TeacherMaps<F: Scalar> {
    enc: Array4<F>,
    dec: Vec<Array4<F>>,
}

/// Teacher forward pass in eval mode: no dropout, no gradients.
fn teacher_forward<F: Scalar>(bundle: &ModelBundle<F>, images: &ArrayD<F>) -> TeacherMaps<F> {
    let arch = &bundle.arch;
    let mut g = Graph::<F>::new();
    let x = g.constant(images.clone());
    let mut exec = NetExec::eval(&mut g, &bundle.teacher);
    let levels = exec.encoder(arch, x);
    let bottleneck = levels[3];
    let enc_map = exec.aux_head(arch, "enc", bottleneck, false);
    let mut dec_maps = Vec::new();
    match arch.decoder {
        DecoderKind::None => {}
        DecoderKind::Fcn => {
            let out = exec.fcn(arch, bottleneck);
            let m = exec.aux_head(arch, "dec0", out, false);
            dec_maps.push(m);
        }
        DecoderKind::Fpn => {
            let outs = exec.fpn(arch, &levels);
            for (j, out) in outs.into_iter().enumerate().take(arch.levels) {
                let m = exec.aux_head(arch, &format!("dec{j}"), out, false);
                dec_maps.push(m);
            }
        }
    }
    let enc = as4(g.value(enc_map)).to_owned();
    let dec = dec_maps.iter().map(|v| as4(g.value(*v)).to_owned()).collect();
    TeacherMaps { enc, dec }
}

/// Student forward on one view batch inside the shared graph. Dropout masks
/// are keyed by (step, slot) so they are a function of the view identity.
fn student_forward<F: Scalar>(
    exec: &mut NetExec<'_, F>,
    arch: &Arch,
    images: &ArrayD<F>,
    dropout_p: f64,
    seed: u64,
    step: u64,
    slot: u8,
) -> (Var, Vec<Var>) {
    let x = exec.g.constant(images.clone());
    let levels = exec.encoder(arch, x);
    let bottleneck = levels[3];
    let enc_map = exec.aux_head(arch, "enc", bottleneck, arch.uses_predictor());

    let mut dec_maps = Vec::new();
    if arch.decoder != DecoderKind::None {
        let n = images.shape()[0];
        let mut rng = substream_indexed(seed, "dropout", step * 2 + slot as u64);
        // one mask per encoder level, drawn in level order
        let masks: Vec<Array2<F>> = (0..4)
            .map(|i| {
                if dropout_p > 0.0 {
                    dropout_mask::<F>(&mut rng, n, arch.stage_widths[i], dropout_p)
                } else {
                    Array2::from_elem((n, arch.stage_widths[i]), F::one())
                }
            })
            .collect();
        match arch.decoder {
            DecoderKind::Fcn => {
                let dropped = exec.g.scale_channels(bottleneck, masks[3].clone());
                let out = exec.fcn(arch, dropped);
                dec_maps.push(exec.aux_head(arch, "dec0", out, arch.uses_predictor()));
            }
            DecoderKind::Fpn => {
                let dropped: Vec<Var> = (0..4)
                    .map(|i| exec.g.scale_channels(levels[i], masks[i].clone()))
                    .collect();
                let outs = exec.fpn(arch, &dropped);
                for (j, out) in outs.into_iter().enumerate().take(arch.levels) {
                    dec_maps.push(exec.aux_head(arch, &format!("dec{j}"), out, arch.uses_predictor()));
                }
            }
            DecoderKind::None => unreachable!(),
        }
    }
    (enc_map, dec_maps)
}

/// Mean projection vector over both teacher view batches, per head.
fn head_mean<F: Scalar>(maps: [&Array4<F>; 2]) -> Array1<F> {
    let d = maps[0].dim().1;
    let mut mean = Array1::<F>::zeros(d);
    let mut count = F::zero();
    for m in maps {
        let (n, _, h, w) = m.dim();
        for c in 0..d {
            mean[c] = mean[c] + m.slice(ndarray::s![.., c, .., ..]).sum();
        }
        count = count + fl::<F>((n * h * w) as f64);
    }
    mean.mapv_inplace(|v| v / count);
    mean
}

/// Symmetrized training step loss: student(view1) vs teacher(view2) and
/// student(view2) vs teacher(view1), averaged. Pure: the caller commits the
/// returned buffer updates, gradients, and center means.
pub fn compute_step_loss<F: Scalar>(
    bundle: &ModelBundle<F>,
    batch: &[SamplePair<F>],
    cfg: &ValidatedConfig,
    step: u64,
) -> Result<StepOutput<F>> {
    if batch.is_empty() {
        return Err(DeconError::Train("empty batch".into()));
    }
    let arch = &bundle.arch;
    let image_size = batch[0].first.pixels.shape()[1];
    let x_first = stack_views(batch, false);
    let x_second = stack_views(batch, true);

    let t_first = teacher_forward(bundle, &x_first);
    let t_second = teacher_forward(bundle, &x_second);

    let mut g = Graph::<F>::new();
    let mut exec = NetExec::train(&mut g, &bundle.student);
    let slot_first = batch[0].first.slot;
    let slot_second = batch[0].second.slot;
    let (s_enc_first, s_dec_first) = student_forward(
        &mut exec, arch, &x_first, cfg.dropout_p, cfg.seed, step, slot_first,
    );
    let (s_enc_second, s_dec_second) = student_forward(
        &mut exec, arch, &x_second, cfg.dropout_p, cfg.seed, step, slot_second,
    );
    let param_vars = exec.param_vars().clone();
    let new_student_buffers = exec.new_buffers.clone();
    drop(exec);

    // bank leaves (prototype objective)
    let mut bank_vars: BTreeMap<String, Var> = BTreeMap::new();
    if arch.objective == ObjectiveKind::Prototype {
        for (head, state) in &bundle.protos {
            let v = g.leaf(state.bank.clone().into_dyn());
            bank_vars.insert(head.clone(), v);
        }
    }

    // correspondences per sample, per direction, at each needed grid
    let grid_for = |grid: usize, swap: bool| -> Vec<MatchSet> {
        batch
            .iter()
            .map(|pair| {
                let (a, b) = if swap {
                    (&pair.second.spec, &pair.first.spec)
                } else {
                    (&pair.first.spec, &pair.second.spec)
                };
                correspondence_grid(a, b, grid)
            })
            .collect()
    };

    let mut diagnostics = StepDiagnostics::default();
    let enc_grid = image_size / 16;

    let head_loss = |g: &mut Graph<F>,
                         head: &str,
                         student: Var,
                         teacher: &Array4<F>,
                         matches: Vec<MatchSet>,
                         counter: &mut u64|
     -> Var {
        match arch.objective {
            ObjectiveKind::DensePair => {
                dense_pair_graph(g, student, teacher.clone(), matches, counter)
            }
            ObjectiveKind::Prototype => {
                let state = &bundle.protos[head];
                prototype_graph(
                    g,
                    student,
                    bank_vars[head],
                    teacher.clone(),
                    state.center.clone(),
                    matches,
                    cfg.temp_student,
                    cfg.temp_teacher,
                    true,
                    counter,
                )
            }
        }
    };

    // encoder loss, both directions
    let enc_dir1 = head_loss(
        &mut g,
        "enc",
        s_enc_first,
        &t_second.enc,
        grid_for(enc_grid, false),
        &mut diagnostics.empty_match_levels,
    );
    let enc_dir2 = head_loss(
        &mut g,
        "enc",
        s_enc_second,
        &t_first.enc,
        grid_for(enc_grid, true),
        &mut diagnostics.empty_match_levels,
    );
    let l_enc = g.mean_scalars(&[enc_dir1, enc_dir2]);

    // decoder levels
    let mut level_vars = Vec::new();
    for j in 0..arch.levels {
        let grid = level_grid(arch, image_size, j);
        let head = format!("dec{j}");
        let d1 = head_loss(
            &mut g,
            &head,
            s_dec_first[j],
            &t_second.dec[j],
            grid_for(grid, false),
            &mut diagnostics.empty_match_levels,
        );
        let d2 = head_loss(
            &mut g,
            &head,
            s_dec_second[j],
            &t_first.dec[j],
            grid_for(grid, true),
            &mut diagnostics.empty_match_levels,
        );
        level_vars.push(g.mean_scalars(&[d1, d2]));
    }

    // total = alpha*l_enc + (1-alpha)*mean(levels)
    let total = if level_vars.is_empty() {
        g.affine_scalars(&[(fl::<F>(cfg.alpha), l_enc)])
    } else {
        let l_dds = g.mean_scalars(&level_vars);
        g.affine_scalars(&[(fl::<F>(cfg.alpha), l_enc), (fl::<F>(1.0 - cfg.alpha), l_dds)])
    };

    let l_enc_val = to_f64(g.scalar_value(l_enc));
    let level_vals: Vec<f64> = level_vars.iter().map(|v| to_f64(g.scalar_value(*v))).collect();
    let mut breakdown = combine_losses(l_enc_val, &level_vals, cfg.alpha)?;
    breakdown.step = step;

    let mut grads_out: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    let mut grad_table = g.backward(total);
    for (name, var) in &param_vars {
        if let Some(grad) = grad_table.take(*var) {
            grads_out.insert(name.clone(), grad);
        }
    }
    for (head, var) in &bank_vars {
        if let Some(grad) = grad_table.take(*var) {
            grads_out.insert(format!("proto.{head}.bank"), grad);
        }
    }

    let mut teacher_head_means = BTreeMap::new();
    teacher_head_means.insert("enc".to_string(), head_mean([&t_first.enc, &t_second.enc]));
    for j in 0..arch.levels {
        teacher_head_means.insert(
            format!("dec{j}"),
            head_mean([&t_first.dec[j], &t_second.dec[j]]),
        );
    }

    Ok(StepOutput {
        breakdown,
        grads: grads_out,
        new_student_buffers,
        teacher_head_means,
        diagnostics,
    })
}

#[cfg(test)]
mod tests;

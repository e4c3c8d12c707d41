//! Model structure: toy encoder, FCN/FPN decoders, auxiliary heads, skip-path
//! channel dropout, and teacher EMA updates.

mod exec;

pub use exec::NetExec;

use crate::config::{DecoderKind, ObjectiveKind, ValidatedConfig};
use crate::error::{DeconError, Result};
use crate::rng::substream;
use crate::tensor::{fl, Graph, Scalar};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Encoder land: strides of the four stage outputs relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [2, 4, 8, 16];
/// Default toy stage widths standing in for a full backbone.
pub const TOY_STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const TOY_DEC_WIDTH: usize = 64;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-12;

/// Structural description of one model instantiation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub stage_widths: [usize; 4],
    pub dec_width: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub decoder: DecoderKind,
    /// Number of supervised decoder levels (bottleneck first).
    pub levels: usize,
    pub objective: ObjectiveKind,
    pub protos_enc: usize,
    pub protos_dec: usize,
}

impl Arch {
    pub fn from_config(cfg: &ValidatedConfig) -> Arch {
        Arch {
            stage_widths: TOY_STAGE_WIDTHS,
            dec_width: TOY_DEC_WIDTH,
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

    /// Tiny instantiation for gradient checks (a few hundred parameters).
    pub fn micro(decoder: DecoderKind, objective: ObjectiveKind, levels: usize) -> Arch {
        Arch {
            stage_widths: [2, 3, 4, 5],
            dec_width: 4,
            proj_hidden: 4,
            proj_out: 3,
            decoder,
            levels: match decoder {
                DecoderKind::None => 0,
                DecoderKind::Fcn => 1,
                DecoderKind::Fpn => levels,
            },
            objective,
            protos_enc: 4,
            protos_dec: 4,
        }
    }

    /// Names of the auxiliary heads present under this architecture.
    pub fn head_names(&self) -> Vec<String> {
        let mut names = vec!["enc".to_string()];
        for level in 0..self.levels {
            names.push(format!("dec{level}"));
        }
        names
    }

    /// Input channel count of a head's projector.
    pub fn head_in_channels(&self, head: &str) -> usize {
        if head == "enc" {
            self.stage_widths[3]
        } else {
            self.dec_width
        }
    }

    pub fn head_proto_count(&self, head: &str) -> usize {
        if head == "enc" {
            self.protos_enc
        } else {
            self.protos_dec
        }
    }

    /// Whether heads carry a student-side predictor (BYOL-style pairing).
    pub fn uses_predictor(&self) -> bool {
        self.objective == ObjectiveKind::DensePair
    }
}

/// Ordered multi-resolution feature maps from the encoder (or decoder).
#[derive(Clone, Debug)]
pub struct FeaturePyramid<F: Scalar> {
    /// Level i has stride `STAGE_STRIDES[i]`; the last level is the bottleneck.
    pub levels: Vec<ArrayD<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn bottleneck(&self) -> &ArrayD<F> {
        self.levels.last().expect("non-empty pyramid")
    }
}

pub type ParamMap<F> = BTreeMap<String, ArrayD<F>>;

/// One branch (student or teacher): learnable parameters plus running
/// batch-norm statistics.
#[derive(Clone, Debug)]
pub struct BranchParams<F: Scalar> {
    pub params: ParamMap<F>,
    pub buffers: ParamMap<F>,
}

/// Learnable prototype bank plus the running center of teacher projections.
#[derive(Clone, Debug)]
pub struct PrototypeState<F: Scalar> {
    pub bank: Array2<F>,   // K x D, rows unit-norm
    pub center: Array1<F>, // D
}

impl<F: Scalar> PrototypeState<F> {
    pub fn renormalize_rows(&mut self) {
        let d = self.bank.ncols();
        for mut row in self.bank.rows_mut() {
            let mut sq = F::zero();
            for v in row.iter() {
                sq = sq + *v * *v;
            }
            let n = (sq + fl::<F>(NORM_EPS * NORM_EPS)).sqrt();
            if n > F::zero() {
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            }
            debug_assert_eq!(row.len(), d);
        }
    }
}

/// Paired student/teacher parameter sets plus per-head prototype state.
#[derive(Clone, Debug)]
pub struct ModelBundle<F: Scalar> {
    pub arch: Arch,
    pub student: BranchParams<F>,
    pub teacher: BranchParams<F>,
    pub protos: BTreeMap<String, PrototypeState<F>>,
}

#[derive(Clone, Copy, Debug)]
enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

fn conv_specs(specs: &mut Vec<ParamSpec>, prefix: &str, o: usize, c: usize, k: usize, bias: bool) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![o, c, k, k],
        kind: ParamKind::ConvWeight { fan_in: c * k * k },
    });
    if bias {
        specs.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![o], kind: ParamKind::Bias });
    }
}

fn bn_specs(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![c],
        kind: ParamKind::BnGamma,
    });
    specs.push(ParamSpec { name: format!("{prefix}.beta"), shape: vec![c], kind: ParamKind::BnBeta });
}

fn head_specs(specs: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, arch: &Arch) {
    conv_specs(specs, &format!("{prefix}.proj.conv0"), arch.proj_hidden, c_in, 1, false);
    bn_specs(specs, &format!("{prefix}.proj.bn"), arch.proj_hidden);
    conv_specs(specs, &format!("{prefix}.proj.conv1"), arch.proj_out, arch.proj_hidden, 1, true);
    if arch.uses_predictor() {
        conv_specs(specs, &format!("{prefix}.pred.conv0"), arch.proj_hidden, arch.proj_out, 1, false);
        bn_specs(specs, &format!("{prefix}.pred.bn"), arch.proj_hidden);
        conv_specs(specs, &format!("{prefix}.pred.conv1"), arch.proj_out, arch.proj_hidden, 1, true);
    }
}

fn branch_specs(arch: &Arch) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut c_in = 3;
    for (i, &w) in arch.stage_widths.iter().enumerate() {
        conv_specs(&mut specs, &format!("encoder.s{i}.conv0"), w, c_in, 3, false);
        bn_specs(&mut specs, &format!("encoder.s{i}.bn0"), w);
        conv_specs(&mut specs, &format!("encoder.s{i}.conv1"), w, w, 3, false);
        bn_specs(&mut specs, &format!("encoder.s{i}.bn1"), w);
        c_in = w;
    }
    match arch.decoder {
        DecoderKind::None => {}
        DecoderKind::Fcn => {
            let bw = arch.stage_widths[3];
            conv_specs(&mut specs, "decoder.fcn.b0.conv", arch.dec_width, bw, 3, false);
            bn_specs(&mut specs, "decoder.fcn.b0.bn", arch.dec_width);
            conv_specs(&mut specs, "decoder.fcn.b1.conv", arch.dec_width, arch.dec_width, 3, false);
            bn_specs(&mut specs, "decoder.fcn.b1.bn", arch.dec_width);
        }
        DecoderKind::Fpn => {
            // lateral/output convs ordered bottleneck-first
            for j in 0..4 {
                let c = arch.stage_widths[3 - j];
                conv_specs(&mut specs, &format!("decoder.fpn.lat{j}"), arch.dec_width, c, 1, true);
                conv_specs(
                    &mut specs,
                    &format!("decoder.fpn.out{j}"),
                    arch.dec_width,
                    arch.dec_width,
                    3,
                    true,
                );
            }
        }
    }
    for head in arch.head_names() {
        head_specs(&mut specs, &format!("aux.{head}"), arch.head_in_channels(&head), arch);
    }
    specs
}

fn init_tensor<F: Scalar>(spec: &ParamSpec, seed: u64) -> ArrayD<F> {
    match spec.kind {
        ParamKind::ConvWeight { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = substream(seed, &format!("init:{}", spec.name));
            ArrayD::from_shape_simple_fn(IxDyn(&spec.shape), || {
                fl::<F>(rng.gen_range(-bound..bound))
            })
        }
        ParamKind::Bias | ParamKind::BnBeta => ArrayD::zeros(IxDyn(&spec.shape)),
        ParamKind::BnGamma => ArrayD::from_elem(IxDyn(&spec.shape), F::one()),
    }
}

/// Builds a freshly initialized branch. Weight draws are keyed by parameter
/// name, so adding or removing other modules never shifts them.
pub fn init_branch<F: Scalar>(arch: &Arch, seed: u64) -> BranchParams<F> {
    let mut params = ParamMap::new();
    let mut buffers = ParamMap::new();
    for spec in branch_specs(arch) {
        if matches!(spec.kind, ParamKind::BnGamma) {
            let base = spec.name.trim_end_matches(".gamma");
            buffers.insert(format!("{base}.mean"), ArrayD::zeros(IxDyn(&spec.shape)));
            buffers.insert(
                format!("{base}.var"),
                ArrayD::from_elem(IxDyn(&spec.shape), F::one()),
            );
        }
        params.insert(spec.name.clone(), init_tensor(&spec, seed));
    }
    BranchParams { params, buffers }
}

impl<F: Scalar> ModelBundle<F> {
    /// Student and teacher start identical; prototype banks are row-normalized.
    pub fn init(arch: Arch, seed: u64) -> ModelBundle<F> {
        let student = init_branch::<F>(&arch, seed);
        let teacher = student.clone();
        let mut protos = BTreeMap::new();
        if arch.objective == ObjectiveKind::Prototype {
            for head in arch.head_names() {
                let k = arch.head_proto_count(&head);
                let d = arch.proj_out;
                let mut rng = substream(seed, &format!("init:proto.{head}.bank"));
                let bank =
                    Array2::from_shape_simple_fn((k, d), || fl::<F>(rng.gen_range(-1.0..1.0)));
                let mut state = PrototypeState { bank, center: Array1::zeros(d) };
                state.renormalize_rows();
                protos.insert(head, state);
            }
        }
        ModelBundle { arch, student, teacher, protos }
    }
}

/// EMA update of every teacher tensor: t' = m*t + (1-m)*s, applied to
/// parameters and batch-norm statistics alike.
pub fn ema_update<F: Scalar>(
    teacher: &mut BranchParams<F>,
    student: &BranchParams<F>,
    m: f64,
) -> Result<()> {
    for (dst, src) in [
        (&mut teacher.params, &student.params),
        (&mut teacher.buffers, &student.buffers),
    ] {
        if dst.len() != src.len() {
            return Err(DeconError::Shape(format!(
                "ema: teacher has {} tensors, student {}",
                dst.len(),
                src.len()
            )));
        }
        for (name, t) in dst.iter_mut() {
            let s = src.get(name).ok_or_else(|| {
                DeconError::Shape(format!("ema: student missing tensor `{name}`"))
            })?;
            if s.shape() != t.shape() {
                return Err(DeconError::Shape(format!(
                    "ema: shape mismatch for `{name}`: {:?} vs {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            // accumulate in f64 so the update matches the closed-form
            // recursion to within half an ulp even at f32
            ndarray::Zip::from(&mut *t).and(s).for_each(|tv, &sv| {
                let v = m * crate::tensor::to_f64(*tv)
                    + (1.0 - m) * crate::tensor::to_f64(sv);
                *tv = fl::<F>(v);
            });
        }
    }
    Ok(())
}

/// Per-(sample, channel) inverted-dropout mask: 0 with probability p, else
/// 1/(1-p). Draw order is sample-major.
pub fn dropout_mask<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, c: usize, p: f64) -> Array2<F> {
    let keep_scale = fl::<F>(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((n, c), || {
        if rng.gen_bool(p) {
            F::zero()
        } else {
            keep_scale
        }
    })
}

/// Zeroes entire channel planes with probability p and rescales survivors by
/// 1/(1-p). Identity when not training or p = 0. This is only ever applied to
/// the copies handed to the decoder's lateral inputs.
pub fn channel_dropout<F: Scalar>(
    rng: &mut ChaCha8Rng,
    fmap: &ArrayD<F>,
    p: f64,
    training: bool,
) -> Result<ArrayD<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(DeconError::Config(format!("dropout p {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(fmap.clone());
    }
    let shape = fmap.shape();
    if shape.len() != 4 {
        return Err(DeconError::Shape("channel_dropout expects (N,C,H,W)".into()));
    }
    let (n, c) = (shape[0], shape[1]);
    let mask = dropout_mask::<F>(rng, n, c, p);
    let mut out = fmap.clone();
    for ni in 0..n {
        for ci in 0..c {
            let m = mask[(ni, ci)];
            out.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|v| v * m);
        }
    }
    Ok(out)
}

/// Eval-mode encoder forward pass over a batch of images (N,3,S,S).
pub fn encoder_forward<F: Scalar>(
    branch: &BranchParams<F>,
    arch: &Arch,
    images: &ArrayD<F>,
) -> Result<FeaturePyramid<F>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] || shape[2] % 16 != 0 {
        return Err(DeconError::Shape(format!(
            "encoder input must be (N,3,S,S) with S divisible by 16, got {shape:?}"
        )));
    }
    let mut g = Graph::<F>::new();
    let x = g.constant(images.clone());
    let mut exec = NetExec::eval(&mut g, branch);
    let levels = exec.encoder(arch, x);
    let values = levels.iter().map(|v| g.value(*v).clone()).collect();
    Ok(FeaturePyramid { levels: values })
}

/// Eval-mode FCN decoder forward from the bottleneck map.
pub fn fcn_forward<F: Scalar>(
    branch: &BranchParams<F>,
    arch: &Arch,
    bottleneck: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    if bottleneck.shape()[1] != arch.stage_widths[3] {
        return Err(DeconError::Shape(format!(
            "fcn expects {} input channels, got {}",
            arch.stage_widths[3],
            bottleneck.shape()[1]
        )));
    }
    let mut g = Graph::<F>::new();
    let x = g.constant(bottleneck.clone());
    let mut exec = NetExec::eval(&mut g, branch);
    let out = exec.fcn(arch, x);
    Ok(g.value(out).clone())
}

/// Eval-mode FPN decoder forward over a (possibly dropped-out) pyramid.
/// Returns the four decoder levels ordered bottleneck-first.
pub fn fpn_forward<F: Scalar>(
    branch: &BranchParams<F>,
    arch: &Arch,
    pyramid: &[ArrayD<F>],
) -> Result<Vec<ArrayD<F>>> {
    if pyramid.len() != 4 {
        return Err(DeconError::Shape(format!("fpn expects 4 levels, got {}", pyramid.len())));
    }
    for (i, level) in pyramid.iter().enumerate() {
        if level.shape()[1] != arch.stage_widths[i] {
            return Err(DeconError::Shape(format!(
                "fpn level {i} expects {} channels, got {}",
                arch.stage_widths[i],
                level.shape()[1]
            )));
        }
    }
    let mut g = Graph::<F>::new();
    let vars: Vec<_> = pyramid.iter().map(|v| g.constant(v.clone())).collect();
    let mut exec = NetExec::eval(&mut g, branch);
    let outs = exec.fpn(arch, &vars);
    Ok(outs.iter().map(|v| g.value(*v).clone()).collect())
}

/// Eval-mode auxiliary head: projector (+ optional predictor), then per-
/// position L2 normalization.
pub fn aux_forward<F: Scalar>(
    branch: &BranchParams<F>,
    arch: &Arch,
    head: &str,
    fmap: &ArrayD<F>,
    use_predictor: bool,
) -> Result<ArrayD<F>> {
    let expected = arch.head_in_channels(head);
    if fmap.shape()[1] != expected {
        return Err(DeconError::Shape(format!(
            "head `{head}` expects {expected} input channels, got {}",
            fmap.shape()[1]
        )));
    }
    let mut g = Graph::<F>::new();
    let x = g.constant(fmap.clone());
    let mut exec = NetExec::eval(&mut g, branch);
    let out = exec.aux_head(arch, head, x, use_predictor);
    Ok(g.value(out).clone())
}

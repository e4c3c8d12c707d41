//! Graph executor for one branch: wires named parameters into the tape as
//! leaves (student) or constants (teacher/eval) and provides the model
//! forward passes on top.

use super::{Arch, BranchParams, ParamMap, BN_EPS, BN_MOMENTUM, NORM_EPS};
use crate::tensor::{fl, Graph, Scalar, Var};
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct NetExec<'a, F: Scalar> {
    pub g: &'a mut Graph<F>,
    branch: &'a BranchParams<F>,
    trainable: bool,
    train_mode: bool,
    vars: BTreeMap<String, Var>,
    /// Running-statistic updates produced by train-mode batch norm. The
    /// caller decides when to commit them; the executor itself never mutates
    /// the branch.
    pub new_buffers: ParamMap<F>,
}

impl<'a, F: Scalar> NetExec<'a, F> {
    /// Student-side executor: parameters are differentiable leaves and batch
    /// norm runs on batch statistics.
    pub fn train(g: &'a mut Graph<F>, branch: &'a BranchParams<F>) -> Self {
        NetExec {
            g,
            branch,
            trainable: true,
            train_mode: true,
            vars: BTreeMap::new(),
            new_buffers: ParamMap::new(),
        }
    }

    /// Teacher/inference executor: parameters are constants (no gradients are
    /// ever requested) and batch norm uses running statistics.
    pub fn eval(g: &'a mut Graph<F>, branch: &'a BranchParams<F>) -> Self {
        NetExec {
            g,
            branch,
            trainable: false,
            train_mode: false,
            vars: BTreeMap::new(),
            new_buffers: ParamMap::new(),
        }
    }

    /// Differentiable fine-tuning still uses batch statistics but may load a
    /// trainable=false branch for probing; exposed for the eval module.
    pub fn with_modes(g: &'a mut Graph<F>, branch: &'a BranchParams<F>, trainable: bool, train_mode: bool) -> Self {
        NetExec {
            g,
            branch,
            trainable,
            train_mode,
            vars: BTreeMap::new(),
            new_buffers: ParamMap::new(),
        }
    }

    /// Leaf/constant var for a named parameter, registered once per graph.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .branch
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let var = if self.trainable { self.g.leaf(value) } else { self.g.constant(value) };
        self.vars.insert(name.to_string(), var);
        var
    }

    /// Mapping from parameter name to its leaf var (for gradient extraction).
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn buffer(&self, name: &str) -> &ArrayD<F> {
        self.new_buffers
            .get(name)
            .or_else(|| self.branch.buffers.get(name))
            .unwrap_or_else(|| panic!("missing buffer `{name}`"))
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize, dilation: usize) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self
            .branch
            .params
            .contains_key(&format!("{prefix}.b"))
            .then(|| self.param(&format!("{prefix}.b")));
        self.g.conv2d(x, w, b, stride, pad, dilation)
    }

    pub fn bn(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let eps = fl::<F>(BN_EPS);
        if self.train_mode {
            let (y, mean, var) = self.g.batch_norm_train(x, gamma, beta, eps);
            // running stats track the batch stats with the usual momentum;
            // variance is stored unbiased
            let shape = self.g.value(x).shape();
            let count = (shape[0] * shape[2] * shape[3]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let mom = fl::<F>(BN_MOMENTUM);
            let one_minus = F::one() - mom;
            let old_mean = self.buffer(&format!("{prefix}.mean")).clone();
            let old_var = self.buffer(&format!("{prefix}.var")).clone();
            let mut new_mean = old_mean.clone();
            let mut new_var = old_var.clone();
            for (i, nm) in new_mean.iter_mut().enumerate() {
                *nm = one_minus * old_mean[[i]] + mom * mean[i];
            }
            let ub = fl::<F>(unbias);
            for (i, nv) in new_var.iter_mut().enumerate() {
                *nv = one_minus * old_var[[i]] + mom * var[i] * ub;
            }
            self.new_buffers.insert(format!("{prefix}.mean"), new_mean);
            self.new_buffers.insert(format!("{prefix}.var"), new_var);
            y
        } else {
            let rm = self
                .buffer(&format!("{prefix}.mean"))
                .view()
                .into_dimensionality()
                .expect("bn mean 1d")
                .to_owned();
            let rv = self
                .buffer(&format!("{prefix}.var"))
                .view()
                .into_dimensionality()
                .expect("bn var 1d")
                .to_owned();
            self.g.batch_norm_eval(x, gamma, beta, &rm, &rv, eps)
        }
    }

    fn conv_bn_relu(
        &mut self,
        conv_prefix: &str,
        bn_prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let y = self.conv(conv_prefix, x, stride, pad, dilation);
        let y = self.bn(bn_prefix, y);
        self.g.relu(y)
    }

    /// Four encoder stages; returns all stage outputs, strides (2,4,8,16).
    pub fn encoder(&mut self, arch: &Arch, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(4);
        let mut cur = x;
        for i in 0..arch.stage_widths.len() {
            let p = format!("encoder.s{i}");
            cur = self.conv_bn_relu(&format!("{p}.conv0"), &format!("{p}.bn0"), cur, 2, 1, 1);
            cur = self.conv_bn_relu(&format!("{p}.conv1"), &format!("{p}.bn1"), cur, 1, 1, 1);
            levels.push(cur);
        }
        levels
    }

    /// FCN decoder: two dilated conv blocks on the bottleneck, same spatial
    /// size, one supervised level.
    pub fn fcn(&mut self, _arch: &Arch, bottleneck: Var) -> Var {
        let y = self.conv_bn_relu("decoder.fcn.b0.conv", "decoder.fcn.b0.bn", bottleneck, 1, 6, 6);
        self.conv_bn_relu("decoder.fcn.b1.conv", "decoder.fcn.b1.bn", y, 1, 6, 6)
    }

    /// FPN decoder over the (dropout-processed) encoder pyramid, which is
    /// ordered stride-2 first. Returns the four decoder levels bottleneck
    /// first (strides 16, 8, 4, 2).
    pub fn fpn(&mut self, _arch: &Arch, pyramid: &[Var]) -> Vec<Var> {
        assert_eq!(pyramid.len(), 4, "fpn needs 4 encoder levels");
        let mut outs = Vec::with_capacity(4);
        let mut merged: Option<Var> = None;
        for j in 0..4 {
            let lateral = self.conv(&format!("decoder.fpn.lat{j}"), pyramid[3 - j], 1, 0, 1);
            let m = match merged {
                None => lateral,
                Some(prev) => {
                    let up = self.g.upsample_nearest(prev, 2);
                    self.g.add(up, lateral)
                }
            };
            merged = Some(m);
            outs.push(self.conv(&format!("decoder.fpn.out{j}"), m, 1, 1, 1));
        }
        outs
    }

    /// Projector (+ optional predictor) of the named head, L2-normalized per
    /// spatial position.
    pub fn aux_head(&mut self, arch: &Arch, head: &str, x: Var, use_predictor: bool) -> Var {
        let p = format!("aux.{head}");
        let mut y = self.conv_bn_relu(&format!("{p}.proj.conv0"), &format!("{p}.proj.bn"), x, 1, 0, 1);
        y = self.conv(&format!("{p}.proj.conv1"), y, 1, 0, 1);
        if use_predictor {
            assert!(arch.uses_predictor(), "head `{head}` has no predictor");
            y = self.conv_bn_relu(&format!("{p}.pred.conv0"), &format!("{p}.pred.bn"), y, 1, 0, 1);
            y = self.conv(&format!("{p}.pred.conv1"), y, 1, 0, 1);
        }
        self.g.l2_normalize_channels(y, fl::<F>(NORM_EPS))
    }
}

//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] is built fresh for every training step. Parameters enter as
//! leaves, teacher-side tensors enter as constants, and `backward` walks the
//! tape once in reverse creation order. Constants never receive gradient
//! entries, which makes teacher isolation structural rather than a runtime
//! check.

use super::ops;
use super::{fl, Scalar};
use ndarray::{s, Array1, Array2, ArrayD, IxDyn};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn FnOnce(&ArrayD<F>) -> Vec<(Var, ArrayD<F>)>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    requires_grad: bool,
    back: Option<BackFn<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn insert(&mut self, value: ArrayD<F>, requires_grad: bool, back: Option<BackFn<F>>) -> Var {
        self.insert_shared(Rc::new(value), requires_grad, back)
    }

    fn insert_shared(
        &mut self,
        value: Rc<ArrayD<F>>,
        requires_grad: bool,
        back: Option<BackFn<F>>,
    ) -> Var {
        self.nodes.push(Node { value, requires_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// A tensor that never receives gradients (inputs, teacher outputs).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.insert(value, false, None)
    }

    /// A differentiable leaf (parameters).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.insert(value, true, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Shared handle to a node's value (cheap to capture in closures).
    pub fn value_shared(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().expect("scalar node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.requires_grad(*p))
    }

    /// Low-level node constructor for ops defined outside this module.
    /// `back` receives the output gradient and returns (parent, grad) pairs.
    pub fn push(
        &mut self,
        value: ArrayD<F>,
        parents: &[Var],
        back: impl FnOnce(&ArrayD<F>) -> Vec<(Var, ArrayD<F>)> + 'static,
    ) -> Var {
        if self.any_grad(parents) {
            self.insert(value, true, Some(Box::new(back)))
        } else {
            self.insert(value, false, None)
        }
    }

    /// Reverse pass from a scalar root. Consumes the graph.
    pub fn backward(mut self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        debug_assert_eq!(
            root_shape.iter().product::<usize>(),
            1,
            "backward root must be scalar"
        );
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&root_shape), F::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let Some(back) = self.nodes[id].back.take() else { continue };
            let gy = grads[id].take().expect("checked above");
            for (parent, g) in back(&gy) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality().expect("conv2d x 4d");
        let wv = self.value(w).view().into_dimensionality().expect("conv2d w 4d");
        let bv = b.map(|b| {
            self.value(b)
                .view()
                .into_dimensionality()
                .expect("conv2d b 1d")
                .to_owned()
        });
        let y = ops::conv2d_fwd(&xv, &wv, bv.as_ref(), stride, pad, dilation);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        if !self.any_grad(&parents) {
            return self.constant(y.into_dyn());
        }
        let x_saved = self.value_shared(x);
        let w_saved = self.value_shared(w);
        let has_bias = b.is_some();
        self.push(y.into_dyn(), &parents, move |gy| {
            let xv = x_saved.view().into_dimensionality().expect("x 4d");
            let wv = w_saved.view().into_dimensionality().expect("w 4d");
            let gyv = gy.view().into_dimensionality().expect("gy 4d");
            let (gx, gw, gb) = ops::conv2d_bwd(&xv, &wv, &gyv, has_bias, stride, pad, dilation);
            let mut out = vec![(x, gx.into_dyn()), (w, gw.into_dyn())];
            if let (Some(bvar), Some(gb)) = (b, gb) {
                out.push((bvar, gb.into_dyn()));
            }
            out
        })
    }

    /// Training-mode batch norm. Returns the output plus the batch statistics
    /// (mean, biased variance) so the caller can update running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, Array1<F>, Array1<F>) {
        let xv = self.value(x).view().into_dimensionality().expect("bn x 4d");
        let (mean, var) = ops::batch_stats(&xv);
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality()
            .expect("bn gamma 1d")
            .to_owned();
        let bt = self
            .value(beta)
            .view()
            .into_dimensionality()
            .expect("bn beta 1d")
            .to_owned();
        let y = ops::batchnorm_apply(&xv, &g, &bt, &mean, &var, eps);
        let parents = [x, gamma, beta];
        if !self.any_grad(&parents) {
            return (self.constant(y.into_dyn()), mean, var);
        }
        let x_saved = self.value_shared(x);
        let mean_b = mean.clone();
        let var_b = var.clone();
        let out = self.push(y.into_dyn(), &parents, move |gy| {
            let xv = x_saved.view().into_dimensionality().expect("x 4d");
            let gyv = gy.view().into_dimensionality().expect("gy 4d");
            let (gx, gg, gb) = ops::batchnorm_train_bwd(&xv, &g, &mean_b, &var_b, eps, &gyv);
            vec![(x, gx.into_dyn()), (gamma, gg.into_dyn()), (beta, gb.into_dyn())]
        });
        (out, mean, var)
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<F>,
        running_var: &Array1<F>,
        eps: F,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality().expect("bn x 4d");
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality()
            .expect("bn gamma 1d")
            .to_owned();
        let bt = self
            .value(beta)
            .view()
            .into_dimensionality()
            .expect("bn beta 1d")
            .to_owned();
        let y = ops::batchnorm_apply(&xv, &g, &bt, running_mean, running_var, eps);
        let parents = [x, gamma, beta];
        if !self.any_grad(&parents) {
            return self.constant(y.into_dyn());
        }
        let x_saved = self.value_shared(x);
        let m = running_mean.clone();
        let v = running_var.clone();
        self.push(y.into_dyn(), &parents, move |gy| {
            let xv = x_saved.view().into_dimensionality().expect("x 4d");
            let gyv = gy.view().into_dimensionality().expect("gy 4d");
            let (gx, gg, gb) = ops::batchnorm_eval_bwd(&xv, &g, &m, &v, eps, &gyv);
            vec![(x, gx.into_dyn()), (gamma, gg.into_dyn()), (beta, gb.into_dyn())]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        if !self.requires_grad(x) {
            return self.constant(y);
        }
        let x_saved = self.value_shared(x);
        self.push(y, &[x], move |gy| {
            let mut gx = gy.clone();
            gx.zip_mut_with(&x_saved, |g, &xv| {
                if xv <= F::zero() {
                    *g = F::zero();
                }
            });
            vec![(x, gx)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, &[a, b], move |gy| vec![(a, gy.clone()), (b, gy.clone())])
    }

    /// Multiply an (N,C,H,W) map by a per-(sample, channel) mask.
    pub fn scale_channels(&mut self, x: Var, mask: Array2<F>) -> Var {
        let xv = self.value(x);
        let (n, c) = mask.dim();
        debug_assert_eq!(xv.shape()[0], n);
        debug_assert_eq!(xv.shape()[1], c);
        let mut y = xv.clone();
        for ni in 0..n {
            for ci in 0..c {
                let m = mask[(ni, ci)];
                y.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v * m);
            }
        }
        if !self.requires_grad(x) {
            return self.constant(y);
        }
        self.push(y, &[x], move |gy| {
            let mut gx = gy.clone();
            for ni in 0..n {
                for ci in 0..c {
                    let m = mask[(ni, ci)];
                    gx.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v * m);
                }
            }
            vec![(x, gx)]
        })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality().expect("upsample x 4d");
        let y = ops::upsample_nearest_fwd(&xv, factor).into_dyn();
        if !self.requires_grad(x) {
            return self.constant(y);
        }
        self.push(y, &[x], move |gy| {
            let gyv = gy.view().into_dimensionality().expect("gy 4d");
            vec![(x, ops::upsample_nearest_bwd(&gyv, factor).into_dyn())]
        })
    }

    pub fn l2_normalize_channels(&mut self, x: Var, eps: F) -> Var {
        let xv = self.value(x).view().into_dimensionality().expect("l2 x 4d");
        let (y, norms) = ops::l2_normalize_fwd(&xv, eps);
        if !self.requires_grad(x) {
            return self.constant(y.into_dyn());
        }
        let y_rc = Rc::new(y.into_dyn());
        let y_saved = Rc::clone(&y_rc);
        self.insert_shared(
            y_rc,
            true,
            Some(Box::new(move |gy: &ArrayD<F>| {
                let gyv = gy.view().into_dimensionality().expect("gy 4d");
                let yv = y_saved.view().into_dimensionality().expect("y 4d");
                vec![(x, ops::l2_normalize_bwd(&yv, &norms, &gyv).into_dyn())]
            })),
        )
    }

    /// Weighted sum of scalar nodes: sum(coef_i * x_i).
    pub fn affine_scalars(&mut self, terms: &[(F, Var)]) -> Var {
        let mut total = F::zero();
        for (c, v) in terms {
            total = total + *c * self.scalar_value(*v);
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        let parents: Vec<Var> = terms.iter().map(|(_, v)| *v).collect();
        let coefs: Vec<(F, Var)> = terms.to_vec();
        self.push(value, &parents, move |gy| {
            let g = *gy.iter().next().expect("scalar grad");
            coefs
                .iter()
                .map(|(c, v)| (*v, ArrayD::from_elem(IxDyn(&[]), g * *c)))
                .collect()
        })
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "mean of no scalars");
        let w = F::one() / fl::<F>(vars.len() as f64);
        let terms: Vec<(F, Var)> = vars.iter().map(|v| (w, *v)).collect();
        self.affine_scalars(&terms)
    }

    /// Pixel-wise softmax cross-entropy against integer labels, averaged over
    /// all positions. Logits are (N,K,H,W); labels are (N,H,W) class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &ndarray::Array3<usize>) -> Var {
        let lv = self
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("logits 4d");
        let (n, k, h, w) = lv.dim();
        debug_assert_eq!(labels.dim(), (n, h, w));
        let count = fl::<F>((n * h * w) as f64);
        let mut probs = lv.to_owned();
        let mut total = F::zero();
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut maxv = F::neg_infinity();
                    for ci in 0..k {
                        maxv = maxv.max(probs[(ni, ci, i, j)]);
                    }
                    let mut z = F::zero();
                    for ci in 0..k {
                        let e = (probs[(ni, ci, i, j)] - maxv).exp();
                        probs[(ni, ci, i, j)] = e;
                        z = z + e;
                    }
                    for ci in 0..k {
                        probs[(ni, ci, i, j)] = probs[(ni, ci, i, j)] / z;
                    }
                    let t = labels[(ni, i, j)];
                    debug_assert!(t < k, "label out of range");
                    total = total - probs[(ni, t, i, j)].max(fl(1e-30)).ln();
                }
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / count);
        if !self.requires_grad(logits) {
            return self.constant(value);
        }
        let labels = labels.clone();
        self.push(value, &[logits], move |gy| {
            let g = *gy.iter().next().expect("scalar grad") / count;
            let mut gl = probs.clone();
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let t = labels[(ni, i, j)];
                        gl[(ni, t, i, j)] = gl[(ni, t, i, j)] - F::one();
                    }
                }
            }
            gl.mapv_inplace(|v| v * g);
            vec![(logits, gl.into_dyn())]
        })
    }
}

#[allow(unused_imports)]
use ndarray::ShapeBuilder;

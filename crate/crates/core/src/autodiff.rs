//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a tape of operations.  Inputs enter either as
//! [`Graph::leaf`] (gradients wanted) or [`Graph::constant`] (treated as
//! fixed).  Calling [`Graph::backward`] on a scalar node returns gradients
//! for every leaf that influenced it.  The same machinery serves both roles
//! in the pipeline: parameters are leaves during training, and images are
//! leaves during attacks while parameters ride along as constants.
//!
//! Everything is `f64` end to end so analytic gradients can be validated
//! against central finite differences at tight tolerances.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Reshape by logical (row-major) order, accepting any input layout.
pub fn reshape(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().cloned().collect())
        .expect("reshape: element count mismatch")
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// node value, parent values, upstream gradient -> per-parent gradients
type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if any path connected it to the scalar output.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or an all-zeros array of the given shape when the
    /// node did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    /// Insert a tensor whose gradient will be tracked.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
        })
    }

    /// Insert a tensor treated as a constant.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
        })
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node (shape `[1]`).
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[[0]]
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: BackwardFn,
    ) -> Var {
        let needs_grad = self.any_needs_grad(&parents);
        self.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        })
    }

    /// Run reverse accumulation from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward requires a scalar root".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(IxDyn(&[1])));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(back) = &node.backward else {
                // Leaf: keep the accumulated gradient for the caller.
                continue;
            };
            let Some(grad_out) = grads[i].take() else {
                continue; // no path from this node to the output
            };
            let parent_values: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = back(&node.value, &parent_values, &grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch for parent node"
                );
                if let Some(acc) = &mut grads[p] {
                    *acc += &g;
                } else {
                    grads[p] = Some(g);
                }
            }
            if i == root.0 {
                grads[i] = Some(grad_out);
            }
        }
        Ok(Gradients { grads })
    }

    // ----- elementwise -------------------------------------------------

    fn check_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.op(
            value,
            vec![a.0, b.0],
            Box::new(|_, _, g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.op(
            value,
            vec![a.0, b.0],
            Box::new(|_, _, g| vec![g.clone(), -g]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.op(
            value,
            vec![a.0, b.0],
            Box::new(|_, ps, g| vec![g * ps[1], g * ps[0]]),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.op(
            value,
            vec![a.0, b.0],
            Box::new(|_, ps, g| {
                let da = g / ps[1];
                let db = -(g * ps[0]) / (ps[1] * ps[1]);
                vec![da, db]
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        self.op(value, vec![a.0], Box::new(|_, _, g| vec![-g]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.op(value, vec![a.0], Box::new(|out, _, g| vec![g * out]))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.op(value, vec![a.0], Box::new(|_, ps, g| vec![g / ps[0]]))
    }

    /// Elementwise `max(a, floor)`.  Gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        self.op(
            value,
            vec![a.0],
            Box::new(move |_, ps, g| {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(ps[0]).for_each(|d, &x| {
                    if x <= floor {
                        *d = 0.0;
                    }
                });
                vec![da]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.op(
            value,
            vec![a.0],
            Box::new(|_, ps, g| {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(ps[0]).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![da]
            }),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.op(value, vec![a.0], Box::new(move |_, _, g| vec![g * s]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.op(value, vec![a.0], Box::new(|_, _, g| vec![g.clone()]))
    }

    // ----- matrix ------------------------------------------------------

    fn as2(value: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
        value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected a rank-2 tensor")
    }

    fn as1(value: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
        value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected a rank-1 tensor")
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = Self::as2(self.value(a));
        let bv = Self::as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let value = av.dot(&bv).into_dyn();
        self.op(
            value,
            vec![a.0, b.0],
            Box::new(|_, ps, g| {
                let gv = Self::as2(g);
                let av = Self::as2(ps[0]);
                let bv = Self::as2(ps[1]);
                let da = gv.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&gv).into_dyn();
                vec![da, db]
            }),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let value = Self::as2(self.value(a)).t().to_owned().into_dyn();
        self.op(
            value,
            vec![a.0],
            Box::new(|_, _, g| vec![Self::as2(g).t().to_owned().into_dyn()]),
        )
    }

    /// Row sums of `[n, m] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = Self::as2(self.value(a)).sum_axis(Axis(1)).into_dyn();
        self.op(
            value,
            vec![a.0],
            Box::new(|_, ps, g| {
                let gv = Self::as1(g);
                let (n, m) = Self::as2(ps[0]).dim();
                let mut da = Array2::zeros((n, m));
                for i in 0..n {
                    da.row_mut(i).fill(gv[i]);
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// `out[i, j] = a[i, j] - v[i]` for `a: [n, m]`, `v: [n]`.
    pub fn sub_colvec(&mut self, a: Var, v: Var) -> Var {
        let av = Self::as2(self.value(a));
        let vv = Self::as1(self.value(v));
        assert_eq!(av.nrows(), vv.len(), "sub_colvec: length mismatch");
        let mut value = av.to_owned();
        for (i, mut row) in value.outer_iter_mut().enumerate() {
            row -= vv[i];
        }
        self.op(
            value.into_dyn(),
            vec![a.0, v.0],
            Box::new(|_, _, g| {
                let gv = Self::as2(g);
                let dv = -gv.sum_axis(Axis(1));
                vec![g.clone(), dv.into_dyn()]
            }),
        )
    }

    /// `out[i, j] = a[i, j] + v[j]` for `a: [n, m]`, `v: [m]` (bias add).
    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Var {
        let av = Self::as2(self.value(a));
        let vv = Self::as1(self.value(v));
        assert_eq!(av.ncols(), vv.len(), "add_rowvec: length mismatch");
        let mut value = av.to_owned();
        for mut row in value.outer_iter_mut() {
            row += &vv;
        }
        self.op(
            value.into_dyn(),
            vec![a.0, v.0],
            Box::new(|_, _, g| {
                let gv = Self::as2(g);
                let dv = gv.sum_axis(Axis(0));
                vec![g.clone(), dv.into_dyn()]
            }),
        )
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts
            .iter()
            .map(|&p| Self::as2(self.value(p)).to_owned())
            .collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(0), &view_refs)
            .expect("concat_rows: column counts differ")
            .into_dyn();
        let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.op(
            value,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |_, _, g| {
                let gv = Self::as2(g);
                let mut out = Vec::with_capacity(row_counts.len());
                let mut start = 0;
                for &rows in &row_counts {
                    out.push(
                        gv.slice(ndarray::s![start..start + rows, ..])
                            .to_owned()
                            .into_dyn(),
                    );
                    start += rows;
                }
                out
            }),
        )
    }

    /// Rows `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = Self::as2(self.value(a));
        assert!(start + len <= av.nrows(), "slice_rows: out of range");
        let value = av.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.op(
            value.into_dyn(),
            vec![a.0],
            Box::new(move |_, ps, g| {
                let gv = Self::as2(g);
                let (n, m) = Self::as2(ps[0]).dim();
                let mut da = Array2::zeros((n, m));
                da.slice_mut(ndarray::s![start..start + len, ..]).assign(&gv);
                vec![da.into_dyn()]
            }),
        )
    }

    /// Column `j` of `[n, m] -> [n]`.
    pub fn select_col(&mut self, a: Var, j: usize) -> Var {
        let av = Self::as2(self.value(a));
        assert!(j < av.ncols(), "select_col: column out of range");
        let value = av.column(j).to_owned().into_dyn();
        self.op(
            value,
            vec![a.0],
            Box::new(move |_, ps, g| {
                let gv = Self::as1(g);
                let (n, m) = Self::as2(ps[0]).dim();
                let mut da = Array2::zeros((n, m));
                for i in 0..n {
                    da[[i, j]] = gv[i];
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Row-wise maximum of `[n, m] -> [n]`.  The subgradient routes to the
    /// first maximal entry in each row.
    pub fn row_max(&mut self, a: Var) -> Var {
        let av = Self::as2(self.value(a));
        let (n, m) = av.dim();
        assert!(m > 0, "row_max: empty rows");
        let mut value = Array1::zeros(n);
        let mut argmax = vec![0usize; n];
        for i in 0..n {
            let mut best = av[[i, 0]];
            let mut best_j = 0;
            for j in 1..m {
                if av[[i, j]] > best {
                    best = av[[i, j]];
                    best_j = j;
                }
            }
            value[i] = best;
            argmax[i] = best_j;
        }
        self.op(
            value.into_dyn(),
            vec![a.0],
            Box::new(move |_, ps, g| {
                let gv = Self::as1(g);
                let (n, m) = Self::as2(ps[0]).dim();
                let mut da = Array2::zeros((n, m));
                for i in 0..n {
                    da[[i, argmax[i]]] = gv[i];
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Sum of all entries, as a shape-`[1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum());
        self.op(
            value,
            vec![a.0],
            Box::new(|_, ps, g| {
                vec![ArrayD::from_elem(ps[0].raw_dim(), g[[0]])]
            }),
        )
    }

    /// Mean of all entries, as a shape-`[1]` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        self.op(
            value,
            vec![a.0],
            Box::new(move |_, ps, g| {
                vec![ArrayD::from_elem(ps[0].raw_dim(), g[[0]] / n)]
            }),
        )
    }

    /// Normalize each row of `[n, m]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = Self::as2(self.value(a));
        let n = av.nrows();
        let mut norms = vec![0.0f64; n];
        let mut value = av.to_owned();
        for (i, mut row) in value.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            norms[i] = norm;
            row /= norm;
        }
        self.op(
            value.into_dyn(),
            vec![a.0],
            Box::new(move |out, _, g| {
                let gv = Self::as2(g);
                let yv = Self::as2(out);
                let mut da = gv.to_owned();
                for i in 0..yv.nrows() {
                    let y = yv.row(i);
                    let dot = y.dot(&gv.row(i));
                    let mut row = da.row_mut(i);
                    for (d, &yj) in row.iter_mut().zip(y.iter()) {
                        *d = (*d - yj * dot) / norms[i];
                    }
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Row-wise log-softmax of `[n, m]`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = Self::as2(self.value(a));
        let mut value = av.to_owned();
        for mut row in value.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row -= lse;
        }
        self.op(
            value.into_dyn(),
            vec![a.0],
            Box::new(|out, _, g| {
                let gv = Self::as2(g);
                let ov = Self::as2(out);
                let mut da = gv.to_owned();
                for i in 0..ov.nrows() {
                    let gsum: f64 = gv.row(i).sum();
                    for (d, &o) in da.row_mut(i).iter_mut().zip(ov.row(i).iter()) {
                        *d -= o.exp() * gsum;
                    }
                }
                vec![da.into_dyn()]
            }),
        )
    }

    // ----- image ops ---------------------------------------------------

    fn as4(value: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
        value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a rank-4 tensor")
    }

    /// 2-d convolution with zero padding.
    ///
    /// `x: [n, ci, h, w]`, `weight: [co, ci, kh, kw]`, `bias: [co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = Self::as4(self.value(x));
        let wv = Self::as4(self.value(weight));
        let bv = Self::as1(self.value(bias));
        let (n, ci, h, w) = xv.dim();
        let (co, ci_w, kh, kw) = wv.dim();
        assert_eq!(ci, ci_w, "conv2d: channel mismatch");
        assert_eq!(co, bv.len(), "conv2d: bias length mismatch");
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let wmat = wv
            .to_owned()
            .into_shape((co, ci * kh * kw))
            .expect("conv2d: weight reshape");
        let out_mat = wmat.dot(&cols); // [co, n*ho*wo]
        let mut value = Array4::zeros((n, co, ho, wo));
        for c in 0..co {
            let b = bv[c];
            for ni in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        value[[ni, c, oy, ox]] = out_mat[[c, (ni * ho + oy) * wo + ox]] + b;
                    }
                }
            }
        }

        self.op(
            value.into_dyn(),
            vec![x.0, weight.0, bias.0],
            Box::new(move |_, ps, g| {
                let xv = Self::as4(ps[0]);
                let wv = Self::as4(ps[1]);
                let gv = Self::as4(g);
                let (n, ci, _, _) = xv.dim();
                let (co, _, kh, kw) = wv.dim();
                let (_, _, ho, wo) = gv.dim();

                let mut gmat = Array2::zeros((co, n * ho * wo));
                for c in 0..co {
                    for ni in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                gmat[[c, (ni * ho + oy) * wo + ox]] = gv[[ni, c, oy, ox]];
                            }
                        }
                    }
                }

                // Weight and bias gradients (recompute the column matrix).
                let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
                let dwmat = gmat.dot(&cols.t()); // [co, ci*kh*kw]
                let dw = dwmat
                    .into_shape((co, ci, kh, kw))
                    .expect("conv2d: weight gradient reshape")
                    .into_dyn();
                let db = gmat.sum_axis(Axis(1)).into_dyn();

                // Input gradient via the transposed weight matrix.
                let wmat = wv
                    .to_owned()
                    .into_shape((co, ci * kh * kw))
                    .expect("conv2d: weight reshape");
                let dcols = wmat.t().dot(&gmat); // [ci*kh*kw, n*ho*wo]
                let dx = col2im(&dcols, xv.dim(), kh, kw, stride, pad, ho, wo);

                vec![dx.into_dyn(), dw, db]
            }),
        )
    }

    /// Batch normalization over `[n, c, h, w]` using batch statistics.
    ///
    /// Returns the output node plus the per-channel batch mean and (biased)
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = Self::as4(self.value(x));
        let gv = Self::as1(self.value(gamma));
        let bv = Self::as1(self.value(beta));
        let (n, c, h, w) = xv.dim();
        assert_eq!(gv.len(), c, "batch_norm2d: gamma length mismatch");
        assert_eq!(bv.len(), c, "batch_norm2d: beta length mismatch");
        let m = (n * h * w) as f64;

        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let slice = xv.index_axis(Axis(1), ch);
            let mu = slice.sum() / m;
            let v = slice.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std: Array1<f64> = var.mapv(|v: f64| 1.0 / (v + eps).sqrt());

        let mut xhat = Array4::zeros((n, c, h, w));
        let mut value = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let mu = mean[ch];
            let inv = inv_std[ch];
            let ga = gv[ch];
            let be = bv[ch];
            for ni in 0..n {
                for y in 0..h {
                    for xc in 0..w {
                        let xh = (xv[[ni, ch, y, xc]] - mu) * inv;
                        xhat[[ni, ch, y, xc]] = xh;
                        value[[ni, ch, y, xc]] = ga * xh + be;
                    }
                }
            }
        }

        let mean_out = mean.clone();
        let var_out = var.clone();
        let out = self.op(
            value.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Box::new(move |_, ps, g| {
                let gv_up = Self::as4(g);
                let gamma_v = Self::as1(ps[1]);
                let (n, c, h, w) = gv_up.dim();
                let m = (n * h * w) as f64;

                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                let mut dx = Array4::zeros((n, c, h, w));
                for ch in 0..c {
                    let inv = inv_std[ch];
                    let ga = gamma_v[ch];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for ni in 0..n {
                        for y in 0..h {
                            for xc in 0..w {
                                let dy = gv_up[[ni, ch, y, xc]];
                                sum_dy += dy;
                                sum_dy_xh += dy * xhat[[ni, ch, y, xc]];
                            }
                        }
                    }
                    dbeta[ch] = sum_dy;
                    dgamma[ch] = sum_dy_xh;
                    for ni in 0..n {
                        for y in 0..h {
                            for xc in 0..w {
                                let dy = gv_up[[ni, ch, y, xc]];
                                let xh = xhat[[ni, ch, y, xc]];
                                dx[[ni, ch, y, xc]] =
                                    ga * inv * (dy - sum_dy / m - xh * sum_dy_xh / m);
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        );
        (out, mean_out, var_out)
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let xv = Self::as4(self.value(x));
        let gv = Self::as1(self.value(gamma));
        let bv = Self::as1(self.value(beta));
        let (n, c, h, w) = xv.dim();
        assert_eq!(gv.len(), c, "batch_norm2d: gamma length mismatch");
        assert_eq!(running_mean.len(), c, "batch_norm2d: running mean mismatch");
        let inv_std: Array1<f64> = running_var.mapv(|v: f64| 1.0 / (v + eps).sqrt());
        let mean = running_mean.clone();

        let mut value = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let mu = mean[ch];
            let inv = inv_std[ch];
            for ni in 0..n {
                for y in 0..h {
                    for xc in 0..w {
                        value[[ni, ch, y, xc]] =
                            gv[ch] * (xv[[ni, ch, y, xc]] - mu) * inv + bv[ch];
                    }
                }
            }
        }

        self.op(
            value.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Box::new(move |_, ps, g| {
                let xv = Self::as4(ps[0]);
                let gamma_v = Self::as1(ps[1]);
                let gv_up = Self::as4(g);
                let (n, c, h, w) = gv_up.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ch in 0..c {
                    let inv = inv_std[ch];
                    let mu = mean[ch];
                    let ga = gamma_v[ch];
                    for ni in 0..n {
                        for y in 0..h {
                            for xc in 0..w {
                                let dy = gv_up[[ni, ch, y, xc]];
                                dx[[ni, ch, y, xc]] = dy * ga * inv;
                                dgamma[ch] += dy * (xv[[ni, ch, y, xc]] - mu) * inv;
                                dbeta[ch] += dy;
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// Mean over the spatial dimensions: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = Self::as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut value = Array2::zeros((n, c));
        for ni in 0..n {
            for ch in 0..c {
                value[[ni, ch]] = xv.index_axis(Axis(0), ni).index_axis(Axis(0), ch).sum() * scale;
            }
        }
        self.op(
            value.into_dyn(),
            vec![x.0],
            Box::new(move |_, ps, g| {
                let gv = Self::as2(g);
                let (n, c, h, w) = Self::as4(ps[0]).dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ch in 0..c {
                        let val = gv[[ni, ch]] * scale;
                        dx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ch)
                            .fill(val);
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }
}

/// Unfold padded input windows into a `[ci*kh*kw, n*ho*wo]` column matrix.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let mut cols = Array2::zeros((ci * kh * kw, n * ho * wo));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let col = (ni * ho + oy) * wo + ox;
                for c in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[(c * kh + ky) * kw + kx, col]] =
                                x[[ni, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column gradients back to input positions (inverse of
/// [`im2col`] for gradient flow).
fn col2im(
    dcols: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (n, ci, h, w) = x_dim;
    let mut dx = Array4::zeros((n, ci, h, w));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let col = (ni * ho + oy) * wo + ox;
                for c in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, c, iy as usize, ix as usize]] +=
                                dcols[[(c * kh + ky) * kw + kx, col]];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    /// Compare analytic gradients of `build` against central finite
    /// differences for every input element.
    fn fd_check(
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[ArrayD<f64>],
        h: f64,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let out = build(&mut g, &vars);
        assert_eq!(g.value(out).len(), 1, "fd_check target must be scalar");
        let grads = g.backward(out).unwrap();

        let eval = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.shape());
            for (idx, _) in input.indexed_iter() {
                let mut plus = inputs.to_vec();
                plus[k][&idx] += h;
                let mut minus = inputs.to_vec();
                minus[k][&idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[&idx];
                let err = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
                assert!(
                    err < tol,
                    "input {k} idx {idx:?}: analytic {a}, fd {fd}, rel err {err}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_arr(&mut rng, &[3, 4], -1.0, 1.0);
        let b = random_arr(&mut rng, &[3, 4], 0.5, 1.5);
        fd_check(
            &|g, vs| {
                let s = g.sub(vs[0], vs[1]);
                let m = g.mul(s, vs[0]);
                let d = g.div(m, vs[1]);
                let e = g.exp(d);
                let l = g.log(e);
                let n = g.neg(l);
                let r = g.relu(n);
                let c = g.clamp_min(r, 0.05);
                let sc = g.mul_scalar(c, 1.7);
                let sa = g.add_scalar(sc, 0.3);
                g.sum_all(sa)
            },
            &[a, b],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_arr(&mut rng, &[3, 4], -1.0, 1.0);
        let b = random_arr(&mut rng, &[4, 2], -1.0, 1.0);
        let v = random_arr(&mut rng, &[3], -1.0, 1.0);
        let u = random_arr(&mut rng, &[2], -1.0, 1.0);
        fd_check(
            &|g, vs| {
                let mm = g.matmul(vs[0], vs[1]); // [3,2]
                let sc = g.sub_colvec(mm, vs[2]);
                let ar = g.add_rowvec(sc, vs[3]);
                let t = g.transpose(ar); // [2,3]
                let rs = g.row_sum(t); // [2]
                g.sum_all(rs)
            },
            &[a, b, v, u],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_arr(&mut rng, &[2, 3], -1.0, 1.0);
        let b = random_arr(&mut rng, &[3, 3], -1.0, 1.0);
        fd_check(
            &|g, vs| {
                let cat = g.concat_rows(&[vs[0], vs[1]]); // [5,3]
                let sl = g.slice_rows(cat, 1, 3);
                let col = g.select_col(sl, 2);
                let mx = g.row_max(sl);
                let col2 = reshape_node(g, col, &[3, 1]);
                let mx2 = reshape_node(g, mx, &[3, 1]);
                let both = g.concat_rows(&[col2, mx2]);
                let s = g.sum_all(both);
                let me = g.mean_all(cat);
                g.add(s, me)
            },
            &[a, b],
            1e-5,
            1e-7,
        );
    }

    /// Reshape a node (by logical order) with gradient support.
    fn reshape_node(g: &mut Graph, v: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = g.value(v).shape().to_vec();
        let val = reshape(g.value(v), shape);
        g.op(
            val,
            vec![v.0],
            Box::new(move |_, _, grad| vec![reshape(grad, &old_shape)]),
        )
    }

    #[test]
    fn normalize_and_softmax_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_arr(&mut rng, &[4, 5], -2.0, 2.0);
        let w = random_arr(&mut rng, &[4, 5], -1.0, 1.0);
        fd_check(
            &|g, vs| {
                let z = g.l2_normalize_rows(vs[0]);
                let ls = g.log_softmax_rows(z);
                let weighted = g.mul(ls, vs[1]);
                g.sum_all(weighted)
            },
            &[a, w],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (2, 0)] {
            let x = random_arr(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
            let w = random_arr(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b = random_arr(&mut rng, &[3], -0.5, 0.5);
            fd_check(
                &|g, vs| {
                    let c = g.conv2d(vs[0], vs[1], vs[2], stride, pad);
                    let r = g.relu(c);
                    g.sum_all(r)
                },
                &[x, w, b],
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn batch_norm_train_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_arr(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let gamma = random_arr(&mut rng, &[2], 0.5, 1.5);
        let beta = random_arr(&mut rng, &[2], -0.5, 0.5);
        let w = random_arr(&mut rng, &[3 * 2 * 4 * 4], -1.0, 1.0);
        let wc = w.clone();
        fd_check(
            &|g, vs| {
                let (y, _, _) = g.batch_norm2d_train(vs[0], vs[1], vs[2], 1e-5);
                // weight the output so gradients are not uniform
                let flat = flatten(g, y);
                let wv = g.constant(wc.clone());
                let m = g.mul(flat, wv);
                g.sum_all(m)
            },
            &[x, gamma, beta],
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn batch_norm_eval_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_arr(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let gamma = random_arr(&mut rng, &[2], 0.5, 1.5);
        let beta = random_arr(&mut rng, &[2], -0.5, 0.5);
        let rm = Array1::from_vec(vec![0.1, -0.2]);
        let rv = Array1::from_vec(vec![0.8, 1.2]);
        fd_check(
            &|g, vs| {
                let y = g.batch_norm2d_eval(vs[0], vs[1], vs[2], &rm, &rv, 1e-5);
                let p = g.global_avg_pool(y);
                let s = g.sum_all(p);
                g.mul_scalar(s, 3.0)
            },
            &[x, gamma, beta],
            1e-5,
            1e-6,
        );
    }

    /// Reshape any node to rank-1 with gradient support.
    fn flatten(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        reshape_node(g, v, &[n])
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        let m = g.mul(a, c);
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        let ga = grads.get(a).unwrap();
        assert!(ga.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // f(x) = sum(x*x) + sum(x)  =>  df/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x);
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(x);
        let total = g.add(s1, s2);
        let grads = g.backward(total).unwrap();
        let gx = grads.get(x).unwrap();
        for (i, &v) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!((gx[[i]] - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::zeros(IxDyn(&[2, 2])));
        assert!(g.backward(x).is_err());
    }
}

//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! tracked parameters or constants; `detach` turns any intermediate into a
//! constant, which is how the loss functions stop gradients from reaching frozen
//! networks.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
        }
    }

    /// Output side of a forward convolution, if the geometry is valid.
    pub fn out_side(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output side of the transposed convolution (no output padding).
    pub fn transposed_out_side(&self, side: usize) -> Option<usize> {
        ((side - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        geom: Geom,
        cols: Vec<f64>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        geom: Geom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Reshape(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Image-level geometry of a convolution between a "large" and a "small" side.
///
/// For a forward conv the large side is the input; for a transposed conv it is
/// the output. In both cases `cols` has `channels_large * k * k` rows and
/// `side_small^2` columns per image.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    c_large: usize,
    h_large: usize,
    w_large: usize,
    c_small: usize,
    h_small: usize,
    w_small: usize,
}

impl Geom {
    fn col_rows(&self, k: usize) -> usize {
        self.c_large * k * k
    }

    fn positions(&self) -> usize {
        self.h_small * self.w_small
    }
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape.clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value as `v`, but gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            1.0,
            view(&self.value(a).data, n, k),
            view(&self.value(b).data, k, m),
            0.0,
            view_mut(&mut out, n, m),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), tracked)
    }

    /// Adds a `[m]` bias to every row of `[n, m]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let m = self.value(bias).len();
        let sa = self.shape(a);
        assert!(sa.len() == 2 && sa[1] == m, "add_bias {sa:?} + [{m}]");
        let mut out = self.value(a).clone();
        let b = &self.value(bias).data;
        for row in out.data.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        self.push(out, Op::AddBias(a, bias), tracked)
    }

    /// `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]` -> `[n, o, h', w']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sw[1] == sx[1], "conv2d {sx:?} * {sw:?}");
        assert!(sw[2] == spec.kernel && sw[3] == spec.kernel);
        let oh = spec.out_side(sx[2]).expect("kernel larger than padded input");
        let ow = spec.out_side(sx[3]).expect("kernel larger than padded input");
        let geom = Geom {
            batch: sx[0],
            c_large: sx[1],
            h_large: sx[2],
            w_large: sx[3],
            c_small: sw[0],
            h_small: oh,
            w_small: ow,
        };
        let cols = im2col(&self.value(x).data, &geom, spec);
        let out = weights_times_cols(&self.value(w).data, &cols, &self.value(b).data, &geom, spec);
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                spec,
                geom,
                cols,
            },
            tracked,
        )
    }

    /// Adjoint of [`Graph::conv2d`]: `x: [n, c, h, w]`, `w: [c, o, k, k]`, `b: [o]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sw[0] == sx[1], "conv_t {sx:?} * {sw:?}");
        assert!(sw[2] == spec.kernel && sw[3] == spec.kernel);
        let oh = spec.transposed_out_side(sx[2]).expect("invalid transposed geometry");
        let ow = spec.transposed_out_side(sx[3]).expect("invalid transposed geometry");
        let geom = Geom {
            batch: sx[0],
            c_large: sw[1],
            h_large: oh,
            w_large: ow,
            c_small: sx[1],
            h_small: sx[2],
            w_small: sx[3],
        };
        let (n, rows, p) = (geom.batch, geom.col_rows(spec.kernel), geom.positions());
        // cols[r, img * p + q] = sum_c w[c, r] * x[img, c, q]
        let xs = small_to_matrix(&self.value(x).data, &geom);
        let mut cols = vec![0.0; rows * n * p];
        gemm(
            1.0,
            view(&self.value(w).data, geom.c_small, rows).reversed_axes(),
            view(&xs, geom.c_small, n * p),
            0.0,
            view_mut(&mut cols, rows, n * p),
        );
        let mut out = col2im(&cols, &geom, spec);
        let bias = &self.value(b).data;
        let plane = geom.h_large * geom.w_large;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[i % geom.c_large];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::new(vec![n, geom.c_large, oh, ow], out);
        self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                b,
                spec,
                geom,
            },
            tracked,
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(out, op, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| c * v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a);
        let out = Tensor::new(shape, t.data.clone());
        let tracked = self.tracked(a);
        self.push(out, Op::Reshape(a), tracked)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape.len(), 2, "logits must be [n, classes]");
        let (n, k) = (t.shape[0], t.shape[1]);
        assert_eq!(n, targets.len(), "one target per row");
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            assert!(y < k, "target {y} out of range {k}");
            let row = &t.data[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for (p, &z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let value = if n == 0 { 0.0 } else { loss / n as f64 };
        let tracked = self.tracked(logits);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            tracked,
        )
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape.clone(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                let dyv = view(&dy.data, n, m);
                if self.tracked(a) {
                    let mut da = vec![0.0; n * k];
                    gemm(
                        1.0,
                        dyv,
                        view(&self.value(b).data, k, m).reversed_axes(),
                        0.0,
                        view_mut(&mut da, n, k),
                    );
                    accumulate(grads, a, vec![n, k], da);
                }
                if self.tracked(b) {
                    let mut db = vec![0.0; k * m];
                    gemm(
                        1.0,
                        view(&self.value(a).data, n, k).reversed_axes(),
                        dyv,
                        0.0,
                        view_mut(&mut db, k, m),
                    );
                    accumulate(grads, b, vec![k, m], db);
                }
            }
            Op::AddBias(a, bias) => {
                if self.tracked(a) {
                    accumulate(grads, a, dy.shape.clone(), dy.data.clone());
                }
                if self.tracked(bias) {
                    let m = self.value(bias).len();
                    let mut db = vec![0.0; m];
                    for row in dy.data.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, vec![m], db);
                }
            }
            Op::Conv {
                x,
                w,
                b,
                spec,
                geom,
                ref cols,
            } => {
                let (n, rows, p) = (geom.batch, geom.col_rows(spec.kernel), geom.positions());
                let o = geom.c_small;
                // dy as [o, n * p]
                let dym = small_to_matrix(&dy.data, &geom);
                if self.tracked(w) {
                    let mut dw = vec![0.0; o * rows];
                    gemm(
                        1.0,
                        view(&dym, o, n * p),
                        view(cols, rows, n * p).reversed_axes(),
                        0.0,
                        view_mut(&mut dw, o, rows),
                    );
                    accumulate(grads, w, self.shape(w).to_vec(), dw);
                }
                if self.tracked(b) {
                    let db = dym.chunks(n * p).map(|c| c.iter().sum()).collect();
                    accumulate(grads, b, vec![o], db);
                }
                if self.tracked(x) {
                    let mut dcols = vec![0.0; rows * n * p];
                    gemm(
                        1.0,
                        view(&self.value(w).data, o, rows).reversed_axes(),
                        view(&dym, o, n * p),
                        0.0,
                        view_mut(&mut dcols, rows, n * p),
                    );
                    let dx = col2im(&dcols, &geom, spec);
                    accumulate(grads, x, self.shape(x).to_vec(), dx);
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                spec,
                geom,
            } => {
                let (n, rows, p) = (geom.batch, geom.col_rows(spec.kernel), geom.positions());
                let c = geom.c_small;
                let dcols = im2col(&dy.data, &geom, spec);
                if self.tracked(w) {
                    let xs = small_to_matrix(&self.value(x).data, &geom);
                    let mut dw = vec![0.0; c * rows];
                    gemm(
                        1.0,
                        view(&xs, c, n * p),
                        view(&dcols, rows, n * p).reversed_axes(),
                        0.0,
                        view_mut(&mut dw, c, rows),
                    );
                    accumulate(grads, w, self.shape(w).to_vec(), dw);
                }
                if self.tracked(b) {
                    let plane = geom.h_large * geom.w_large;
                    let mut db = vec![0.0; geom.c_large];
                    for (i, chunk) in dy.data.chunks(plane).enumerate() {
                        db[i % geom.c_large] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, b, vec![geom.c_large], db);
                }
                if self.tracked(x) {
                    let dx = weights_times_cols(
                        &self.value(w).data,
                        &dcols,
                        &vec![0.0; c],
                        &geom,
                        spec,
                    );
                    accumulate(grads, x, self.shape(x).to_vec(), dx.data);
                }
            }
            Op::Relu(a) => {
                let x = &self.value(a).data;
                let d = dy.data.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 });
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(a).data;
                let d = dy
                    .data
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g });
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::Sigmoid(a) => {
                let d = dy.data.iter().zip(&y.data).map(|(&g, &s)| g * s * (1.0 - s));
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::Exp(a) => {
                let d = dy.data.iter().zip(&y.data).map(|(&g, &e)| g * e);
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::Ln(a) => {
                let x = &self.value(a).data;
                let d = dy.data.iter().zip(x).map(|(&g, &v)| g / v);
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.value(a).data;
                let d = dy
                    .data
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if (lo..=hi).contains(&v) { g } else { 0.0 });
                accumulate(grads, a, dy.shape.clone(), d.collect());
            }
            Op::Add(a, b) => {
                if self.tracked(a) {
                    accumulate(grads, a, dy.shape.clone(), dy.data.clone());
                }
                if self.tracked(b) {
                    accumulate(grads, b, dy.shape.clone(), dy.data.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(a) {
                    accumulate(grads, a, dy.shape.clone(), dy.data.clone());
                }
                if self.tracked(b) {
                    accumulate(grads, b, dy.shape.clone(), dy.data.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&self.value(a).data, &self.value(b).data);
                if self.tracked(a) {
                    let d = dy.data.iter().zip(xb).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, a, dy.shape.clone(), d);
                }
                if self.tracked(b) {
                    let d = dy.data.iter().zip(xa).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, b, dy.shape.clone(), d);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, a, dy.shape.clone(), dy.data.iter().map(|g| c * g).collect());
            }
            Op::AddScalar(a) => {
                accumulate(grads, a, dy.shape.clone(), dy.data.clone());
            }
            Op::Square(a) => {
                let x = &self.value(a).data;
                let d = dy.data.iter().zip(x).map(|(&g, &v)| 2.0 * v * g).collect();
                accumulate(grads, a, dy.shape.clone(), d);
            }
            Op::Sum(a) => {
                let s = self.value(a).shape.clone();
                let n = self.value(a).len();
                accumulate(grads, a, s, vec![dy.data[0]; n]);
            }
            Op::Reshape(a) => {
                let s = self.value(a).shape.clone();
                accumulate(grads, a, s, dy.data.clone());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref probs,
                ref targets,
            } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let k = probs.len() / n;
                let scale = dy.data[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * k + t] -= scale;
                }
                accumulate(grads, logits, vec![n, k], d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: Vec<usize>, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, d)),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

fn gemm(
    alpha: f64,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    beta: f64,
    mut c: ArrayViewMut2<'_, f64>,
) {
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

/// Unfolds the large-side tensor into `[c_large * k * k, n * p_small]` columns.
fn im2col(x: &[f64], g: &Geom, spec: ConvSpec) -> Vec<f64> {
    let k = spec.kernel;
    let (n, p) = (g.batch, g.positions());
    let total = n * p;
    let mut cols = vec![0.0; g.col_rows(k) * total];
    let plane = g.h_large * g.w_large;
    for img in 0..n {
        for c in 0..g.c_large {
            let src = &x[(img * g.c_large + c) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut cols[r * total + img * p..][..p];
                    for oy in 0..g.h_small {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= g.h_large as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w_large..][..g.w_large];
                        let drow = &mut dst[oy * g.w_small..][..g.w_small];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < g.w_large as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
fn col2im(cols: &[f64], g: &Geom, spec: ConvSpec) -> Vec<f64> {
    let k = spec.kernel;
    let (n, p) = (g.batch, g.positions());
    let total = n * p;
    let plane = g.h_large * g.w_large;
    let mut x = vec![0.0; n * g.c_large * plane];
    for img in 0..n {
        for c in 0..g.c_large {
            let dst = &mut x[(img * g.c_large + c) * plane..][..plane];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &cols[r * total + img * p..][..p];
                    for oy in 0..g.h_small {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= g.h_large as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w_large..][..g.w_large];
                        for ox in 0..g.w_small {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < g.w_large as isize {
                                drow[ix as usize] += src[oy * g.w_small + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c_small, p]` -> `[c_small, n * p]`.
fn small_to_matrix(x: &[f64], g: &Geom) -> Vec<f64> {
    let (n, c, p) = (g.batch, g.c_small, g.positions());
    let mut out = vec![0.0; x.len()];
    for img in 0..n {
        for ch in 0..c {
            out[ch * n * p + img * p..][..p].copy_from_slice(&x[(img * c + ch) * p..][..p]);
        }
    }
    out
}

/// `W [c_small, rows] x cols [rows, n * p] + b`, laid out as `[n, c_small, h_small, w_small]`.
fn weights_times_cols(w: &[f64], cols: &[f64], b: &[f64], g: &Geom, spec: ConvSpec) -> Tensor {
    let (n, p, o) = (g.batch, g.positions(), g.c_small);
    let rows = g.col_rows(spec.kernel);
    let mut m = vec![0.0; o * n * p];
    gemm(
        1.0,
        view(w, o, rows),
        view(cols, rows, n * p),
        0.0,
        view_mut(&mut m, o, n * p),
    );
    let mut out = vec![0.0; o * n * p];
    for img in 0..n {
        for ch in 0..o {
            let dst = &mut out[(img * o + ch) * p..][..p];
            let src = &m[ch * n * p + img * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b[ch];
            }
        }
    }
    Tensor::new(vec![n, o, g.h_small, g.w_small], out)
}

use std::fmt;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{ParamId, ParamStore, Tensor2, LAYER_NORM_EPS};
use crate::error::{Result, TmlpError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward and backward are supplied by the caller.
///
/// `backward` returns one gradient per input, in the order the inputs were
/// passed to [`Tape::apply`]; `None` means the input receives no gradient.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2>;

    fn backward(
        &self,
        inputs: &[&Tensor2],
        output: &Tensor2,
        grad_output: &Tensor2,
    ) -> Vec<Option<Tensor2>>;
}

enum Value<'s> {
    Owned(Tensor2),
    Borrowed(&'s Tensor2),
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor2,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Tensor2,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CosineRows(Var, Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node<'s> {
    value: Value<'s>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// Parameters and large constant inputs are borrowed, not copied, for the
/// lifetime of the tape.
#[derive(Default)]
pub struct Tape<'s> {
    nodes: Vec<Node<'s>>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn shape(t: &Tensor2) -> (usize, usize) {
    t.dim()
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward pass"
        );
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_ref(&mut self, value: &'s Tensor2) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &'s ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.value(id)),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(TmlpError::Shape {
                op: "matmul",
                left: shape(x),
                right: shape(y),
            });
        }
        let out = x.dot(y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` where `b` is a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(TmlpError::Shape {
                op: "add_row",
                left: shape(xv),
                right: shape(bv),
            });
        }
        let out = xv + bv;
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x·W + b`, with `W` stored as (in, out) and `b` as (1, out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(TmlpError::Shape {
                op: "add",
                left: shape(x),
                right: shape(y),
            });
        }
        let out = x + y;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Per-row normalization over the feature axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.ncols();
        for (t, op) in [(gv, "layer_norm gain"), (bv, "layer_norm bias")] {
            if t.dim() != (1, cols) {
                return Err(TmlpError::Shape {
                    op,
                    left: shape(xv),
                    right: shape(t),
                });
            }
        }
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / cols as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &normed * gv + bv;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        train_mode: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TmlpError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 || !train_mode {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask = Array2::from_shape_fn(xv.dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = xv * &mask;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.nrows() != y.nrows() {
            return Err(TmlpError::Shape {
                op: "concat_cols",
                left: shape(x),
                right: shape(y),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[x.view(), y.view()]).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(TmlpError::Shape {
                op: "concat_rows",
                left: shape(x),
                right: shape(y),
            });
        }
        let out = ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("col counts checked");
        Ok(self.push(out, Op::ConcatRows(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.nrows()) {
            return Err(TmlpError::InvalidArgument(format!(
                "gather row {bad} out of bounds for {} rows",
                xv.nrows()
            )));
        }
        let out = xv.select(Axis(0), rows);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row-wise cosine similarity of two equally shaped matrices; output (rows, 1).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(TmlpError::Shape {
                op: "cosine_rows",
                left: shape(x),
                right: shape(y),
            });
        }
        let out = Array2::from_shape_fn((x.nrows(), 1), |(r, _)| {
            cosine_sim(x.row(r).as_slice().unwrap(), y.row(r).as_slice().unwrap())
        });
        Ok(self.push(out, Op::CosineRows(a, b)))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn apply(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor2> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(TmlpError::Shape {
                op: "backward",
                left: lv.dim(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor2>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &g * *f),
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let ggain = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    // dL/dx̂ = g ⊙ gain; dL/dx = inv_std · (dx̂ − mean(dx̂) − x̂·mean(dx̂ ⊙ x̂))
                    let dxhat = &g * gv;
                    let cols = normed.ncols() as f64;
                    let mut gx = Array2::zeros(normed.dim());
                    for r in 0..normed.nrows() {
                        let dh = dxhat.row(r);
                        let xh = normed.row(r);
                        let m1 = dh.sum() / cols;
                        let m2 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let is = inv_std[r];
                        for c in 0..normed.ncols() {
                            gx[[r, c]] = is * (dh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => acc(&mut grads, *x, &g * mask),
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).nrows();
                    acc(&mut grads, *a, g.slice(s![..split, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(s![split.., ..]).to_owned());
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CosineRows(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::zeros(x.dim());
                    let mut gb = Array2::zeros(y.dim());
                    for r in 0..x.nrows() {
                        let (xr, yr) = (x.row(r), y.row(r));
                        let (dx, dy) = cosine_grad(xr.as_slice().unwrap(), yr.as_slice().unwrap());
                        let gr = g[[r, 0]];
                        for c in 0..x.ncols() {
                            ga[[r, c]] = gr * dx[c];
                            gb[[r, c]] = gr * dy[c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor2> = inputs.iter().map(|&v| self.value(v)).collect();
                    let out = self.value(Var(idx));
                    let gs = op.backward(&vals, out, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                    for (&v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            acc(&mut grads, v, gi);
                        }
                    }
                }
            }
            // Keep gradients of leaves so callers can read them.
            if matches!(node.op, Op::Constant | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads[i].clone().map(|g| (id, g)),
                _ => None,
            })
            .collect();
        Ok(Grads { nodes: grads, params })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Tensor2>>,
    params: Vec<(ParamId, Tensor2)>,
}

impl Grads {
    /// Gradient with respect to a leaf (constant or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients; a parameter used several times appears several times.
    pub fn params(&self) -> &[(ParamId, Tensor2)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor2> {
        let mut total: Option<Tensor2> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut total {
                    Some(t) => *t += g,
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }
}

const COS_EPS: f64 = 1e-12;

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Partial derivatives of `cosine_sim(a, b)` with respect to `a` and `b`.
pub(crate) fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    (da, db)
}

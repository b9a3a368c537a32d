//! Tape-based reverse-mode differentiation over [`DiffArray`] values.
//!
//! Every primitive appends one node holding its output value and the
//! handles of its inputs. Nodes are appended after their inputs, so the
//! tape is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::array::DiffArray;
use super::kernels::{gemm, Layout};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    StraightThrough {
        input: Var,
        factor: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: DiffArray,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Splits `len` elements along `axis` of `shape` into (outer, n, inner) strides.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient buffer for `v`, or None when `v` does not take part in
/// differentiation.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives gradients iff `array.requires_grad()`.
    pub fn leaf(&mut self, array: DiffArray) -> Var {
        let needs_grad = array.requires_grad();
        self.push_raw(array, Op::Leaf, needs_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, array: DiffArray) -> Var {
        self.leaf(array.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, array: DiffArray) -> Var {
        self.leaf(array.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push_raw(&mut self, value: DiffArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = DiffArray::new(shape, data)?;
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(a).len() == 1 {
            Ok(Broadcast::LeftScalar)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::RightScalar)
        } else {
            Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::Same => (
                self.shape(a).to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LeftScalar => (
                self.shape(b).to_vec(),
                db.iter().map(|&y| f(da[0], y)).collect(),
            ),
            Broadcast::RightScalar => (
                self.shape(a).to_vec(),
                da.iter().map(|&x| f(x, db[0])).collect(),
            ),
        };
        self.push(name, shape, data, make(a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`d` vector to every row of an `[n, d]` array.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2("add_row")?;
        if self.shape(bias) != [d] {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, data, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::Normal,
            self.data(b),
            Layout::Normal,
            &mut out,
            0.0,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of `[t, m, k]` with `[t, k, n]`, or with `[t, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let dims_err = |s: &Self| Error::Dimension {
            op: "batch_matmul",
            left: s.shape(a).to_vec(),
            right: s.shape(b).to_vec(),
        };
        let (t, m, k) = match self.shape(a) {
            &[t, m, k] => (t, m, k),
            _ => return Err(dims_err(self)),
        };
        let (t2, n) = match (self.shape(b), transpose_b) {
            (&[t2, k2, n], false) if k2 == k => (t2, n),
            (&[t2, n, k2], true) if k2 == k => (t2, n),
            _ => return Err(dims_err(self)),
        };
        if t != t2 {
            return Err(dims_err(self));
        }
        let mut out = vec![0.0; t * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let lb = if transpose_b {
            Layout::Transposed
        } else {
            Layout::Normal
        };
        for i in 0..t {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &db[i * k * n..(i + 1) * k * n],
                lb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(
            "batch_matmul",
            vec![t, m, n],
            out,
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        )
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                left: shape,
                right: vec![axis],
            });
        }
        let (outer, n, inner) = axis_strides(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        if epsilon <= 0.0 {
            return Err(Error::config("epsilon", "must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Data("layer_norm on 0-d".into()))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `[n, c]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(Error::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= n as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Row lookup into a `[v, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("gather")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", vec![ids.len(), d], out, op, &[table])
    }

    /// Picks rows of an `[n, d]` array.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2("select_rows")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        self.push("select_rows", vec![rows.len(), d], out, op, &[x])
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.value(x).dims2("split_heads")?;
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension {
                op: "split_heads",
                left: self.shape(x).to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        let dh = width / heads;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..seq {
                let row = &src[(b * seq + l) * width..(b * seq + l + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + l) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let op = Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        };
        self.push("split_heads", vec![batch * heads, seq, dh], out, op, &[x])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let dh = match self.shape(x) {
            &[t, s, dh] if t == batch * heads && s == seq => dh,
            _ => {
                return Err(Error::Dimension {
                    op: "merge_heads",
                    left: self.shape(x).to_vec(),
                    right: vec![batch, seq, heads],
                })
            }
        };
        let width = heads * dh;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let from = ((b * heads + h) * seq + l) * dh;
                    let to = (b * seq + l) * width + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let op = Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        };
        self.push("merge_heads", vec![batch * seq, width], out, op, &[x])
    }

    /// Emits `value` on the forward pass; on the backward pass the incoming
    /// gradient reaches `input` multiplied elementwise by `factor`.
    pub fn straight_through(&mut self, input: Var, value: DiffArray, factor: Vec<f64>) -> Result<Var> {
        if value.shape() != self.shape(input) || factor.len() != value.len() {
            return Err(Error::Dimension {
                op: "straight_through",
                left: self.shape(input).to_vec(),
                right: value.shape().to_vec(),
            });
        }
        let shape = value.shape().to_vec();
        let data = value.into_data();
        self.push(
            "straight_through",
            shape,
            data,
            Op::StraightThrough { input, factor },
            &[input],
        )
    }

    /// Propagates gradients from the scalar `loss` into every reachable leaf
    /// that requires them. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_trace(loss).map(|_| ())
    }

    /// Same as [`Tape::backward`], returning the nodes visited in order.
    pub fn backward_trace(&mut self, loss: Var) -> Result<Vec<Var>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            visited.push(Var(i));
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.value.requires_grad() && n.value.grad().is_none() {
                let zeros = vec![0.0; n.value.len()];
                n.value.accumulate_grad(&zeros);
            }
        }
        Ok(visited)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(&self.nodes, grads, $v) {
                    $body
                }
            };
        }
        let bc_acc = |buf: &mut [f64], g: &[f64], scalar: bool, f: &dyn Fn(usize) -> f64| {
            if scalar {
                buf[0] += (0..g.len()).map(f).sum::<f64>();
            } else {
                buf.iter_mut().enumerate().for_each(|(j, b)| *b += f(j));
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with_grad!(*a, |buf| bc_acc(buf, g, *bc == Broadcast::LeftScalar, &|j| g[j]));
                with_grad!(*b, |buf| bc_acc(
                    buf,
                    g,
                    *bc == Broadcast::RightScalar,
                    &|j| sign * g[j]
                ));
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let at = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                with_grad!(*a, |buf| bc_acc(buf, g, *bc == Broadcast::LeftScalar, &|j| g[j]
                    * at(db, j)));
                with_grad!(*b, |buf| bc_acc(buf, g, *bc == Broadcast::RightScalar, &|j| g[j]
                    * at(da, j)));
            }
            Op::Scale(a, f) => {
                with_grad!(*a, |buf| buf.iter_mut().zip(g).for_each(|(b, g)| *b += f * g));
            }
            Op::AddRow(x, bias) => {
                with_grad!(*x, |buf| buf.iter_mut().zip(g).for_each(|(b, g)| *b += g));
                with_grad!(*bias, |buf| {
                    let d = buf.len();
                    for row in g.chunks_exact(d) {
                        buf.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                with_grad!(*a, |buf| gemm(
                    m,
                    n,
                    k,
                    g,
                    Layout::Normal,
                    self.data(*b),
                    Layout::Transposed,
                    buf,
                    1.0
                ));
                with_grad!(*b, |buf| gemm(
                    k,
                    m,
                    n,
                    self.data(*a),
                    Layout::Transposed,
                    g,
                    Layout::Normal,
                    buf,
                    1.0
                ));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (t, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |buf| {
                    for i in 0..t {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        // dA = G·Bᵀ, or G·B when B was used transposed.
                        let lb = if *transpose_b {
                            Layout::Normal
                        } else {
                            Layout::Transposed
                        };
                        gemm(m, n, k, gi, Layout::Normal, bi, lb, &mut buf[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                with_grad!(*b, |buf| {
                    for i in 0..t {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let dst = &mut buf[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB[n,k] = Gᵀ·A
                            gemm(n, m, k, gi, Layout::Transposed, ai, Layout::Normal, dst, 1.0);
                        } else {
                            // dB[k,n] = Aᵀ·G
                            gemm(k, m, n, ai, Layout::Transposed, gi, Layout::Normal, dst, 1.0);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                with_grad!(*a, |buf| buf.iter_mut().enumerate().for_each(|(j, b)| {
                    if x[j] > 0.0 {
                        *b += g[j];
                    }
                }));
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                with_grad!(*a, |buf| buf
                    .iter_mut()
                    .enumerate()
                    .for_each(|(j, b)| *b += g[j] * gelu_grad(x[j])));
            }
            Op::Exp(a) => {
                with_grad!(*a, |buf| buf
                    .iter_mut()
                    .enumerate()
                    .for_each(|(j, b)| *b += g[j] * out[j]));
            }
            Op::Log(a) => {
                let x = self.data(*a);
                with_grad!(*a, |buf| buf
                    .iter_mut()
                    .enumerate()
                    .for_each(|(j, b)| *b += g[j] / x[j]));
            }
            Op::Sum(a) => {
                with_grad!(*a, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
            Op::Mean(a) => {
                with_grad!(*a, |buf| {
                    let s = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|b| *b += s);
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_strides(node.value.shape(), *axis);
                with_grad!(*x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.data(*gain);
                with_grad!(*gain, |buf| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*bias, |buf| {
                    for grow in g.chunks_exact(d) {
                        buf.iter_mut().zip(grow).for_each(|(b, g)| *b += g);
                    }
                });
                with_grad!(*x, |buf| {
                    let df = d as f64;
                    for r in 0..inv_std.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let s = inv_std[r] / df;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            buf[r * d + j] += s * (df * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                with_grad!(*logits, |buf| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            buf[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { table: src, ids } | Op::SelectRows { x: src, rows: ids } => {
                let d = node.value.shape()[1];
                with_grad!(*src, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(b, g)| *b += g);
                    }
                });
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.value.shape()[2];
                let width = heads * dh;
                with_grad!(*x, |buf| {
                    for b in 0..*batch {
                        for l in 0..*seq {
                            for h in 0..*heads {
                                let from = ((b * heads + h) * seq + l) * dh;
                                let to = (b * seq + l) * width + h * dh;
                                buf[to..to + dh]
                                    .iter_mut()
                                    .zip(&g[from..from + dh])
                                    .for_each(|(b, g)| *b += g);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let width = node.value.shape()[1];
                let dh = width / heads;
                with_grad!(*x, |buf| {
                    for b in 0..*batch {
                        for l in 0..*seq {
                            for h in 0..*heads {
                                let to = ((b * heads + h) * seq + l) * dh;
                                let from = (b * seq + l) * width + h * dh;
                                buf[to..to + dh]
                                    .iter_mut()
                                    .zip(&g[from..from + dh])
                                    .for_each(|(b, g)| *b += g);
                            }
                        }
                    }
                });
            }
            Op::StraightThrough { input, factor } => {
                with_grad!(*input, |buf| buf
                    .iter_mut()
                    .enumerate()
                    .for_each(|(j, b)| *b += g[j] * factor[j]));
            }
        }
    }
}

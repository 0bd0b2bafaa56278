use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`]. Cheap to copy; only valid on the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gelu(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    CausalSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<Vec<f64>>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Sum(usize),
    MeanRows(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Eager computation graph (a dynamic tape).
///
/// Every operation is evaluated immediately and appended to the tape, so the
/// tape is always in topological order. A graph is confined to one thread;
/// data parallelism uses one graph per example.
pub struct Graph<'p> {
    id: u64,
    store: Option<&'p ParamStore>,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
    backward_done: Cell<bool>,
    warnings: RefCell<Vec<String>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    graph: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads[v.idx]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.idx], g.clone()).expect("grad shape"))
    }

    /// Gradients for every bound parameter, in binding order.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, idx)| {
                self.grads[idx].as_ref().map(|g| {
                    (
                        pid,
                        Tensor::new(&self.shapes[idx], g.clone()).expect("grad shape"),
                    )
                })
            })
            .collect()
    }
}

impl<'p> Graph<'p> {
    /// A recording graph bound to a parameter store.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// A non-recording graph: values only, no gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    /// A recording graph with no parameter store (leaves only).
    pub fn standalone() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(store: Option<&'p ParamStore>, record: bool) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            store,
            record,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            dropout_rng: RefCell::new(None),
            backward_done: Cell::new(false),
            warnings: RefCell::new(Vec::new()),
        }
    }

    /// Enables dropout with a seeded mask stream. Without this call dropout is
    /// the identity (evaluation mode).
    pub fn with_dropout(self, seed: u64) -> Self {
        *self.dropout_rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(TensorError::DetachedVar);
        }
        Ok(v.idx)
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            graph: self.id,
            idx,
        }
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        Arc::clone(&self.nodes.borrow()[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        Ok(self.var(idx))
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad && self.record)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(&idx) = self.bound.borrow().get(&id) {
            return Ok(self.var(idx));
        }
        let store = self.store.ok_or(TensorError::NoParamStore)?;
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: self.record,
            param: Some(id),
        });
        drop(nodes);
        self.bound.borrow_mut().insert(id, idx);
        Ok(self.var(idx))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, Arc<Tensor>, Arc<Tensor>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok((ia, ib, va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, va, vb) = self.binary_same_shape("add", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add", Tensor::new(va.shape(), data)?, Op::Add(ia, ib), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, va, vb) = self.binary_same_shape("sub", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let rg = self.rg(ia) || self.rg(ib);
        self.push("sub", Tensor::new(va.shape(), data)?, Op::Sub(ia, ib), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, va, vb) = self.binary_same_shape("mul", a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(ia) || self.rg(ib);
        self.push("mul", Tensor::new(va.shape(), data)?, Op::Mul(ia, ib), rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        self.push("scale", Tensor::new(va.shape(), data)?, Op::Scale(ia, s), self.rg(ia))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vb.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        self.push("add_bias", Tensor::new(vx.shape(), data)?, Op::AddBias(ix, ib), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.value(a).matmul(&self.value(b))?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", out, Op::MatMul(ia, ib), rg)
    }

    /// a · bᵀ for a[m×k], b[n×k].
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2()?;
        let (n, k2) = vb.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(m, k, n, va.data(), vb.data(), &mut out);
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul_nt", Tensor::new(&[m, n], out)?, Op::MatMulNt(ia, ib), rg)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(ia), self.rg(ia))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = (*self.value(a)).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(ia), self.rg(ia))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        self.push("gelu", Tensor::new(va.shape(), data)?, Op::Gelu(ia), self.rg(ia))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        self.push("relu", Tensor::new(va.shape(), data)?, Op::Relu(ia), self.rg(ia))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out = vec![0.0; vx.len()];
        let mut src = vec![0.0; len];
        let mut dst = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..len {
                    src[k] = vx.data()[(o * len + k) * inner + i];
                }
                kernels::softmax_slice(&src, &mut dst);
                for k in 0..len {
                    out[(o * len + k) * inner + i] = dst[k];
                }
            }
        }
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x: ix, axis }, self.rg(ix))
    }

    /// Row softmax of a T×S score matrix where row `i` may only attend to
    /// columns `j <= offset + i`; masked entries are exactly zero.
    pub fn causal_softmax(&self, x: Var, offset: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = self.value(x);
        let (t, s) = vx.dims2()?;
        let mut out = vec![0.0; t * s];
        for i in 0..t {
            let allowed = (offset + i + 1).min(s);
            kernels::softmax_slice(
                &vx.data()[i * s..i * s + allowed],
                &mut out[i * s..i * s + allowed],
            );
        }
        self.push("causal_softmax", Tensor::new(&[t, s], out)?, Op::CausalSoftmax(ix), self.rg(ix))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vg.len() != n || vb.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.len() / n;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = Op::LayerNorm {
            x: ix,
            gain: ig,
            bias: ib,
            xhat: if rg { xhat } else { Vec::new() },
            rstd,
        };
        self.push("layer_norm", Tensor::new(vx.shape(), out)?, op, rg)
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore_id`. If every position is ignored the loss is 0 and a warning
    /// is recorded on the graph.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], ignore_id: Option<usize>) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = self.value(logits);
        let (t, v) = vl.dims2()?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut tg = Vec::with_capacity(t);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &y) in targets.iter().enumerate() {
            kernels::softmax_slice(vl.row(r), &mut probs[r * v..(r + 1) * v]);
            if Some(y) == ignore_id {
                tg.push(None);
                continue;
            }
            if y >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    limit: v,
                });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
            tg.push(Some(y));
        }
        let loss = if count == 0 {
            self.warnings
                .borrow_mut()
                .push("cross_entropy: every position ignored, loss defined as 0".into());
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(il);
        let op = Op::CrossEntropy {
            logits: il,
            targets: tg,
            probs: if rg { probs } else { Vec::new() },
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, rg)
    }

    /// Mean binary cross-entropy on logits against {0,1} targets.
    pub fn bce_with_logits(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = self.value(logits);
        if vl.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            logits: il,
            targets: targets.to_vec(),
        };
        self.push("bce_with_logits", Tensor::scalar(loss), op, self.rg(il))
    }

    /// Cross-correlation of a C×H×W input with a Cout×(C/groups)×kh×kw kernel.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let (vi, vk) = (self.value(input), self.value(kernel));
        let geom = conv_geom(vi.shape(), vk.shape(), stride, padding, groups)?;
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let rg = self.rg(ii) || self.rg(ik);
        let mut out = vec![0.0; geom.out_c * oh * ow];
        let cpg_out = geom.cout_per_group();
        let krows = geom.col_rows();
        let mut saved = Vec::new();
        for g in 0..groups {
            let cols = kernels::im2col(&geom, vi.data(), g);
            let kslice = &vk.data()[g * cpg_out * krows..(g + 1) * cpg_out * krows];
            let oslice = &mut out[g * cpg_out * oh * ow..(g + 1) * cpg_out * oh * ow];
            kernels::gemm(cpg_out, krows, oh * ow, kslice, &cols, oslice);
            if rg {
                saved.push(cols);
            }
        }
        let op = Op::Conv2d {
            input: ii,
            kernel: ik,
            geom,
            cols: saved,
        };
        self.push("conv2d", Tensor::new(&[geom.out_c, oh, ow], out)?, op, rg)
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = self.value(table);
        let (v, h) = vt.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(vt.row(id));
        }
        let op = Op::Embedding {
            table: it,
            ids: ids.to_vec(),
        };
        self.push("embedding", Tensor::new(&[ids.len(), h], out)?, op, self.rg(it))
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                limit: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&vx.data()[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::new(&[r, w], out)?, Op::SliceCols { x: ix, start }, self.rg(ix))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let r = vals.first().ok_or(TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?.dims2()?.0;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (rr, c) = v.dims2()?;
            if rr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push("concat_cols", Tensor::new(&[r, total], out)?, Op::ConcatCols(ids), rg)
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                limit: r,
            });
        }
        let out = vx.data()[start * c..end * c].to_vec();
        self.push("slice_rows", Tensor::new(&[end - start, c], out)?, Op::SliceRows { x: ix, start }, self.rg(ix))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals.first().ok_or(TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?.dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &vals {
            let (r, cc) = v.dims2()?;
            if cc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push("concat_rows", Tensor::new(&[rows, c], out)?, Op::ConcatRows(ids), rg)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ix), self.rg(ix))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Column means of an R×C matrix, as 1×C.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push("mean_rows", Tensor::new(&[1, c], out)?, Op::MeanRows(ix), self.rg(ix))
    }

    /// Inverted dropout; identity unless the graph was built `with_dropout`.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        let mut rng = self.dropout_rng.borrow_mut();
        let Some(rng) = rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let ix = self.check(x)?;
        let vx = self.value(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..vx.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push("dropout", Tensor::new(vx.shape(), data)?, Op::Dropout { x: ix, mask }, self.rg(ix))
    }

    /// Allows a second backward pass on the same graph.
    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar loss. Every leaf that requires a gradient
    /// receives one (zeros if the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[il].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done.set(true);
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if nodes[il].requires_grad {
            grads[il] = Some(vec![1.0]);
        }
        for i in (0..=il).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let mut params = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
            if let Some(pid) = node.param {
                params.push((pid, i));
            }
        }
        Ok(Gradients {
            graph: self.id,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<ConvGeom> {
    let ([c, h, w], [cout, cin, kh, kw]) = (input, kernel) else {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    };
    if groups == 0 || stride.0 == 0 || stride.1 == 0 || cin * groups != *c || cout % groups != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    if h + 2 * padding.0 < *kh || w + 2 * padding.1 < *kw {
        return Err(TensorError::InvalidShape {
            shape: input.to_vec(),
            reason: format!("conv2d output would be empty for kernel {kh}x{kw}"),
        });
    }
    Ok(ConvGeom {
        in_c: *c,
        in_h: *h,
        in_w: *w,
        out_c: *cout,
        kh: *kh,
        kw: *kw,
        stride,
        padding,
        groups,
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |j: usize| nodes[j].value.as_ref();
    let rg = |j: usize| nodes[j].requires_grad;
    let out = nodes[i].value.as_ref();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &(j, s) in &[(*a, 1.0), (*b, 1.0)] {
                if rg(j) {
                    accumulate(grads, j, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                }
            }
        }
        Op::Sub(a, b) => {
            for &(j, s) in &[(*a, 1.0), (*b, -1.0)] {
                if rg(j) {
                    accumulate(grads, j, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                }
            }
        }
        Op::Mul(a, b) => {
            for &(j, other) in &[(*a, *b), (*b, *a)] {
                if rg(j) {
                    let o = val(other).data();
                    accumulate(grads, j, g.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * o[k];
                        }
                    });
                }
            }
        }
        Op::Scale(a, s) => {
            if rg(*a) {
                accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
            }
        }
        Op::AddBias(x, b) => {
            if rg(*x) {
                accumulate(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            if rg(*b) {
                let n = val(*b).len();
                accumulate(grads, *b, n, |d| {
                    for row in g.chunks(n) {
                        for (d, g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = va.dims2().expect("rank 2");
            let n = vb.shape()[1];
            if rg(*a) {
                accumulate(grads, *a, m * k, |d| kernels::gemm_nt(m, n, k, g, vb.data(), d));
            }
            if rg(*b) {
                accumulate(grads, *b, k * n, |d| kernels::gemm_tn(k, m, n, va.data(), g, d));
            }
        }
        Op::MatMulNt(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = va.dims2().expect("rank 2");
            let n = vb.shape()[0];
            if rg(*a) {
                accumulate(grads, *a, m * k, |d| kernels::gemm(m, n, k, g, vb.data(), d));
            }
            if rg(*b) {
                accumulate(grads, *b, n * k, |d| kernels::gemm_tn(n, m, k, g, va.data(), d));
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                let (r, c) = out.dims2().expect("rank 2");
                let gt = kernels::transpose(r, c, g);
                accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(&gt).for_each(|(d, g)| *d += g));
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
        }
        Op::Gelu(a) => {
            if rg(*a) {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * kernels::gelu_grad(x[k]);
                    }
                });
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
        }
        Op::Softmax { x, axis } => {
            if rg(*x) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                accumulate(grads, *x, g.len(), |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + ii;
                            let dotp: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dotp);
                            }
                        }
                    }
                });
            }
        }
        Op::CausalSoftmax(x) => {
            if rg(*x) {
                let (t, s) = out.dims2().expect("rank 2");
                let y = out.data();
                accumulate(grads, *x, g.len(), |d| {
                    for r in 0..t {
                        let row = r * s..(r + 1) * s;
                        let dotp: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for k in row {
                            d[k] += y[k] * (g[k] - dotp);
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = val(*gain).len();
            let gv = val(*gain).data();
            if rg(*x) {
                accumulate(grads, *x, g.len(), |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dy: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dy.iter().sum::<f64>() / n as f64;
                        let m2 = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] += rs * (dy[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            if rg(*gain) {
                accumulate(grads, *gain, n, |d| {
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * xh[j];
                        }
                    }
                });
            }
            if rg(*bias) {
                accumulate(grads, *bias, n, |d| {
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            d[j] += gr[j];
                        }
                    }
                });
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 || !rg(*logits) {
                return;
            }
            let v = val(*logits).shape()[1];
            let scale = g[0] / *count as f64;
            accumulate(grads, *logits, probs.len(), |d| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for k in 0..v {
                        d[r * v + k] += scale * probs[r * v + k];
                    }
                    d[r * v + t] -= scale;
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            if rg(*logits) {
                let x = val(*logits).data();
                let scale = g[0] / targets.len() as f64;
                accumulate(grads, *logits, x.len(), |d| {
                    for k in 0..x.len() {
                        let s = 1.0 / (1.0 + (-x[k]).exp());
                        d[k] += scale * (s - targets[k]);
                    }
                });
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let (oh, ow) = (geom.out_h(), geom.out_w());
            let cpg_out = geom.cout_per_group();
            let krows = geom.col_rows();
            let vk = val(*kernel).data();
            for grp in 0..geom.groups {
                let gout = &g[grp * cpg_out * oh * ow..(grp + 1) * cpg_out * oh * ow];
                if rg(*kernel) {
                    accumulate(grads, *kernel, vk.len(), |d| {
                        let dk = &mut d[grp * cpg_out * krows..(grp + 1) * cpg_out * krows];
                        kernels::gemm_nt(cpg_out, oh * ow, krows, gout, &cols[grp], dk);
                    });
                }
                if rg(*input) {
                    let kslice = &vk[grp * cpg_out * krows..(grp + 1) * cpg_out * krows];
                    let mut dcols = vec![0.0; krows * oh * ow];
                    kernels::gemm_tn(krows, cpg_out, oh * ow, kslice, gout, &mut dcols);
                    let len = val(*input).len();
                    accumulate(grads, *input, len, |d| kernels::col2im(geom, &dcols, grp, d));
                }
            }
        }
        Op::Embedding { table, ids } => {
            if rg(*table) {
                let (v, h) = val(*table).dims2().expect("rank 2");
                accumulate(grads, *table, v * h, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            d[id * h + j] += g[r * h + j];
                        }
                    }
                });
            }
        }
        Op::SliceCols { x, start } => {
            if rg(*x) {
                let (r, c) = val(*x).dims2().expect("rank 2");
                let w = out.shape()[1];
                accumulate(grads, *x, r * c, |d| {
                    for i in 0..r {
                        for j in 0..w {
                            d[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let r = out.shape()[0];
            let mut off = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if rg(p) {
                    accumulate(grads, p, r * w, |d| {
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                }
                off += w;
            }
        }
        Op::SliceRows { x, start } => {
            if rg(*x) {
                let c = out.shape()[1];
                let len = val(*x).len();
                accumulate(grads, *x, len, |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[start * c + k] += gv;
                    }
                });
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                if rg(p) {
                    accumulate(grads, p, len, |d| {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g)
                    });
                }
                off += len;
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                let len = val(*x).len();
                accumulate(grads, *x, len, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
        }
        Op::MeanRows(x) => {
            if rg(*x) {
                let (r, c) = val(*x).dims2().expect("rank 2");
                accumulate(grads, *x, r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
        }
        Op::Dropout { x, mask } => {
            if rg(*x) {
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * mask[k];
                    }
                });
            }
        }
    }
}

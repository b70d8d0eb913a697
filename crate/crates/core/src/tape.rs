//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in construction order, which is already a
//! topological order, so the backward pass is a single reverse sweep with a
//! fixed accumulation order: runs are bit-reproducible. Stop-gradient is a
//! first-class node (`stop_grad`) whose forward value is bit-identical to its
//! input and which blocks all gradient flow into it.
//!
//! Every forward op validates shapes and checks its output for NaN/Inf.

use crate::tensor::{NumericsError, Result, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
#[allow(dead_code)] // unread fields are kept for Debug output of the graph
enum Op {
    Leaf,
    StopGrad(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Matmul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Slice { src: NodeId, start: usize, len: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    SoftmaxPlusOne(NodeId),
    Norm(NodeId),
    GatherRow(NodeId, usize),
    Index(NodeId, usize),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    /// (1-w)*a + w*b with scalar weight w.
    Blend { a: NodeId, b: NodeId, w: NodeId },
    MulScalar { a: NodeId, s: NodeId },
    AddScalar { a: NodeId, s: NodeId },
    /// out[ids[s]] += src[s]; maps source-position weights into vocabulary bins.
    Scatter { src: NodeId, ids: Vec<usize>, out_len: usize },
    ClampMin(NodeId, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Gradient flows into this node (some ancestor leaf requires grad and no
    /// stop-gradient bars the path).
    active: bool,
}

/// How `stop_grad` treats its forward value. `Record` logs every SG value in
/// call order; `Replay` substitutes previously recorded values instead of the
/// live input. The finite-difference oracle in [`grad_check`] uses this to
/// hold SG paths constant, matching what the backward pass computes.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SgMode {
    #[default]
    Normal,
    Record,
    Replay,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    sg_mode: SgMode,
    sg_log: Vec<Tensor>,
    sg_cursor: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if any flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn active(&self, id: NodeId) -> bool {
        self.nodes[id.0].active
    }

    fn push(&mut self, value: Tensor, op: Op, active: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, active });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            active: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            active: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Forward value is bit-identical to `a`; the backward pass treats this
    /// node as a constant.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = match self.sg_mode {
            SgMode::Normal | SgMode::Record => self.val(a).clone(),
            SgMode::Replay => {
                let v = self.sg_log[self.sg_cursor].clone();
                assert_eq!(
                    v.shape(),
                    self.val(a).shape(),
                    "sg replay shape drift: the replayed function is not deterministic"
                );
                self.sg_cursor += 1;
                v
            }
        };
        if self.sg_mode == SgMode::Record {
            self.sg_log.push(value.clone());
        }
        self.nodes.push(Node {
            value,
            op: Op::StopGrad(a),
            active: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn recording() -> Self {
        Tape {
            sg_mode: SgMode::Record,
            ..Tape::default()
        }
    }

    pub fn replaying(log: Vec<Tensor>) -> Self {
        Tape {
            sg_mode: SgMode::Replay,
            sg_log: log,
            ..Tape::default()
        }
    }

    pub fn take_sg_log(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.sg_log)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn ew2(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(a).shape().to_vec();
        let active = self.active(a) || self.active(b);
        self.push(Tensor::new(shape, data)?, op, active, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn ew1(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let data: Vec<f64> = self.val(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.val(a).shape().to_vec();
        let active = self.active(a);
        self.push(Tensor::new(shape, data)?, op, active, name)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.ew1("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.ew1("add_const", a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.ew1("clamp_min", a, |x| x.max(c), Op::ClampMin(a, c))
    }

    /// Matrix product supporting [m,k]x[k,n] -> [m,n], [m,k]x[k] -> [m] and
    /// [k]x[k,n] -> [n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (out, shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let (da, db) = (self.val(a).data(), self.val(b).data());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = da[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &db[l * n..(l + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += x * brow[j];
                        }
                    }
                }
                (out, vec![m, n])
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                if k != sb[0] {
                    return Err(mismatch());
                }
                let (da, db) = (self.val(a).data(), self.val(b).data());
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &da[i * k..(i + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += row[l] * db[l];
                    }
                    out[i] = acc;
                }
                (out, vec![m])
            }
            (1, 2) => {
                let (k, n) = (sb[0], sb[1]);
                if sa[0] != k {
                    return Err(mismatch());
                }
                let (da, db) = (self.val(a).data(), self.val(b).data());
                let mut out = vec![0.0; n];
                for l in 0..k {
                    let x = da[l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &db[l * n..(l + 1) * n];
                    for j in 0..n {
                        out[j] += x * brow[j];
                    }
                }
                (out, vec![n])
            }
            _ => return Err(mismatch()),
        };
        let active = self.active(a) || self.active(b);
        self.push(Tensor::new(shape, out)?, Op::Matmul(a, b), active, "matmul")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        let mut active = false;
        for &p in parts {
            if self.val(p).shape().len() != 1 {
                return Err(NumericsError::Invalid {
                    op: "concat",
                    msg: format!("only 1-D inputs, got {:?}", self.val(p).shape()),
                });
            }
            data.extend_from_slice(self.val(p).data());
            active |= self.active(p);
        }
        self.push(
            Tensor::vector(data),
            Op::Concat(parts.to_vec()),
            active,
            "concat",
        )
    }

    /// Stack equal-length vectors into a matrix, one row per input.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(NumericsError::Invalid {
                op: "stack",
                msg: "no rows".into(),
            });
        }
        let cols = self.val(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        let mut active = false;
        for &r in rows {
            if self.val(r).shape() != [cols] {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack",
                    lhs: vec![cols],
                    rhs: self.val(r).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.val(r).data());
            active |= self.active(r);
        }
        self.push(
            Tensor::matrix(rows.len(), cols, data)?,
            Op::Stack(rows.to_vec()),
            active,
            "stack",
        )
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.val(src).len() {
            return Err(NumericsError::Invalid {
                op: "slice",
                msg: format!(
                    "range {}..{} out of bounds for length {}",
                    start,
                    start + len,
                    self.val(src).len()
                ),
            });
        }
        let data = self.val(src).data()[start..start + len].to_vec();
        let active = self.active(src);
        self.push(
            Tensor::vector(data),
            Op::Slice { src, start, len },
            active,
            "slice",
        )
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.val(a).data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let active = self.active(a);
        self.push(Tensor::vector(out), Op::Softmax(a), active, "softmax")
    }

    /// Softmax with an extra constant 1 in the denominator, so entries sum to
    /// strictly less than 1 and the model can choose not to attend.
    pub fn softmax_plus_one(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.val(a).data();
        // The implicit extra logit is 0; include it in the max subtraction.
        let m = x.iter().cloned().fold(0.0_f64, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = (-m).exp() + exps.iter().sum::<f64>();
        let out: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let active = self.active(a);
        self.push(
            Tensor::vector(out),
            Op::SoftmaxPlusOne(a),
            active,
            "softmax_plus_one",
        )
    }

    pub fn euclidean_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.val(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let active = self.active(a);
        self.push(Tensor::scalar(n), Op::Norm(a), active, "euclidean_norm")
    }

    /// Row of an embedding matrix.
    pub fn gather_row(&mut self, mat: NodeId, row: usize) -> Result<NodeId> {
        let shape = self.val(mat).shape();
        if shape.len() != 2 || row >= shape[0] {
            return Err(NumericsError::Invalid {
                op: "gather_row",
                msg: format!("row {} of shape {:?}", row, shape),
            });
        }
        let data = self.val(mat).row(row).to_vec();
        let active = self.active(mat);
        self.push(
            Tensor::vector(data),
            Op::GatherRow(mat, row),
            active,
            "gather_row",
        )
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.val(a).len() {
            return Err(NumericsError::Invalid {
                op: "index",
                msg: format!("index {} of length {}", i, self.val(a).len()),
            });
        }
        let x = self.val(a).data()[i];
        let active = self.active(a);
        self.push(Tensor::scalar(x), Op::Index(a, i), active, "index")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.val(a).data().iter().sum();
        let active = self.active(a);
        self.push(Tensor::scalar(s), Op::Sum(a), active, "sum")
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let active = self.active(a) || self.active(b);
        self.push(Tensor::scalar(s), Op::Dot(a, b), active, "dot")
    }

    /// (1-w)*a + w*b with scalar node w.
    pub fn blend(&mut self, a: NodeId, b: NodeId, w: NodeId) -> Result<NodeId> {
        self.same_shape("blend", a, b)?;
        if !self.val(w).is_scalar() {
            return Err(NumericsError::Invalid {
                op: "blend",
                msg: format!("weight must be scalar, got {:?}", self.val(w).shape()),
            });
        }
        let wv = self.val(w).item();
        let data: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| (1.0 - wv) * x + wv * y)
            .collect();
        let active = self.active(a) || self.active(b) || self.active(w);
        self.push(Tensor::vector(data), Op::Blend { a, b, w }, active, "blend")
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.val(s).is_scalar() {
            return Err(NumericsError::Invalid {
                op: "mul_scalar",
                msg: format!("scale must be scalar, got {:?}", self.val(s).shape()),
            });
        }
        let sv = self.val(s).item();
        let data: Vec<f64> = self.val(a).data().iter().map(|&x| x * sv).collect();
        let shape = self.val(a).shape().to_vec();
        let active = self.active(a) || self.active(s);
        self.push(
            Tensor::new(shape, data)?,
            Op::MulScalar { a, s },
            active,
            "mul_scalar",
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.val(s).is_scalar() {
            return Err(NumericsError::Invalid {
                op: "add_scalar",
                msg: format!("addend must be scalar, got {:?}", self.val(s).shape()),
            });
        }
        let sv = self.val(s).item();
        let data: Vec<f64> = self.val(a).data().iter().map(|&x| x + sv).collect();
        let shape = self.val(a).shape().to_vec();
        let active = self.active(a) || self.active(s);
        self.push(
            Tensor::new(shape, data)?,
            Op::AddScalar { a, s },
            active,
            "add_scalar",
        )
    }

    /// out[ids[s]] += src[s]. Used to project copy-attention mass onto the
    /// vocabulary.
    pub fn scatter(&mut self, src: NodeId, ids: &[usize], out_len: usize) -> Result<NodeId> {
        if ids.len() != self.val(src).len() {
            return Err(NumericsError::Invalid {
                op: "scatter",
                msg: format!("{} ids for {} values", ids.len(), self.val(src).len()),
            });
        }
        let mut out = vec![0.0; out_len];
        for (s, &v) in ids.iter().enumerate() {
            if v >= out_len {
                return Err(NumericsError::Invalid {
                    op: "scatter",
                    msg: format!("id {} out of range {}", v, out_len),
                });
            }
            out[v] += self.val(src).data()[s];
        }
        let active = self.active(src);
        self.push(
            Tensor::vector(out),
            Op::Scatter {
                src,
                ids: ids.to_vec(),
                out_len,
            },
            active,
            "scatter",
        )
    }

    /// Reverse sweep from a scalar loss. Gradients are retrievable with
    /// `grad` until the next `backward` call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.val(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].active {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].active {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].active {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (d, &c) in t.data_mut().iter_mut().zip(contrib) {
                    *d += c;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.nodes[id.0].value.shape().to_vec());
                t.data_mut().copy_from_slice(contrib);
                *slot = Some(t);
            }
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id.0];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<f64> = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                let da: Vec<f64> = gd.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                let db: Vec<f64> = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gd.iter().map(|&g| g * c).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddConst(a, _) => self.acc(grads, *a, gd),
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, gd, grads),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    self.acc(grads, p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::Stack(rows) => {
                let cols = self.val(rows[0]).len();
                for (r, &row) in rows.iter().enumerate() {
                    self.acc(grads, row, &gd[r * cols..(r + 1) * cols]);
                }
            }
            Op::Slice { src, start, len } => {
                let mut full = vec![0.0; self.val(*src).len()];
                full[*start..*start + *len].copy_from_slice(gd);
                self.acc(grads, *src, &full);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da: Vec<f64> = gd.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let da: Vec<f64> = gd.iter().zip(y).map(|(&g, &y)| g * y).collect();
                self.acc(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = self.val(*a).data();
                let da: Vec<f64> = gd.iter().zip(x).map(|(&g, &x)| g / x).collect();
                self.acc(grads, *a, &da);
            }
            Op::ClampMin(a, c) => {
                let x = self.val(*a).data();
                let da: Vec<f64> = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > *c { g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Softmax(a) | Op::SoftmaxPlusOne(a) => {
                // Same Jacobian in both cases: the extra denominator term is a
                // constant logit.
                let y = node.value.data();
                let s: f64 = gd.iter().zip(y).map(|(&g, &y)| g * y).sum();
                let da: Vec<f64> = gd.iter().zip(y).map(|(&g, &y)| y * (g - s)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Norm(a) => {
                let n = node.value.item();
                let g0 = gd[0];
                let x = self.val(*a).data();
                // Zero subgradient at the origin.
                let da: Vec<f64> = if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().map(|&x| g0 * x / n).collect()
                };
                self.acc(grads, *a, &da);
            }
            Op::GatherRow(mat, row) => {
                let cols = self.val(*mat).shape()[1];
                let mut full = vec![0.0; self.val(*mat).len()];
                full[row * cols..(row + 1) * cols].copy_from_slice(gd);
                self.acc(grads, *mat, &full);
            }
            Op::Index(a, i) => {
                let mut full = vec![0.0; self.val(*a).len()];
                full[*i] = gd[0];
                self.acc(grads, *a, &full);
            }
            Op::Sum(a) => {
                let da = vec![gd[0]; self.val(*a).len()];
                self.acc(grads, *a, &da);
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let da: Vec<f64> = self.val(*b).data().iter().map(|&y| g0 * y).collect();
                let db: Vec<f64> = self.val(*a).data().iter().map(|&x| g0 * x).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Blend { a, b, w } => {
                let wv = self.val(*w).item();
                let da: Vec<f64> = gd.iter().map(|&g| g * (1.0 - wv)).collect();
                let db: Vec<f64> = gd.iter().map(|&g| g * wv).collect();
                let dw: f64 = gd
                    .iter()
                    .zip(self.val(*a).data().iter().zip(self.val(*b).data()))
                    .map(|(&g, (&x, &y))| g * (y - x))
                    .sum();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
                self.acc(grads, *w, &[dw]);
            }
            Op::MulScalar { a, s } => {
                let sv = self.val(*s).item();
                let da: Vec<f64> = gd.iter().map(|&g| g * sv).collect();
                let ds: f64 = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&g, &x)| g * x)
                    .sum();
                self.acc(grads, *a, &da);
                self.acc(grads, *s, &[ds]);
            }
            Op::AddScalar { a, s } => {
                self.acc(grads, *a, gd);
                let ds: f64 = gd.iter().sum();
                self.acc(grads, *s, &[ds]);
            }
            Op::Scatter { src, ids, .. } => {
                let da: Vec<f64> = ids.iter().map(|&v| gd[v]).collect();
                self.acc(grads, *src, &da);
            }
        }
    }

    fn matmul_backward(&self, a: NodeId, b: NodeId, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        let av = self.val(a).data();
        let bv = self.val(b).data();
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].active {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * bv[l * n + j];
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    self.acc(grads, a, &da);
                }
                if self.nodes[b.0].active {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let x = av[i * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[l * n + j] += x * gd[i * n + j];
                            }
                        }
                    }
                    self.acc(grads, b, &db);
                }
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                if self.nodes[a.0].active {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = gd[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] = gi * bv[l];
                        }
                    }
                    self.acc(grads, a, &da);
                }
                if self.nodes[b.0].active {
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        let gi = gd[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            db[l] += gi * av[i * k + l];
                        }
                    }
                    self.acc(grads, b, &db);
                }
            }
            (1, 2) => {
                let (k, n) = (sb[0], sb[1]);
                if self.nodes[a.0].active {
                    let mut da = vec![0.0; k];
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd[j] * bv[l * n + j];
                        }
                        da[l] = acc;
                    }
                    self.acc(grads, a, &da);
                }
                if self.nodes[b.0].active {
                    let mut db = vec![0.0; k * n];
                    for l in 0..k {
                        let x = av[l];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] = x * gd[j];
                        }
                    }
                    self.acc(grads, b, &db);
                }
            }
            _ => unreachable!("matmul forward rejected these shapes"),
        }
    }
}

/// Max relative error between the tape gradient of `f` and central finite
/// differences at step `h`, over every entry of every parameter.
///
/// `f` must be deterministic: it is re-run value-only for each perturbation.
/// Stop-gradient values are recorded on the first run and replayed frozen
/// during the FD evaluations, so SG paths count as constants on both sides.
pub fn grad_check<F>(params: &[Tensor], h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::recording();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let auto: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    let sg_log = tape.take_sg_log();

    let eval = |ps: &[Tensor], f: &mut F| -> Result<f64> {
        let mut t = Tape::replaying(sg_log.clone());
        let ids: Vec<NodeId> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let loss = f(&mut t, &ids)?;
        Ok(t.val(loss).item())
    };

    let mut max_rel = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let fd = (eval(&plus, &mut f)? - eval(&minus, &mut f)?) / (2.0 * h);
            let ad = auto[pi].data()[ei];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

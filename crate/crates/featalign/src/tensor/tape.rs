//! Computation tape: eagerly evaluated nodes with backward rules that emit
//! further tape nodes, so a gradient is itself a differentiable expression.

use std::sync::Arc;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

pub use super::ops::ConvGeom;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    /// Differentiable input.
    Leaf,
    /// Input that never receives gradient.
    Const,
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    ConvInputGrad { out_grad: NodeId, kernel: NodeId, geom: ConvGeom },
    ConvKernelGrad { input: NodeId, out_grad: NodeId, geom: ConvGeom },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId, c: f64 },
    /// Multiply a tensor by a scalar (1-element) node, broadcast.
    ScaleByScalar { a: NodeId, s: NodeId },
    /// [rows x cols] + bias[cols] per row.
    AddRowBroadcast { a: NodeId, bias: NodeId, rows: usize, cols: usize },
    /// [N,C,H,W] + bias[C] per channel.
    AddChanBroadcast { a: NodeId, bias: NodeId, batch: usize, ch: usize, hw: usize },
    /// [N,C,H,W] -> [C].
    SumChan { a: NodeId, batch: usize, ch: usize, hw: usize },
    /// [C] -> [N,C,H,W] replication.
    BroadcastChan { a: NodeId, batch: usize, ch: usize, hw: usize },
    SumRows { a: NodeId, rows: usize, cols: usize },
    BroadcastRows { a: NodeId, rows: usize, cols: usize },
    SumCols { a: NodeId, rows: usize, cols: usize },
    BroadcastCols { a: NodeId, rows: usize, cols: usize },
    SumAll { a: NodeId },
    BroadcastScalar { s: NodeId, len: usize },
    Exp { a: NodeId },
    Sinh { a: NodeId },
    Cosh { a: NodeId },
    Arsinh { a: NodeId },
    /// d arsinh / dx = 1/sqrt(1+x^2); differentiable.
    ArsinhFactor { x: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    /// Piecewise-constant derivative mask; gradient does not flow into x.
    LeakyReluFactor { x: NodeId, slope: f64 },
    Reshape { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId, rows: usize, ca: usize, cb: usize },
    SliceCols { a: NodeId, rows: usize, cols: usize, start: usize, len: usize },
    PadCols { a: NodeId, rows: usize, len: usize, start: usize, total: usize },
    /// Mean softmax cross-entropy over the batch; scalar output.
    SoftmaxCe { logits: NodeId, rows: usize, classes: usize, labels: Arc<Vec<usize>> },
    /// (softmax - onehot)/rows; first-order only.
    SoftmaxCeBack { logits: NodeId, rows: usize, classes: usize, labels: Arc<Vec<usize>> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient accumulated on a leaf by `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].values[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            requires,
        });
        self.nodes.len() - 1
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id].requires
    }

    // ---- inputs -------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), true)
    }

    pub fn leaf_raw(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, shape, values, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Const, t.shape.clone(), t.values.clone(), false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.push(Op::Const, shape, values, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, vec![1], vec![v], false)
    }

    /// Copy of a node's current value that blocks gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let shape = self.nodes[id].shape.clone();
        let values = self.nodes[id].values.clone();
        self.push(Op::Const, shape, values, false)
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m x k]*[k x n], got {:?} * {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let vals = ops::matmul(self.value(a), self.value(b), m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], vals, req))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape(format!("transpose expects a matrix, got {:?}", sa)));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let vals = ops::transpose(self.value(a), rows, cols);
        let req = self.req(a);
        Ok(self.push(Op::Transpose { a, rows, cols }, vec![cols, rows], vals, req))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects input [N,C,H,W] and kernel [F,C,k,k], got {:?} and {:?}",
                si, sk
            )));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input C={} kernel C={}",
                si[1], sk[1]
            )));
        }
        if sk[2] != sk[3] {
            return Err(Error::shape(format!(
                "conv2d expects square kernels, got {}x{}",
                sk[2], sk[3]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            out_ch: sk[0],
            h: si[2],
            w: si[3],
            k: sk[2],
            stride,
            padding,
        };
        if geom.h + 2 * padding < geom.k || geom.w + 2 * padding < geom.k {
            return Err(Error::shape(format!(
                "conv2d non-positive output extent: H={} W={} k={} padding={}",
                geom.h, geom.w, geom.k, padding
            )));
        }
        let vals = ops::conv2d(self.value(input), self.value(kernel), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let req = self.req(input) || self.req(kernel);
        Ok(self.push(Op::Conv2d { input, kernel, geom }, shape, vals, req))
    }

    fn conv_input_grad(&mut self, out_grad: NodeId, kernel: NodeId, geom: ConvGeom) -> NodeId {
        let vals = ops::conv2d_input_grad(self.value(out_grad), self.value(kernel), &geom);
        let shape = vec![geom.batch, geom.in_ch, geom.h, geom.w];
        let req = self.req(out_grad) || self.req(kernel);
        self.push(Op::ConvInputGrad { out_grad, kernel, geom }, shape, vals, req)
    }

    fn conv_kernel_grad(&mut self, input: NodeId, out_grad: NodeId, geom: ConvGeom) -> NodeId {
        let vals = ops::conv2d_kernel_grad(self.value(input), self.value(out_grad), &geom);
        let shape = vec![geom.out_ch, geom.in_ch, geom.k, geom.k];
        let req = self.req(input) || self.req(out_grad);
        self.push(Op::ConvKernelGrad { input, out_grad, geom }, shape, vals, req)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{} expects equal shapes, got {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let vals: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Add { a, b }, shape, vals, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let vals: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub { a, b }, shape, vals, req))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Neg { a }, shape, vals, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let vals: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::MulElem { a, b }, shape, vals, req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Scale { a, c }, shape, vals, req)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::AddConst { a, c }, shape, vals, req)
    }

    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!(
                "scale_by_scalar expects scalar second arg, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.scalar_value(s);
        let vals: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(s);
        Ok(self.push(Op::ScaleByScalar { a, s }, shape, vals, req))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(Error::shape(format!(
                "add_bias expects [rows x cols] + [cols], got {:?} and {:?}",
                sa, sb
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let bv = self.value(bias).to_vec();
        let mut vals = self.value(a).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                vals[r * cols + c] += bv[c];
            }
        }
        let req = self.req(a) || self.req(bias);
        Ok(self.push(Op::AddRowBroadcast { a, bias, rows, cols }, vec![rows, cols], vals, req))
    }

    pub fn add_chan_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 4 || sb != vec![sa[1]] {
            return Err(Error::shape(format!(
                "add_chan_bias expects [N,C,H,W] + [C], got {:?} and {:?}",
                sa, sb
            )));
        }
        let (batch, ch, hw) = (sa[0], sa[1], sa[2] * sa[3]);
        let bv = self.value(bias).to_vec();
        let mut vals = self.value(a).to_vec();
        for n in 0..batch {
            for c in 0..ch {
                for v in &mut vals[(n * ch + c) * hw..(n * ch + c + 1) * hw] {
                    *v += bv[c];
                }
            }
        }
        let req = self.req(a) || self.req(bias);
        Ok(self.push(Op::AddChanBroadcast { a, bias, batch, ch, hw }, sa, vals, req))
    }

    fn sum_chan(&mut self, a: NodeId, batch: usize, ch: usize, hw: usize) -> NodeId {
        let av = self.value(a);
        let mut vals = vec![0.0; ch];
        for n in 0..batch {
            for c in 0..ch {
                vals[c] += av[(n * ch + c) * hw..(n * ch + c + 1) * hw].iter().sum::<f64>();
            }
        }
        let req = self.req(a);
        self.push(Op::SumChan { a, batch, ch, hw }, vec![ch], vals, req)
    }

    fn broadcast_chan(&mut self, a: NodeId, batch: usize, ch: usize, hw: usize, shape: Vec<usize>) -> NodeId {
        let av = self.value(a).to_vec();
        let mut vals = vec![0.0; batch * ch * hw];
        for n in 0..batch {
            for c in 0..ch {
                for v in &mut vals[(n * ch + c) * hw..(n * ch + c + 1) * hw] {
                    *v = av[c];
                }
            }
        }
        let req = self.req(a);
        self.push(Op::BroadcastChan { a, batch, ch, hw }, shape, vals, req)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape(format!("sum_rows expects a matrix, got {:?}", sa)));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut vals = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                vals[c] += av[r * cols + c];
            }
        }
        let req = self.req(a);
        Ok(self.push(Op::SumRows { a, rows, cols }, vec![cols], vals, req))
    }

    fn broadcast_rows(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = self.value(a).to_vec();
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            vals[r * cols..(r + 1) * cols].copy_from_slice(&av);
        }
        let req = self.req(a);
        self.push(Op::BroadcastRows { a, rows, cols }, vec![rows, cols], vals, req)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape(format!("sum_cols expects a matrix, got {:?}", sa)));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a);
        let vals: Vec<f64> = (0..rows)
            .map(|r| av[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let req = self.req(a);
        Ok(self.push(Op::SumCols { a, rows, cols }, vec![rows], vals, req))
    }

    fn broadcast_cols(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = self.value(a).to_vec();
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                vals[r * cols + c] = av[r];
            }
        }
        let req = self.req(a);
        self.push(Op::BroadcastCols { a, rows, cols }, vec![rows, cols], vals, req)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        let req = self.req(a);
        self.push(Op::SumAll { a }, vec![1], vec![s], req)
    }

    fn broadcast_scalar(&mut self, s: NodeId, len: usize) -> NodeId {
        let v = self.scalar_value(s);
        let req = self.req(s);
        self.push(Op::BroadcastScalar { s, len }, vec![len], vec![v; len], req)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Exp { a }, shape, vals, req)
    }

    pub fn sinh(&mut self, a: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.sinh()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Sinh { a }, shape, vals, req)
    }

    fn cosh(&mut self, a: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.cosh()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Cosh { a }, shape, vals, req)
    }

    pub fn arsinh(&mut self, a: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(a).iter().map(|x| x.asinh()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        self.push(Op::Arsinh { a }, shape, vals, req)
    }

    fn arsinh_factor(&mut self, x: NodeId) -> NodeId {
        let vals: Vec<f64> = self.value(x).iter().map(|v| 1.0 / (1.0 + v * v).sqrt()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        self.push(Op::ArsinhFactor { x }, shape, vals, req)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArg(format!(
                "leaky_relu slope must be in (0,1), got {}",
                slope
            )));
        }
        let vals: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        Ok(self.push(Op::LeakyRelu { a, slope }, shape, vals, req))
    }

    fn leaky_relu_factor(&mut self, x: NodeId, slope: f64) -> NodeId {
        let vals: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { slope })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::LeakyReluFactor { x, slope }, shape, vals, false)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?}: element count mismatch",
                self.shape(a),
                shape
            )));
        }
        let vals = self.value(a).to_vec();
        let req = self.req(a);
        Ok(self.push(Op::Reshape { a }, shape, vals, req))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!(
                "concat_cols expects matrices with equal rows, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let mut vals = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            vals.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            vals.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::ConcatCols { a, b, rows, ca, cb }, vec![rows, ca + cb], vals, req))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(Error::shape(format!(
                "slice_cols [{}, {}) out of {:?}",
                start,
                start + len,
                sa
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut vals = Vec::with_capacity(rows * len);
        for r in 0..rows {
            vals.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let req = self.req(a);
        Ok(self.push(Op::SliceCols { a, rows, cols, start, len }, vec![rows, len], vals, req))
    }

    fn pad_cols(&mut self, a: NodeId, rows: usize, len: usize, start: usize, total: usize) -> NodeId {
        let av = self.value(a).to_vec();
        let mut vals = vec![0.0; rows * total];
        for r in 0..rows {
            vals[r * total + start..r * total + start + len]
                .copy_from_slice(&av[r * len..(r + 1) * len]);
        }
        let req = self.req(a);
        self.push(Op::PadCols { a, rows, len, start, total }, vec![rows, total], vals, req)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                sl,
                labels.len()
            )));
        }
        let (rows, classes) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArg(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            loss += lse - row[labels[r]];
        }
        loss /= rows as f64;
        let labels = Arc::new(labels.to_vec());
        let req = self.req(logits);
        Ok(self.push(Op::SoftmaxCe { logits, rows, classes, labels }, vec![1], vec![loss], req))
    }

    fn softmax_ce_back(
        &mut self,
        logits: NodeId,
        rows: usize,
        classes: usize,
        labels: Arc<Vec<usize>>,
    ) -> NodeId {
        let lv = self.value(logits);
        let mut vals = vec![0.0; rows * classes];
        for r in 0..rows {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..classes {
                let p = (row[c] - mx).exp() / den;
                vals[r * classes + c] =
                    (p - if labels[r] == c { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        self.push(Op::SoftmaxCeBack { logits, rows, classes, labels }, vec![rows, classes], vals, false)
    }

    /// Sum of squared differences, with optional mean reductions.
    pub fn mse(&mut self, a: NodeId, b: NodeId, reduction: Reduction) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mse")?;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let total = self.sum_all(sq);
        let n = self.value(a).len();
        let rows = self.shape(a).first().copied().unwrap_or(1);
        Ok(match reduction {
            Reduction::Sum => total,
            Reduction::MeanBatch => self.scale(total, 1.0 / rows as f64),
            Reduction::MeanAll => self.scale(total, 1.0 / n as f64),
        })
    }

    // ---- backward -----------------------------------------------------

    /// Build gradient nodes of a scalar `loss` with respect to `wrt`.
    ///
    /// Returns one node per entry of `wrt`; entries the loss does not reach
    /// evaluate to zeros. The gradient nodes are ordinary tape nodes and may
    /// be differentiated again.
    pub fn grad_nodes(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        // dep[i]: node i depends on some wrt entry
        let mut dep = vec![false; n];
        for &w in wrt {
            dep[w] = true;
        }
        for i in 0..n {
            if !dep[i] && self.op_inputs(i).iter().any(|&j| dep[j]) {
                dep[i] = true;
            }
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if dep[loss] {
            adj[loss] = Some(self.scalar_const(1.0));
            for i in (0..n).rev() {
                let Some(u) = adj[i] else { continue };
                let contributions = self.backward_rule(i, u, &dep);
                for (input, c) in contributions {
                    if input >= n || !dep[input] {
                        continue;
                    }
                    adj[input] = Some(match adj[input] {
                        None => c,
                        Some(e) => self.add(e, c).expect("adjoint shapes agree"),
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match adj[w] {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    let len = self.value(w).len();
                    self.constant_raw(shape, vec![0.0; len])
                }
            })
            .collect())
    }

    /// Gradient contributions of node `i` given upstream adjoint `u`.
    ///
    /// `dep[j]` marks nodes on a path to the differentiation targets; the
    /// expensive rules skip inputs outside that set.
    fn backward_rule(&mut self, i: NodeId, u: NodeId, dep: &[bool]) -> Vec<(NodeId, NodeId)> {
        match self.nodes[i].op.clone() {
            Op::Leaf | Op::Const => vec![],
            Op::Matmul { a, b, .. } => {
                let mut out = Vec::with_capacity(2);
                if dep[a] {
                    let bt = self.transpose(b).unwrap();
                    let ga = self.matmul(u, bt).unwrap();
                    out.push((a, ga));
                }
                if dep[b] {
                    let at = self.transpose(a).unwrap();
                    let gb = self.matmul(at, u).unwrap();
                    out.push((b, gb));
                }
                out
            }
            Op::Transpose { a, .. } => {
                let g = self.transpose(u).unwrap();
                vec![(a, g)]
            }
            Op::Conv2d { input, kernel, geom } => {
                let mut out = Vec::with_capacity(2);
                if dep[input] {
                    let gi = self.conv_input_grad(u, kernel, geom);
                    out.push((input, gi));
                }
                if dep[kernel] {
                    let gk = self.conv_kernel_grad(input, u, geom);
                    out.push((kernel, gk));
                }
                out
            }
            Op::ConvInputGrad { out_grad, kernel, geom } => {
                let mut out = Vec::with_capacity(2);
                if dep[out_grad] {
                    let gg = self.conv2d_geom(u, kernel, geom);
                    out.push((out_grad, gg));
                }
                if dep[kernel] {
                    let gk = self.conv_kernel_grad(u, out_grad, geom);
                    out.push((kernel, gk));
                }
                out
            }
            Op::ConvKernelGrad { input, out_grad, geom } => {
                let mut out = Vec::with_capacity(2);
                if dep[input] {
                    let gi = self.conv_input_grad(out_grad, u, geom);
                    out.push((input, gi));
                }
                if dep[out_grad] {
                    let gg = self.conv2d_geom(input, u, geom);
                    out.push((out_grad, gg));
                }
                out
            }
            Op::Add { a, b } => vec![(a, u), (b, u)],
            Op::Sub { a, b } => {
                let nb = self.neg(u);
                vec![(a, u), (b, nb)]
            }
            Op::Neg { a } => {
                let g = self.neg(u);
                vec![(a, g)]
            }
            Op::MulElem { a, b } => {
                let mut out = Vec::with_capacity(2);
                if dep[a] {
                    let ga = self.mul(u, b).unwrap();
                    out.push((a, ga));
                }
                if dep[b] {
                    let gb = self.mul(u, a).unwrap();
                    out.push((b, gb));
                }
                out
            }
            Op::Scale { a, c } => {
                let g = self.scale(u, c);
                vec![(a, g)]
            }
            Op::AddConst { a, .. } => vec![(a, u)],
            Op::ScaleByScalar { a, s } => {
                let ga = self.scale_by_scalar(u, s).unwrap();
                let prod = self.mul(u, a).unwrap();
                let gs = self.sum_all(prod);
                vec![(a, ga), (s, gs)]
            }
            Op::AddRowBroadcast { a, bias, .. } => {
                let gb = self.sum_rows(u).unwrap();
                vec![(a, u), (bias, gb)]
            }
            Op::AddChanBroadcast { a, bias, batch, ch, hw } => {
                let gb = self.sum_chan(u, batch, ch, hw);
                vec![(a, u), (bias, gb)]
            }
            Op::SumChan { a, batch, ch, hw } => {
                let shape = self.shape(a).to_vec();
                let g = self.broadcast_chan(u, batch, ch, hw, shape);
                vec![(a, g)]
            }
            Op::BroadcastChan { a, batch, ch, hw } => {
                let g = self.sum_chan(u, batch, ch, hw);
                vec![(a, g)]
            }
            Op::SumRows { a, rows, cols } => {
                let g = self.broadcast_rows(u, rows, cols);
                vec![(a, g)]
            }
            Op::BroadcastRows { a, .. } => {
                let g = self.sum_rows(u).unwrap();
                vec![(a, g)]
            }
            Op::SumCols { a, rows, cols } => {
                let g = self.broadcast_cols(u, rows, cols);
                vec![(a, g)]
            }
            Op::BroadcastCols { a, .. } => {
                let g = self.sum_cols(u).unwrap();
                vec![(a, g)]
            }
            Op::SumAll { a } => {
                let len = self.value(a).len();
                let shape = self.shape(a).to_vec();
                let g = self.broadcast_scalar(u, len);
                let g = self.reshape(g, shape).unwrap();
                vec![(a, g)]
            }
            Op::BroadcastScalar { s, .. } => {
                let g = self.sum_all(u);
                vec![(s, g)]
            }
            Op::Exp { a } => {
                let g = self.mul(u, i).unwrap();
                vec![(a, g)]
            }
            Op::Sinh { a } => {
                let c = self.cosh(a);
                let g = self.mul(u, c).unwrap();
                vec![(a, g)]
            }
            Op::Cosh { a } => {
                let s = self.sinh(a);
                let g = self.mul(u, s).unwrap();
                vec![(a, g)]
            }
            Op::Arsinh { a } => {
                let f = self.arsinh_factor(a);
                let g = self.mul(u, f).unwrap();
                vec![(a, g)]
            }
            Op::ArsinhFactor { x } => {
                // d/dx (1+x^2)^(-1/2) = -x * y^3 with y the node value
                let y2 = self.mul(i, i).unwrap();
                let y3 = self.mul(y2, i).unwrap();
                let xy3 = self.mul(x, y3).unwrap();
                let d = self.neg(xy3);
                let g = self.mul(u, d).unwrap();
                vec![(x, g)]
            }
            Op::LeakyRelu { a, slope } => {
                let f = self.leaky_relu_factor(a, slope);
                let g = self.mul(u, f).unwrap();
                vec![(a, g)]
            }
            Op::LeakyReluFactor { .. } => vec![],
            Op::Reshape { a } => {
                let shape = self.shape(a).to_vec();
                let g = self.reshape(u, shape).unwrap();
                vec![(a, g)]
            }
            Op::ConcatCols { a, b, rows: _, ca, cb } => {
                let ga = self.slice_cols(u, 0, ca).unwrap();
                let gb = self.slice_cols(u, ca, cb).unwrap();
                vec![(a, ga), (b, gb)]
            }
            Op::SliceCols { a, rows, cols, start, len } => {
                let g = self.pad_cols(u, rows, len, start, cols);
                vec![(a, g)]
            }
            Op::PadCols { a, start, len, .. } => {
                let g = self.slice_cols(u, start, len).unwrap();
                vec![(a, g)]
            }
            Op::SoftmaxCe { logits, rows, classes, labels } => {
                let back = self.softmax_ce_back(logits, rows, classes, labels);
                let g = self.scale_by_scalar(back, u).unwrap();
                vec![(logits, g)]
            }
            Op::SoftmaxCeBack { .. } => vec![],
        }
    }

    fn conv2d_geom(&mut self, input: NodeId, kernel: NodeId, geom: ConvGeom) -> NodeId {
        let vals = ops::conv2d(self.value(input), self.value(kernel), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let req = self.req(input) || self.req(kernel);
        self.push(Op::Conv2d { input, kernel, geom }, shape, vals, req)
    }

    fn op_inputs(&self, i: NodeId) -> Vec<NodeId> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => vec![],
            Op::Matmul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::MulElem { a, b }
            | Op::ConcatCols { a, b, .. } => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ConvInputGrad { out_grad, kernel, .. } => vec![*out_grad, *kernel],
            Op::ConvKernelGrad { input, out_grad, .. } => vec![*input, *out_grad],
            Op::ScaleByScalar { a, s } => vec![*a, *s],
            Op::AddRowBroadcast { a, bias, .. } => vec![*a, *bias],
            Op::AddChanBroadcast { a, bias, .. } => vec![*a, *bias],
            Op::SumChan { a, .. } | Op::BroadcastChan { a, .. } => vec![*a],
            Op::Transpose { a, .. }
            | Op::Neg { a }
            | Op::Scale { a, .. }
            | Op::AddConst { a, .. }
            | Op::SumRows { a, .. }
            | Op::BroadcastRows { a, .. }
            | Op::SumCols { a, .. }
            | Op::BroadcastCols { a, .. }
            | Op::SumAll { a }
            | Op::Exp { a }
            | Op::Sinh { a }
            | Op::Cosh { a }
            | Op::Arsinh { a }
            | Op::LeakyRelu { a, .. }
            | Op::Reshape { a }
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. } => vec![*a],
            Op::BroadcastScalar { s, .. } => vec![*s],
            Op::ArsinhFactor { x } | Op::LeakyReluFactor { x, .. } => vec![*x],
            Op::SoftmaxCe { logits, .. } | Op::SoftmaxCeBack { logits, .. } => vec![*logits],
        }
    }

    /// Populate `grad` on every differentiable leaf with d(loss)/d(leaf).
    ///
    /// Unreachable leaves get a zero gradient. Calling twice without
    /// resetting accumulates.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let leaves: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf))
            .collect();
        let grads = self.grad_nodes(loss, &leaves)?;
        for (&leaf, g) in leaves.iter().zip(grads) {
            let gv = self.nodes[g].values.clone();
            let node = &mut self.nodes[leaf];
            let buf = node.grad.get_or_insert_with(|| vec![0.0; gv.len()]);
            for (a, b) in buf.iter_mut().zip(&gv) {
                *a += b;
            }
        }
        Ok(())
    }
}

/// Reduction applied to a summed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over all elements.
    Sum,
    /// Mean over the leading (batch) dimension, sum over the rest.
    MeanBatch,
    /// Mean over all elements.
    MeanAll,
}

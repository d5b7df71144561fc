//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! Operations are recorded on a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. The tape order is the
//! topological order: every node's inputs were created before it, and the
//! backward sweep visits each node exactly once in reverse creation order,
//! so repeated backward passes over the same graph are bitwise identical.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

pub type NodeId = usize;

// ── Tape ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    /// Fused stable softmax + cross-entropy, mean over the batch.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::GlobalAvgPool { .. } => "global-average-pool",
            Op::Flatten { .. } => "flatten",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A single forward computation recorded for differentiation.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an independent input (parameter or data) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// x[batch, in] * w[in, out] + b[out]
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "affine: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            for (v, add) in row.iter_mut().zip(bias) {
                *v += add;
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    /// 2-d convolution with odd square kernel, stride 1 or 2, and zero
    /// padding of (k-1)/2 so stride 1 preserves the spatial extent.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: kernel must be odd square, got {ws:?}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Shape(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        if ws[1] != xs[1] || bs != vec![ws[0]] {
            return Err(Error::Shape(format!(
                "conv2d: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let padding = (k - 1) / 2;
        let dims = ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ws[0],
            k,
            stride,
            padding,
            ho: kernels::conv_out_extent(xs[2], k, stride, padding),
            wo: kernels::conv_out_extent(xs[3], k, stride, padding),
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            dims,
        );
        let value = Tensor::from_vec(vec![dims.batch, dims.out_ch, dims.ho, dims.wo], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, dims }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Shape(format!("scale: non-finite constant {c}")));
        }
        let value = self.value(x).scale(c);
        Ok(self.push(Op::Scale { x, c }, value))
    }

    /// [batch, ch, h, w] -> [batch, ch], mean over the spatial positions.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global-average-pool: x {xs:?}")));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let area = h * w;
        let data = self.value(x).data();
        let mut out = vec![0.0; batch * ch];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..area {
                acc += data[i * area + p];
            }
            *o = acc / area as f64;
        }
        let value = Tensor::from_vec(vec![batch, ch], out)?;
        Ok(self.push(Op::GlobalAvgPool { x }, value))
    }

    /// [batch, ...] -> [batch, product of the rest]
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("flatten: x {xs:?}")));
        }
        let rest: usize = xs[1..].iter().product();
        let value = self.value(x).reshaped(vec![xs[0], rest])?;
        Ok(self.push(Op::Flatten { x }, value))
    }

    /// Scalar loss: mean over the batch of per-row cross-entropy on the
    /// softmax of the logits. Fails loudly on non-finite logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Shape(format!(
                "softmax-cross-entropy: logits {ls:?}, {} labels",
                labels.len()
            )));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!(
                "softmax-cross-entropy: label {bad} out of range for {classes} classes"
            )));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite {
                node: logits,
                context: "logits fed to softmax-cross-entropy".into(),
            });
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in data.chunks(classes).zip(labels) {
            total += row_log_sum_exp(row) - row[y];
        }
        let loss = total / labels.len() as f64;
        let id = self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        );
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                context: "softmax-cross-entropy loss".into(),
            });
        }
        Ok(id)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradient of the scalar `loss` node with respect to every node.
    /// Nodes that do not influence the loss keep a `None` entry; use
    /// [`Graph::grad_or_zeros`] to read them as exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss node has shape {:?}, expected a scalar",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            if !gy.is_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    context: format!("gradient of {} node", self.nodes[id].op.name()),
                });
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    // Keep leaf gradients readable after the sweep.
                    grads[id] = Some(gy);
                }
                Op::Affine { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let ws = self.value(*w).shape();
                    let (m, k, n) = (xs[0], xs[1], ws[1]);
                    let dx = kernels::matmul_bt(gy.data(), self.value(*w).data(), m, n, k);
                    let dw = kernels::matmul_at(self.value(*x).data(), gy.data(), k, m, n);
                    let mut db = vec![0.0; n];
                    for row in gy.data().chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(vec![m, k], dx)?)?;
                    accumulate(&mut grads, *w, Tensor::from_vec(vec![k, n], dw)?)?;
                    accumulate(&mut grads, *b, Tensor::from_vec(vec![n], db)?)?;
                }
                Op::Conv2d { x, w, b, dims } => {
                    let dx = kernels::conv2d_backward_input(gy.data(), self.value(*w).data(), *dims);
                    let (dw, db) = kernels::conv2d_backward_params(gy.data(), self.value(*x).data(), *dims);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.value(*x).shape().to_vec(), dx)?,
                    )?;
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::from_vec(self.value(*w).shape().to_vec(), dw)?,
                    )?;
                    accumulate(&mut grads, *b, Tensor::from_vec(vec![dims.out_ch], db)?)?;
                }
                Op::Relu { x } => {
                    // Subgradient 0 at exactly 0.
                    let dx: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.value(*x).shape().to_vec(), dx)?,
                    )?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone())?;
                    accumulate(&mut grads, *b, gy)?;
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, gy.scale(*c))?;
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let area = (xs[2] * xs[3]) as f64;
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (i, &g) in gy.data().iter().enumerate() {
                        let share = g / area;
                        for p in 0..(xs[2] * xs[3]) {
                            dx[i * xs[2] * xs[3] + p] = share;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xs.to_vec(), dx)?)?;
                }
                Op::Flatten { x } => {
                    let dx = gy.reshaped(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let ls = self.value(*logits).shape();
                    let classes = ls[1];
                    let upstream = gy.item();
                    let scale = upstream / labels.len() as f64;
                    let data = self.value(*logits).data();
                    let mut dl = vec![0.0; data.len()];
                    for (r, (&y, row)) in labels.iter().zip(data.chunks(classes)).enumerate() {
                        let probs = row_softmax(row);
                        for (c, &p) in probs.iter().enumerate() {
                            let indicator = if c == y { 1.0 } else { 0.0 };
                            dl[r * classes + c] = (p - indicator) * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::from_vec(ls.to_vec(), dl)?)?;
                }
            }
        }
        Ok(Gradients { per_node: grads })
    }

    /// Gradient of `id`, or an exact-zero tensor of its shape when the node
    /// is not reached by the loss.
    pub fn grad_or_zeros(&self, grads: &Gradients, id: NodeId) -> Tensor {
        grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) -> Result<()> {
    grads[id] = Some(match grads[id].take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss (or its gradient
    /// was consumed by the sweep — interior nodes release their buffers).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.per_node.get(id).and_then(|g| g.as_ref())
    }
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut acc = 0.0;
    for &v in row {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

fn row_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

// ── Finite-difference oracle ─────────────────────────────────────────

/// Worst coordinate of one checked leaf.
#[derive(Clone, Debug)]
pub struct CoordinateReport {
    pub leaf: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_leaf: Vec<CoordinateReport>,
    pub max_rel_err: f64,
}

/// Compare `backward()` against central finite differences
/// `(f(w+h) - f(w-h)) / 2h` for every coordinate of every leaf. `build`
/// receives the leaf node ids in order and must return a scalar loss node.
/// The report lists the worst coordinate per leaf; callers assert on
/// `max_rel_err`.
pub fn grad_check<F>(leaves: &[(&str, Tensor)], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "grad_check: step must be positive");
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| graph.leaf(t.clone())).collect();
        let loss = build(&mut graph, &ids)?;
        Ok(graph.value(loss).item())
    };

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|(_, t)| graph.leaf(t.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    let grads = graph.backward(loss)?;

    let base: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut per_leaf = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (li, (name, tensor)) in leaves.iter().enumerate() {
        let analytic = graph.grad_or_zeros(&grads, ids[li]);
        let mut worst = CoordinateReport {
            leaf: name.to_string(),
            coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        };
        for c in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[li].data_mut()[c] += h;
            let mut minus = base.clone();
            minus[li].data_mut()[c] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel >= worst.rel_err {
                worst = CoordinateReport {
                    leaf: name.to_string(),
                    coordinate: c,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                };
            }
        }
        max_rel_err = max_rel_err.max(worst.rel_err);
        per_leaf.push(worst);
    }
    Ok(GradCheckReport {
        per_leaf,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let w = g.leaf(tensor(&[2], &[1.0, -1.0]));
        let f = g.leaf(Tensor::scalar(5.0));
        let grads = g.backward(f).unwrap();
        assert!(grads.get(w).is_none());
        let zeros = g.grad_or_zeros(&grads, w);
        assert_eq!(zeros.data(), &[0.0, 0.0]);
    }

    #[test]
    fn product_plus_square_hand_gradients() {
        // f(a, b) = a*b + b^2 at (2, 3): df/da = 3, df/db = 8.
        // Both terms are expressed through 1x1 affine nodes.
        let mut g = Graph::new();
        let a = g.leaf(tensor(&[1, 1], &[2.0]));
        let b = g.leaf(tensor(&[1, 1], &[3.0]));
        let zero = g.leaf(tensor(&[1], &[0.0]));
        let ab = g.affine(a, b, zero).unwrap();
        let bb = g.affine(b, b, zero).unwrap();
        let f = g.add(ab, bb).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[8.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_gradient() {
        let mut g = Graph::new();
        let logits = g.leaf(tensor(&[1, 2], &[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(logits).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_logits_reported() {
        let mut g = Graph::new();
        let logits = g.leaf(tensor(&[1, 2], &[f64::NAN, 0.0]));
        let err = g.softmax_cross_entropy(logits, &[0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2, 3], &[0.3, -0.7, 1.1, 0.2, 0.9, -1.4]));
        let w = g.leaf(tensor(&[3, 2], &[0.5, -0.2, 0.8, 0.1, -0.6, 0.4]));
        let b = g.leaf(tensor(&[2], &[0.05, -0.03]));
        let h = g.affine(x, w, b).unwrap();
        let r = g.relu(h);
        let loss = g.softmax_cross_entropy(r, &[1, 0]).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        for id in [x, w, b] {
            assert_eq!(g1.get(id).unwrap().data(), g2.get(id).unwrap().data());
        }
    }

    #[test]
    fn cross_entropy_rows_sum_to_zero() {
        let mut g = Graph::new();
        let logits = g.leaf(tensor(&[3, 4], &[
            1.3, -0.2, 0.7, 2.1, -1.0, 0.0, 0.3, -0.4, 5.0, 4.0, 3.0, 2.0,
        ]));
        let loss = g.softmax_cross_entropy(logits, &[2, 0, 3]).unwrap();
        let grads = g.backward(loss).unwrap();
        for row in grads.get(logits).unwrap().data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!(sum.abs() <= 1e-12, "row sum {sum}");
        }
    }

    proptest::proptest! {
        #[test]
        fn cross_entropy_gradient_rows_always_sum_to_zero(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..24),
            classes in 2usize..6,
        ) {
            let rows = logits.len() / classes;
            proptest::prop_assume!(rows >= 1);
            let data = logits[..rows * classes].to_vec();
            let labels: Vec<usize> = (0..rows).map(|r| r % classes).collect();
            let mut g = Graph::new();
            let node = g.leaf(Tensor::from_vec(vec![rows, classes], data).unwrap());
            let loss = g.softmax_cross_entropy(node, &labels).unwrap();
            let grads = g.backward(loss).unwrap();
            for row in grads.get(node).unwrap().data().chunks(classes) {
                let sum: f64 = row.iter().sum();
                proptest::prop_assert!(sum.abs() <= 1e-12, "row sum {}", sum);
            }
        }
    }

    #[test]
    fn identity_scale_does_not_perturb_gradients() {
        let x0 = tensor(&[2, 2], &[0.4, -0.8, 1.2, 0.6]);
        let w0 = tensor(&[2, 2], &[0.3, 0.9, -0.5, 0.2]);
        let b0 = tensor(&[2], &[0.0, 0.1]);

        let run = |insert_identity: bool| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let w = g.leaf(w0.clone());
            let b = g.leaf(b0.clone());
            let mut h = g.affine(x, w, b).unwrap();
            if insert_identity {
                h = g.scale(h, 1.0).unwrap();
            }
            let loss = g.softmax_cross_entropy(h, &[0, 1]).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                grads.get(x).unwrap().clone(),
                grads.get(w).unwrap().clone(),
                grads.get(b).unwrap().clone(),
            )
        };
        let plain = run(false);
        let scaled = run(true);
        assert_eq!(plain.0.data(), scaled.0.data());
        assert_eq!(plain.1.data(), scaled.1.data());
        assert_eq!(plain.2.data(), scaled.2.data());
    }

    #[test]
    fn grad_check_affine_chain() {
        let x = tensor(&[2, 3], &[0.31, -0.74, 1.12, 0.23, 0.95, -1.40]);
        let w = tensor(&[3, 4], &[
            0.52, -0.21, 0.83, 0.14, -0.62, 0.41, 0.05, -0.33, 0.27, 0.66, -0.48, 0.19,
        ]);
        let b = tensor(&[4], &[0.05, -0.03, 0.12, 0.0]);
        let report = grad_check(
            &[("x", x), ("w", w), ("b", b)],
            1e-5,
            |g, ids| {
                let h = g.affine(ids[0], ids[1], ids[2])?;
                g.softmax_cross_entropy(h, &[1, 3])
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.per_leaf
        );
    }

    #[test]
    fn grad_check_projection_kernel_stride_two() {
        // 1x1 kernel at stride 2: the downsampling-shortcut shape.
        let x = tensor(&[1, 2, 4, 4], &(0..32).map(|v| 0.1 * v as f64 - 1.5).collect::<Vec<_>>());
        let w = tensor(&[2, 2, 1, 1], &[0.7, -0.4, 0.2, 0.9]);
        let b = tensor(&[2], &[0.05, -0.1]);
        let report = grad_check(&[("x", x), ("w", w), ("b", b)], 1e-5, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2)?;
            let pooled = g.global_avg_pool(y)?;
            g.softmax_cross_entropy(pooled, &[1])
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        // Inputs bounded away from zero by much more than h.
        let x = tensor(&[1, 4], &[0.9, -1.3, 0.4, -0.2]);
        let report = grad_check(&[("x", x)], 1e-5, |g, ids| {
            let r = g.relu(ids[0]);
            g.softmax_cross_entropy(r, &[0])
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "max rel err {}", report.max_rel_err);
    }
}

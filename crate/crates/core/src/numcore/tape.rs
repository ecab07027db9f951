//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation whose inputs include at least one
//! tracked matrix. Operations on untracked inputs are evaluated directly and
//! never touch the tape, so the same forward code serves both training (with
//! parameter leaves registered) and evaluation (plain values).
//!
//! Nodes are appended in evaluation order, which makes the node list a
//! topological order; [`Tape::backward`] walks it once in reverse.
//!
//! ```
//! use sotglp_core::numcore::{Mat, Tape};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(&Mat::row_vector(&[1.0, 2.0]));
//! let x = Mat::row_vector(&[3.0, -1.0]);
//! let loss = tape.sum(&tape.hadamard(&w, &x).unwrap()).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&w).unwrap().data(), &[3.0, -1.0]);
//! ```

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::mat::{dot, Mat};
use crate::error::{Error, Result};

/// Handle of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(usize);

/// Backward rule for an operation recorded from outside this module.
pub trait CustomBackward {
    /// Maps the output cotangent to one cotangent per recorded input, in order.
    fn backward(&self, grad_out: &Mat) -> Result<Vec<Mat>>;
}

type Saved = (Option<NodeId>, Mat);

enum Op {
    Leaf,
    MatMul {
        a: Saved,
        b: Saved,
    },
    MatMulNt {
        a: Saved,
        b: Saved,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Hadamard {
        a: Saved,
        b: Saved,
    },
    Scale {
        a: NodeId,
        s: f64,
    },
    Transpose {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
        out: Mat,
    },
    L2NormRows {
        a: NodeId,
        out: Mat,
        norms: Vec<f64>,
    },
    Sum {
        a: NodeId,
        shape: (usize, usize),
    },
    MeanOverRows {
        a: NodeId,
        rows: usize,
    },
    GatherRows {
        a: NodeId,
        indices: Vec<usize>,
        src_rows: usize,
    },
    VStack {
        parts: Vec<(Option<NodeId>, usize)>,
    },
    HStack {
        parts: Vec<(Option<NodeId>, usize)>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Mat,
        labels: Vec<usize>,
    },
    Custom {
        inputs: Vec<Option<NodeId>>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    op: Op,
    shape: (usize, usize),
}

/// Explicit, single-use recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<Vec<NodeId>>,
}

/// Gradients of a scalar loss with respect to every registered leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(NodeId, Mat)>,
}

impl Gradients {
    /// Gradient for a leaf created on the tape that produced these gradients.
    pub fn wrt(&self, leaf: &Mat) -> Result<&Mat> {
        let id = leaf
            .node()
            .ok_or_else(|| Error::Contract("gradient requested for an untracked matrix".into()))?;
        self.leaves
            .iter()
            .find(|(l, _)| *l == id)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::Contract("matrix is not a leaf of this tape".into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Mat)> {
        self.leaves.iter().map(|(id, g)| (*id, g))
    }
}

fn any_tracked(ms: &[&Mat]) -> bool {
    ms.iter().any(|m| m.is_tracked())
}

fn saved(m: &Mat) -> Saved {
    (m.node(), m.detach())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, value: Mat, op: Op) -> Mat {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            shape: value.shape(),
        });
        value.with_node(id)
    }

    /// Registers a parameter; the returned copy is tracked.
    pub fn leaf(&self, value: &Mat) -> Mat {
        let m = self.record(value.detach(), Op::Leaf);
        self.leaves
            .borrow_mut()
            .push(m.node().expect("just recorded"));
        m
    }

    pub fn matmul(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let v = a.matmul(b)?;
        if !any_tracked(&[a, b]) {
            return Ok(v);
        }
        Ok(self.record(
            v,
            Op::MatMul {
                a: saved(a),
                b: saved(b),
            },
        ))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let v = a.matmul_nt(b)?;
        if !any_tracked(&[a, b]) {
            return Ok(v);
        }
        Ok(self.record(
            v,
            Op::MatMulNt {
                a: saved(a),
                b: saved(b),
            },
        ))
    }

    pub fn add(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let v = a.add(b)?;
        if !any_tracked(&[a, b]) {
            return Ok(v);
        }
        Ok(self.record(
            v,
            Op::Add {
                a: a.node(),
                b: b.node(),
            },
        ))
    }

    pub fn sub(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let v = a.sub(b)?;
        if !any_tracked(&[a, b]) {
            return Ok(v);
        }
        Ok(self.record(
            v,
            Op::Sub {
                a: a.node(),
                b: b.node(),
            },
        ))
    }

    pub fn hadamard(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        let v = a.hadamard(b)?;
        if !any_tracked(&[a, b]) {
            return Ok(v);
        }
        Ok(self.record(
            v,
            Op::Hadamard {
                a: saved(a),
                b: saved(b),
            },
        ))
    }

    pub fn scale(&self, a: &Mat, s: f64) -> Result<Mat> {
        self.affine(a, s, 0.0)
    }

    /// `scale · a + shift`
    pub fn affine(&self, a: &Mat, scale: f64, shift: f64) -> Result<Mat> {
        let v = a.affine(scale, shift).checked("affine")?;
        match a.node() {
            None => Ok(v),
            Some(id) => Ok(self.record(v, Op::Scale { a: id, s: scale })),
        }
    }

    pub fn transpose(&self, a: &Mat) -> Mat {
        let v = a.transpose();
        match a.node() {
            None => v,
            Some(id) => self.record(v, Op::Transpose { a: id }),
        }
    }

    pub fn softmax_rows(&self, a: &Mat) -> Mat {
        let v = a.softmax_rows();
        match a.node() {
            None => v,
            Some(id) => {
                let out = v.clone();
                self.record(v, Op::SoftmaxRows { a: id, out })
            }
        }
    }

    pub fn l2norm_rows(&self, a: &Mat) -> Result<Mat> {
        let v = a.l2norm_rows()?;
        match a.node() {
            None => Ok(v),
            Some(id) => {
                let out = v.clone();
                let norms = a.row_norms();
                Ok(self.record(v, Op::L2NormRows { a: id, out, norms }))
            }
        }
    }

    /// Sum of all entries, as 1x1.
    pub fn sum(&self, a: &Mat) -> Result<Mat> {
        let v = Mat::scalar(a.sum()).checked("sum")?;
        match a.node() {
            None => Ok(v),
            Some(id) => Ok(self.record(
                v,
                Op::Sum {
                    a: id,
                    shape: a.shape(),
                },
            )),
        }
    }

    pub fn mean_over_rows(&self, a: &Mat) -> Result<Mat> {
        let v = a.mean_over_rows()?;
        match a.node() {
            None => Ok(v),
            Some(id) => Ok(self.record(
                v,
                Op::MeanOverRows {
                    a: id,
                    rows: a.rows(),
                },
            )),
        }
    }

    pub fn gather_rows(&self, a: &Mat, indices: &[usize]) -> Result<Mat> {
        let v = a.gather_rows(indices)?;
        match a.node() {
            None => Ok(v),
            Some(id) => Ok(self.record(
                v,
                Op::GatherRows {
                    a: id,
                    indices: indices.to_vec(),
                    src_rows: a.rows(),
                },
            )),
        }
    }

    pub fn vstack(&self, parts: &[&Mat]) -> Result<Mat> {
        let v = Mat::vstack(parts)?;
        if !any_tracked(parts) {
            return Ok(v);
        }
        let parts = parts.iter().map(|p| (p.node(), p.rows())).collect();
        Ok(self.record(v, Op::VStack { parts }))
    }

    pub fn hstack(&self, parts: &[&Mat]) -> Result<Mat> {
        let v = Mat::hstack(parts)?;
        if !any_tracked(parts) {
            return Ok(v);
        }
        let parts = parts.iter().map(|p| (p.node(), p.cols())).collect();
        Ok(self.record(v, Op::HStack { parts }))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`,
    /// in log-sum-exp form. Returns 1x1.
    pub fn cross_entropy(&self, logits: &Mat, labels: &[usize]) -> Result<Mat> {
        if labels.len() != logits.rows() || logits.rows() == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: logits.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
            return Err(Error::Index {
                index: bad,
                len: logits.cols(),
            });
        }
        let lse = logits.logsumexp_rows();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lse.data()[i] - logits.get(i, y))
            .sum();
        let v = Mat::scalar(total / labels.len() as f64).checked("cross_entropy")?;
        match logits.node() {
            None => Ok(v),
            Some(id) => Ok(self.record(
                v,
                Op::CrossEntropy {
                    logits: id,
                    probs: logits.softmax_rows(),
                    labels: labels.to_vec(),
                },
            )),
        }
    }

    /// Records an operation with a caller-supplied backward rule. `value` is
    /// returned untracked if no input is tracked.
    pub fn custom(&self, inputs: &[&Mat], value: Mat, rule: Box<dyn CustomBackward>) -> Mat {
        if !any_tracked(inputs) {
            return value.detach();
        }
        let inputs = inputs.iter().map(|m| m.node()).collect();
        self.record(value.detach(), Op::Custom { inputs, rule })
    }

    /// Propagates d(loss)/d(node) from a tracked 1x1 loss back to every leaf.
    /// Consumes the tape.
    pub fn backward(self, loss: &Mat) -> Result<Gradients> {
        let root = loss
            .node()
            .ok_or_else(|| Error::Contract("backward called on an untracked loss".into()))?;
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.into_inner();
        let leaves = self.leaves.into_inner();
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut leaf_grads: Vec<Option<Mat>> = vec![None; nodes.len()];

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => leaf_grads[idx] = Some(g),
                Op::MatMul { a, b } => {
                    if let Some(id) = a.0 {
                        accumulate(&mut grads, id, g.matmul_nt(&b.1)?)?;
                    }
                    if let Some(id) = b.0 {
                        accumulate(&mut grads, id, a.1.matmul_tn(&g)?)?;
                    }
                }
                Op::MatMulNt { a, b } => {
                    if let Some(id) = a.0 {
                        accumulate(&mut grads, id, g.matmul(&b.1)?)?;
                    }
                    if let Some(id) = b.0 {
                        accumulate(&mut grads, id, g.matmul_tn(&a.1)?)?;
                    }
                }
                Op::Add { a, b } => {
                    if let Some(id) = a {
                        accumulate(&mut grads, *id, g.clone())?;
                    }
                    if let Some(id) = b {
                        accumulate(&mut grads, *id, g)?;
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(id) = a {
                        accumulate(&mut grads, *id, g.clone())?;
                    }
                    if let Some(id) = b {
                        accumulate(&mut grads, *id, g.scale(-1.0))?;
                    }
                }
                Op::Hadamard { a, b } => {
                    if let Some(id) = a.0 {
                        accumulate(&mut grads, id, g.hadamard(&b.1)?)?;
                    }
                    if let Some(id) = b.0 {
                        accumulate(&mut grads, id, g.hadamard(&a.1)?)?;
                    }
                }
                Op::Scale { a, s } => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Transpose { a } => accumulate(&mut grads, *a, g.transpose())?,
                Op::SoftmaxRows { a, out } => {
                    let mut dx = g.detach();
                    let cols = out.cols();
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let inner = dot(g.row(r), y);
                        for (c, d) in dx.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .enumerate()
                        {
                            *d = y[c] * (*d - inner);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::L2NormRows { a, out, norms } => {
                    let mut dx = g.detach();
                    let cols = out.cols();
                    for (r, &norm) in norms.iter().enumerate() {
                        let y = out.row(r);
                        let inner = dot(g.row(r), y);
                        for (c, d) in dx.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .enumerate()
                        {
                            *d = (*d - y[c] * inner) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Sum { a, shape } => {
                    accumulate(&mut grads, *a, Mat::filled(shape.0, shape.1, g.item()))?
                }
                Op::MeanOverRows { a, rows } => {
                    let row = g.scale(1.0 / *rows as f64);
                    let dx = Mat::from_fn(*rows, row.cols(), |_, c| row.data()[c]);
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::GatherRows {
                    a,
                    indices,
                    src_rows,
                } => {
                    let cols = g.cols();
                    let mut dx = Mat::zeros(*src_rows, cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (d, v) in dx.data_mut()[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(g.row(k))
                        {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::VStack { parts } => {
                    let mut start = 0;
                    for (id, rows) in parts {
                        if let Some(id) = id {
                            let idx: Vec<usize> = (start..start + rows).collect();
                            accumulate(&mut grads, *id, g.gather_rows(&idx)?)?;
                        }
                        start += rows;
                    }
                }
                Op::HStack { parts } => {
                    let mut start = 0;
                    for (id, cols) in parts {
                        if let Some(id) = id {
                            let piece = Mat::from_fn(g.rows(), *cols, |r, c| g.get(r, start + c));
                            accumulate(&mut grads, *id, piece)?;
                        }
                        start += cols;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let scale = g.item() / labels.len() as f64;
                    let mut dx = probs.detach();
                    let cols = dx.cols();
                    for (i, &y) in labels.iter().enumerate() {
                        dx.data_mut()[i * cols + y] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, dx.scale(scale))?;
                }
                Op::Custom { inputs, rule } => {
                    let parts = rule.backward(&g)?;
                    if parts.len() != inputs.len() {
                        return Err(Error::Contract(
                            "custom backward returned the wrong number of cotangents".into(),
                        ));
                    }
                    for (id, d) in inputs.iter().zip(parts) {
                        if let Some(id) = id {
                            accumulate(&mut grads, *id, d)?;
                        }
                    }
                }
            }
        }

        let leaves = leaves
            .into_iter()
            .map(|id| {
                let (r, c) = nodes[id.0].shape;
                let g = leaf_grads[id.0].take().unwrap_or_else(|| Mat::zeros(r, c));
                (id, g)
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_grad;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // small LCG keeps the test self-contained
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Mat::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let tape = Tape::new();
        let w = tape.leaf(&rand_mat(3, 2, 1));
        let loss = tape.sum(&w).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), &Mat::filled(3, 2, 1.0));
    }

    #[test]
    fn linear_gradient_is_input() {
        let tape = Tape::new();
        let w = tape.leaf(&rand_mat(1, 4, 2));
        let x = rand_mat(4, 1, 3);
        let loss = tape.matmul(&w, &x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), &x.transpose());
    }

    #[test]
    fn untracked_loss_is_contract_error() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(&Mat::scalar(1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&rand_mat(2, 2, 4));
        let b = tape.leaf(&rand_mat(3, 1, 5));
        let loss = tape.sum(&a).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&b).unwrap(), &Mat::zeros(3, 1));
    }

    /// Composite touching every built-in op, checked against central differences.
    fn composite(tape: &Tape, p: &[Mat]) -> Result<Mat> {
        let (a, b, c) = (&p[0], &p[1], &p[2]);
        let ab = tape.matmul(a, b)?; // 3x4
        let s = tape.softmax_rows(&tape.scale(&ab, 0.7)?);
        let n = tape.l2norm_rows(&tape.affine(&ab, 1.3, 0.2)?)?;
        let h = tape.hadamard(&s, &n)?;
        let t = tape.transpose(&h); // 4x3
        let g = tape.gather_rows(&t, &[3, 0, 3])?; // 3x3
        let v = tape.vstack(&[&g, c])?; // 5x3
        let vv = tape.matmul_nt(&v, &v)?; // 5x5
        let hs = tape.hstack(&[&tape.sub(&v, &tape.scale(&v, 0.5)?)?, &vv])?;
        let m = tape.mean_over_rows(&hs)?;
        let logits = tape.vstack(&[&tape.add(&m, &m)?, &tape.scale(&m, -2.0)?])?;
        let ce = tape.cross_entropy(&logits, &[1, 4])?;
        let total = tape.add(&ce, &tape.sum(&tape.hadamard(c, c)?)?)?;
        Ok(total)
    }

    #[test]
    fn composite_matches_finite_differences() {
        for seed in 0..10 {
            let params = vec![
                rand_mat(3, 2, seed),
                rand_mat(2, 4, seed + 100),
                rand_mat(2, 3, seed + 200),
            ];
            let tape = Tape::new();
            let leaves: Vec<Mat> = params.iter().map(|p| tape.leaf(p)).collect();
            let loss = composite(&tape, &leaves).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let fd = finite_diff_grad(
                |p| composite(&Tape::new(), p).map(|m| m.item()),
                &params,
                1e-5,
            )
            .unwrap();
            for (leaf, num) in leaves.iter().zip(&fd) {
                let ana = grads.wrt(leaf).unwrap();
                let err = ana.sub(num).unwrap().frobenius_norm() / num.frobenius_norm().max(1e-12);
                assert!(err < 1e-6, "seed {seed}: rel err {err}");
            }
        }
    }
}

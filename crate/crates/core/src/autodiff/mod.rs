//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape is append-only. Leaves are either *persistent* (model parameters,
//! which survive [`Tape::release_graph`]) or *transient* (inputs, constants,
//! stop-gradient copies, and every op output). Releasing the graph frees all
//! transient records in one step and bumps an epoch counter, so stale
//! [`ValueId`]s from a released segment are detected instead of silently
//! reading freed data.
//!
//! Retained node and element counts are tracked exactly (with high-water
//! marks); they are the crate's deterministic proxy for graph memory.

mod check;

pub use check::{finite_diff_check, jacobian, jacobian_multi};

use std::sync::atomic::{AtomicU32, Ordering};

/// Errors raised by tape construction and backward passes.
#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("value belongs to a different tape")]
    WrongTape,
    #[error("value was released by release_graph")]
    Released,
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op} expects a 1-d vector operand, got shape {shape:?}")]
    NotAVector { op: &'static str, shape: Vec<usize> },
    #[error("{op} expects a 2-d matrix operand, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("cannot set data on an op node")]
    SetDataOnOp,
    #[error("cannot L2-normalize a zero vector")]
    ZeroNorm,
    #[error("stop-gradient replay mismatch (non-deterministic builder?)")]
    SgReplayMismatch,
}

type TapeResult<T> = std::result::Result<T, TapeError>;

/// Handle to a value on a specific tape. Cheap to copy; never dangles
/// silently — resolving a released or foreign id is an error.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ValueId {
    tape: u32,
    persistent: bool,
    epoch: u32,
    index: u32,
}

/// A scalar-or-array node: payload, accumulated gradient, grad flag.
#[derive(Clone, Debug)]
pub struct Value {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Value {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Param,
    Input,
    Constant,
    Detached,
}

#[derive(Clone, Debug)]
enum OpKind {
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    MatVec(ValueId, ValueId),
    Concat(Vec<ValueId>),
    Tanh(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    Dot(ValueId, ValueId),
    Softmax(ValueId),
    L2Normalize(ValueId),
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf(LeafKind),
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    value: Value,
    kind: NodeKind,
}

/// Snapshot of graph-size counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphStats {
    /// Live node records (persistent leaves + transient records).
    pub retained_nodes: usize,
    /// Total stored real numbers across live node payloads.
    pub retained_elements: usize,
    /// Backward passes executed on this tape so far.
    pub backward_passes: usize,
}

/// Gradient map over leaves, as returned by [`Tape::backward`].
///
/// Contains one entry per `requires_grad` leaf that was live at backward
/// time (zeros where the root does not depend on the leaf), in deterministic
/// order: persistent leaves by index, then transient leaves by index.
#[derive(Clone, Debug)]
pub struct Gradients {
    entries: Vec<(ValueId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(eid, _)| *eid == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ValueId, &[f64])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Euclidean norm over the concatenated gradients of `ids`.
    /// Missing ids contribute zero.
    pub fn norm_over(&self, ids: &[ValueId]) -> f64 {
        let mut sq = 0.0;
        for id in ids {
            if let Some(g) = self.get(*id) {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// The operation tape. Confined to one execution context; independent tapes
/// may run concurrently with no shared state.
pub struct Tape {
    id: u32,
    persistent: Vec<Node>,
    transient: Vec<Node>,
    epoch: u32,
    backward_passes: usize,
    persistent_elements: usize,
    transient_elements: usize,
    peak_nodes: usize,
    peak_elements: usize,
    sg_record: Option<Vec<Vec<f64>>>,
    sg_replay: Option<(Vec<Vec<f64>>, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            persistent: Vec::new(),
            transient: Vec::new(),
            epoch: 0,
            backward_passes: 0,
            persistent_elements: 0,
            transient_elements: 0,
            peak_nodes: 0,
            peak_elements: 0,
            sg_record: None,
            sg_replay: None,
        }
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Persistent trainable leaf. Survives `release_graph`.
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TapeResult<ValueId> {
        self.push_persistent(data, shape, true)
    }

    /// Persistent non-trainable leaf (frozen model mounts).
    pub fn frozen_param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TapeResult<ValueId> {
        self.push_persistent(data, shape, false)
    }

    /// Transient differentiable leaf (probe inputs).
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TapeResult<ValueId> {
        self.push_transient_leaf(data, shape, true, LeafKind::Input)
    }

    /// Transient non-differentiable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TapeResult<ValueId> {
        self.push_transient_leaf(data, shape, false, LeafKind::Constant)
    }

    /// Value-preserving, gradient-annihilating copy: identical data, no
    /// parent edge, `requires_grad = false`.
    pub fn stop_gradient(&mut self, x: ValueId) -> TapeResult<ValueId> {
        let (data, shape) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone())
        };
        let data = if self.sg_replay.is_some() {
            let (recorded, cursor) = self.sg_replay.as_mut().unwrap();
            let rec = recorded.get(*cursor).ok_or(TapeError::SgReplayMismatch)?.clone();
            *cursor += 1;
            if rec.len() != data.len() {
                return Err(TapeError::SgReplayMismatch);
            }
            rec
        } else {
            data
        };
        if let Some(rec) = self.sg_record.as_mut() {
            rec.push(data.clone());
        }
        self.push_transient_leaf(data, shape, false, LeafKind::Detached)
    }

    fn push_persistent(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TapeResult<ValueId> {
        Self::validate_payload("leaf", &data, &shape)?;
        let index = self.persistent.len() as u32;
        self.persistent_elements += data.len();
        self.persistent.push(Node {
            value: Value {
                data,
                shape,
                grad: None,
                requires_grad,
            },
            kind: NodeKind::Leaf(LeafKind::Param),
        });
        self.bump_watermarks();
        Ok(ValueId {
            tape: self.id,
            persistent: true,
            epoch: 0,
            index,
        })
    }

    fn push_transient_leaf(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        kind: LeafKind,
    ) -> TapeResult<ValueId> {
        Self::validate_payload("leaf", &data, &shape)?;
        Ok(self.push_transient(data, shape, requires_grad, NodeKind::Leaf(kind)))
    }

    fn validate_payload(op: &'static str, data: &[f64], shape: &[usize]) -> TapeResult<()> {
        if data.len() != numel_of(shape) {
            return Err(TapeError::LengthMismatch {
                op,
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if !all_finite(data) {
            return Err(TapeError::NonFinite(op));
        }
        Ok(())
    }

    fn push_transient(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        kind: NodeKind,
    ) -> ValueId {
        let index = self.transient.len() as u32;
        self.transient_elements += data.len();
        self.transient.push(Node {
            value: Value {
                data,
                shape,
                grad: None,
                requires_grad,
            },
            kind,
        });
        self.bump_watermarks();
        ValueId {
            tape: self.id,
            persistent: false,
            epoch: self.epoch,
            index,
        }
    }

    fn bump_watermarks(&mut self) {
        let nodes = self.live_node_count();
        let elements = self.persistent_elements + self.transient_elements;
        self.peak_nodes = self.peak_nodes.max(nodes);
        self.peak_elements = self.peak_elements.max(elements);
    }

    // ── access ───────────────────────────────────────────────────────

    fn node(&self, id: ValueId) -> TapeResult<&Node> {
        if id.tape != self.id {
            return Err(TapeError::WrongTape);
        }
        if id.persistent {
            Ok(&self.persistent[id.index as usize])
        } else if id.epoch == self.epoch {
            Ok(&self.transient[id.index as usize])
        } else {
            Err(TapeError::Released)
        }
    }

    fn node_mut(&mut self, id: ValueId) -> TapeResult<&mut Node> {
        if id.tape != self.id {
            return Err(TapeError::WrongTape);
        }
        if id.persistent {
            Ok(&mut self.persistent[id.index as usize])
        } else if id.epoch == self.epoch {
            Ok(&mut self.transient[id.index as usize])
        } else {
            Err(TapeError::Released)
        }
    }

    pub fn value(&self, id: ValueId) -> TapeResult<&Value> {
        Ok(&self.node(id)?.value)
    }

    pub fn data(&self, id: ValueId) -> TapeResult<&[f64]> {
        Ok(&self.node(id)?.value.data)
    }

    pub fn shape(&self, id: ValueId) -> TapeResult<&[usize]> {
        Ok(&self.node(id)?.value.shape)
    }

    /// True if the id resolves to a leaf record (no parent edges).
    pub fn is_leaf(&self, id: ValueId) -> TapeResult<bool> {
        Ok(matches!(self.node(id)?.kind, NodeKind::Leaf(_)))
    }

    /// True if the id resolves to a stop-gradient (detached) leaf.
    pub fn is_detached_leaf(&self, id: ValueId) -> TapeResult<bool> {
        Ok(matches!(
            self.node(id)?.kind,
            NodeKind::Leaf(LeafKind::Detached)
        ))
    }

    /// Reads a one-element value.
    pub fn scalar(&self, id: ValueId) -> TapeResult<f64> {
        let v = self.value(id)?;
        if v.numel() != 1 {
            return Err(TapeError::NonScalarRoot(v.shape.clone()));
        }
        Ok(v.data[0])
    }

    /// Overwrites a leaf's payload in place (parameter updates).
    pub fn set_data(&mut self, id: ValueId, data: &[f64]) -> TapeResult<()> {
        let node = self.node_mut(id)?;
        if !matches!(node.kind, NodeKind::Leaf(_)) {
            return Err(TapeError::SetDataOnOp);
        }
        if data.len() != node.value.data.len() {
            return Err(TapeError::LengthMismatch {
                op: "set_data",
                len: data.len(),
                shape: node.value.shape.clone(),
            });
        }
        if !all_finite(data) {
            return Err(TapeError::NonFinite("set_data"));
        }
        node.value.data.copy_from_slice(data);
        Ok(())
    }

    // ── counters ─────────────────────────────────────────────────────

    pub fn live_node_count(&self) -> usize {
        self.persistent.len() + self.transient.len()
    }

    pub fn persistent_leaf_count(&self) -> usize {
        self.persistent.len()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            retained_nodes: self.live_node_count(),
            retained_elements: self.persistent_elements + self.transient_elements,
            backward_passes: self.backward_passes,
        }
    }

    /// High-water marks since construction or the last [`Tape::reset_peak`].
    pub fn peak_stats(&self) -> GraphStats {
        GraphStats {
            retained_nodes: self.peak_nodes,
            retained_elements: self.peak_elements,
            backward_passes: self.backward_passes,
        }
    }

    pub fn reset_peak(&mut self) {
        self.peak_nodes = self.live_node_count();
        self.peak_elements = self.persistent_elements + self.transient_elements;
    }

    /// Frees every transient record (ops, constants, inputs, detached
    /// copies) recorded since the previous release. Persistent leaves
    /// survive. Returns the stats captured just before the release.
    pub fn release_graph(&mut self) -> GraphStats {
        let before = self.stats();
        self.transient.clear();
        self.transient_elements = 0;
        self.epoch += 1;
        before
    }

    // ── stop-gradient capture / replay (finite-difference support) ───

    pub(crate) fn begin_sg_recording(&mut self) {
        self.sg_record = Some(Vec::new());
    }

    pub(crate) fn take_sg_recording(&mut self) -> Vec<Vec<f64>> {
        self.sg_record.take().unwrap_or_default()
    }

    pub(crate) fn set_sg_replay(&mut self, recorded: Vec<Vec<f64>>) {
        self.sg_replay = Some((recorded, 0));
    }

    pub(crate) fn sg_replay_fully_consumed(&self) -> bool {
        match &self.sg_replay {
            Some((recorded, cursor)) => *cursor == recorded.len(),
            None => true,
        }
    }

    // ── ops ──────────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        kind: OpKind,
    ) -> TapeResult<ValueId> {
        let (da, sa, ra) = {
            let v = self.value(a)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        let (db, sb, rb) = {
            let v = self.value(b)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| f(*x, *y)).collect();
        if !all_finite(&out) {
            return Err(TapeError::NonFinite(op));
        }
        Ok(self.push_transient(out, sa, ra || rb, NodeKind::Op(kind)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, OpKind::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, OpKind::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, OpKind::Mul(a, b))
    }

    /// Elementwise multiplication by a compile-time constant.
    pub fn scale(&mut self, x: ValueId, c: f64) -> TapeResult<ValueId> {
        let (data, shape, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if !c.is_finite() {
            return Err(TapeError::NonFinite("scale"));
        }
        let out: Vec<f64> = data.iter().map(|v| v * c).collect();
        if !all_finite(&out) {
            return Err(TapeError::NonFinite("scale"));
        }
        Ok(self.push_transient(out, shape, rg, NodeKind::Op(OpKind::Scale(x, c))))
    }

    /// Matrix-vector product: `w` of shape `[m, n]` times `x` of shape `[n]`.
    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> TapeResult<ValueId> {
        let (wd, ws, wr) = {
            let v = self.value(w)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        let (xd, xs, xr) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if ws.len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "matvec",
                shape: ws,
            });
        }
        if xs.len() != 1 || xs[0] != ws[1] {
            return Err(TapeError::ShapeMismatch {
                op: "matvec",
                left: ws,
                right: xs,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            out[i] = row.iter().zip(&xd).map(|(a, b)| a * b).sum();
        }
        if !all_finite(&out) {
            return Err(TapeError::NonFinite("matvec"));
        }
        Ok(self.push_transient(out, vec![m], wr || xr, NodeKind::Op(OpKind::MatVec(w, x))))
    }

    /// Concatenation of 1-d vectors.
    pub fn concat(&mut self, parts: &[ValueId]) -> TapeResult<ValueId> {
        let mut out = Vec::new();
        let mut rg = false;
        for p in parts {
            let v = self.value(*p)?;
            if v.shape.len() != 1 {
                return Err(TapeError::NotAVector {
                    op: "concat",
                    shape: v.shape.clone(),
                });
            }
            out.extend_from_slice(&v.data);
            rg |= v.requires_grad;
        }
        let len = out.len();
        Ok(self.push_transient(
            out,
            vec![len],
            rg,
            NodeKind::Op(OpKind::Concat(parts.to_vec())),
        ))
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        kind: OpKind,
    ) -> TapeResult<ValueId> {
        let (data, shape, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        let out: Vec<f64> = data.iter().map(|v| f(*v)).collect();
        if !all_finite(&out) {
            return Err(TapeError::NonFinite(op));
        }
        Ok(self.push_transient(out, shape, rg, NodeKind::Op(kind)))
    }

    pub fn tanh(&mut self, x: ValueId) -> TapeResult<ValueId> {
        self.unary("tanh", x, f64::tanh, OpKind::Tanh(x))
    }

    pub fn exp(&mut self, x: ValueId) -> TapeResult<ValueId> {
        self.unary("exp", x, f64::exp, OpKind::Exp(x))
    }

    pub fn log(&mut self, x: ValueId) -> TapeResult<ValueId> {
        self.unary("log", x, f64::ln, OpKind::Log(x))
    }

    pub fn sum(&mut self, x: ValueId) -> TapeResult<ValueId> {
        let (data, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.requires_grad)
        };
        let s: f64 = data.iter().sum();
        if !s.is_finite() {
            return Err(TapeError::NonFinite("sum"));
        }
        Ok(self.push_transient(vec![s], vec![1], rg, NodeKind::Op(OpKind::Sum(x))))
    }

    pub fn mean(&mut self, x: ValueId) -> TapeResult<ValueId> {
        let (data, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.requires_grad)
        };
        let s: f64 = data.iter().sum::<f64>() / data.len() as f64;
        if !s.is_finite() {
            return Err(TapeError::NonFinite("mean"));
        }
        Ok(self.push_transient(vec![s], vec![1], rg, NodeKind::Op(OpKind::Mean(x))))
    }

    /// Inner product of two equal-length vectors, yielding shape `[1]`.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        let (da, sa, ra) = {
            let v = self.value(a)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        let (db, sb, rb) = {
            let v = self.value(b)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if sa.len() != 1 || sb.len() != 1 || sa != sb {
            return Err(TapeError::ShapeMismatch {
                op: "dot",
                left: sa,
                right: sb,
            });
        }
        let s: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        if !s.is_finite() {
            return Err(TapeError::NonFinite("dot"));
        }
        Ok(self.push_transient(vec![s], vec![1], ra || rb, NodeKind::Op(OpKind::Dot(a, b))))
    }

    /// Numerically stable softmax over a 1-d vector.
    pub fn softmax(&mut self, x: ValueId) -> TapeResult<ValueId> {
        let (data, shape, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if shape.len() != 1 || data.is_empty() {
            return Err(TapeError::NotAVector {
                op: "softmax",
                shape,
            });
        }
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        if !all_finite(&out) {
            return Err(TapeError::NonFinite("softmax"));
        }
        Ok(self.push_transient(out, shape, rg, NodeKind::Op(OpKind::Softmax(x))))
    }

    /// `x / ‖x‖₂` for a 1-d vector. Zero vectors are rejected.
    pub fn l2_normalize(&mut self, x: ValueId) -> TapeResult<ValueId> {
        let (data, shape, rg) = {
            let v = self.value(x)?;
            (v.data.clone(), v.shape.clone(), v.requires_grad)
        };
        if shape.len() != 1 {
            return Err(TapeError::NotAVector {
                op: "l2_normalize",
                shape,
            });
        }
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Err(TapeError::ZeroNorm);
        }
        let out: Vec<f64> = data.iter().map(|v| v / norm).collect();
        if !all_finite(&out) {
            return Err(TapeError::NonFinite("l2_normalize"));
        }
        Ok(self.push_transient(out, shape, rg, NodeKind::Op(OpKind::L2Normalize(x))))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients of multiply-used values
    /// sum (multivariate chain rule); paths through detached leaves
    /// contribute exactly zero. Deterministic: identical tapes yield
    /// bit-identical gradients.
    pub fn backward(&mut self, root: ValueId) -> TapeResult<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(TapeError::NonScalarRoot(root_node.value.shape.clone()));
        }

        for node in self.persistent.iter_mut().chain(self.transient.iter_mut()) {
            node.value.grad = None;
        }
        self.node_mut(root)?.value.grad = Some(vec![1.0]);

        let start = if root.persistent {
            // A bare leaf as root: nothing to traverse.
            None
        } else {
            Some(root.index as usize)
        };

        if let Some(start) = start {
            for i in (0..=start).rev() {
                let (grad, kind) = {
                    let node = &self.transient[i];
                    match &node.value.grad {
                        None => continue,
                        Some(g) => (g.clone(), node.kind.clone()),
                    }
                };
                let op = match kind {
                    NodeKind::Leaf(_) => continue,
                    NodeKind::Op(op) => op,
                };
                self.propagate(&op, &grad, i)?;
            }
        }

        self.backward_passes += 1;

        let mut entries = Vec::new();
        let mut collect = |nodes: &mut [Node], persistent: bool, epoch: u32, tape: u32| {
            for (index, node) in nodes.iter_mut().enumerate() {
                if !matches!(node.kind, NodeKind::Leaf(_)) || !node.value.requires_grad {
                    continue;
                }
                let g = node
                    .value
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.data.len()])
                    .clone();
                entries.push((
                    ValueId {
                        tape,
                        persistent,
                        epoch: if persistent { 0 } else { epoch },
                        index: index as u32,
                    },
                    g,
                ));
            }
        };
        collect(&mut self.persistent, true, 0, self.id);
        collect(&mut self.transient, false, self.epoch, self.id);
        Ok(Gradients { entries })
    }

    fn accumulate(&mut self, target: ValueId, contribution: &[f64]) -> TapeResult<()> {
        let node = self.node_mut(target)?;
        if !node.value.requires_grad {
            return Ok(());
        }
        let grad = node
            .value
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.data.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
        Ok(())
    }

    fn propagate(&mut self, op: &OpKind, grad: &[f64], out_index: usize) -> TapeResult<()> {
        match op {
            OpKind::Add(a, b) => {
                self.accumulate(*a, grad)?;
                self.accumulate(*b, grad)?;
            }
            OpKind::Sub(a, b) => {
                self.accumulate(*a, grad)?;
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg)?;
            }
            OpKind::Mul(a, b) => {
                let da = self.data(*a)?.to_vec();
                let db = self.data(*b)?.to_vec();
                let ga: Vec<f64> = grad.iter().zip(&db).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = grad.iter().zip(&da).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &ga)?;
                self.accumulate(*b, &gb)?;
            }
            OpKind::Scale(x, c) => {
                let gx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(*x, &gx)?;
            }
            OpKind::MatVec(w, x) => {
                let wd = self.data(*w)?.to_vec();
                let xd = self.data(*x)?.to_vec();
                let (m, n) = (grad.len(), xd.len());
                let mut gw = vec![0.0; m * n];
                let mut gx = vec![0.0; n];
                for i in 0..m {
                    let gi = grad[i];
                    for j in 0..n {
                        gw[i * n + j] = gi * xd[j];
                        gx[j] += gi * wd[i * n + j];
                    }
                }
                self.accumulate(*w, &gw)?;
                self.accumulate(*x, &gx)?;
            }
            OpKind::Concat(parts) => {
                let mut offset = 0;
                for p in parts.clone() {
                    let len = self.value(p)?.numel();
                    let seg = grad[offset..offset + len].to_vec();
                    self.accumulate(p, &seg)?;
                    offset += len;
                }
            }
            OpKind::Tanh(x) => {
                let y = self.transient[out_index].value.data.clone();
                let gx: Vec<f64> = grad.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(*x, &gx)?;
            }
            OpKind::Exp(x) => {
                let y = self.transient[out_index].value.data.clone();
                let gx: Vec<f64> = grad.iter().zip(&y).map(|(g, y)| g * y).collect();
                self.accumulate(*x, &gx)?;
            }
            OpKind::Log(x) => {
                let xd = self.data(*x)?.to_vec();
                let gx: Vec<f64> = grad.iter().zip(&xd).map(|(g, x)| g / x).collect();
                self.accumulate(*x, &gx)?;
            }
            OpKind::Sum(x) => {
                let len = self.value(*x)?.numel();
                let gx = vec![grad[0]; len];
                self.accumulate(*x, &gx)?;
            }
            OpKind::Mean(x) => {
                let len = self.value(*x)?.numel();
                let gx = vec![grad[0] / len as f64; len];
                self.accumulate(*x, &gx)?;
            }
            OpKind::Dot(a, b) => {
                let da = self.data(*a)?.to_vec();
                let db = self.data(*b)?.to_vec();
                let g0 = grad[0];
                let ga: Vec<f64> = db.iter().map(|y| g0 * y).collect();
                let gb: Vec<f64> = da.iter().map(|x| g0 * x).collect();
                self.accumulate(*a, &ga)?;
                self.accumulate(*b, &gb)?;
            }
            OpKind::Softmax(x) => {
                let y = self.transient[out_index].value.data.clone();
                let dot: f64 = grad.iter().zip(&y).map(|(g, y)| g * y).sum();
                let gx: Vec<f64> = grad
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| y * (g - dot))
                    .collect();
                self.accumulate(*x, &gx)?;
            }
            OpKind::L2Normalize(x) => {
                let xd = self.data(*x)?.to_vec();
                let y = self.transient[out_index].value.data.clone();
                let norm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = grad.iter().zip(&y).map(|(g, y)| g * y).sum();
                let gx: Vec<f64> = grad
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| (g - y * dot) / norm)
                    .collect();
                self.accumulate(*x, &gx)?;
            }
        }
        Ok(())
    }
}

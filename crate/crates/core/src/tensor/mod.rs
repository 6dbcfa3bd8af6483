//! Dense N-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! A [`DenseTensor`] is an immutable row-major `f64` array plus a shape. If it
//! was created through a recording [`Tape`], it also carries a node id; every
//! operation that consumes tracked tensors records a backward rule on the
//! tape. [`Tape::backward`] replays the rules in reverse and accumulates
//! gradients, which are then read back per node.
//!
//! The tape is created fresh for every training step and dropped afterwards.
//! Values are shared via `Rc`, so recording a rule captures exactly the
//! buffers it needs without copying.

mod conv;
pub mod gradcheck;
mod layers;

pub use conv::{conv2d, conv2d_transpose};
pub use layers::{batchnorm, concat_channels, maxpool2d, upsample_nearest, BatchNormMode, RunningStats};

use crate::error::{Error, Result};
use std::rc::Rc;

pub type NodeId = usize;

/// Numerical floor used when normalizing by sums of squared window values,
/// variances, etc.
pub(crate) const EPS_DENOM: f64 = 1e-12;

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct DenseTensor {
    values: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<NodeId>,
}

impl std::fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DenseTensor {
    /// Untracked tensor from raw values.
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if values.len() != numel(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?}", values.len(), shape),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("from_vec", format!("zero-sized axis in {shape:?}")));
        }
        ensure_finite("from_vec", &values)?;
        Ok(DenseTensor {
            values: Rc::new(values),
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor::from_vec(vec![v], &[1]).expect("scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        DenseTensor {
            values: Rc::new(vec![0.0; numel(shape)]),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Self {
        DenseTensor {
            values: Rc::clone(&self.values),
            shape: self.shape.clone(),
            node: None,
        }
    }

    pub(crate) fn shared_values(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.values)
    }

    fn tracked(values: Vec<f64>, shape: Vec<usize>, node: Option<NodeId>) -> Self {
        DenseTensor {
            values: Rc::new(values),
            shape,
            node,
        }
    }
}

pub(crate) fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op,
                detail: format!("element {i} is {v}"),
            });
        }
    }
    Ok(())
}

/// Gradient accumulators, one slot per tape node.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    sizes: Rc<Vec<usize>>,
}

impl Grads {
    fn new(sizes: Rc<Vec<usize>>) -> Self {
        Grads {
            slots: (0..sizes.len()).map(|_| None).collect(),
            sizes,
        }
    }

    /// Elementwise add `contrib` into the slot for `node`.
    pub fn accumulate(&mut self, node: NodeId, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.sizes[node]);
        let slot = self.slots[node].get_or_insert_with(|| vec![0.0; self.sizes[node]]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Mutable access to the zero-initialized slot for `node`, for ops that
    /// scatter directly instead of building a contribution buffer.
    pub fn slot_mut(&mut self, node: NodeId) -> &mut [f64] {
        self.slots[node].get_or_insert_with(|| vec![0.0; self.sizes[node]])
    }

    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.slots[node].as_deref()
    }
}

type BackwardRule = Box<dyn Fn(&[f64], &mut Grads)>;

struct OpRecord {
    output: NodeId,
    backward: BackwardRule,
}

/// Records operations during a forward pass; replays them in reverse to fill
/// gradients. Single-writer: one tape per training step.
pub struct Tape {
    sizes: Vec<usize>,
    ops: Vec<OpRecord>,
    grads: Option<Grads>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            sizes: Vec::new(),
            ops: Vec::new(),
            grads: None,
            recording: true,
        }
    }

    /// Disable recording (eval mode). Ops still compute values but register
    /// no nodes, so nothing can be back-propagated.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Drop all recorded state. Equivalent to starting a fresh tape.
    pub fn clear(&mut self) {
        self.sizes.clear();
        self.ops.clear();
        self.grads = None;
    }

    /// Create a tracked leaf from raw values. Leaves receive gradients.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<DenseTensor> {
        let mut t = DenseTensor::from_vec(values, shape)?;
        t.node = Some(self.push_node(t.len()));
        Ok(t)
    }

    fn push_node(&mut self, size: usize) -> NodeId {
        let id = self.sizes.len();
        self.sizes.push(size);
        id
    }

    /// Register the output node for an op whose inputs include at least one
    /// tracked tensor. Returns `None` when not recording or nothing tracked.
    pub(crate) fn node_for_output(&mut self, any_tracked: bool, size: usize) -> Option<NodeId> {
        (self.recording && any_tracked).then(|| self.push_node(size))
    }

    pub(crate) fn record(&mut self, output: NodeId, backward: impl Fn(&[f64], &mut Grads) + 'static) {
        self.ops.push(OpRecord {
            output,
            backward: Box::new(backward),
        });
    }

    /// Reverse pass from a scalar loss. Fails if the loss is not scalar or
    /// not tracked on this tape.
    pub fn backward(&mut self, loss: &DenseTensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let Some(root) = loss.node else {
            return Err(Error::shape("backward", "loss tensor is not tracked on a tape"));
        };
        let mut grads = Grads::new(Rc::new(self.sizes.clone()));
        grads.slots[root] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            // A node is produced by exactly one op, and all of its consumers
            // were recorded later, so its accumulator is final here.
            if let Some(dout) = grads.slots[op.output].take() {
                (op.backward)(&dout, &mut grads);
            }
        }
        for (id, slot) in grads.slots.iter().enumerate() {
            if let Some(g) = slot {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "backward",
                        detail: format!("gradient of node {id} is non-finite"),
                    });
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a tensor after [`Tape::backward`]. `None` if no gradient
    /// flowed to it (or backward was not run).
    pub fn grad(&self, t: &DenseTensor) -> Option<&[f64]> {
        let node = t.node?;
        self.grads.as_ref()?.get(node)
    }
}

fn same_shape(op: &'static str, a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

// ── Elementwise arithmetic ──────────────────────────────────────────────

pub fn add(tape: &mut Tape, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    same_shape("add", a, b)?;
    let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x + y).collect();
    ensure_finite("add", &out)?;
    let node = tape.node_for_output(a.node.is_some() || b.node.is_some(), out.len());
    if let Some(id) = node {
        let (an, bn) = (a.node, b.node);
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                grads.accumulate(an, dout);
            }
            if let Some(bn) = bn {
                grads.accumulate(bn, dout);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

pub fn sub(tape: &mut Tape, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    same_shape("sub", a, b)?;
    let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x - y).collect();
    ensure_finite("sub", &out)?;
    let node = tape.node_for_output(a.node.is_some() || b.node.is_some(), out.len());
    if let Some(id) = node {
        let (an, bn) = (a.node, b.node);
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                grads.accumulate(an, dout);
            }
            if let Some(bn) = bn {
                let neg: Vec<f64> = dout.iter().map(|d| -d).collect();
                grads.accumulate(bn, &neg);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

pub fn mul(tape: &mut Tape, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    same_shape("mul", a, b)?;
    let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).collect();
    ensure_finite("mul", &out)?;
    let node = tape.node_for_output(a.node.is_some() || b.node.is_some(), out.len());
    if let Some(id) = node {
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.shared_values(), b.shared_values());
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                let d: Vec<f64> = dout.iter().zip(bv.iter()).map(|(d, y)| d * y).collect();
                grads.accumulate(an, &d);
            }
            if let Some(bn) = bn {
                let d: Vec<f64> = dout.iter().zip(av.iter()).map(|(d, x)| d * x).collect();
                grads.accumulate(bn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

pub fn scale(tape: &mut Tape, a: &DenseTensor, c: f64) -> Result<DenseTensor> {
    let out: Vec<f64> = a.values.iter().map(|x| x * c).collect();
    ensure_finite("scale", &out)?;
    let node = tape.node_for_output(a.node.is_some(), out.len());
    if let Some(id) = node {
        let an = a.node;
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                let d: Vec<f64> = dout.iter().map(|d| d * c).collect();
                grads.accumulate(an, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

/// `a + b` where `b` is a 1-element tensor broadcast over all of `a`.
pub fn add_broadcast_scalar(tape: &mut Tape, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if b.len() != 1 {
        return Err(Error::shape(
            "add_broadcast_scalar",
            format!("broadcast operand must be scalar, got {:?}", b.shape()),
        ));
    }
    let bv = b.values[0];
    let out: Vec<f64> = a.values.iter().map(|x| x + bv).collect();
    ensure_finite("add_broadcast_scalar", &out)?;
    let node = tape.node_for_output(a.node.is_some() || b.node.is_some(), out.len());
    if let Some(id) = node {
        let (an, bn) = (a.node, b.node);
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                grads.accumulate(an, dout);
            }
            if let Some(bn) = bn {
                grads.accumulate(bn, &[dout.iter().sum()]);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

/// Elementwise maximum. On exact ties the gradient routes to `a` (the
/// earlier operand), which implements lowest-index tie-breaking when used
/// as a left fold.
pub fn max_elementwise(tape: &mut Tape, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    same_shape("max_elementwise", a, b)?;
    let out: Vec<f64> = a
        .values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| if x >= y { *x } else { *y })
        .collect();
    let node = tape.node_for_output(a.node.is_some() || b.node.is_some(), out.len());
    if let Some(id) = node {
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.shared_values(), b.shared_values());
        tape.record(id, move |dout, grads| {
            if let Some(an) = an {
                let d: Vec<f64> = dout
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(d, (x, y))| if x >= y { *d } else { 0.0 })
                    .collect();
                grads.accumulate(an, &d);
            }
            if let Some(bn) = bn {
                let d: Vec<f64> = dout
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(d, (x, y))| if x >= y { 0.0 } else { *d })
                    .collect();
                grads.accumulate(bn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, a.shape.clone(), node))
}

// ── Activations ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative slope, 0.2 in the audio encoder.
    LeakyRelu(f64),
    Sigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(tape: &mut Tape, x: &DenseTensor, kind: Activation) -> Result<DenseTensor> {
    let out: Vec<f64> = match kind {
        Activation::Relu => x.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Activation::LeakyRelu(s) => x.values.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
        Activation::Sigmoid => x.values.iter().map(|&v| sigmoid(v)).collect(),
    };
    ensure_finite("activation", &out)?;
    let node = tape.node_for_output(x.node.is_some(), out.len());
    if let Some(id) = node {
        let xn = x.node;
        let xv = x.shared_values();
        let ov = Rc::new(out.clone());
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let d: Vec<f64> = match kind {
                    Activation::Relu => dout
                        .iter()
                        .zip(xv.iter())
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(s) => dout
                        .iter()
                        .zip(xv.iter())
                        .map(|(d, &v)| if v > 0.0 { *d } else { s * d })
                        .collect(),
                    Activation::Sigmoid => dout
                        .iter()
                        .zip(ov.iter())
                        .map(|(d, &o)| d * o * (1.0 - o))
                        .collect(),
                };
                grads.accumulate(xn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, x.shape.clone(), node))
}

// ── Reductions ──────────────────────────────────────────────────────────

pub fn sum(tape: &mut Tape, x: &DenseTensor) -> Result<DenseTensor> {
    let s: f64 = x.values.iter().sum();
    ensure_finite("sum", &[s])?;
    let node = tape.node_for_output(x.node.is_some(), 1);
    if let Some(id) = node {
        let xn = x.node;
        let n = x.len();
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                grads.accumulate(xn, &vec![dout[0]; n]);
            }
        });
    }
    Ok(DenseTensor::tracked(vec![s], vec![1], node))
}

pub fn mean(tape: &mut Tape, x: &DenseTensor) -> Result<DenseTensor> {
    let n = x.len() as f64;
    let s = sum(tape, x)?;
    scale(tape, &s, 1.0 / n)
}

// ── Structured ops ──────────────────────────────────────────────────────

/// `out[h,w] = Σ_k coeff[k] · maps[k,h,w]` — the channel reduction used by
/// the fusion head.
pub fn channel_combine(tape: &mut Tape, coeff: &DenseTensor, maps: &DenseTensor) -> Result<DenseTensor> {
    if maps.shape.len() != 3 || coeff.shape.len() != 1 || coeff.shape[0] != maps.shape[0] {
        return Err(Error::shape(
            "channel_combine",
            format!("coeff {:?} vs maps {:?}", coeff.shape, maps.shape),
        ));
    }
    let (k, h, w) = (maps.shape[0], maps.shape[1], maps.shape[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ki in 0..k {
        let c = coeff.values[ki];
        let base = ki * plane;
        for i in 0..plane {
            out[i] += c * maps.values[base + i];
        }
    }
    ensure_finite("channel_combine", &out)?;
    let node = tape.node_for_output(coeff.node.is_some() || maps.node.is_some(), plane);
    if let Some(id) = node {
        let (cn, mn) = (coeff.node, maps.node);
        let (cv, mv) = (coeff.shared_values(), maps.shared_values());
        tape.record(id, move |dout, grads| {
            if let Some(cn) = cn {
                let mut d = vec![0.0; k];
                for (ki, dk) in d.iter_mut().enumerate() {
                    let base = ki * plane;
                    *dk = dout.iter().zip(&mv[base..base + plane]).map(|(a, b)| a * b).sum();
                }
                grads.accumulate(cn, &d);
            }
            if let Some(mn) = mn {
                let mut d = vec![0.0; k * plane];
                for ki in 0..k {
                    let c = cv[ki];
                    let base = ki * plane;
                    for i in 0..plane {
                        d[base + i] = c * dout[i];
                    }
                }
                grads.accumulate(mn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![h, w], node))
}

/// Select element `index` along the leading axis: `[B, rest..] -> [rest..]`.
pub fn index_batch(tape: &mut Tape, x: &DenseTensor, index: usize) -> Result<DenseTensor> {
    if x.shape.is_empty() || index >= x.shape[0] {
        return Err(Error::shape(
            "index_batch",
            format!("index {index} out of range for shape {:?}", x.shape),
        ));
    }
    let inner = numel(&x.shape[1..]);
    let out = x.values[index * inner..(index + 1) * inner].to_vec();
    let node = tape.node_for_output(x.node.is_some(), inner);
    if let Some(id) = node {
        let xn = x.node;
        let total = x.len();
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let mut d = vec![0.0; total];
                d[index * inner..(index + 1) * inner].copy_from_slice(dout);
                grads.accumulate(xn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, x.shape[1..].to_vec(), node))
}

/// `out[j] = Σ_i x[i]·w[i,j] + b[j]` for a rank-1 input.
pub fn linear(tape: &mut Tape, x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if x.shape.len() != 1 || w.shape.len() != 2 || w.shape[0] != x.shape[0] || b.shape != [w.shape[1]] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let (n, m) = (w.shape[0], w.shape[1]);
    let mut out = b.values.as_slice().to_vec();
    for i in 0..n {
        let xi = x.values[i];
        for j in 0..m {
            out[j] += xi * w.values[i * m + j];
        }
    }
    ensure_finite("linear", &out)?;
    let node = tape.node_for_output(
        x.node.is_some() || w.node.is_some() || b.node.is_some(),
        m,
    );
    if let Some(id) = node {
        let (xn, wn, bn) = (x.node, w.node, b.node);
        let (xv, wv) = (x.shared_values(), w.shared_values());
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let mut d = vec![0.0; n];
                for (i, di) in d.iter_mut().enumerate() {
                    *di = dout.iter().zip(&wv[i * m..(i + 1) * m]).map(|(a, b)| a * b).sum();
                }
                grads.accumulate(xn, &d);
            }
            if let Some(wn) = wn {
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] = xv[i] * dout[j];
                    }
                }
                grads.accumulate(wn, &d);
            }
            if let Some(bn) = bn {
                grads.accumulate(bn, dout);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![m], node))
}

/// View a contiguous range of a flat tensor as its own tensor with `shape`.
/// Backward scatters into the range. Used to pack several logical tensors
/// into one leaf (gradient checks) and to split concatenated buffers.
pub fn slice_flat(
    tape: &mut Tape,
    x: &DenseTensor,
    start: usize,
    len: usize,
    shape: &[usize],
) -> Result<DenseTensor> {
    if numel(shape) != len || start + len > x.len() {
        return Err(Error::shape(
            "slice_flat",
            format!("range {start}..{} as {shape:?} from {} values", start + len, x.len()),
        ));
    }
    let out = x.values[start..start + len].to_vec();
    let node = tape.node_for_output(x.node.is_some(), len);
    if let Some(id) = node {
        let xn = x.node;
        let total = x.len();
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let mut d = vec![0.0; total];
                d[start..start + len].copy_from_slice(dout);
                grads.accumulate(xn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, shape.to_vec(), node))
}

/// Mean binary cross-entropy against a constant target, with the prediction
/// clamped to `[1e-7, 1 - 1e-7]` so the logs stay finite.
pub fn bce(tape: &mut Tape, predicted: &DenseTensor, target: &DenseTensor) -> Result<DenseTensor> {
    same_shape("bce", predicted, target)?;
    const CLAMP: f64 = 1e-7;
    let n = predicted.len() as f64;
    let mut total = 0.0;
    for (&p, &y) in predicted.values.iter().zip(target.values.iter()) {
        let pc = p.clamp(CLAMP, 1.0 - CLAMP);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let loss = total / n;
    ensure_finite("bce", &[loss])?;
    let node = tape.node_for_output(predicted.node.is_some(), 1);
    if let Some(id) = node {
        let pn = predicted.node;
        let pv = predicted.shared_values();
        let yv = target.shared_values();
        tape.record(id, move |dout, grads| {
            if let Some(pn) = pn {
                let d: Vec<f64> = pv
                    .iter()
                    .zip(yv.iter())
                    .map(|(&p, &y)| {
                        if p <= CLAMP || p >= 1.0 - CLAMP {
                            // clamp active: flat
                            0.0
                        } else {
                            dout[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                grads.accumulate(pn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(vec![loss], vec![1], node))
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_diff_check, loss_of};
    use super::*;

    #[test]
    fn leaf_roundtrip_and_shape_guard() {
        let mut tape = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(tape.leaf(vec![1.0], &[2]).is_err());
        assert!(DenseTensor::from_vec(vec![f64::NAN], &[1]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = sum(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let sq = mul(&mut tape, &x, &x).unwrap();
        let loss = sum(&mut tape, &sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = add(&mut tape, &x, &x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        // loss = sum(x*2) + sum(x*3) -> d/dx = 5
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[1]).unwrap();
        let a = scale(&mut tape, &x, 2.0).unwrap();
        let b = scale(&mut tape, &x, 3.0).unwrap();
        let t = add(&mut tape, &a, &b).unwrap();
        let loss = sum(&mut tape, &t).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[5.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = DenseTensor::from_vec(vec![-1.0, 2.0, 0.0], &[3]).unwrap();
        let r = activation(&mut tape, &x, Activation::Relu).unwrap();
        assert_eq!(r.values(), &[0.0, 2.0, 0.0]);
        let s = activation(&mut tape, &x, Activation::Sigmoid).unwrap();
        assert!((s.values()[2] - 0.5).abs() < 1e-15);
        let l = activation(&mut tape, &x, Activation::LeakyRelu(0.2)).unwrap();
        assert!((l.values()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // Points away from the ReLU kink per the non-smoothness exclusion.
        let x0: Vec<f64> = vec![-1.7, -0.51, 0.42, 1.3, 2.6, -2.2];
        for kind in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Sigmoid] {
            let report = central_diff_check(
                &x0,
                |tape, x| {
                    let y = activation(tape, x, kind)?;
                    loss_of(tape, &y)
                },
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{kind:?}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn max_elementwise_tie_routes_to_first() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 5.0], &[2]).unwrap();
        let b = tape.leaf(vec![1.0, 7.0], &[2]).unwrap();
        let m = max_elementwise(&mut tape, &a, &b).unwrap();
        assert_eq!(m.values(), &[1.0, 7.0]);
        let loss = sum(&mut tape, &m).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(&b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn channel_combine_matches_scalar_loop() {
        let mut tape = Tape::new();
        let coeff = tape.leaf(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let maps = tape
            .leaf((0..3 * 2 * 2).map(|i| i as f64 * 0.3 - 1.0).collect(), &[3, 2, 2])
            .unwrap();
        let out = channel_combine(&mut tape, &coeff, &maps).unwrap();
        // independent scalar loop
        for h in 0..2 {
            for w in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += coeff.values()[k] * maps.values()[k * 4 + h * 2 + w];
                }
                assert!((out.values()[h * 2 + w] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_combine_gradients() {
        let x0: Vec<f64> = (0..3 + 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let report = central_diff_check(
            &x0,
            |tape, x| {
                let coeff = slice_flat(tape, x, 0, 3, &[3])?;
                let maps = slice_flat(tape, x, 3, 12, &[3, 2, 2])?;
                let y = channel_combine(tape, &coeff, &maps)?;
                loss_of(tape, &y)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn bce_known_values() {
        let mut tape = Tape::new();
        let half = DenseTensor::from_vec(vec![0.5; 8], &[8]).unwrap();
        let y: DenseTensor = DenseTensor::from_vec(vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &[8]).unwrap();
        let loss = bce(&mut tape, &half, &y).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);

        // perfect prediction: loss is at the clamp floor, order 1e-7
        let p = y.clone();
        let loss = bce(&mut tape, &p, &y).unwrap();
        assert!(loss.item() > 0.0 && loss.item() < 1e-6, "loss {}", loss.item());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let p = DenseTensor::from_vec(vec![0.1, 0.7, 0.4, 0.99], &[4]).unwrap();
        let y = DenseTensor::from_vec(vec![0.0, 1.0, 1.0, 1.0], &[4]).unwrap();
        let mut tape = Tape::new();
        let loss = bce(&mut tape, &p, &y).unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            let (pi, yi) = (p.values()[i], y.values()[i]);
            expect -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
        }
        expect /= 4.0;
        assert!((loss.item() - expect).abs() < 1e-12);
        assert!(loss.item() >= 0.0);
    }

    #[test]
    fn bce_of_sigmoid_gradient_is_p_minus_y_over_count() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let y = DenseTensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[4]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone(), &[4]).unwrap();
        let p = activation(&mut tape, &z, Activation::Sigmoid).unwrap();
        let loss = bce(&mut tape, &p, &y).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&z).unwrap();
        for i in 0..4 {
            let expect = (sigmoid(logits[i]) - y.values()[i]) / 4.0;
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_records_nothing() {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let x = DenseTensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = add(&mut tape, &x, &x).unwrap();
        assert!(!y.is_tracked());
        assert_eq!(tape.num_ops(), 0);
    }
}

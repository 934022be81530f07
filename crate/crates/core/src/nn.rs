//! Dense ReLU networks matched to the hierarchical task.
//!
//! All three architectures are stacks of *local layers*: the input of a
//! layer is a `[position][channel]` array, cut into non-overlapping patches
//! of `filter` positions, and every output channel of every patch is
//!
//! ```text
//! f[p][c] = relu( 1/sqrt(in_channels) * <w[p][c], patch_p> )
//! ```
//!
//! * LCN: filter and stride `s (s0 + 1)`, one filter bank per patch.
//! * CNN: same geometry, one filter bank shared by all patches.
//! * FCN: the first layer is a single patch spanning the whole input, the
//!   following layers are single-position layers.
//!
//! The readout is linear, `out[a] = scale * sum_c readout[a][c] f_L[c]` with
//! `scale = 1/sqrt(H_L)` (standard) or `1/H_L` (mean-field). There are no
//! biases. Weights inside a patch block are stored `[out][position][in]` so
//! that a filter row lines up with the contiguous input patch.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{GrammarParams, InputMatrix};
use crate::rng::StreamKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Floating point type the networks run on.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Lcn,
    Cnn,
    Fcn,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Lcn => "lcn",
            ArchKind::Cnn => "cnn",
            ArchKind::Fcn => "fcn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputScaling {
    /// Readout divided by `sqrt(H_L)`.
    Standard,
    /// Readout divided by `H_L`.
    MeanField,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Filter size and stride of the local layers.
    pub filter: usize,
    /// Channels per hidden layer; its length is the number of hidden layers.
    pub widths: Vec<usize>,
    pub input_positions: usize,
    pub input_channels: usize,
    pub n_classes: usize,
    pub scaling: OutputScaling,
}

/// Geometry of one local layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub patches: usize,
    pub filter: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub shared: bool,
}

impl LayerShape {
    pub fn fan_in(&self) -> usize {
        self.filter * self.in_channels
    }

    pub fn block_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn n_blocks(&self) -> usize {
        if self.shared {
            1
        } else {
            self.patches
        }
    }

    pub fn n_weights(&self) -> usize {
        self.n_blocks() * self.block_len()
    }

    pub fn input_len(&self) -> usize {
        self.patches * self.fan_in()
    }

    pub fn output_len(&self) -> usize {
        self.patches * self.out_channels
    }

    /// Prefactor `1/sqrt(in_channels)` of the pre-activation.
    pub fn prefactor(&self) -> f64 {
        1.0 / (self.in_channels as f64).sqrt()
    }

    /// Flat index of weight `(patch, out, in, position-in-filter)`.
    pub fn index(&self, patch: usize, out: usize, input: usize, pos: usize) -> usize {
        let blk = if self.shared { 0 } else { patch };
        blk * self.block_len() + out * self.fan_in() + pos * self.in_channels + input
    }
}

impl ArchitectureSpec {
    /// Architecture matched to a grammar: filter `s (s0 + 1)`, one hidden
    /// layer per grammar level.
    pub fn for_grammar(kind: ArchKind, params: &GrammarParams, width: usize, scaling: OutputScaling) -> Self {
        ArchitectureSpec {
            kind,
            filter: params.patch_width(),
            widths: vec![width; params.depth],
            input_positions: params.input_dim(),
            input_channels: params.vocab,
            n_classes: params.n_classes,
            scaling,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return bad("need at least one hidden layer of positive width".into());
        }
        if self.input_channels == 0 || self.n_classes == 0 || self.input_positions == 0 {
            return bad("input and output sizes must be positive".into());
        }
        if self.kind != ArchKind::Fcn {
            let expect = (self.filter as u128).checked_pow(self.depth() as u32);
            if self.filter < 1 || expect != Some(self.input_positions as u128) {
                return bad(format!(
                    "filter {}^{} does not tile {} input positions",
                    self.filter,
                    self.depth(),
                    self.input_positions
                ));
            }
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let l = self.depth();
        (0..l)
            .map(|k| {
                let in_channels = if k == 0 { self.input_channels } else { self.widths[k - 1] };
                let out_channels = self.widths[k];
                match self.kind {
                    ArchKind::Lcn | ArchKind::Cnn => LayerShape {
                        patches: self.filter.pow((l - k - 1) as u32),
                        filter: self.filter,
                        in_channels,
                        out_channels,
                        shared: self.kind == ArchKind::Cnn,
                    },
                    ArchKind::Fcn => LayerShape {
                        patches: 1,
                        filter: if k == 0 { self.input_positions } else { 1 },
                        in_channels,
                        out_channels,
                        shared: false,
                    },
                }
            })
            .collect()
    }

    /// Spatial size of hidden layer `k` (1-based).
    pub fn spatial_size(&self, k: usize) -> usize {
        self.layer_shapes()[k - 1].patches
    }

    pub fn output_scale(&self) -> f64 {
        let h = *self.widths.last().unwrap() as f64;
        match self.scaling {
            OutputScaling::Standard => 1.0 / h.sqrt(),
            OutputScaling::MeanField => 1.0 / h,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_positions * self.input_channels
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.n_weights()).sum::<usize>()
            + self.n_classes * self.widths.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Gaussian filters with effective variance `1/fan_in`, Gaussian readout.
    Standard,
    /// Constant filters `1/sqrt(H)` and a frozen standard Gaussian readout.
    FrozenReadout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: ArchitectureSpec,
    /// One flat weight tensor per hidden layer, see [`LayerShape::index`].
    pub layers: Vec<Vec<T>>,
    /// `[class][channel]`, `n_classes x H_L`.
    pub readout: Vec<T>,
    pub readout_frozen: bool,
}

/// Hidden representations and output of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace<T> {
    /// `hidden[k - 1]` is `f_k`, laid out `[position][channel]`.
    pub hidden: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    fn empty(spec: &ArchitectureSpec) -> Self {
        ActivationTrace {
            hidden: spec.layer_shapes().iter().map(|s| vec![T::zero(); s.output_len()]).collect(),
            output: vec![T::zero(); spec.n_classes],
        }
    }

    /// Representation `k` as `f64`; `k = depth + 1` is the output.
    pub fn layer_f64(&self, k: usize) -> Vec<f64> {
        let v = if k <= self.hidden.len() { &self.hidden[k - 1] } else { &self.output };
        v.iter().map(|x| x.to_f64().unwrap()).collect()
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<T>>,
    /// `None` when the readout is frozen.
    pub readout: Option<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| vec![T::zero(); l.len()]).collect(),
            readout: (!net.readout_frozen).then(|| vec![T::zero(); net.readout.len()]),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.iter_mut().for_each(|x| *x = T::zero());
        }
        if let Some(r) = &mut self.readout {
            r.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// All entries, layers first, then the readout.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .chain(self.readout.iter().flatten())
            .map(|x| x.to_f64().unwrap())
            .collect()
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// One layer for a batch. Each weight row is loaded once and applied to
/// every sample. `io[b]` is `(input, output)` of sample `b`.
fn layer_forward<T: Scalar>(shape: &LayerShape, w: &[T], io: &mut [(&[T], &mut [T])]) {
    let scale = T::of(shape.prefactor());
    let fi = shape.fan_in();
    let bl = shape.block_len();
    let oc = shape.out_channels;
    for p in 0..shape.patches {
        let blk = if shape.shared { 0 } else { p };
        for c in 0..oc {
            let row = &w[blk * bl + c * fi..blk * bl + (c + 1) * fi];
            for (input, out) in io.iter_mut() {
                let pre = scale * dot(row, &input[p * fi..(p + 1) * fi]);
                out[p * oc + c] = if pre > T::zero() { pre } else { T::zero() };
            }
        }
    }
}

/// Per-sample views used by [`layer_backward`].
struct BackIo<'a, T> {
    input: &'a [T],
    output: &'a [T],
    delta_out: &'a [T],
    delta_in: Option<&'a mut [T]>,
}

/// Backward through one layer for a batch. `delta_out` holds dL/df on
/// entry; the ReLU derivative is taken as 0 at 0.
fn layer_backward<T: Scalar>(shape: &LayerShape, w: &[T], batch: &mut [BackIo<'_, T>], grad_w: &mut [T]) {
    let scale = T::of(shape.prefactor());
    let fi = shape.fan_in();
    let bl = shape.block_len();
    let oc = shape.out_channels;
    for c in 0..oc {
        for p in 0..shape.patches {
            let blk = if shape.shared { 0 } else { p };
            let idx = p * oc + c;
            let row = blk * bl + c * fi;
            for s in batch.iter_mut() {
                let d = s.delta_out[idx];
                if s.output[idx] <= T::zero() || d == T::zero() {
                    continue;
                }
                let g = d * scale;
                axpy(g, &s.input[p * fi..(p + 1) * fi], &mut grad_w[row..row + fi]);
                if let Some(di) = s.delta_in.as_deref_mut() {
                    axpy(g, &w[row..row + fi], &mut di[p * fi..(p + 1) * fi]);
                }
            }
        }
    }
}

/// Backward through one layer followed by an in-place momentum update of
/// every weight row as soon as its batch gradient is complete:
/// `v <- mu v - lr g; w <- w + v`. Rows of shared layers collect all
/// patches first. Input deltas are computed from the pre-update weights.
#[allow(clippy::too_many_arguments)]
fn layer_backward_update<T: Scalar>(
    shape: &LayerShape,
    w: &mut [T],
    vel: &mut [T],
    batch: &mut [BackIo<'_, T>],
    lr: T,
    mu: T,
    gbuf: &mut [T],
) {
    let scale = T::of(shape.prefactor());
    let fi = shape.fan_in();
    let bl = shape.block_len();
    let oc = shape.out_channels;
    let g = &mut gbuf[..fi];
    for c in 0..oc {
        for p in 0..shape.patches {
            let blk = if shape.shared { 0 } else { p };
            let row = blk * bl + c * fi;
            if !shape.shared || p == 0 {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
            let idx = p * oc + c;
            for s in batch.iter_mut() {
                let d = s.delta_out[idx];
                if s.output[idx] <= T::zero() || d == T::zero() {
                    continue;
                }
                let gs = d * scale;
                axpy(gs, &s.input[p * fi..(p + 1) * fi], g);
                if let Some(di) = s.delta_in.as_deref_mut() {
                    axpy(gs, &w[row..row + fi], &mut di[p * fi..(p + 1) * fi]);
                }
            }
            if !shape.shared || p + 1 == shape.patches {
                momentum_update(&mut w[row..row + fi], &mut vel[row..row + fi], g, lr, mu);
            }
        }
    }
}

#[inline]
pub fn momentum_update<T: Scalar>(w: &mut [T], v: &mut [T], g: &[T], lr: T, mu: T) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v - lr * *g;
        *w = *w + *v;
    }
}

/// Numerically stable log-softmax cross-entropy of one output vector;
/// also writes `softmax - onehot` into `dlogits`.
pub fn cross_entropy_grad<T: Scalar>(logits: &[T], label: usize, dlogits: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (d, &l) in dlogits.iter_mut().zip(logits) {
        *d = (l - max).exp();
        z = z + *d;
    }
    for d in dlogits.iter_mut() {
        *d = *d / z;
    }
    dlogits[label] = dlogits[label] - T::one();
    z.ln() + max - logits[label]
}

struct Slot<T> {
    trace: ActivationTrace<T>,
    deltas: Vec<Vec<T>>,
    dlogits: Vec<T>,
}

/// Scratch buffers reused across samples and batches.
pub struct Workspace<T> {
    spec: ArchitectureSpec,
    slots: Vec<Slot<T>>,
    gbuf: Vec<T>,
    readout_grad: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        let mut ws = Workspace { spec: spec.clone(), slots: Vec::new(), gbuf: Vec::new(), readout_grad: Vec::new() };
        ws.reserve(1);
        ws
    }

    fn reserve(&mut self, n: usize) {
        while self.slots.len() < n {
            self.slots.push(Slot {
                trace: ActivationTrace::empty(&self.spec),
                deltas: self.spec.layer_shapes().iter().map(|s| vec![T::zero(); s.output_len()]).collect(),
                dlogits: vec![T::zero(); self.spec.n_classes],
            });
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn init(spec: &ArchitectureSpec, mode: InitMode, key: StreamKey) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, shape) in shapes.iter().enumerate() {
            let w = match mode {
                InitMode::Standard => {
                    // the prefactor already divides by sqrt(in_channels)
                    let sd = 1.0 / (shape.filter as f64).sqrt();
                    let mut rng = key.derive(k as u64 + 1).rng();
                    (0..shape.n_weights())
                        .map(|_| T::of(sd * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                }
                InitMode::FrozenReadout => {
                    vec![T::of(1.0 / (shape.out_channels as f64).sqrt()); shape.n_weights()]
                }
            };
            layers.push(w);
        }
        let h = *spec.widths.last().unwrap();
        let mut rng = key.derive(0).rng();
        let readout = (0..spec.n_classes * h).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        Ok(Network {
            spec: spec.clone(),
            layers,
            readout,
            readout_frozen: mode == InitMode::FrozenReadout,
        })
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.spec.layer_shapes()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.spec.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} entries, network expects {}x{}",
                x.len(),
                self.spec.input_positions,
                self.spec.input_channels
            )));
        }
        Ok(())
    }

    /// Forward pass recording every hidden layer.
    pub fn forward(&self, x: &[T]) -> Result<ActivationTrace<T>> {
        self.check_input(x)?;
        let mut trace = ActivationTrace::empty(&self.spec);
        self.forward_into(x, &mut trace);
        Ok(trace)
    }

    pub fn forward_matrix(&self, x: &InputMatrix) -> Result<ActivationTrace<T>> {
        if x.rows != self.spec.input_positions || x.cols != self.spec.input_channels {
            return Err(NnError::ShapeMismatch(format!(
                "input is {}x{}, network expects {}x{}",
                x.rows, x.cols, self.spec.input_positions, self.spec.input_channels
            )));
        }
        self.forward(&to_scalars(x))
    }

    fn forward_into(&self, x: &[T], trace: &mut ActivationTrace<T>) {
        self.forward_batch(&[x], std::slice::from_mut(trace));
    }

    fn forward_batch(&self, xs: &[&[T]], traces: &mut [ActivationTrace<T>]) {
        let shapes = self.shapes();
        for (k, shape) in shapes.iter().enumerate() {
            let mut io: Vec<(&[T], &mut [T])> = traces
                .iter_mut()
                .zip(xs)
                .map(|(tr, &x)| {
                    let (before, after) = tr.hidden.split_at_mut(k);
                    let input: &[T] = if k == 0 { x } else { &before[k - 1] };
                    (input, after[0].as_mut_slice())
                })
                .collect();
            layer_forward(shape, &self.layers[k], &mut io);
        }
        let h = *self.spec.widths.last().unwrap();
        let scale = T::of(self.spec.output_scale());
        for tr in traces.iter_mut() {
            let last = tr.hidden.last().unwrap();
            for (a, o) in tr.output.iter_mut().enumerate() {
                *o = scale * dot(&self.readout[a * h..(a + 1) * h], last);
            }
        }
    }

    /// Output logits only.
    pub fn predict(&self, x: &[T], ws: &mut Workspace<T>) -> Vec<T> {
        self.forward_into(x, &mut ws.slots[0].trace);
        ws.slots[0].trace.output.clone()
    }

    /// Forward a batch, write the top-layer deltas and the readout gradient
    /// of `sum_b weight * CE(x_b, y_b)`; returns the summed unweighted loss.
    fn batch_top(&self, batch: &[(&[T], usize)], weight: T, readout_grad: Option<&mut [T]>, ws: &mut Workspace<T>) -> T {
        let n = batch.len();
        ws.reserve(n);
        let slots = &mut ws.slots[..n];
        let xs: Vec<&[T]> = batch.iter().map(|b| b.0).collect();
        let mut traces: Vec<ActivationTrace<T>> =
            slots.iter_mut().map(|s| std::mem::take(&mut s.trace)).collect();
        self.forward_batch(&xs, &mut traces);
        for (s, t) in slots.iter_mut().zip(traces) {
            s.trace = t;
        }
        let l = self.n_layers();
        let h = *self.spec.widths.last().unwrap();
        let scale = T::of(self.spec.output_scale());
        let mut total = T::zero();
        let mut readout_grad = readout_grad;
        for (slot, &(_, label)) in slots.iter_mut().zip(batch) {
            total = total + cross_entropy_grad(&slot.trace.output, label, &mut slot.dlogits);
            slot.dlogits.iter_mut().for_each(|d| *d = *d * weight);
            let last = &slot.trace.hidden[l - 1];
            let top = &mut slot.deltas[l - 1];
            top.iter_mut().for_each(|d| *d = T::zero());
            for (a, &da) in slot.dlogits.iter().enumerate() {
                let g = da * scale;
                if let Some(gr) = readout_grad.as_deref_mut() {
                    axpy(g, last, &mut gr[a * h..(a + 1) * h]);
                }
                axpy(g, &self.readout[a * h..(a + 1) * h], top);
            }
        }
        total
    }

    fn back_io<'a>(slots: &'a mut [Slot<T>], xs: &[&'a [T]], k: usize) -> Vec<BackIo<'a, T>> {
        slots
            .iter_mut()
            .zip(xs)
            .map(|(slot, &x)| {
                let (lower, upper) = slot.deltas.split_at_mut(k);
                let delta_in = if k == 0 {
                    None
                } else {
                    let d = lower[k - 1].as_mut_slice();
                    d.iter_mut().for_each(|v| *v = T::zero());
                    Some(d)
                };
                BackIo {
                    input: if k == 0 { x } else { &slot.trace.hidden[k - 1] },
                    output: &slot.trace.hidden[k],
                    delta_out: &upper[0],
                    delta_in,
                }
            })
            .collect()
    }

    fn accumulate_batch(
        &self,
        batch: &[(&[T], usize)],
        weight: T,
        grads: &mut Gradients<T>,
        ws: &mut Workspace<T>,
    ) -> T {
        let total = self.batch_top(batch, weight, grads.readout.as_deref_mut(), ws);
        let shapes = self.shapes();
        let xs: Vec<&[T]> = batch.iter().map(|b| b.0).collect();
        for k in (0..shapes.len()).rev() {
            let mut io = Self::back_io(&mut ws.slots[..batch.len()], &xs, k);
            layer_backward(&shapes[k], &self.layers[k], &mut io, &mut grads.layers[k]);
        }
        total
    }

    /// One minibatch step of SGD with momentum on the mean cross-entropy,
    /// fused with backpropagation so each weight row is visited once.
    /// Equivalent to [`Network::batch_gradient`] followed by
    /// `v <- mu v - lr g; w <- w + v` on every trainable tensor. Returns the
    /// mean loss before the update.
    pub fn sgd_step(
        &mut self,
        batch: &[(&[T], usize)],
        lr: T,
        mu: T,
        velocity: &mut Gradients<T>,
        ws: &mut Workspace<T>,
    ) -> T {
        let w = T::one() / T::of(batch.len() as f64);
        ws.readout_grad.resize(self.readout.len(), T::zero());
        ws.readout_grad.iter_mut().for_each(|g| *g = T::zero());
        let mut rg = std::mem::take(&mut ws.readout_grad);
        let total = self.batch_top(batch, w, (!self.readout_frozen).then_some(rg.as_mut_slice()), ws);
        let shapes = self.shapes();
        let max_fi = shapes.iter().map(|s| s.fan_in()).max().unwrap();
        ws.gbuf.resize(max_fi, T::zero());
        let mut gbuf = std::mem::take(&mut ws.gbuf);
        let xs: Vec<&[T]> = batch.iter().map(|b| b.0).collect();
        for k in (0..shapes.len()).rev() {
            let mut io = Self::back_io(&mut ws.slots[..batch.len()], &xs, k);
            layer_backward_update(&shapes[k], &mut self.layers[k], &mut velocity.layers[k], &mut io, lr, mu, &mut gbuf);
        }
        if let Some(v) = velocity.readout.as_mut() {
            if !self.readout_frozen {
                momentum_update(&mut self.readout, v, &rg, lr, mu);
            }
        }
        ws.gbuf = gbuf;
        std::mem::swap(&mut ws.readout_grad, &mut rg);
        total * w
    }

    /// Add the gradient of `weight * CE(x, label)` into `grads` and return the loss.
    pub fn accumulate_gradient(
        &self,
        x: &[T],
        label: usize,
        weight: T,
        grads: &mut Gradients<T>,
        ws: &mut Workspace<T>,
    ) -> T {
        self.accumulate_batch(&[(x, label)], weight, grads, ws)
    }

    /// Cross-entropy and its gradient for one labelled input.
    pub fn backward(&self, x: &[T], label: usize) -> Result<(T, Gradients<T>)> {
        self.check_input(x)?;
        if label >= self.spec.n_classes {
            return Err(NnError::ShapeMismatch(format!("label {label} >= {}", self.spec.n_classes)));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut ws = Workspace::new(&self.spec);
        let loss = self.accumulate_gradient(x, label, T::one(), &mut grads, &mut ws);
        Ok((loss, grads))
    }

    /// Mean cross-entropy over a batch and its gradient.
    pub fn batch_gradient(&self, batch: &[(&[T], usize)], grads: &mut Gradients<T>, ws: &mut Workspace<T>) -> T {
        grads.fill_zero();
        let w = T::one() / T::of(batch.len() as f64);
        self.accumulate_batch(batch, w, grads, ws) * w
    }

    /// Read a weight by its logical index; `patch` is ignored for shared layers.
    pub fn weight(&self, layer: usize, patch: usize, out: usize, input: usize, pos: usize) -> T {
        let shape = self.shapes()[layer - 1];
        self.layers[layer - 1][shape.index(patch, out, input, pos)]
    }

    /// Expand a CNN into the equivalent LCN (shared filters copied to every patch).
    pub fn unshare(&self) -> Network<T> {
        let mut spec = self.spec.clone();
        if spec.kind != ArchKind::Cnn {
            return self.clone();
        }
        spec.kind = ArchKind::Lcn;
        let layers = self
            .shapes()
            .iter()
            .zip(&self.layers)
            .map(|(s, w)| (0..s.patches).flat_map(|_| w.iter().copied()).collect())
            .collect();
        Network { spec, layers, readout: self.readout.clone(), readout_frozen: self.readout_frozen }
    }

    /// Convert to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect();
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(conv).collect(),
            readout: conv(&self.readout),
            readout_frozen: self.readout_frozen,
        }
    }

    /// Visit every trainable parameter (readout last, skipped if frozen).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let frozen = self.readout_frozen;
        self.layers
            .iter_mut()
            .flatten()
            .chain(self.readout.iter_mut().filter(move |_| !frozen))
    }
}

pub fn to_scalars<T: Scalar>(x: &InputMatrix) -> Vec<T> {
    x.data.iter().map(|&b| if b != 0 { T::one() } else { T::zero() }).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ruleset, generate_dataset, Sparsity};

    fn grammar(s0: usize) -> GrammarParams {
        GrammarParams {
            n_classes: 3,
            vocab: 3,
            synonyms: 3,
            branching: 2,
            depth: 2,
            gaps: s0,
            sparsity: Sparsity::A,
            seed: 4,
        }
    }

    fn spec(kind: ArchKind, s0: usize, width: usize) -> ArchitectureSpec {
        ArchitectureSpec::for_grammar(kind, &grammar(s0), width, OutputScaling::Standard)
    }

    #[test]
    fn lcn_spatial_sizes() {
        let s = spec(ArchKind::Lcn, 1, 8);
        assert_eq!(s.spatial_size(1), 4);
        assert_eq!(s.spatial_size(2), 1);
        let f = spec(ArchKind::Fcn, 1, 8);
        assert_eq!(f.layer_shapes()[0].filter, 16);
        assert_eq!(f.spatial_size(2), 1);
    }

    #[test]
    fn bad_filter_rejected() {
        let mut s = spec(ArchKind::Cnn, 1, 8);
        s.filter = 3;
        assert!(matches!(s.validate(), Err(NnError::InvalidSpec(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let net: Network<f64> = Network::init(&spec(ArchKind::Lcn, 1, 4), InitMode::Standard, StreamKey::new(1)).unwrap();
        assert!(matches!(net.forward(&[0.0; 5]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(net.forward_matrix(&InputMatrix::zeros(4, 3)), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_input_gives_zero_everything() {
        for kind in [ArchKind::Lcn, ArchKind::Cnn, ArchKind::Fcn] {
            let net: Network<f64> = Network::init(&spec(kind, 1, 6), InitMode::Standard, StreamKey::new(2)).unwrap();
            let x = vec![0.0; net.spec.input_len()];
            let tr = net.forward(&x).unwrap();
            assert!(tr.hidden.iter().flatten().all(|&v| v == 0.0));
            assert!(tr.output.iter().all(|&v| v == 0.0));
            let (_, g) = net.backward(&x, 1).unwrap();
            assert!(g.layers.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn positive_homogeneity_single_layer() {
        let p = GrammarParams { depth: 1, ..grammar(1) };
        let s = ArchitectureSpec::for_grammar(ArchKind::Lcn, &p, 16, OutputScaling::Standard);
        let net: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(3)).unwrap();
        let rs = build_ruleset(&p).unwrap();
        let x = to_scalars::<f64>(&generate_dataset(&rs, 1, StreamKey::new(1), false).inputs[0]);
        let y: Vec<f64> = x.iter().map(|v| v * 2.5).collect();
        let a = net.forward(&x).unwrap().output;
        let b = net.forward(&y).unwrap().output;
        for (u, v) in a.iter().zip(&b) {
            assert!((2.5 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_lcn() {
        // one hidden layer, filter 2, two input channels, two hidden channels
        let s = ArchitectureSpec {
            kind: ArchKind::Lcn,
            filter: 2,
            widths: vec![2],
            input_positions: 2,
            input_channels: 2,
            n_classes: 2,
            scaling: OutputScaling::Standard,
        };
        let mut net: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(0)).unwrap();
        // layout [out][pos][in]
        net.layers[0] = vec![1.0, -2.0, 0.5, 3.0, -1.0, 1.0, 2.0, 0.0];
        net.readout = vec![1.0, 2.0, -1.0, 0.5];
        // x rows: pos0 = (1,0), pos1 = (0,1)
        let x = [1.0, 0.0, 0.0, 1.0];
        let tr = net.forward(&x).unwrap();
        let r = 1.0 / 2f64.sqrt();
        // channel 0: r*(1*1 + 3*1) = 4r ; channel 1: r*(-1 + 0) -> relu 0
        assert!((tr.hidden[0][0] - 4.0 * r).abs() < 1e-15);
        assert_eq!(tr.hidden[0][1], 0.0);
        // readout scale 1/sqrt(2)
        assert!((tr.output[0] - r * 4.0 * r).abs() < 1e-15);
        assert!((tr.output[1] + r * 4.0 * r).abs() < 1e-15);
    }

    #[test]
    fn cnn_equals_unshared_lcn() {
        let rs = build_ruleset(&grammar(1)).unwrap();
        let ds = generate_dataset(&rs, 20, StreamKey::new(9), false);
        let cnn: Network<f64> = Network::init(&spec(ArchKind::Cnn, 1, 5), InitMode::Standard, StreamKey::new(5)).unwrap();
        let lcn = cnn.unshare();
        assert_eq!(lcn.spec.kind, ArchKind::Lcn);
        for x in &ds.inputs {
            let a = cnn.forward_matrix(x).unwrap();
            let b = lcn.forward_matrix(x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn standard_init_variance() {
        let s = ArchitectureSpec::for_grammar(ArchKind::Lcn, &grammar(1), 512, OutputScaling::Standard);
        let net: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(6)).unwrap();
        let shape = net.shapes()[0];
        // effective weight = prefactor * w
        let pf = shape.prefactor();
        let w = &net.layers[0];
        let var = w.iter().map(|x| (x * pf).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 1.0 / (shape.fan_in() as f64);
        assert!((var / target - 1.0).abs() < 0.1, "{var} vs {target}");
        assert!(!net.readout_frozen);
    }

    #[test]
    fn same_seed_same_network() {
        let s = spec(ArchKind::Fcn, 1, 7);
        let a: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(1)).unwrap();
        let b: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(1)).unwrap();
        let c: Network<f64> = Network::init(&s, InitMode::Standard, StreamKey::new(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_readout_output_is_small() {
        let p = grammar(1);
        let rs = build_ruleset(&p).unwrap();
        let h = 1024;
        let s = ArchitectureSpec::for_grammar(ArchKind::Lcn, &p, h, OutputScaling::MeanField);
        let net: Network<f64> = Network::init(&s, InitMode::FrozenReadout, StreamKey::new(7)).unwrap();
        assert!(net.readout_frozen);
        let ds = generate_dataset(&rs, 100, StreamKey::new(8), false);
        for x in &ds.inputs {
            let tr = net.forward_matrix(x).unwrap();
            let top = &tr.hidden[1];
            // every channel of the top layer carries the same value
            assert!(top.iter().all(|&v| (v - top[0]).abs() < 1e-12));
            for &o in &tr.output {
                assert!(o.abs() <= 5.0 * top[0] / (h as f64).sqrt(), "{o}");
            }
        }
        let (_, g) = net.backward(&to_scalars(&ds.inputs[0]), 0).unwrap();
        assert!(g.readout.is_none());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn ce_uniform_logits() {
        let mut d = [0.0; 4];
        let l = cross_entropy_grad(&[0.3f64; 4], 2, &mut d);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((d[2] + 0.75).abs() < 1e-15);
    }
}

//! The segmentation network and its gradient contract.
//!
//! Architecture (depth `d`, base width `c`):
//!
//! ```text
//! enc_i : conv3x3 → ReLU → avgpool2          i = 0..d, width c·2^i
//! dropout (the single stochastic site)
//! dec_i : conv3x3 → ReLU → upsample2 (+ enc_i skip)   i = d-1..0
//! refine: conv3x3 → ReLU
//! head  : conv1x1 → K logits
//! ```
//!
//! Gradients are reverse-mode through a [`Trace`] recorded by
//! [`SegModel::forward_traced`]. Losses express their sensitivity as
//! `dL/dprob` seeds keyed by the trace that produced each probability map.

mod checkpoint;
pub(crate) mod layers;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::ScalarLoss;
use crate::tensor::{Real, Tensor4};
use layers::Act;

pub use optim::{Adam, AdamConfig, OptimizerStep};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            num_classes: 4,
            base_channels: 8,
            depth: 2,
            dropout_rate: 0.5,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.input_channels < 1 || self.base_channels < 1 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.depth > 16 || self.base_channels.checked_mul(1 << self.depth).is_none() {
            return Err(Error::Config("network too deep".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn layout(&self) -> Vec<LayerSpec> {
        let d = self.depth;
        let mut specs = Vec::with_capacity(2 * d + 2);
        for i in 0..d {
            let cin = if i == 0 { self.input_channels } else { self.width(i - 1) };
            specs.push(LayerSpec::new(format!("enc{i}"), cin, self.width(i), true));
        }
        for i in (0..d).rev() {
            let cin = if i == d - 1 { self.width(d - 1) } else { self.width(i + 1) };
            specs.push(LayerSpec::new(format!("dec{i}"), cin, self.width(i), true));
        }
        specs.push(LayerSpec::new("refine".into(), self.base_channels, self.base_channels, true));
        specs.push(LayerSpec::new("head".into(), self.base_channels, self.num_classes, false));
        specs
    }
}

#[derive(Clone, Debug)]
struct LayerSpec {
    name: String,
    cin: usize,
    cout: usize,
    k3: bool,
}

impl LayerSpec {
    fn new(name: String, cin: usize, cout: usize, k3: bool) -> Self {
        Self { name, cin, cout, k3 }
    }

    fn weight_shape(&self) -> Vec<usize> {
        let k = if self.k3 { 3 } else { 1 };
        vec![self.cout, self.cin, k, k]
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Whether the dropout site is stochastic for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    On(u64),
}

/// One encoder–decoder network θ.
#[derive(Clone, Debug)]
pub struct SegModel<T: Real = f32> {
    config: SegNetConfig,
    params: Vec<Param<T>>,
    uid: u64,
}

impl<T: Real> PartialEq for SegModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Pre-softmax network output, batch × K × H × W.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub values: Tensor4<T>,
    pub source: Option<TraceId>,
}

/// Per-pixel class distributions, batch × K × H × W.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub values: Tensor4<f64>,
    /// Trace the probabilities came from; `None` means gradient-detached.
    pub source: Option<TraceId>,
}

impl ProbMap {
    pub fn new(values: Tensor4<f64>) -> Self {
        Self {
            values,
            source: None,
        }
    }

    pub fn detached(&self) -> Self {
        Self {
            values: self.values.clone(),
            source: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.values.channels()
    }

    /// Builds a map from per-pixel vectors given in batch, row, column order.
    pub fn from_pixels(dims: [usize; 4], pixels: &[Vec<f64>]) -> Result<Self> {
        let [n, k, h, w] = dims;
        if pixels.len() != n * h * w || pixels.iter().any(|p| p.len() != k) {
            return Err(Error::Dimension("pixel vectors do not match dims".into()));
        }
        let mut t = Tensor4::zeros(dims);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = &pixels[(b * h + y) * w + x];
                    for (c, &v) in p.iter().enumerate() {
                        t.set(b, c, y, x, v);
                    }
                }
            }
        }
        Ok(Self::new(t))
    }

    /// The K-vector at one pixel.
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.num_classes()).map(|c| self.values.get(n, c, y, x)).collect()
    }
}

/// Identifies one recorded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TraceId(u64);

struct ConvTape<T> {
    /// Unfolded input (3×3) or the raw input (1×1).
    rhs: Vec<T>,
    /// Rectified output.
    out: Act<T>,
}

/// Activations recorded by a traced forward pass.
pub struct Trace<T> {
    id: TraceId,
    model_uid: u64,
    input_dims: [usize; 4],
    enc: Vec<ConvTape<T>>,
    dropout: Option<Vec<T>>,
    dec: Vec<ConvTape<T>>,
    refine: ConvTape<T>,
    logits: Act<T>,
}

impl<T> Trace<T> {
    pub fn id(&self) -> TraceId {
        self.id
    }
}

/// Gradient per parameter tensor, aligned with [`SegModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(model: &SegModel<T>) -> Self {
        Self {
            grads: model.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

struct Encoded<T> {
    skips: Vec<ConvTape<T>>,
    bottleneck: Act<T>,
}

fn to_channel_major<T: Real>(t: &Tensor4<T>) -> Act<T> {
    let [n, c, h, w] = t.dims();
    let mut a = Act::zeros(c, n, h, w);
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let src = &t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            a.data[(ch * n + b) * hw..(ch * n + b + 1) * hw].copy_from_slice(src);
        }
    }
    a
}

fn to_batch_major<T: Real>(a: &Act<T>) -> Tensor4<T> {
    let hw = a.h * a.w;
    let mut t = Tensor4::zeros([a.n, a.c, a.h, a.w]);
    for b in 0..a.n {
        for ch in 0..a.c {
            let src = &a.data[(ch * a.n + b) * hw..(ch * a.n + b + 1) * hw];
            t.data_mut()[(b * a.c + ch) * hw..(b * a.c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    t
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - rate)`.
fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    (0..len)
        .map(|_| if rng.random_bool(keep) { scale } else { T::zero() })
        .collect()
}

impl<T: Real> SegModel<T> {
    /// Seeded initialisation: weights uniform in `±sqrt(6 / fan_in)` for the
    /// rectified layers and `±sqrt(1 / fan_in)` for the class head; biases
    /// zero. Values are drawn in `f64` and rounded to `T`.
    pub fn init(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in config.layout() {
            let shape = spec.weight_shape();
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = if spec.k3 {
                (6.0 / fan_in).sqrt()
            } else {
                (1.0 / fan_in).sqrt()
            };
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            params.push(Param {
                name: format!("{}.weight", spec.name),
                shape,
                data,
            });
            params.push(Param {
                name: format!("{}.bias", spec.name),
                shape: vec![spec.cout],
                data: vec![T::zero(); spec.cout],
            });
        }
        Ok(Self {
            config,
            params,
            uid: fresh_id(),
        })
    }

    /// Builds a model from explicit parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: SegNetConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name, p.shape
                )));
            }
            if p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Dimension(format!("parameter `{name}` has wrong length")));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(Self {
            config,
            params,
            uid: fresh_id(),
        })
    }

    /// Names and shapes of the parameter tensors for a configuration.
    pub fn param_shapes(config: &SegNetConfig) -> Vec<(String, Vec<usize>)> {
        config
            .layout()
            .into_iter()
            .flat_map(|s| {
                let w = (format!("{}.weight", s.name), s.weight_shape());
                let b = (format!("{}.bias", s.name), vec![s.cout]);
                [w, b]
            })
            .collect()
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Converts to another element type (values pass through `f64`).
    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            uid: fresh_id(),
        }
    }

    fn check_input(&self, images: &Tensor4<T>) -> Result<()> {
        let [n, c, h, w] = images.dims();
        if c != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, batch has {c}",
                self.config.input_channels
            )));
        }
        let s = self.config.stride();
        if n == 0 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!(
                "input {h}×{w} (batch {n}) must be non-empty and divisible by {s}"
            )));
        }
        if !images.all_finite() {
            return Err(Error::Input("non-finite pixel in input batch".into()));
        }
        Ok(())
    }

    fn conv(&self, layer: usize, x: &Act<T>, relu: bool) -> ConvTape<T> {
        let w = &self.params[2 * layer];
        let b = &self.params[2 * layer + 1];
        let k3 = w.shape[2] == 3;
        let (mut out, cols) = layers::conv_forward(x, &w.data, &b.data, w.shape[0], k3);
        if relu {
            layers::relu_inplace(&mut out);
        }
        ConvTape {
            rhs: cols.unwrap_or_else(|| x.data.clone()),
            out,
        }
    }

    fn encode(&self, images: &Tensor4<T>) -> Encoded<T> {
        let mut x = to_channel_major(images);
        let mut skips = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let tape = self.conv(i, &x, true);
            x = layers::avgpool2(&tape.out);
            skips.push(tape);
        }
        Encoded {
            skips,
            bottleneck: x,
        }
    }

    /// Runs dropout and the decoder. Returns (mask, decoder tapes, refine tape, logits).
    #[allow(clippy::type_complexity)]
    fn decode(
        &self,
        enc: &Encoded<T>,
        mode: DropoutMode,
    ) -> (Option<Vec<T>>, Vec<ConvTape<T>>, ConvTape<T>, Act<T>) {
        let d = self.config.depth;
        let mut z = enc.bottleneck.clone();
        let mask = match mode {
            DropoutMode::On(seed) if self.config.dropout_rate > 0.0 => {
                let m = dropout_mask::<T>(z.data.len(), self.config.dropout_rate, seed);
                for (v, &k) in z.data.iter_mut().zip(&m) {
                    *v = *v * k;
                }
                Some(m)
            }
            _ => None,
        };
        let mut dec = Vec::with_capacity(d);
        for (j, i) in (0..d).rev().enumerate() {
            let tape = self.conv(d + j, &z, true);
            let mut up = layers::upsample2(&tape.out);
            for (u, &s) in up.data.iter_mut().zip(&enc.skips[i].out.data) {
                *u = *u + s;
            }
            z = up;
            dec.push(tape);
        }
        let refine = self.conv(2 * d, &z, true);
        let head = self.conv(2 * d + 1, &refine.out, false);
        (mask, dec, refine, head.out)
    }

    /// Forward pass without recording activations.
    pub fn forward(&self, images: &Tensor4<T>, mode: DropoutMode) -> Result<Logits<T>> {
        self.check_input(images)?;
        let enc = self.encode(images);
        let (_, _, _, logits) = self.decode(&enc, mode);
        Ok(Logits {
            values: to_batch_major(&logits),
            source: None,
        })
    }

    /// Forward pass that records what [`Self::param_gradients`] and
    /// [`Self::input_gradient`] need.
    pub fn forward_traced(&self, images: &Tensor4<T>, mode: DropoutMode) -> Result<(Logits<T>, Trace<T>)> {
        self.check_input(images)?;
        let enc = self.encode(images);
        let (dropout, dec, refine, logits) = self.decode(&enc, mode);
        let id = TraceId(fresh_id());
        let out = Logits {
            values: to_batch_major(&logits),
            source: Some(id),
        };
        let trace = Trace {
            id,
            model_uid: self.uid,
            input_dims: images.dims(),
            enc: enc.skips,
            dropout,
            dec,
            refine,
            logits,
        };
        Ok((out, trace))
    }

    /// Stochastic passes sharing one encoder evaluation; pass `t` uses
    /// `DropoutMode::On(seeds[t])`. Bitwise equal to separate
    /// [`Self::forward`] calls.
    pub fn forward_samples(&self, images: &Tensor4<T>, seeds: &[u64]) -> Result<Vec<Logits<T>>> {
        self.check_input(images)?;
        let enc = self.encode(images);
        Ok(seeds
            .iter()
            .map(|&s| {
                let (_, _, _, logits) = self.decode(&enc, DropoutMode::On(s));
                Logits {
                    values: to_batch_major(&logits),
                    source: None,
                }
            })
            .collect())
    }

    fn backward(&self, trace: &Trace<T>, dprob: &Tensor4<f64>, need_input: bool) -> (GradientSet<T>, Option<Tensor4<T>>) {
        let d = self.config.depth;
        let k = self.config.num_classes;
        let logits = &trace.logits;
        let hw = logits.h * logits.w;
        let plane = logits.plane();

        // Softmax Jacobian: dz_c = p_c (g_c - Σ_j p_j g_j).
        let mut dz = Act::zeros(k, logits.n, logits.h, logits.w);
        let mut p = vec![0.0f64; k];
        for b in 0..logits.n {
            for s in 0..hw {
                let col = b * hw + s;
                let mut mx = f64::NEG_INFINITY;
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc = logits.data[c * plane + col].f64();
                    mx = mx.max(*pc);
                }
                let mut sum = 0.0;
                for pc in p.iter_mut() {
                    *pc = (*pc - mx).exp();
                    sum += *pc;
                }
                let mut dot = 0.0;
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc /= sum;
                    dot += *pc * dprob.data()[(b * k + c) * hw + s];
                }
                for (c, pc) in p.iter().enumerate() {
                    let g = dprob.data()[(b * k + c) * hw + s];
                    dz.data[c * plane + col] = T::of(pc * (g - dot));
                }
            }
        }

        let mut grads = GradientSet::zeros_like(self);
        let mut store = |layer: usize, g: layers::ConvGrads<T>| -> Option<Act<T>> {
            grads.grads[2 * layer] = g.weight;
            grads.grads[2 * layer + 1] = g.bias;
            g.input
        };

        let head = 2 * d + 1;
        let refine = 2 * d;
        let g = layers::conv_backward(&dz, &trace.refine.out.data, &self.params[2 * head].data, self.config.base_channels, false, true);
        let mut dr = store(head, g).expect("input grad requested");
        layers::relu_backward(&mut dr, &trace.refine.out);
        let g = layers::conv_backward(&dr, &trace.refine.rhs, &self.params[2 * refine].data, self.config.base_channels, true, true);
        let mut dzi = store(refine, g).expect("input grad requested");

        // Decoder, shallow stage first; dec tapes were recorded deepest first.
        let mut dskip: Vec<Option<Act<T>>> = (0..d).map(|_| None).collect();
        for i in 0..d {
            let j = d - 1 - i;
            let layer = d + j;
            let tape = &trace.dec[j];
            let mut da = layers::upsample2_backward(&dzi);
            dskip[i] = Some(dzi);
            layers::relu_backward(&mut da, &tape.out);
            let cin = self.params[2 * layer].shape[1];
            let g = layers::conv_backward(&da, &tape.rhs, &self.params[2 * layer].data, cin, true, true);
            dzi = store(layer, g).expect("input grad requested");
        }

        if let Some(mask) = &trace.dropout {
            for (v, &m) in dzi.data.iter_mut().zip(mask) {
                *v = *v * m;
            }
        }

        let mut input = None;
        let mut dx = dzi;
        for i in (0..d).rev() {
            let tape = &trace.enc[i];
            let mut da = layers::avgpool2_backward(&dx);
            let skip = dskip[i].take().expect("skip gradient");
            for (a, &s) in da.data.iter_mut().zip(&skip.data) {
                *a = *a + s;
            }
            layers::relu_backward(&mut da, &tape.out);
            let cin = self.params[2 * i].shape[1];
            let want = i > 0 || need_input;
            let g = layers::conv_backward(&da, &tape.rhs, &self.params[2 * i].data, cin, true, want);
            if let Some(next) = store(i, g) {
                if i == 0 {
                    input = Some(to_batch_major(&next));
                } else {
                    dx = next;
                }
            }
        }
        (grads, input)
    }

    fn check_trace(&self, trace: &Trace<T>) -> Result<()> {
        if trace.model_uid != self.uid {
            return Err(Error::Graph("trace was recorded on a different model".into()));
        }
        Ok(())
    }

    /// Parameter gradients of `loss` through every trace it depends on.
    pub fn param_gradients(&self, traces: &[&Trace<T>], loss: &ScalarLoss) -> Result<GradientSet<T>> {
        let mut total = GradientSet::zeros_like(self);
        let mut connected = false;
        for trace in traces {
            self.check_trace(trace)?;
            if let Some(seed) = loss.seed(trace.id) {
                let (g, _) = self.backward(trace, seed, false);
                total.add_assign(&g);
                connected = true;
            }
        }
        if !connected {
            return Err(Error::Graph("loss is not connected to this model".into()));
        }
        Ok(total)
    }

    /// Gradient of `loss` with respect to the pixels that produced `trace`.
    pub fn input_gradient(&self, trace: &Trace<T>, loss: &ScalarLoss) -> Result<Tensor4<T>> {
        self.check_trace(trace)?;
        match loss.seed(trace.id) {
            Some(seed) => Ok(self.backward(trace, seed, true).1.expect("input gradient")),
            None => Err(Error::Graph("loss is not connected to this trace".into())),
        }
    }

    /// Parameter and input gradients from a single backward pass.
    pub fn gradients(&self, trace: &Trace<T>, loss: &ScalarLoss) -> Result<(GradientSet<T>, Tensor4<T>)> {
        self.check_trace(trace)?;
        match loss.seed(trace.id) {
            Some(seed) => {
                let (g, x) = self.backward(trace, seed, true);
                Ok((g, x.expect("input gradient")))
            }
            None => Err(Error::Graph("loss is not connected to this trace".into())),
        }
    }

    /// Dims of the input batch recorded by `trace`.
    pub fn trace_input_dims(trace: &Trace<T>) -> [usize; 4] {
        trace.input_dims
    }
}

/// Channel-wise softmax computed in `f64` with max-shift.
pub fn softmax<T: Real>(logits: &Logits<T>) -> Result<ProbMap> {
    if !logits.values.all_finite() {
        return Err(Error::Input("non-finite logits".into()));
    }
    let [n, k, h, w] = logits.values.dims();
    let hw = h * w;
    let src = logits.values.data();
    let mut out = Tensor4::zeros([n, k, h, w]);
    let dst = out.data_mut();
    for b in 0..n {
        for s in 0..hw {
            let at = |c: usize| (b * k + c) * hw + s;
            let mx = (0..k).map(|c| src[at(c)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..k {
                let e = (src[at(c)].f64() - mx).exp();
                dst[at(c)] = e;
                sum += e;
            }
            for c in 0..k {
                dst[at(c)] /= sum;
            }
        }
    }
    Ok(ProbMap {
        values: out,
        source: logits.source,
    })
}

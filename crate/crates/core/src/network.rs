//! Stacks of recurrent layers with a softmax head, trained by truncated BPTT.
//!
//! Layer 1 reads the network input, layer `l ≥ 2` reads `h` of layer `l-1`
//! at the same timestep, and a highway layer additionally reads the lower
//! layer's cell. Logits are `W_out h_top + b_out` at every frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::{step_backward, CellState, LayerKind, LayerParams, LayerSpec, ShortcutKind, StepCache};
use crate::error::{Error, Result};
use crate::numerics::{init_uniform, Matrix, Vector};
use crate::params::{mat, mat_mut, vec_mut, vec_ref, ParamSet, TensorMut, TensorRef, TensorRole};
use crate::rng::{seeded_stream, stream};
use crate::training::softmax_cross_entropy;

/// Architecture of a whole stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Plain,
    Highway,
    ResidualScaled,
    ResidualUnscaled,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [
        CellKind::Plain,
        CellKind::Highway,
        CellKind::ResidualScaled,
        CellKind::ResidualUnscaled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Plain => "plain",
            CellKind::Highway => "highway",
            CellKind::ResidualScaled => "residual_scaled",
            CellKind::ResidualUnscaled => "residual_unscaled",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cell kind {s:?}")))
    }
}

/// Whether residual layers with matching dims use the identity shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutMode {
    /// Identity wherever input and output dims agree, `W_h` elsewhere.
    #[default]
    Auto,
    /// `W_h` on every residual layer.
    Projection,
}

impl ShortcutMode {
    pub fn name(self) -> &'static str {
        match self {
            ShortcutMode::Auto => "auto",
            ShortcutMode::Projection => "projection",
        }
    }
}

impl FromStr for ShortcutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ShortcutMode::Auto),
            "projection" => Ok(ShortcutMode::Projection),
            _ => Err(Error::Config(format!("unknown shortcut mode {s:?}"))),
        }
    }
}

pub const DEFAULT_INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub cell_kind: CellKind,
    pub layers: usize,
    /// Memory cells per layer (n).
    pub cell_size: usize,
    /// Layer output width after projection (m).
    pub output_size: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub shortcut: ShortcutMode,
    pub init_scale: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(
        cell_kind: CellKind,
        layers: usize,
        cell_size: usize,
        output_size: usize,
        input_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        NetworkConfig {
            cell_kind,
            layers,
            cell_size,
            output_size,
            input_dim,
            num_classes,
            shortcut: ShortcutMode::Auto,
            init_scale: DEFAULT_INIT_SCALE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (name, v) in [
            ("cell_size", self.cell_size),
            ("output_size", self.output_size),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }

    /// Per-layer shape contract. Layer 1 of a highway stack is plain since
    /// there is no lower cell to connect.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        (0..self.layers)
            .map(|l| {
                let k = if l == 0 { self.input_dim } else { self.output_size };
                let m = self.output_size;
                let shortcut = if k == m && self.shortcut == ShortcutMode::Auto {
                    ShortcutKind::Identity
                } else {
                    ShortcutKind::Projection
                };
                let kind = match self.cell_kind {
                    CellKind::Plain => LayerKind::Plain,
                    CellKind::Highway if l == 0 => LayerKind::Plain,
                    CellKind::Highway => LayerKind::Highway,
                    CellKind::ResidualScaled => LayerKind::Residual { scaled: true, shortcut },
                    CellKind::ResidualUnscaled => LayerKind::Residual { scaled: false, shortcut },
                };
                LayerSpec {
                    kind,
                    n: self.cell_size,
                    k,
                    m,
                }
            })
            .collect()
    }
}

/// Every learnable tensor of a stack; also the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// `num_classes × output_size`.
    pub w_out: Matrix,
    pub b_out: Vector,
}

pub type Gradients = NetworkParams;

impl ParamSet for NetworkParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|mut t| {
                t.name = format!("layer{l}.{}", t.name);
                t
            }));
        }
        out.push(mat("head.w_out", TensorRole::Weight, &self.w_out));
        out.push(vec_ref("head.b_out", TensorRole::Bias, &self.b_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.tensors_mut().into_iter().map(|mut t| {
                t.name = format!("layer{l}.{}", t.name);
                t
            }));
        }
        out.push(mat_mut("head.w_out", TensorRole::Weight, &mut self.w_out));
        out.push(vec_mut("head.b_out", TensorRole::Bias, &mut self.b_out));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedNetwork {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

impl ParamSet for StackedNetwork {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.params.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.params.tensors_mut()
    }
}

/// Per-timestep, per-layer step caches plus the logits of a forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `caches[t][l]`.
    pub caches: Vec<Vec<StepCache>>,
    pub logits: Vec<Vector>,
}

impl StackedNetwork {
    /// All-zero network with the configured shapes.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .into_iter()
            .map(LayerParams::zeros)
            .collect::<Result<Vec<_>>>()?;
        Ok(StackedNetwork {
            config,
            params: NetworkParams {
                layers,
                w_out: Matrix::zeros(config.num_classes, config.output_size),
                b_out: Vector::zeros(config.num_classes),
            },
        })
    }

    /// Randomly initialized network, drawn from the config seed's INIT stream.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_stream(config.seed, stream::INIT);
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|spec| LayerParams::init(spec, config.init_scale, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(StackedNetwork {
            config,
            params: NetworkParams {
                layers,
                w_out: init_uniform(config.num_classes, config.output_size, config.init_scale, &mut rng),
                b_out: Vector::zeros(config.num_classes),
            },
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.zeros_like()
    }

    pub fn initial_states(&self) -> Vec<CellState> {
        self.params.layers.iter().map(LayerParams::initial_state).collect()
    }

    fn check_inputs(&self, inputs: &[Vector]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let d = self.config.input_dim;
        if let Some(t) = inputs.iter().position(|x| x.len() != d) {
            return Err(Error::dim(
                "forward_sequence",
                format!("frame {t} has dim {}, network expects {d}", inputs[t].len()),
            ));
        }
        Ok(())
    }

    fn check_states(&self, states: &[CellState]) -> Result<()> {
        if states.len() != self.params.layers.len() {
            return Err(Error::dim(
                "forward_sequence",
                format!("{} initial states for {} layers", states.len(), self.params.layers.len()),
            ));
        }
        for (l, (s, layer)) in states.iter().zip(&self.params.layers).enumerate() {
            let (n, _, m) = layer.core.dims();
            if s.c.len() != n || s.h.len() != m {
                return Err(Error::dim(
                    "forward_sequence",
                    format!("state of layer {l} has c/h lengths {}/{}, expected {n}/{m}", s.c.len(), s.h.len()),
                ));
            }
        }
        Ok(())
    }

    /// One timestep through every layer; returns the new states and caches.
    fn step_stack(&self, x: &Vector, states: &[CellState]) -> Result<(Vec<CellState>, Vec<StepCache>, Vector)> {
        let mut next = Vec::with_capacity(states.len());
        let mut caches = Vec::with_capacity(states.len());
        let mut input = x.clone();
        let mut c_below: Option<Vector> = None;
        for (layer, prev) in self.params.layers.iter().zip(states) {
            let (state, cache) = layer.step(&input, prev, c_below.as_ref())?;
            input = state.h.clone();
            c_below = Some(state.c.clone());
            next.push(state);
            caches.push(cache);
        }
        let mut logits = self.params.b_out.clone();
        self.params.w_out.mul_acc(input.as_slice(), logits.as_mut_slice());
        Ok((next, caches, logits))
    }

    /// Runs the stack over a sequence from the given per-layer states.
    pub fn forward_sequence(
        &self,
        inputs: &[Vector],
        initial_states: &[CellState],
    ) -> Result<(Vec<Vector>, ForwardTrace, Vec<CellState>)> {
        self.check_inputs(inputs)?;
        self.check_states(initial_states)?;
        let mut states = initial_states.to_vec();
        let mut caches = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, step_caches, out) = self.step_stack(x, &states)?;
            states = next;
            caches.push(step_caches);
            logits.push(out);
        }
        let trace = ForwardTrace {
            caches,
            logits: logits.clone(),
        };
        Ok((logits, trace, states))
    }

    /// Logits only, from zero states. Cheaper than [`Self::forward_sequence`]
    /// since no caches are kept.
    pub fn predict(&self, inputs: &[Vector]) -> Result<Vec<Vector>> {
        self.check_inputs(inputs)?;
        let mut states = self.initial_states();
        let mut logits = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, _, out) = self.step_stack(x, &states)?;
            states = next;
            logits.push(out);
        }
        Ok(logits)
    }

    fn check_labels(&self, inputs: &[Vector], labels: &[usize]) -> Result<()> {
        self.check_inputs(inputs)?;
        if labels.len() != inputs.len() {
            return Err(Error::dim(
                "loss_and_grads",
                format!("{} labels for {} frames", labels.len(), inputs.len()),
            ));
        }
        let classes = self.config.num_classes;
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Mean per-frame cross-entropy and its gradient under truncated BPTT.
    ///
    /// The sequence is cut into consecutive chunks of at most `bptt_len`
    /// frames (the remainder forms a shorter last chunk). Forward state
    /// carries across chunk boundaries; gradients do not. Parameter
    /// gradients are summed over every frame's contribution to the mean.
    pub fn loss_and_grads(&self, inputs: &[Vector], labels: &[usize], bptt_len: usize) -> Result<(f64, Gradients)> {
        if bptt_len == 0 {
            return Err(Error::Config("bptt_len must be at least 1".into()));
        }
        self.check_labels(inputs, labels)?;
        let total_frames = inputs.len() as f64;
        let mut grads = self.zero_grads();
        let mut states = self.initial_states();
        let mut total_loss = 0.0;

        for (chunk_inputs, chunk_labels) in inputs.chunks(bptt_len).zip(labels.chunks(bptt_len)) {
            let (logits, trace, next) = self.forward_sequence(chunk_inputs, &states)?;
            let mut d_logits = Vec::with_capacity(logits.len());
            for (z, &label) in logits.iter().zip(chunk_labels) {
                let (loss, mut dz) = softmax_cross_entropy(z, label)?;
                total_loss += loss;
                dz.as_mut_slice().iter_mut().for_each(|v| *v /= total_frames);
                d_logits.push(dz);
            }
            self.backward_chunk(&trace, &d_logits, &mut grads)?;
            states = next;
        }
        Ok((total_loss / total_frames, grads))
    }

    /// Reverse pass over one chunk with zero gradient entering from beyond it.
    fn backward_chunk(&self, trace: &ForwardTrace, d_logits: &[Vector], grads: &mut Gradients) -> Result<()> {
        let layers = &self.params.layers;
        let mut d_h_rec: Vec<Vector> = layers.iter().map(|l| Vector::zeros(l.core.dims().2)).collect();
        let mut d_c_rec: Vec<Vector> = layers.iter().map(|l| Vector::zeros(l.core.dims().0)).collect();

        for (caches, dz) in trace.caches.iter().zip(d_logits).rev() {
            let h_top = &caches.last().expect("at least one layer").h;
            grads.w_out.outer_acc(dz.as_slice(), h_top.as_slice());
            grads.b_out.add_assign(dz);
            let mut d_from_above = vec![0.0; h_top.len()];
            self.params.w_out.tr_mul_acc(dz.as_slice(), &mut d_from_above);
            let mut d_from_above = Vector::from(d_from_above);
            let mut d_c_from_above: Option<Vector> = None;

            for l in (0..layers.len()).rev() {
                let d_h = d_from_above.add(&d_h_rec[l]);
                let mut d_c = d_c_rec[l].clone();
                if let Some(extra) = &d_c_from_above {
                    d_c.add_assign(extra);
                }
                let back = step_backward(&layers[l], &caches[l], &d_h, &d_c, &mut grads.layers[l])?;
                d_h_rec[l] = back.d_h_prev;
                d_c_rec[l] = back.d_c_prev;
                d_from_above = back.d_x;
                d_c_from_above = back.d_c_below;
            }
        }
        Ok(())
    }

    /// States at the start of every truncation chunk, as the forward pass
    /// carries them.
    pub fn chunk_start_states(&self, inputs: &[Vector], bptt_len: usize) -> Result<Vec<Vec<CellState>>> {
        if bptt_len == 0 {
            return Err(Error::Config("bptt_len must be at least 1".into()));
        }
        self.check_inputs(inputs)?;
        let mut states = self.initial_states();
        let mut starts = Vec::new();
        for chunk in inputs.chunks(bptt_len) {
            starts.push(states.clone());
            let (_, _, next) = self.forward_sequence(chunk, &states)?;
            states = next;
        }
        Ok(starts)
    }

    /// Mean cross-entropy where each chunk restarts from fixed, externally
    /// supplied states. Differentiating this with the start states held
    /// constant gives exactly the truncated-BPTT gradient.
    pub fn chunked_loss(
        &self,
        inputs: &[Vector],
        labels: &[usize],
        bptt_len: usize,
        chunk_starts: &[Vec<CellState>],
    ) -> Result<f64> {
        self.check_labels(inputs, labels)?;
        let chunks: Vec<_> = inputs.chunks(bptt_len.max(1)).zip(labels.chunks(bptt_len.max(1))).collect();
        if chunks.len() != chunk_starts.len() {
            return Err(Error::dim(
                "chunked_loss",
                format!("{} start states for {} chunks", chunk_starts.len(), chunks.len()),
            ));
        }
        let mut total = 0.0;
        for ((xs, ys), start) in chunks.into_iter().zip(chunk_starts) {
            let (logits, _, _) = self.forward_sequence(xs, start)?;
            for (z, &y) in logits.iter().zip(ys) {
                total += softmax_cross_entropy(z, y)?.0;
            }
        }
        Ok(total / inputs.len() as f64)
    }
}

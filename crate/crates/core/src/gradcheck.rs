//! Central finite differences as an independent check on the analytic
//! backward passes.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{CellKind, NetworkConfig, ShortcutMode, StackedNetwork};
use crate::numerics::{init_uniform_vector, Vector};
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded_stream, stream};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_PARAM_RANGE: f64 = 1.5;
/// Relative errors are measured against at least this magnitude.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(p + eps) - f(p - eps)) / 2eps` for every scalar of `params`.
pub fn numeric_grad<P, F>(mut objective: F, params: &P, eps: f64) -> Result<P>
where
    P: ParamSet,
    F: FnMut(&P) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();

    for (ti, (name, len)) in shapes.iter().enumerate() {
        for ei in 0..*len {
            let original = probe.tensors()[ti].data[ei];
            probe.tensors_mut()[ti].data[ei] = original + eps;
            let plus = objective(&probe)?;
            probe.tensors_mut()[ti].data[ei] = original - eps;
            let minus = objective(&probe)?;
            probe.tensors_mut()[ti].data[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective is {plus}/{minus} when perturbing {name}[{ei}]"
                )));
            }
            grads.tensors_mut()[ti].data[ei] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Worst relative error per tensor.
pub fn tensor_errors<P: ParamSet>(analytic: &P, numeric: &P) -> Result<Vec<TensorError>> {
    let (a, b) = (analytic.tensors(), numeric.tensors());
    if a.len() != b.len() {
        return Err(Error::dim(
            "max_rel_error",
            format!("{} tensors against {}", a.len(), b.len()),
        ));
    }
    a.iter()
        .zip(&b)
        .map(|(ta, tb)| {
            if ta.shape != tb.shape || ta.name != tb.name {
                return Err(Error::dim(
                    "max_rel_error",
                    format!("{} {:?} against {} {:?}", ta.name, ta.shape, tb.name, tb.shape),
                ));
            }
            let mut worst = TensorError {
                name: ta.name.clone(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: ta.data.first().copied().unwrap_or(0.0),
                numeric: tb.data.first().copied().unwrap_or(0.0),
            };
            for (i, (&x, &y)) in ta.data.iter().zip(tb.data).enumerate() {
                let err = rel_error(x, y);
                if err > worst.max_rel_error {
                    worst = TensorError {
                        name: ta.name.clone(),
                        max_rel_error: err,
                        worst_index: i,
                        analytic: x,
                        numeric: y,
                    };
                }
            }
            Ok(worst)
        })
        .collect()
}

pub fn max_rel_error<P: ParamSet>(a: &P, b: &P) -> Result<f64> {
    Ok(tensor_errors(a, b)?
        .iter()
        .map(|t| t.max_rel_error)
        .fold(0.0, f64::max))
}

/// A random instance to check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSpec {
    pub kind: CellKind,
    pub layers: usize,
    /// Memory cells per layer.
    pub n: usize,
    /// Network input dim.
    pub k: usize,
    /// Layer output dim.
    pub m: usize,
    pub classes: usize,
    /// Sequence length.
    pub t: usize,
    /// Truncation length; `None` means the whole sequence.
    pub bptt_len: Option<usize>,
    pub shortcut: ShortcutMode,
    pub seed: u64,
    pub eps: f64,
    pub threshold: f64,
    /// Parameters of the random instance are uniform in `[-r, r]`.
    pub param_range: f64,
    /// Test hook: perturb one analytic gradient entry before comparing.
    pub corrupt_backward: bool,
}

impl CheckSpec {
    pub fn new(kind: CellKind, n: usize, k: usize, m: usize, t: usize, seed: u64) -> Self {
        CheckSpec {
            kind,
            layers: 1,
            n,
            k,
            m,
            classes: 3,
            t,
            bptt_len: None,
            shortcut: ShortcutMode::Auto,
            seed,
            eps: DEFAULT_EPS,
            threshold: DEFAULT_THRESHOLD,
            param_range: DEFAULT_PARAM_RANGE,
            corrupt_backward: false,
        }
    }

    pub fn layers(self, layers: usize) -> Self {
        CheckSpec { layers, ..self }
    }

    pub fn shortcut(self, shortcut: ShortcutMode) -> Self {
        CheckSpec { shortcut, ..self }
    }

    pub fn bptt_len(self, bptt_len: usize) -> Self {
        CheckSpec {
            bptt_len: Some(bptt_len),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub spec: CheckSpec,
    pub num_params: usize,
    pub tensors: Vec<TensorError>,
    pub max_error: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spec;
        writeln!(
            f,
            "gradcheck {} layers={} n={} k={} m={} classes={} T={} bptt={} shortcut={} seed={} eps={:e}",
            s.kind,
            s.layers,
            s.n,
            s.k,
            s.m,
            s.classes,
            s.t,
            s.bptt_len.map_or("full".to_string(), |b| b.to_string()),
            s.shortcut.name(),
            s.seed,
            s.eps
        )?;
        writeln!(f, "{:<24} {:>12} {:>16} {:>16}", "tensor", "max_rel_err", "analytic", "numeric")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<24} {:>12.3e} {:>16.8e} {:>16.8e}",
                t.name, t.max_rel_error, t.analytic, t.numeric
            )?;
        }
        write!(
            f,
            "{} parameters, max relative error {:.3e} (threshold {:.0e}): {}",
            self.num_params,
            self.max_error,
            s.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Generic random instance for `spec`: every tensor uniform in
/// `[-param_range, param_range]`,
/// frames uniform in [-1, 1], labels uniform.
pub fn random_instance(spec: &CheckSpec) -> Result<(StackedNetwork, Vec<Vector>, Vec<usize>)> {
    let config = NetworkConfig {
        shortcut: spec.shortcut,
        ..NetworkConfig::new(spec.kind, spec.layers, spec.n, spec.m, spec.k, spec.classes, spec.seed)
    };
    let mut net = StackedNetwork::zeros(config)?;
    let mut rng = seeded_stream(derive_seed(spec.seed, stream::INIT), 0);
    for t in net.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-spec.param_range..=spec.param_range);
        }
    }
    let frames = (0..spec.t).map(|_| init_uniform_vector(spec.k, 1.0, &mut rng)).collect();
    let labels = (0..spec.t).map(|_| rng.random_range(0..spec.classes)).collect();
    Ok((net, frames, labels))
}

/// Compares analytic truncated-BPTT gradients of the mean cross-entropy
/// with central differences of the chunk-truncated objective.
pub fn check_cell(spec: &CheckSpec) -> Result<GradCheckReport> {
    let (net, frames, labels) = random_instance(spec)?;
    let bptt = spec.bptt_len.unwrap_or(spec.t.max(1));
    let (_, mut analytic) = net.loss_and_grads(&frames, &labels, bptt)?;
    if spec.corrupt_backward {
        if let Some(t) = analytic.tensors_mut().into_iter().next() {
            t.data[0] += 1e-2 + t.data[0].abs() * 0.1;
        }
    }

    let starts = net.chunk_start_states(&frames, bptt)?;
    let numeric = numeric_grad(
        |probe: &StackedNetwork| probe.chunked_loss(&frames, &labels, bptt, &starts),
        &net,
        spec.eps,
    )?;
    let tensors = tensor_errors(&analytic, &numeric.params)?;
    let max_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        spec: *spec,
        num_params: net.num_scalars(),
        tensors,
        max_error,
        passed: max_error < spec.threshold,
    })
}

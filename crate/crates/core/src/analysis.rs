//! Parameter accounting across cell kinds and Monte-Carlo variance
//! propagation through stacked shortcut layers.
//!
//! A residual layer reuses its projection and output gate for the shortcut,
//! so it costs exactly as much as a plain layer (plus `W_h` where dims do
//! not match). A highway layer pays for a full depth gate on every layer
//! above the first. The shortcut-gating argument is checked numerically by
//! [`variance_sweep`]: with an idealized fixed output gate `g`, independent
//! unit-variance projection outputs `m^l` and input `x`,
//!
//! ```text
//! scaled:   h^l = g (m^l + h^{l-1})   Var h^l = Σ_{k=1..l} g^{2(l-k+1)} + g^{2l}
//! unscaled: h^l = g m^l + h^{l-1}     Var h^l = l g² + 1
//! ```
//!
//! so `g = 1/√2` holds the scaled variance at exactly 1 while the unscaled
//! one grows linearly with depth.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{CellKind, NetworkConfig};
use crate::rng::{seeded_stream, standard_normal, stream};

/// Dimensions of a stack to account for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackDims {
    pub layers: usize,
    /// Memory cells per layer (n).
    pub cells: usize,
    /// Output width per layer (m).
    pub outputs: usize,
    pub input_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KindCount {
    pub kind: CellKind,
    pub per_layer: Vec<usize>,
    pub head: usize,
    pub total: usize,
}

/// Exact scalar count from the declared tensor shapes of every layer.
pub fn count_params(kind: CellKind, dims: StackDims, include_head: bool) -> KindCount {
    let config = NetworkConfig::new(kind, dims.layers, dims.cells, dims.outputs, dims.input_dim, dims.classes, 0);
    let per_layer: Vec<usize> = config.layer_specs().iter().map(|s| s.num_params()).collect();
    let head = if include_head {
        dims.classes * dims.outputs + dims.classes
    } else {
        0
    };
    let total = per_layer.iter().sum::<usize>() + head;
    KindCount {
        kind,
        per_layer,
        head,
        total,
    }
}

/// The closed-form per-layer saving `N²/2 + 4N` for a projection to `N/2`.
pub fn closed_form_reduction(n: u64) -> Result<u64> {
    if n % 2 != 0 {
        return Err(Error::Config(format!("closed-form reduction needs an even cell count, got {n}")));
    }
    Ok(n * n / 2 + 4 * n)
}

/// Depth-gate tensors of one highway layer with input dim `k`:
/// `W_xd` (n×k) plus two peephole vectors and a bias.
pub fn highway_extras_per_layer(n: usize, k: usize) -> usize {
    n * k + 3 * n
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountReport {
    pub dims: StackDims,
    pub include_head: bool,
    pub plain: KindCount,
    pub highway: KindCount,
    pub residual: KindCount,
    /// Shape-derived depth-gate cost of one stacked highway layer.
    pub extras_per_layer: usize,
    /// `N²/2 + 4N`, when N is even.
    pub closed_form_per_layer: Option<u64>,
    pub highway_minus_residual: i64,
    /// `(highway - residual) / highway` from shape counts.
    pub relative_reduction: f64,
    /// Same ratio with the closed form standing in for the highway extras.
    pub closed_form_relative_reduction: Option<f64>,
}

pub fn compare_kinds(dims: StackDims, include_head: bool) -> ParamCountReport {
    let plain = count_params(CellKind::Plain, dims, include_head);
    let highway = count_params(CellKind::Highway, dims, include_head);
    let residual = count_params(CellKind::ResidualScaled, dims, include_head);
    let closed = closed_form_reduction(dims.cells as u64).ok();
    let stacked = dims.layers.saturating_sub(1) as u64;
    let closed_form_relative_reduction = closed.map(|c| {
        let saved = (c * stacked) as f64;
        saved / (residual.total as f64 + saved)
    });
    ParamCountReport {
        dims,
        include_head,
        extras_per_layer: highway_extras_per_layer(dims.cells, dims.outputs),
        closed_form_per_layer: closed,
        highway_minus_residual: highway.total as i64 - residual.total as i64,
        relative_reduction: (highway.total as f64 - residual.total as f64) / highway.total as f64,
        closed_form_relative_reduction,
        plain,
        highway,
        residual,
    }
}

impl ParamCountReport {
    pub fn to_table(&self) -> String {
        let d = &self.dims;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "layers={} cells(N)={} outputs(M)={} input(D)={} classes={} head={}",
            d.layers, d.cells, d.outputs, d.input_dim, d.classes, self.include_head
        );
        let _ = writeln!(out, "{:<18} {:>14} {:>14} {:>14}", "kind", "layer 1", "layer >=2", "total");
        for k in [&self.plain, &self.highway, &self.residual] {
            let upper = k.per_layer.get(1).map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{:<18} {:>14} {:>14} {:>14}", k.kind.name(), k.per_layer[0], upper, k.total);
        }
        let _ = writeln!(out, "highway extras per stacked layer (shape count, N*M + 3N): {}", self.extras_per_layer);
        match self.closed_form_per_layer {
            Some(c) => {
                let _ = writeln!(out, "closed-form reduction per layer (N^2/2 + 4N):           {c}");
                let _ = writeln!(
                    out,
                    "note: shape count and closed form differ by {} scalars; the closed form assumes M = N/2 and counts one more N-sized vector",
                    (c as i64 - self.extras_per_layer as i64).abs()
                );
            }
            None => {
                let _ = writeln!(out, "closed-form reduction per layer: n/a (N odd)");
            }
        }
        let _ = writeln!(out, "highway - residual: {}", self.highway_minus_residual);
        let _ = writeln!(
            out,
            "residual vs highway reduction (shape counts): {:.2}%",
            100.0 * self.relative_reduction
        );
        if let Some(r) = self.closed_form_relative_reduction {
            let _ = writeln!(out, "residual vs highway reduction (closed form):  {:.2}%", 100.0 * r);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Sample variance of `h^l` for `l = 1..=layers`.
    pub variances: Vec<f64>,
    pub gate: f64,
    pub scaled: bool,
    pub samples: usize,
    pub seed: u64,
}

pub const MIN_VARIANCE_SAMPLES: usize = 10_000;

/// Monte-Carlo estimate of the per-layer output variance of a shortcut
/// stack whose output gate is frozen at `gate`.
pub fn variance_sweep(layers: usize, gate: f64, scaled: bool, samples: usize, seed: u64) -> Result<VarianceReport> {
    if layers == 0 {
        return Err(Error::Config("variance sweep needs at least one layer".into()));
    }
    if !(gate > 0.0 && gate <= 1.0) {
        return Err(Error::Config(format!("gate must be in (0, 1], got {gate}")));
    }
    if samples < MIN_VARIANCE_SAMPLES {
        return Err(Error::Config(format!(
            "variance sweep needs at least {MIN_VARIANCE_SAMPLES} samples, got {samples}"
        )));
    }
    let mut rng = seeded_stream(seed, stream::VARIANCE);
    // Welford accumulators per layer.
    let mut mean = vec![0.0; layers];
    let mut m2 = vec![0.0; layers];
    for s in 0..samples {
        let mut h = standard_normal(&mut rng);
        for l in 0..layers {
            let m = standard_normal(&mut rng);
            h = if scaled { gate * (m + h) } else { gate * m + h };
            let delta = h - mean[l];
            mean[l] += delta / (s + 1) as f64;
            m2[l] += delta * (h - mean[l]);
        }
    }
    Ok(VarianceReport {
        variances: m2.iter().map(|v| v / (samples - 1) as f64).collect(),
        gate,
        scaled,
        samples,
        seed,
    })
}

/// Exact `Var h^l` under the independence assumptions of [`variance_sweep`].
pub fn closed_form_variance(layer: usize, gate: f64, scaled: bool) -> f64 {
    let g2 = gate * gate;
    if scaled {
        (1..=layer).map(|k| g2.powi((layer - k + 1) as i32)).sum::<f64>() + g2.powi(layer as i32)
    } else {
        layer as f64 * g2 + 1.0
    }
}

impl VarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,variance\n");
        for (l, v) in self.variances.iter().enumerate() {
            let _ = writeln!(out, "{},{}", l + 1, v);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

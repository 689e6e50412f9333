//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! report is always printed; exits nonzero if any criterion fails.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use reslstm::analysis::{closed_form_reduction, closed_form_variance, compare_kinds, variance_sweep, StackDims};
use reslstm::cells::{LayerExtras, Shortcut};
use reslstm::cli::{run_depth_sweep, summary_csv, ExperimentConfig};
use reslstm::gradcheck::{check_cell, random_instance, rel_error, CheckSpec};
use reslstm::network::{CellKind, NetworkConfig, ShortcutMode, StackedNetwork};
use reslstm::numerics::{Matrix, Vector};
use reslstm::params::ParamSet;

struct Outcome {
    passed: bool,
    /// Deterministic summary; compared across repeated runs.
    detail: String,
    elapsed: Duration,
}

fn timed(f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f();
    Outcome { passed, detail, elapsed: start.elapsed() }
}

fn gradient_exactness() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut failures = String::new();
    for kind in CellKind::ALL {
        let shortcuts: &[ShortcutMode] = match kind {
            CellKind::ResidualScaled | CellKind::ResidualUnscaled => &[ShortcutMode::Auto, ShortcutMode::Projection],
            _ => &[ShortcutMode::Auto],
        };
        for &shortcut in shortcuts {
            for layers in [1, 3] {
                for t in [1, 6] {
                    let spec = CheckSpec::new(kind, 3, 2, 2, t, 1).layers(layers).shortcut(shortcut);
                    let report = check_cell(&spec).expect("gradcheck runs");
                    checks += 1;
                    worst = worst.max(report.max_error);
                    if !report.passed {
                        let _ = write!(failures, " [{kind} {} L{layers} T{t}: {:.3e}]", shortcut.name(), report.max_error);
                    }
                }
            }
        }
    }
    (failures.is_empty(), format!("{checks} checks, max relative error {worst:.3e}{failures}"))
}

fn highway_matches_plain(seed: u64) -> f64 {
    let spec = CheckSpec::new(CellKind::Highway, 3, 2, 2, 6, seed).layers(3);
    let (mut highway, frames, _) = random_instance(&spec).unwrap();
    for layer in &mut highway.params.layers {
        if let LayerExtras::Highway(hw) = &mut layer.extras {
            hw.b_d = Vector::filled(3, -40.0);
        }
    }
    let mut plain = StackedNetwork::zeros(NetworkConfig { cell_kind: CellKind::Plain, ..highway.config }).unwrap();
    for (p, h) in plain.params.layers.iter_mut().zip(&highway.params.layers) {
        p.core = h.core.clone();
    }
    plain.params.w_out = highway.params.w_out.clone();
    plain.params.b_out = highway.params.b_out.clone();
    let a = highway.predict(&frames).unwrap();
    let b = plain.predict(&frames).unwrap();
    a.iter()
        .zip(&b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn identity_matches_explicit(kind: CellKind, seed: u64) -> bool {
    let spec = CheckSpec::new(kind, 3, 2, 2, 6, seed).layers(3);
    let (identity, frames, labels) = random_instance(&spec).unwrap();
    let mut explicit =
        StackedNetwork::zeros(NetworkConfig { shortcut: ShortcutMode::Projection, ..identity.config }).unwrap();
    for (e, i) in explicit.params.layers.iter_mut().zip(&identity.params.layers) {
        e.core = i.core.clone();
        if let (LayerExtras::Residual(er), LayerExtras::Residual(ir)) = (&mut e.extras, &i.extras) {
            if !matches!(ir.shortcut, Shortcut::Identity) {
                return false;
            }
            er.shortcut = Shortcut::Projection(Matrix::identity(2));
        }
    }
    explicit.params.w_out = identity.params.w_out.clone();
    explicit.params.b_out = identity.params.b_out.clone();
    let (la, ga) = identity.loss_and_grads(&frames, &labels, 4).unwrap();
    let (lb, gb) = explicit.loss_and_grads(&frames, &labels, 4).unwrap();
    identity.predict(&frames).unwrap() == explicit.predict(&frames).unwrap()
        && la.to_bits() == lb.to_bits()
        && ga.layers.iter().zip(&gb.layers).all(|(a, b)| a.core == b.core)
}

fn inactive_truncation_error(kind: CellKind, seed: u64) -> f64 {
    let t = 7;
    let spec = CheckSpec::new(kind, 3, 2, 2, t, seed).layers(3);
    let (net, frames, labels) = random_instance(&spec).unwrap();
    let (la, a) = net.loss_and_grads(&frames, &labels, t).unwrap();
    let (lb, b) = net.loss_and_grads(&frames, &labels, usize::MAX).unwrap();
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data.iter().zip(y.data).map(|(p, q)| rel_error(*p, *q)).collect::<Vec<_>>())
        .fold(rel_error(la, lb), f64::max)
}

fn degeneracy_equivalences() -> (bool, String) {
    let highway = (0..10).map(highway_matches_plain).fold(0.0, f64::max);
    let identity = (0..10).all(|s| {
        identity_matches_explicit(CellKind::ResidualScaled, s) && identity_matches_explicit(CellKind::ResidualUnscaled, s)
    });
    let truncation = CellKind::ALL
        .iter()
        .flat_map(|&k| (0..5).map(move |s| inactive_truncation_error(k, s)))
        .fold(0.0, f64::max);
    let passed = highway < 1e-9 && identity && truncation <= 1e-12;
    (
        passed,
        format!(
            "(a) highway vs plain max |dlogit| {highway:.3e}; (b) identity vs explicit W_h bit-exact: {identity}; \
             (c) full vs truncated max rel {truncation:.3e}"
        ),
    )
}

fn parameter_accounting() -> (bool, String) {
    let dims = StackDims { layers: 10, cells: 1024, outputs: 512, input_dim: 512, classes: 0 };
    let report = compare_kinds(dims, false);
    let formula = closed_form_reduction(1024).unwrap();
    let extras = report.highway_minus_residual / 9;
    let table = report.to_table();
    let passed = (0.09..=0.12).contains(&report.relative_reduction)
        && extras == 527_360
        && formula == 528_384
        && formula.abs_diff(extras as u64) <= 1024
        && table.contains("527360")
        && table.contains("528384");
    (
        passed,
        format!(
            "highway {} residual {} reduction {:.4}; per-layer extras {extras}, formula {formula}",
            report.highway.total, report.residual.total, report.relative_reduction
        ),
    )
}

fn variance_propagation() -> (bool, String) {
    let gate = std::f64::consts::FRAC_1_SQRT_2;
    let scaled = variance_sweep(10, gate, true, 100_000, 0).unwrap();
    let unscaled = variance_sweep(10, gate, false, 100_000, 0).unwrap();
    let scaled_ok = scaled.variances.iter().all(|v| (0.95..=1.05).contains(v));
    let worst_unscaled = unscaled
        .variances
        .iter()
        .enumerate()
        .map(|(l, v)| {
            let expected = closed_form_variance(l + 1, gate, false);
            (v - expected).abs() / expected
        })
        .fold(0.0, f64::max);
    let (lo, hi) = scaled
        .variances
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    (
        scaled_ok && worst_unscaled < 0.03,
        format!("scaled layer variances in [{lo:.4}, {hi:.4}]; unscaled max deviation {:.2}%", worst_unscaled * 100.0),
    )
}

const DEPTH_CONFIG: &str = r#"
seed = 7

[network]
cell_kind = "plain"
layers = 3
cell_size = 32
output_size = 16
init_scale = 0.5

[task]
kind = "delayed_recall"
seq_len = 50
input_dim = 16
num_classes = 8
noise_sigma = 0.1
delay = 10
num_sequences = 250
cv_fraction = 0.2

[train]
learning_rate = 0.1
bptt_len = 50
epochs = 30

[output]
dir = "depth-demo"
"#;

fn depth_demonstration() -> (bool, String) {
    let cfg = ExperimentConfig::from_toml(DEPTH_CONFIG).unwrap();
    let grid = [(CellKind::Plain, 3), (CellKind::Plain, 10), (CellKind::ResidualScaled, 3), (CellKind::ResidualScaled, 10)];
    let rows = match run_depth_sweep(&cfg, &grid, 1) {
        Ok(rows) => rows,
        Err(e) => return (false, format!("sweep failed: {e}")),
    };
    let finite = rows.iter().all(|r| r.train_ce.is_finite() && r.cv_ce.is_finite() && r.frame_err.is_finite());
    let (train, cv) = cfg.datasets().unwrap();
    let ratio = |a: usize, b: usize| rows[b].cv_ce / rows[a].cv_ce;
    let (plain, residual) = (ratio(0, 1), ratio(2, 3));
    let soft = residual <= 1.05 && plain > 1.0;
    let mut detail = format!(
        "root seed {}, {} train / {} cv sequences; seeds {:?}; cv_ce plain {:.4} -> {:.4} (x{plain:.3}), \
         residual_scaled {:.4} -> {:.4} (x{residual:.3}); soft expectation {}",
        cfg.seed,
        train.len(),
        cv.len(),
        rows.iter().map(|r| r.seed).collect::<Vec<_>>(),
        rows[0].cv_ce,
        rows[1].cv_ce,
        rows[2].cv_ce,
        rows[3].cv_ce,
        if soft { "met" } else { "not met" }
    );
    detail.push('\n');
    detail.push_str(&summary_csv(&rows));
    (finite && train.len() == 200, detail)
}

fn main() {
    let limits = [
        Some(Duration::from_secs(120)),
        None,
        Some(Duration::from_secs(1)),
        Some(Duration::from_secs(10)),
        Some(Duration::from_secs(30 * 60)),
    ];
    let names = [
        "gradient exactness",
        "degeneracy equivalences",
        "parameter accounting",
        "variance propagation",
        "depth-sweep demonstration",
    ];
    let criteria: [fn() -> (bool, String); 5] =
        [gradient_exactness, degeneracy_equivalences, parameter_accounting, variance_propagation, depth_demonstration];

    let mut all_passed = true;
    let mut runs: Vec<Vec<String>> = Vec::new();
    for round in 0..2 {
        let mut details = Vec::new();
        for (i, criterion) in criteria.iter().enumerate() {
            let outcome = timed(criterion);
            let in_time = limits[i].is_none_or(|limit| outcome.elapsed < limit);
            let passed = outcome.passed && in_time;
            if round == 0 {
                all_passed &= passed;
                let (summary, rest) = outcome.detail.split_once('\n').unwrap_or((&outcome.detail, ""));
                println!(
                    "criterion {} {}: {} ({summary}; {:.2}s{})",
                    i + 1,
                    names[i],
                    if passed { "PASS" } else { "FAIL" },
                    outcome.elapsed.as_secs_f64(),
                    if in_time { "" } else { ", over time limit" }
                );
                for line in rest.lines() {
                    println!("    {line}");
                }
            }
            details.push(outcome.detail);
        }
        runs.push(details);
    }
    let identical = runs[0] == runs[1];
    all_passed &= identical;
    println!(
        "criterion 6 determinism: {} (criteria 1-5 rerun, outputs {})",
        if identical { "PASS" } else { "FAIL" },
        if identical { "byte-identical" } else { "differ" }
    );
    if !all_passed {
        std::process::exit(1);
    }
}

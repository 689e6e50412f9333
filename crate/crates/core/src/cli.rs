//! The `reslstm` command line: experiment configs, subcommands and the
//! depth sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::Deserialize;

use crate::analysis::{compare_kinds, variance_sweep, StackDims};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::{check_cell, CheckSpec, DEFAULT_EPS, DEFAULT_THRESHOLD};
use crate::network::{CellKind, NetworkConfig, ShortcutMode, StackedNetwork, DEFAULT_INIT_SCALE};
use crate::rng::{derive_seed, stream};
use crate::tasks::{split, Dataset, TaskKind, TaskSpec};
use crate::training::{train_with_progress, write_metrics_csv, EpochMetrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub network: NetworkSection,
    pub task: TaskSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub cell_kind: CellKind,
    pub layers: usize,
    pub cell_size: usize,
    pub output_size: usize,
    #[serde(default)]
    pub shortcut: ShortcutMode,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub delay: usize,
    pub num_sequences: usize,
    pub cv_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    #[serde(default)]
    pub l2_lambda: f64,
    pub bptt_len: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_halving: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write wall-clock seconds into the metrics CSV instead of 0.
    #[serde(default)]
    pub record_time: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config(self.network.cell_kind, self.network.layers, self.seed)
            .validate()?;
        self.task_spec().validate()?;
        self.train_config(self.seed).validate()?;
        if !(self.task.cv_fraction > 0.0 && self.task.cv_fraction < 1.0) {
            return Err(Error::Config(format!(
                "cv_fraction must be in (0, 1), got {}",
                self.task.cv_fraction
            )));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            seq_len: self.task.seq_len,
            input_dim: self.task.input_dim,
            num_classes: self.task.num_classes,
            noise_sigma: self.task.noise_sigma,
            delay: self.task.delay,
            num_sequences: self.task.num_sequences,
            seed: self.seed,
        }
    }

    pub fn network_config(&self, kind: CellKind, layers: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            shortcut: self.network.shortcut,
            init_scale: self.network.init_scale,
            ..NetworkConfig::new(
                kind,
                layers,
                self.network.cell_size,
                self.network.output_size,
                self.task.input_dim,
                self.task.num_classes,
                seed,
            )
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            l2_lambda: self.train.l2_lambda,
            bptt_len: self.train.bptt_len,
            epochs: self.train.epochs,
            seed,
            lr_halving: self.train.lr_halving,
        }
    }

    /// Generated data split into (train, cv).
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = self.task_spec().generate()?;
        split(&data, self.task.cv_fraction, self.seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "reslstm", version, about = "Plain, highway and residual LSTM stacks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network from a config file.
    Train {
        config: PathBuf,
        /// Override `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        cell: CellKind,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 6)]
        t: usize,
        #[arg(long)]
        bptt: Option<usize>,
        #[arg(long, default_value = "auto")]
        shortcut: ShortcutMode,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Parameter counts per cell kind.
    Params {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        layers: usize,
        /// Include a softmax head with this many classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Monte-Carlo variance of stacked shortcut outputs.
    Variance {
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
        gate: f64,
        #[arg(long, action = ArgAction::Set, default_value_t = true)]
        scaled: bool,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell kind at 3, 5 and 10 layers.
    DepthSweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, out } => cmd_train(&config, out.as_deref()),
        Command::Gradcheck {
            cell,
            layers,
            seed,
            n,
            k,
            m,
            t,
            bptt,
            shortcut,
            eps,
            threshold,
            corrupt_backward,
        } => {
            let mut spec = CheckSpec::new(cell, n, k, m, t, seed).layers(layers).shortcut(shortcut);
            spec.bptt_len = bptt;
            spec.eps = eps;
            spec.threshold = threshold;
            spec.corrupt_backward = corrupt_backward;
            cmd_gradcheck(&spec)
        }
        Command::Params {
            n,
            m,
            d,
            layers,
            classes,
        } => cmd_params(n, m, d, layers, classes),
        Command::Variance {
            layers,
            gate,
            scaled,
            samples,
            seed,
            out,
        } => cmd_variance(layers, gate, scaled, samples, seed, out.as_deref()),
        Command::DepthSweep { config, out } => cmd_depth_sweep(&config, out.as_deref()),
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(config_path: &Path, out: Option<&Path>) -> Result<i32> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = out.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf);
    let (train_set, cv_set) = cfg.datasets()?;
    let mut net = StackedNetwork::new(cfg.network_config(cfg.network.cell_kind, cfg.network.layers, cfg.seed))?;
    println!(
        "training {} x{} on {} ({} train / {} cv sequences)",
        cfg.network.cell_kind,
        cfg.network.layers,
        cfg.task.kind,
        train_set.len(),
        cv_set.len()
    );
    let metrics = train_with_progress(
        &mut net,
        &train_set.sequences,
        &cv_set.sequences,
        &cfg.train_config(cfg.seed),
        |m| {
            println!(
                "epoch {:>3}  train_ce {:.5}  cv_ce {:.5}  frame_acc {:.4}",
                m.epoch, m.train_ce, m.cv_ce, m.frame_acc
            )
        },
    )?;
    create_dir(&dir)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &metrics, cfg.output.record_time)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &net)?;
    println!("wrote {}", dir.display());
    Ok(0)
}

pub fn cmd_gradcheck(spec: &CheckSpec) -> Result<i32> {
    let report = check_cell(spec)?;
    println!("{report}");
    Ok(if report.passed { 0 } else { 1 })
}

pub fn cmd_params(n: usize, m: usize, d: usize, layers: usize, classes: Option<usize>) -> Result<i32> {
    if n == 0 || m == 0 || d == 0 || layers == 0 {
        return Err(Error::Config("n, m, d and layers must be positive".into()));
    }
    let dims = StackDims {
        layers,
        cells: n,
        outputs: m,
        input_dim: d,
        classes: classes.unwrap_or(0),
    };
    print!("{}", compare_kinds(dims, classes.is_some()).to_table());
    Ok(0)
}

pub fn cmd_variance(
    layers: usize,
    gate: f64,
    scaled: bool,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    let report = variance_sweep(layers, gate, scaled, samples, seed)?;
    match out {
        Some(path) => {
            report.write_csv(path)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(0)
}

pub const SWEEP_KINDS: [CellKind; 3] = [CellKind::Plain, CellKind::Highway, CellKind::ResidualScaled];
pub const SWEEP_DEPTHS: [usize; 3] = [3, 5, 10];

/// Fixed grid order: kinds outer, depths inner.
pub fn sweep_grid() -> Vec<(CellKind, usize)> {
    SWEEP_KINDS
        .iter()
        .flat_map(|&k| SWEEP_DEPTHS.iter().map(move |&l| (k, l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: CellKind,
    pub layers: usize,
    /// Seed for this cell's initialization and shuffling.
    pub seed: u64,
    pub train_ce: f64,
    pub cv_ce: f64,
    pub frame_err: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Worker count from `RESLSTM_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("RESLSTM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Seed of grid cell `index`.
pub fn sweep_seed(root: u64, index: usize) -> u64 {
    derive_seed(root, stream::SWEEP_BASE + index as u64)
}

/// Trains each `(kind, layers)` cell on the same data split. Cell `i` seeds
/// its network and shuffling with [`sweep_seed`]`(root, i)`, so results do
/// not depend on `threads`.
pub fn run_depth_sweep(cfg: &ExperimentConfig, grid: &[(CellKind, usize)], threads: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (train_set, cv_set) = cfg.datasets()?;
    let run_cell = |index: usize| -> Result<SweepRow> {
        let (kind, layers) = grid[index];
        let seed = sweep_seed(cfg.seed, index);
        let mut net = StackedNetwork::new(cfg.network_config(kind, layers, seed))?;
        let metrics = train_with_progress(
            &mut net,
            &train_set.sequences,
            &cv_set.sequences,
            &cfg.train_config(seed),
            |_| {},
        )?;
        let last = metrics.last().copied().ok_or_else(|| Error::Config("no epochs".into()))?;
        eprintln!(
            "{kind} x{layers}: train_ce {:.5} cv_ce {:.5} frame_err {:.4}",
            last.train_ce,
            last.cv_ce,
            1.0 - last.frame_acc
        );
        Ok(SweepRow {
            kind,
            layers,
            seed,
            train_ce: last.train_ce,
            cv_ce: last.cv_ce,
            frame_err: 1.0 - last.frame_acc,
            metrics,
        })
    };

    let threads = threads.clamp(1, grid.len().max(1));
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..grid.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_cell(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= grid.len() {
                        break;
                    }
                    let row = run_cell(i);
                    done.lock().expect("sweep worker panicked")[i] = Some(row);
                });
            }
        });
    }
    slots
        .into_iter()
        .map(|s| s.expect("every grid cell runs"))
        .collect()
}

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,layers,train_ce,cv_ce,frame_err\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.kind, r.layers, r.train_ce, r.cv_ce, r.frame_err);
    }
    out
}

pub fn cmd_depth_sweep(config_path: &Path, out: Option<&Path>) -> Result<i32> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = out.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf);
    let rows = run_depth_sweep(&cfg, &sweep_grid(), thread_count())?;
    create_dir(&dir)?;
    for r in &rows {
        let path = dir.join(format!("metrics_{}_{}.csv", r.kind, r.layers));
        write_metrics_csv(&path, &r.metrics, cfg.output.record_time)?;
    }
    let path = dir.join(SUMMARY_FILE);
    let summary = summary_csv(&rows);
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(0)
}

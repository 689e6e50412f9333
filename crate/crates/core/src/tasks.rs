//! Synthetic frame-labelled sequence tasks.
//!
//! `noisy_embedding` is a memory-light frame classification problem: a
//! sticky Markov chain over classes, each frame a noisy copy of its class
//! embedding. `delayed_recall` is memory-heavy: frames carry a noisy
//! one-hot symbol stream and the label at `t` is the symbol from `t - k`.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::rng::{seeded_stream, standard_normal, stream};

/// Probability that the noisy-embedding class chain stays put.
pub const SELF_TRANSITION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NoisyEmbedding,
    DelayedRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NoisyEmbedding => "noisy_embedding",
            TaskKind::DelayedRecall => "delayed_recall",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy_embedding" => Ok(TaskKind::NoisyEmbedding),
            "delayed_recall" => Ok(TaskKind::DelayedRecall),
            _ => Err(Error::Config(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Frames per sequence (T).
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Recall delay k (delayed_recall only).
    pub delay: usize,
    pub num_sequences: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.input_dim == 0 || self.num_sequences == 0 {
            return Err(Error::Config("seq_len, input_dim and num_sequences must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least two classes".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.kind == TaskKind::DelayedRecall {
            if self.delay >= self.seq_len {
                return Err(Error::Config(format!(
                    "delay {} must be shorter than the sequence ({})",
                    self.delay, self.seq_len
                )));
            }
            if self.input_dim < self.symbol_count() {
                return Err(Error::Config(format!(
                    "input_dim {} cannot one-hot encode {} symbols",
                    self.input_dim,
                    self.symbol_count()
                )));
            }
        }
        Ok(())
    }

    /// Delayed recall: symbols are `0..C-1`; class `C-1` is the null label
    /// for the first `k` frames.
    pub fn symbol_count(&self) -> usize {
        self.num_classes - 1
    }

    pub fn null_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            TaskKind::NoisyEmbedding => gen_noisy_embedding(self),
            TaskKind::DelayedRecall => gen_delayed_recall(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub sequences: Vec<SequenceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// FNV-1a over every label and the bit pattern of every frame value.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |word: u64| {
            for byte in word.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for seq in &self.sequences {
            for (frame, &label) in seq.frames.iter().zip(&seq.labels) {
                eat(label as u64);
                frame.iter().for_each(|v| eat(v.to_bits()));
            }
        }
        hash
    }
}

fn noisy<R: Rng + ?Sized>(clean: &[f64], sigma: f64, rng: &mut R) -> Vector {
    clean
        .iter()
        .map(|&v| v + sigma * standard_normal(rng))
        .collect::<Vec<_>>()
        .into()
}

/// Class embeddings (one per class, unit norm) drawn first from the DATA
/// stream, followed by the sequences.
pub fn gen_noisy_embedding(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != TaskKind::NoisyEmbedding {
        return Err(Error::Config("gen_noisy_embedding needs a noisy_embedding spec".into()));
    }
    let mut rng = seeded_stream(spec.seed, stream::DATA);
    let embeddings = class_embeddings(spec.num_classes, spec.input_dim, &mut rng);
    let c = spec.num_classes;
    let sequences = (0..spec.num_sequences)
        .map(|_| {
            let mut class = rng.random_range(0..c);
            let mut frames = Vec::with_capacity(spec.seq_len);
            let mut labels = Vec::with_capacity(spec.seq_len);
            for t in 0..spec.seq_len {
                if t > 0 && rng.random::<f64>() >= SELF_TRANSITION {
                    // Jump to one of the other classes, uniformly.
                    class = (class + 1 + rng.random_range(0..c - 1)) % c;
                }
                frames.push(noisy(embeddings[class].as_slice(), spec.noise_sigma, &mut rng));
                labels.push(class);
            }
            SequenceSample { frames, labels }
        })
        .collect();
    Ok(Dataset {
        spec: *spec,
        sequences,
    })
}

/// Unit-norm Gaussian directions, one per class.
pub fn class_embeddings<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vector> {
    (0..classes)
        .map(|_| {
            let raw: Vector = (0..dim).map(|_| standard_normal(rng)).collect::<Vec<_>>().into();
            let norm = raw.norm();
            raw.scale(1.0 / norm)
        })
        .collect()
}

/// The class embeddings a noisy-embedding spec uses (same draws as the
/// generator).
pub fn noisy_embedding_centroids(spec: &TaskSpec) -> Vec<Vector> {
    let mut rng = seeded_stream(spec.seed, stream::DATA);
    class_embeddings(spec.num_classes, spec.input_dim, &mut rng)
}

pub fn gen_delayed_recall(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != TaskKind::DelayedRecall {
        return Err(Error::Config("gen_delayed_recall needs a delayed_recall spec".into()));
    }
    let mut rng = seeded_stream(spec.seed, stream::DATA);
    let symbols = spec.symbol_count();
    let sequences = (0..spec.num_sequences)
        .map(|_| {
            let stream: Vec<usize> = (0..spec.seq_len).map(|_| rng.random_range(0..symbols)).collect();
            let frames = stream
                .iter()
                .map(|&s| {
                    let mut clean = vec![0.0; spec.input_dim];
                    clean[s] = 1.0;
                    noisy(&clean, spec.noise_sigma, &mut rng)
                })
                .collect();
            let labels = (0..spec.seq_len)
                .map(|t| if t >= spec.delay { stream[t - spec.delay] } else { spec.null_class() })
                .collect();
            SequenceSample { frames, labels }
        })
        .collect();
    Ok(Dataset {
        spec: *spec,
        sequences,
    })
}

/// Seeded shuffle, then the first `round(n·cv_fraction)` sequences go to CV.
pub fn split(dataset: &Dataset, cv_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(cv_fraction > 0.0 && cv_fraction < 1.0) {
        return Err(Error::Config(format!("cv_fraction must be in (0, 1), got {cv_fraction}")));
    }
    let n = dataset.len();
    let n_cv = (n as f64 * cv_fraction).round() as usize;
    if n_cv == 0 || n_cv == n {
        return Err(Error::Config(format!(
            "splitting {n} sequences at {cv_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_stream(seed, stream::SPLIT));
    let pick = |idx: &[usize]| Dataset {
        spec: dataset.spec,
        sequences: idx.iter().map(|&i| dataset.sequences[i].clone()).collect(),
    };
    let (cv_idx, train_idx) = order.split_at(n_cv);
    Ok((pick(train_idx), pick(cv_idx)))
}

const DATASET_MAGIC: &str = "reslstm-dataset";

/// Line-oriented text form.
///
/// ```text
/// reslstm-dataset T=50 D=16 C=8 kind=delayed_recall seed=7 sigma=0.1 delay=10 sequences=2
/// 0,7,0.03,0.98,...
/// 1,7,...
/// ```
///
/// A frame line is `t,label,v1,...,vD`; `t` restarting at 0 opens the next
/// sequence. Values are printed in shortest round-trip form, so reading a
/// file back reproduces every bit.
pub fn dataset_to_text(dataset: &Dataset) -> String {
    let s = &dataset.spec;
    let mut out = format!(
        "{DATASET_MAGIC} T={} D={} C={} kind={} seed={} sigma={:?} delay={} sequences={}\n",
        s.seq_len,
        s.input_dim,
        s.num_classes,
        s.kind,
        s.seed,
        s.noise_sigma,
        s.delay,
        dataset.len()
    );
    for seq in &dataset.sequences {
        for (t, (frame, label)) in seq.frames.iter().zip(&seq.labels).enumerate() {
            let _ = write!(out, "{t},{label}");
            for v in frame.iter() {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn dataset_from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty dataset file".into(),
    })?;
    let spec_err = |msg: String| Error::Parse { line: 1, msg };
    let mut fields = header.split_whitespace();
    if fields.next() != Some(DATASET_MAGIC) {
        return Err(spec_err(format!("expected header starting with {DATASET_MAGIC}")));
    }
    let mut kv = std::collections::HashMap::new();
    for field in fields {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| spec_err(format!("malformed header field {field:?}")))?;
        kv.insert(k, v);
    }
    fn get<T: FromStr>(kv: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing or invalid header field {key}"),
            })
    }
    let spec = TaskSpec {
        kind: get::<String>(&kv, "kind")?.parse()?,
        seq_len: get(&kv, "T")?,
        input_dim: get(&kv, "D")?,
        num_classes: get(&kv, "C")?,
        noise_sigma: get(&kv, "sigma")?,
        delay: get(&kv, "delay")?,
        num_sequences: get(&kv, "sequences")?,
        seed: get(&kv, "seed")?,
    };

    let mut sequences: Vec<SequenceSample> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| perr("bad frame index".into()))?;
        let label: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| perr("bad label".into()))?;
        if label >= spec.num_classes {
            return Err(perr(format!("label {label} out of range for {} classes", spec.num_classes)));
        }
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| perr(format!("bad value {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != spec.input_dim {
            return Err(perr(format!("{} values, expected {}", values.len(), spec.input_dim)));
        }
        if t == 0 {
            sequences.push(SequenceSample {
                frames: Vec::new(),
                labels: Vec::new(),
            });
        }
        let seq = sequences
            .last_mut()
            .filter(|s| s.len() == t)
            .ok_or_else(|| perr(format!("frame index {t} out of order")))?;
        seq.frames.push(values.into());
        seq.labels.push(label);
    }
    if sequences.len() != spec.num_sequences {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header promises {} sequences, found {}", spec.num_sequences, sequences.len()),
        });
    }
    Ok(Dataset { spec, sequences })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_text(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_text(&text)
}

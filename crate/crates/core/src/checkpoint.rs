//! Text checkpoint of a [`StackedNetwork`].
//!
//! ```text
//! reslstm-checkpoint 1
//! cell_kind residual_scaled
//! layers 3
//! ...
//! seed 42
//! tensor layer0.w_xi 32 16
//! <one line per row, space separated>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a write/read cycle
//! restores every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, StackedNetwork};
use crate::params::ParamSet;

const MAGIC: &str = "reslstm-checkpoint 1";

pub fn to_text(net: &StackedNetwork) -> String {
    let c = &net.config;
    let mut out = format!("{MAGIC}\n");
    let _ = writeln!(out, "cell_kind {}", c.cell_kind);
    let _ = writeln!(out, "layers {}", c.layers);
    let _ = writeln!(out, "cell_size {}", c.cell_size);
    let _ = writeln!(out, "output_size {}", c.output_size);
    let _ = writeln!(out, "input_dim {}", c.input_dim);
    let _ = writeln!(out, "num_classes {}", c.num_classes);
    let _ = writeln!(out, "shortcut {}", c.shortcut.name());
    let _ = writeln!(out, "init_scale {:?}", c.init_scale);
    let _ = writeln!(out, "seed {}", c.seed);
    for t in net.tensors() {
        let (rows, cols) = t.shape;
        let _ = writeln!(out, "tensor {} {rows} {cols}", t.name);
        for row in t.data.chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn from_text(text: &str) -> Result<StackedNetwork> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("unexpected end of checkpoint, expected {what}"),
        })
    };

    let (line, magic) = next("header")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            line,
            msg: format!("expected {MAGIC:?}"),
        });
    }

    let mut field = |key: &str| -> Result<(usize, String)> {
        let (line, text) = next(key)?;
        match text.split_once(' ') {
            Some((k, v)) if k == key => Ok((line, v.to_string())),
            _ => Err(Error::Parse {
                line,
                msg: format!("expected field {key}"),
            }),
        }
    };
    fn parse<T: std::str::FromStr>((line, v): (usize, String)) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid value {v:?}"),
        })
    }
    let cell_kind = field("cell_kind")?.1.parse()?;
    let layers = parse(field("layers")?)?;
    let cell_size = parse(field("cell_size")?)?;
    let output_size = parse(field("output_size")?)?;
    let input_dim = parse(field("input_dim")?)?;
    let num_classes = parse(field("num_classes")?)?;
    let shortcut = field("shortcut")?.1.parse()?;
    let init_scale = parse(field("init_scale")?)?;
    let seed = parse(field("seed")?)?;
    let config = NetworkConfig {
        cell_kind,
        layers,
        cell_size,
        output_size,
        input_dim,
        num_classes,
        shortcut,
        init_scale,
        seed,
    };
    let mut net = StackedNetwork::zeros(config)?;

    for t in net.tensors_mut() {
        let (line, header) = next("tensor header")?;
        let expected = format!("tensor {} {} {}", t.name, t.shape.0, t.shape.1);
        if header != expected {
            return Err(Error::Parse {
                line,
                msg: format!("expected {expected:?}, found {header:?}"),
            });
        }
        let cols = t.shape.1;
        for row in t.data.chunks_mut(cols) {
            let (line, text) = next("tensor row")?;
            let values: Vec<f64> = text
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line,
                    msg: format!("bad number: {e}"),
                })?;
            if values.len() != cols {
                return Err(Error::Parse {
                    line,
                    msg: format!("{} values in a row of width {cols}", values.len()),
                });
            }
            row.copy_from_slice(&values);
        }
    }
    let (line, end) = next("end marker")?;
    if end != "end" {
        return Err(Error::Parse {
            line,
            msg: "expected end marker".into(),
        });
    }
    Ok(net)
}

pub fn save(path: &Path, net: &StackedNetwork) -> Result<()> {
    std::fs::write(path, to_text(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<StackedNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

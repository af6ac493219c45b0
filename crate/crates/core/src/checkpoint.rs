//! Text checkpoint format.
//!
//! ```text
//! svtriage-checkpoint 1
//! spec.input_dim=80
//! spec.num_layers=3
//! spec.cells=128
//! spec.projection_dim=64
//! spec.output_dim=64
//! meta.<key>=<value>            (zero or more)
//! blocks=<count>
//! <name> <rows> <cols>
//! <cols space-separated values>   (repeated <rows> times)
//! ...
//! ```
//!
//! Blocks, in order: for each layer `l`, `layer<l>.w_<gate>` (cells x
//! (input + projection)) for gates input, forget, cell, output; then
//! `layer<l>.b_<gate>` (1 x cells) for the same gates; then
//! `layer<l>.projection` (projection x cells). After the layers come
//! `output.weight`, `output.bias`, `ge2e.w` and `ge2e.b`. Values are
//! single-precision, written in shortest round-trip decimal form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dvector::{NetworkSpec, Parameters, GATE_NAMES};
use crate::error::{Error, Result};

const MAGIC: &str = "svtriage-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub meta: BTreeMap<String, String>,
}

struct Block<'a> {
    name: String,
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

fn blocks(params: &Parameters) -> Vec<Block<'_>> {
    let spec = params.spec;
    let (c, p) = (spec.cells, spec.projection_dim);
    let mut out = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let cols = layer.gates.cols;
        for (g, gate) in GATE_NAMES.iter().enumerate() {
            out.push(Block {
                name: format!("layer{l}.w_{gate}"),
                rows: c,
                cols,
                data: &layer.gates.data[g * c * cols..(g + 1) * c * cols],
            });
        }
        for (g, gate) in GATE_NAMES.iter().enumerate() {
            out.push(Block {
                name: format!("layer{l}.b_{gate}"),
                rows: 1,
                cols: c,
                data: &layer.bias[g * c..(g + 1) * c],
            });
        }
        out.push(Block {
            name: format!("layer{l}.projection"),
            rows: p,
            cols: c,
            data: &layer.projection.data,
        });
    }
    out.push(Block {
        name: "output.weight".into(),
        rows: spec.output_dim,
        cols: p,
        data: &params.output.data,
    });
    out.push(Block {
        name: "output.bias".into(),
        rows: 1,
        cols: spec.output_dim,
        data: &params.output_bias,
    });
    out.push(Block {
        name: "ge2e.w".into(),
        rows: 1,
        cols: 1,
        data: std::slice::from_ref(&params.ge2e_scale),
    });
    out.push(Block {
        name: "ge2e.b".into(),
        rows: 1,
        cols: 1,
        data: std::slice::from_ref(&params.ge2e_offset),
    });
    out
}

impl Checkpoint {
    pub fn new(params: Parameters) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn spec(&self) -> NetworkSpec {
        self.params.spec
    }

    pub fn to_text(&self) -> String {
        let spec = self.params.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "spec.input_dim={}", spec.input_dim);
        let _ = writeln!(out, "spec.num_layers={}", spec.num_layers);
        let _ = writeln!(out, "spec.cells={}", spec.cells);
        let _ = writeln!(out, "spec.projection_dim={}", spec.projection_dim);
        let _ = writeln!(out, "spec.output_dim={}", spec.output_dim);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta.{k}={v}");
        }
        let blocks = blocks(&self.params);
        let _ = writeln!(out, "blocks={}", blocks.len());
        for b in blocks {
            let _ = writeln!(out, "{} {} {}", b.name, b.rows, b.cols);
            for row in b.data.chunks_exact(b.cols) {
                let mut first = true;
                for v in row {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{}", *v as f32);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, format!("unexpected end of file, expected {what}")))
        };
        let (n, magic) = next("header")?;
        if magic != MAGIC {
            return Err(Error::parse(source, n, "not a checkpoint file"));
        }

        let mut dims = [0usize; 5];
        let names = ["input_dim", "num_layers", "cells", "projection_dim", "output_dim"];
        for (slot, name) in dims.iter_mut().zip(names) {
            let (n, line) = next(name)?;
            let value = line
                .strip_prefix("spec.")
                .and_then(|l| l.strip_prefix(name))
                .and_then(|l| l.strip_prefix('='))
                .ok_or_else(|| Error::parse(source, n, format!("expected spec.{name}")))?;
            *slot = value
                .parse()
                .map_err(|_| Error::parse(source, n, format!("invalid spec.{name}")))?;
        }
        let spec = NetworkSpec {
            input_dim: dims[0],
            num_layers: dims[1],
            cells: dims[2],
            projection_dim: dims[3],
            output_dim: dims[4],
        };
        spec.validate()?;

        let mut meta = BTreeMap::new();
        let declared = loop {
            let (n, line) = next("blocks")?;
            if let Some(kv) = line.strip_prefix("meta.") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::parse(source, n, "expected meta.key=value"))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(count) = line.strip_prefix("blocks=") {
                break count
                    .parse::<usize>()
                    .map_err(|_| Error::parse(source, n, "invalid block count"))?;
            } else {
                return Err(Error::parse(source, n, format!("unexpected line: {line}")));
            }
        };

        let mut params = Parameters::zeros(spec);
        let layout: Vec<(String, usize, usize)> = blocks(&params)
            .into_iter()
            .map(|b| (b.name, b.rows, b.cols))
            .collect();
        if declared != layout.len() {
            return Err(Error::parse(
                source,
                0,
                format!("{declared} blocks declared, spec needs {}", layout.len()),
            ));
        }
        let mut values = Vec::with_capacity(params.len());
        for (name, rows, cols) in layout {
            let (n, header) = next(&name)?;
            let expected = format!("{name} {rows} {cols}");
            if header != expected {
                return Err(Error::parse(
                    source,
                    n,
                    format!("expected block header `{expected}`, found `{header}`"),
                ));
            }
            for _ in 0..rows {
                let (n, line) = next("block row")?;
                let before = values.len();
                for tok in line.split(' ') {
                    let v: f32 = tok
                        .parse()
                        .map_err(|_| Error::parse(source, n, format!("invalid value {tok}")))?;
                    if !v.is_finite() {
                        return Err(Error::parse(source, n, "non-finite parameter"));
                    }
                    values.push(v as f64);
                }
                if values.len() - before != cols {
                    return Err(Error::parse(source, n, format!("expected {cols} values")));
                }
            }
        }
        // Block order differs from the in-memory order only in how gate
        // weights and biases are grouped, so scatter through the names.
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = &values[cursor..cursor + len];
            cursor += len;
            s.to_vec()
        };
        let c = spec.cells;
        for layer in &mut params.layers {
            let w = take(4 * c * layer.gates.cols);
            layer.gates.data.copy_from_slice(&w);
            let b = take(4 * c);
            layer.bias.copy_from_slice(&b);
            let pr = take(layer.projection.data.len());
            layer.projection.data.copy_from_slice(&pr);
        }
        let ow = take(params.output.data.len());
        params.output.data.copy_from_slice(&ow);
        let ob = take(params.output_bias.len());
        params.output_bias.copy_from_slice(&ob);
        params.ge2e_scale = take(1)[0];
        params.ge2e_offset = take(1)[0];
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(&name, e))?;
        Self::from_text(&text, &name)
    }
}

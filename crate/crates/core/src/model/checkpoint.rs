//! Plain-text checkpoints. Floats are written in Rust's shortest
//! round-trip form, so save followed by load is bit-exact.
//!
//! ```text
//! movepred-checkpoint 1
//! config {...json...}
//! seed 42
//! norm <4 mins> <4 maxes>
//! trainable 0110...
//! running <layers>
//! mean <w> v...
//! var <w> v...
//! param <name> <rank> <dims...>
//! v v v ...
//! end
//! ```

use super::{Model, ModelConfig, ParamStore, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::PriceNorm;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "movepred-checkpoint 1";

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let io = |e| Error::io("checkpoint", e);
    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "config {}", serde_json::to_string(&model.config)?).map_err(io)?;
    writeln!(w, "seed {}", model.seed).map_err(io)?;
    writeln!(w, "norm {} {}", join(&model.norm.min), join(&model.norm.max)).map_err(io)?;
    let mask: String = model.trainable_rows.iter().map(|&t| if t { '1' } else { '0' }).collect();
    writeln!(w, "trainable {mask}").map_err(io)?;
    writeln!(w, "running {}", model.running.len()).map_err(io)?;
    for r in &model.running {
        writeln!(w, "mean {} {}", r.mean.len(), join(&r.mean)).map_err(io)?;
        writeln!(w, "var {} {}", r.var.len(), join(&r.var)).map_err(io)?;
    }
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "param {name} {} {}", dims.len(), dims.join(" ")).map_err(io)?;
        writeln!(w, "{}", join(t.data())).map_err(io)?;
    }
    writeln!(w, "end").map_err(io)?;
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f, &path.display().to_string())
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line: usize,
    name: String,
}

impl<R: Read> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(&self.name, e)),
            None => Err(self.err("unexpected end of checkpoint")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(&self.name, self.line, msg)
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let l = self.next()?;
        match l.strip_prefix(key).and_then(|r| r.strip_prefix(' ').or(Some(r).filter(|r| r.is_empty()))) {
            Some(rest) => Ok(rest.to_string()),
            None => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn floats(&self, s: &str, expected: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = s
            .split_ascii_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad float: {e}")))?;
        if v.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn usize(&self, s: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(format!("bad integer `{s}`")))
    }

    /// `<n> v...` with exactly `n` values.
    fn counted(&self, s: &str) -> Result<Vec<f64>> {
        let (n, rest) = s.split_once(' ').unwrap_or((s, ""));
        let n = self.usize(n)?;
        self.floats(rest, n)
    }
}

pub fn read_checkpoint<R: Read>(reader: R, name: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: BufReader::new(reader).lines(),
        line: 0,
        name: name.to_string(),
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a checkpoint"));
    }
    let config: ModelConfig = serde_json::from_str(&lines.keyed("config")?)
        .map_err(|e| lines.err(format!("config: {e}")))?;
    let seed = lines.keyed("seed")?;
    let seed: u64 = seed.parse().map_err(|_| lines.err("bad seed"))?;
    let norm = lines.keyed("norm")?;
    let n = lines.floats(&norm, 8)?;
    let norm = PriceNorm {
        min: [n[0], n[1], n[2], n[3]],
        max: [n[4], n[5], n[6], n[7]],
    };
    let mask = lines.keyed("trainable")?;
    let trainable_rows = mask
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(lines.err("trainable mask must be 0/1")),
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = lines.keyed("running")?;
    let layers = lines.usize(&layers)?;
    let mut running = Vec::with_capacity(layers);
    for _ in 0..layers {
        let m = lines.keyed("mean")?;
        let mean = lines.counted(&m)?;
        let v = lines.keyed("var")?;
        let var = lines.counted(&v)?;
        running.push(RunningStats { mean, var });
    }
    let mut params = ParamStore::new();
    loop {
        let l = lines.next()?;
        if l == "end" {
            break;
        }
        let mut it = l.split_ascii_whitespace();
        if it.next() != Some("param") {
            return Err(lines.err("expected `param` or `end`"));
        }
        let pname = it.next().ok_or_else(|| lines.err("missing parameter name"))?.to_string();
        let rank = lines.usize(it.next().unwrap_or(""))?;
        let dims = it.map(|d| lines.usize(d)).collect::<Result<Vec<_>>>()?;
        if dims.len() != rank {
            return Err(lines.err(format!("rank {rank} but {} dims", dims.len())));
        }
        let data_line = lines.next()?;
        let data = lines.floats(&data_line, dims.iter().product())?;
        let t = Tensor::new(dims, data).map_err(|e| lines.err(e.to_string()))?;
        params.insert(pname, t);
    }
    let model = Model {
        config,
        params,
        running,
        norm,
        seed,
        trainable_rows,
    };
    check_layout(&model)?;
    Ok(model)
}

/// Every expected parameter is present with the expected shape.
pub fn check_layout(model: &Model) -> Result<()> {
    let cfg = &model.config;
    cfg.validate()?;
    let table = model
        .params
        .get("embedding")
        .ok_or_else(|| Error::Checkpoint("missing embedding table".into()))?;
    if table.shape() != [cfg.vocab_rows, cfg.embed_dim] {
        return Err(Error::Checkpoint(format!(
            "embedding table shape {:?} does not match config",
            table.shape()
        )));
    }
    for spec in super::param_specs(cfg) {
        match model.params.get(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {}", spec.name))),
        }
    }
    if model.trainable_rows.len() != cfg.vocab_rows {
        return Err(Error::Checkpoint("trainable mask length does not match vocabulary".into()));
    }
    Ok(())
}

//! Finite-difference checks over every differentiable op and over small
//! instances of the LSTM cell, both paths and the full model.

use crate::error::{Result, TensorError};
use crate::model::layers::lstm_step;
use crate::model::{
    head_forward, path_features, HeadMode, LstmParams, ModelConfig, ModelKind, ModelParams,
    ParamStore,
};
use crate::record::DayRecord;
use crate::rng::{self, streams};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::text::{embed_day, EmbeddingTable, PriceNorm};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::time::{Duration, Instant};

/// Maximum relative error accepted by the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

pub type OpFn = fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>;

/// One elementary op under test: name, input shapes and the op itself.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub op: OpFn,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, op: OpFn) -> OpCase {
    OpCase { name, shapes, op }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        case("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        case("hadamard", vec![vec![5], vec![5]], |g, v| g.hadamard(v[0], v[1])),
        case("add_row", vec![vec![3, 2], vec![2]], |g, v| g.add_row(v[0], v[1])),
        case("scale", vec![vec![4]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("sigmoid", vec![vec![6]], |g, v| Ok(g.sigmoid(v[0]))),
        case("tanh", vec![vec![6]], |g, v| Ok(g.tanh(v[0]))),
        case("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        case("concat0", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat(&[v[0], v[1]], 0)),
        case("concat1", vec![vec![2, 3], vec![2, 1]], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("conv1d", vec![vec![7, 3], vec![3, 3, 2], vec![2]], |g, v| {
            g.conv1d(v[0], v[1], v[2], 1)
        }),
        case("conv1d_stride2", vec![vec![8, 2], vec![3, 2, 3], vec![3]], |g, v| {
            g.conv1d(v[0], v[1], v[2], 2)
        }),
        case("maxpool1d", vec![vec![7, 3]], |g, v| g.maxpool1d(v[0], 2, 2)),
        case("pad_rows", vec![vec![3, 2]], |g, v| g.pad_rows(v[0], 2, 1)),
        case("slice_rows", vec![vec![4, 2]], |g, v| g.slice_rows(v[0], 1, 2)),
        case("row_scale", vec![vec![3, 2], vec![3]], |g, v| g.row_scale(v[0], v[1])),
        case("weighted_mean_rows", vec![vec![3, 2], vec![3]], |g, v| {
            let s = g.sigmoid(v[1]);
            g.weighted_mean_rows(v[0], s)
        }),
        case("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        case("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], &[6])),
        case("sum", vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
        case("mean", vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
        case("bce", vec![vec![4]], |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &[1.0, 0.0, 0.0, 1.0])
        }),
        case("mask", vec![vec![4]], |g, v| g.mask(v[0], vec![2.0, 0.0, 2.0, 0.0])),
        case("clamp", vec![vec![6]], |g, v| Ok(g.clamp(v[0], -1.0, 1.0))),
        case("batch_norm_train", vec![vec![4, 3], vec![3], vec![3]], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5, None)
        }),
        case("batch_norm_infer", vec![vec![2, 3], vec![3], vec![3]], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5, Some((&[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])))
        }),
    ]
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output coordinate gets a distinct adjoint.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> std::result::Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let h = g.hadamard(out, w)?;
    Ok(g.sum(h))
}

/// Checks one op at inputs drawn uniformly from `[-2, 2]`.
pub fn check_op(c: &OpCase, seed: u64) -> std::result::Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Tensor> = c.shapes.iter().map(|s| Tensor::uniform(s, 2.0, &mut rng)).collect();
    grad_check(
        |g, v| {
            let out = (c.op)(g, v)?;
            project(g, out, seed)
        },
        &points,
        SUITE_TOLERANCE,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<SuiteCase>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn record(name: impl Into<String>, r: &GradCheckReport) -> SuiteCase {
    SuiteCase {
        name: name.into(),
        coordinates: r.coordinates,
        max_rel_error: r.max_rel_error,
        passed: r.passed,
    }
}

/// LSTM cell with input width 4 and hidden width 3; `x`, `h`, `c` and all
/// twelve parameters are checked.
pub fn check_lstm_step(seed: u64) -> std::result::Result<GradCheckReport, TensorError> {
    let (d, h) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![
        Tensor::uniform(&[1, d], 1.0, &mut rng),
        Tensor::uniform(&[1, h], 1.0, &mut rng),
        Tensor::uniform(&[1, h], 1.0, &mut rng),
    ];
    let mut names = Vec::new();
    for gate in ["i", "f", "c", "o"] {
        for (k, shape) in [("w", vec![d, h]), ("u", vec![h, h]), ("b", vec![h])] {
            names.push(format!("p.{k}_{gate}"));
            points.push(Tensor::uniform(&shape, 1.0, &mut rng));
        }
    }
    let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i + 3)).collect();
    grad_check(
        |g, v| {
            let p = LstmParams::lookup("p", &mut |n| Ok(v[index[n]]))?;
            let (h1, c1) = lstm_step(g, v[0], v[1], v[2], &p)?;
            let both = g.concat(&[h1, c1], 1)?;
            project(g, both, seed)
        },
        &points,
        SUITE_TOLERANCE,
    )
}

/// Three random days over a vocabulary of `rows`; one day has more tokens
/// than `max_len` and one has none.
fn sample_days(rows: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<DayRecord> {
    let lens = [max_len / 2, max_len + 3, 0];
    let start = NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date");
    lens.iter()
        .enumerate()
        .map(|(i, &n)| {
            let open = rng.gen_range(50.0..150.0);
            let close: f64 = open * rng.gen_range(0.95..1.05);
            DayRecord {
                date: start + chrono::Duration::days(i as i64),
                open,
                high: open.max(close) * 1.01,
                low: open.min(close) * 0.99,
                close,
                adj_close: close,
                volume: rng.gen_range(1e5..1e6),
                tokens: (0..n).map(|_| rng.gen_range(0..rows)).collect(),
                covid_flag: false,
                label: Some(i as u8 % 2),
            }
        })
        .collect()
}

/// BCE of the training-mode model (dropout and batch norm active) over three
/// days, checked against every parameter including the embedding table.
pub fn check_model(kind: ModelKind, seed: u64) -> Result<GradCheckReport> {
    let (rows, width) = (10, 6);
    let cfg = ModelConfig::tiny(kind, rows, width);
    cfg.validate()?;
    let table = EmbeddingTable::random(rows, width, seed);
    let store: ParamStore =
        crate::model::init_params(&cfg, &table, &mut rng::stream(seed, streams::PARAM_INIT))?;
    // Larger weights than the training initialisation keep gradients well
    // above the relative-error floor.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Tensor> = store
        .iter()
        .map(|(_, t)| Tensor::uniform(t.shape(), 0.5, &mut rng))
        .collect();
    let index: HashMap<String, usize> = store.names().enumerate().map(|(i, n)| (n.to_string(), i)).collect();
    let days = sample_days(rows, cfg.max_len, &mut rng);
    let norm = PriceNorm::fit(&days);
    let targets: Vec<f64> = days.iter().map(|d| d.label.unwrap_or(0) as f64).collect();
    let report = grad_check(
        |g, v| {
            let p = ModelParams::lookup(&cfg, &mut |n| {
                index.get(n).map(|&i| v[i]).ok_or_else(|| TensorError::Argument {
                    op: "gradsuite",
                    msg: format!("missing `{n}`"),
                })
            })?;
            let proj = p.price_proj.unwrap_or(p.embedding);
            let mut feats = Vec::new();
            for d in &days {
                let seq = embed_day(g, d, p.embedding, proj, &norm, cfg.max_len, cfg.price_fusion)?;
                feats.push(path_features(g, seq, &cfg, &p)?);
            }
            let x = g.concat(&feats, 0)?;
            let mut drop = rng::stream(seed, streams::DROPOUT);
            let out = head_forward(g, x, &cfg, &p.head, HeadMode::Train { rng: &mut drop })?;
            g.bce(out.preds, &targets)
        },
        &points,
        SUITE_TOLERANCE,
    )?;
    Ok(report)
}

/// Runs every op case, the LSTM cell and the three model kinds.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for c in op_cases() {
        cases.push(record(c.name, &check_op(&c, seed)?));
    }
    cases.push(record("lstm_step", &check_lstm_step(seed)?));
    for (name, kind) in [
        ("cnn_lg", ModelKind::CnnLg),
        ("cnn_blstm", ModelKind::CnnBlstm),
        ("hybrid", ModelKind::Hybrid),
    ] {
        cases.push(record(name, &check_model(kind, seed)?));
    }
    Ok(SuiteReport {
        seed,
        tolerance: SUITE_TOLERANCE,
        cases,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_seed() {
        let r = gradient_suite(42).unwrap();
        for c in &r.cases {
            assert!(c.passed, "{c:?}");
        }
        assert!(r.cases.iter().any(|c| c.name == "hybrid" && c.coordinates > 1000));
    }
}

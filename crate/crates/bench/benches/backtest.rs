use criterion::{criterion_group, criterion_main, Criterion};
use movepred_bench::{price_walk, rng};
use movepred_core::backtest::{monte_carlo, simulate, ScorePoint, StrategyConfig, StrategyKind};
use movepred_core::indicators::{macd, MACD_FAST, MACD_SIGNAL, MACD_SLOW};
use rand::Rng;
use std::collections::BTreeMap;
use std::hint::black_box;

fn scores(bars: &[movepred_core::PriceBar], seed: u64) -> Vec<ScorePoint> {
    let mut r = rng(seed);
    bars.iter()
        .map(|b| ScorePoint {
            date: b.date,
            score: r.gen_range(0.0..1.0),
        })
        .collect()
}

fn simulate_1000(c: &mut Criterion) {
    let bars = price_walk(1000, 1);
    let s = scores(&bars, 2);
    let cfg = StrategyConfig::new(StrategyKind::SixtyForty);
    c.bench_function("simulate_6040_1000_days", |b| {
        b.iter(|| black_box(simulate(&bars, &s, &cfg).unwrap()))
    });
}

fn mc(c: &mut Criterion) {
    let cfg = StrategyConfig::new(StrategyKind::FiftyFifty);
    let ledgers: BTreeMap<String, _> = (0..20)
        .map(|i| {
            let bars = price_walk(250, 10 + i);
            let s = scores(&bars, 100 + i);
            (format!("T{i:02}"), simulate(&bars, &s, &cfg).unwrap())
        })
        .collect();
    c.bench_function("monte_carlo_100_runs_pick_6_of_20", |b| {
        b.iter(|| black_box(monte_carlo(&ledgers, 100, 6, 7).unwrap()))
    });
}

fn macd_1000(c: &mut Criterion) {
    let closes: Vec<f64> = price_walk(1000, 3).iter().map(|b| b.adj_close).collect();
    c.bench_function("macd_1000_days", |b| {
        b.iter(|| black_box(macd(&closes, MACD_FAST, MACD_SLOW, MACD_SIGNAL).unwrap()))
    });
}

criterion_group!(benches, simulate_1000, mc, macd_1000);
criterion_main!(benches);

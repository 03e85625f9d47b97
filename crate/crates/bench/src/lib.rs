//! Synthetic inputs shared by the benchmarks.

use chrono::NaiveDate;
use movepred_core::{DayRecord, PriceBar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Consecutive calendar days from 2020-01-01 with a random-walk close.
pub fn price_walk(n: usize, seed: u64) -> Vec<PriceBar> {
    let mut r = rng(seed);
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let mut p = 100.0;
    (0..n)
        .map(|i| {
            p *= 1.0 + r.gen_range(-0.02..0.02);
            PriceBar {
                date: start + chrono::Duration::days(i as i64),
                open: p,
                high: p * 1.01,
                low: p * 0.99,
                close: p,
                adj_close: p,
                volume: r.gen_range(1e5..1e6),
            }
        })
        .collect()
}

/// Price days with `tokens` random token ids each, alternating labels.
pub fn days(n: usize, vocab_rows: usize, tokens: usize, seed: u64) -> Vec<DayRecord> {
    let mut r = rng(seed);
    price_walk(n, seed)
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut d = DayRecord::from_bar(b);
            d.tokens = (0..tokens).map(|_| r.gen_range(0..vocab_rows)).collect();
            d.label = Some((i % 2) as u8);
            d
        })
        .collect()
}

use chrono::{Datelike, NaiveDate, Weekday};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn movepred(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_movepred"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MOVEPRED_OUT")
        .output()
        .expect("spawn movepred")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path.as_ref()).unwrap()).unwrap()
}

fn weekdays(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
    let mut out = Vec::new();
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

fn write_prices(path: &Path, dates: &[NaiveDate], closes: &[f64]) {
    let mut s = String::from("Date,Open,High,Low,Close,AdjClose,Volume\n");
    for (d, p) in dates.iter().zip(closes) {
        s.push_str(&format!("{d},{p},{p},{p},{p},{p},1000\n"));
    }
    fs::write(path, s).unwrap();
}

fn wavy(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| 50.0 + 5.0 * (0.7 * i as f64 + phase).sin() + 0.1 * i as f64).collect()
}

const WORDS: [&str; 8] = ["rally", "growth", "bull", "earnings", "crash", "virus", "bear", "selloff"];

fn write_tweets(path: &Path, dates: &[NaiveDate]) {
    let mut s = String::new();
    for (i, d) in dates.iter().enumerate() {
        for k in 0..2 {
            let text: Vec<&str> = (0..4).map(|j| WORDS[(i * 3 + j + k) % WORDS.len()]).collect();
            s.push_str(&format!(
                "{{\"date\":\"{d}\",\"text\":\"{}\",\"retweets\":{}}}\n",
                text.join(" "),
                k
            ));
        }
    }
    fs::write(path, s).unwrap();
}

/// `prices/<T>.csv` for each ticker plus `tweets.jsonl`, `n` weekdays from 2020-01-02.
fn fixture(n: usize, tickers: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("prices")).unwrap();
    let dates = weekdays(n);
    for (k, t) in tickers.iter().enumerate() {
        write_prices(&dir.path().join("prices").join(format!("{t}.csv")), &dates, &wavy(n, k as f64));
    }
    write_tweets(&dir.path().join("tweets.jsonl"), &dates);
    dir
}

fn build(dir: &Path, out: &str) -> Output {
    movepred(
        &[
            "build-dataset",
            "--prices",
            "prices",
            "--ticker",
            "AAA",
            "--tweets",
            "tweets.jsonl",
            "--min-count",
            "1",
            "--out",
            out,
        ],
        dir,
    )
}

#[test]
fn twelve_days_give_seven_labels() {
    let fx = fixture(12, &["AAA"]);
    ok(&build(fx.path(), "ds"));
    let s = json(fx.path().join("ds/summary.json"));
    assert_eq!(s["trading_days"], 12);
    assert_eq!(s["labeled_days"], 7);
    for f in ["dataset.jsonl", "labeled.csv", "vocab.txt", "meta.json", "run.json", "correlation.csv"] {
        assert!(fx.path().join("ds").join(f).exists(), "{f} missing");
    }
}

#[test]
fn build_dataset_is_deterministic() {
    let fx = fixture(30, &["AAA", "BBB"]);
    ok(&build(fx.path(), "a"));
    ok(&build(fx.path(), "b"));
    for f in ["dataset.jsonl", "labeled.csv", "vocab.txt", "summary.json", "run.json"] {
        let a = fs::read(fx.path().join("a").join(f)).unwrap();
        let b = fs::read(fx.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn missing_tweets_names_the_path() {
    let fx = fixture(12, &["AAA"]);
    let out = movepred(
        &["build-dataset", "--prices", "prices", "--tweets", "absent.jsonl", "--out", "ds"],
        fx.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn several_tickers_need_a_choice() {
    let fx = fixture(12, &["AAA", "BBB"]);
    let out = movepred(
        &["build-dataset", "--prices", "prices", "--tweets", "tweets.jsonl", "--out", "ds"],
        fx.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ticker"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(movepred(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(movepred(&["train"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = movepred(&["--config", "bad.toml", "gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(movepred(&["--help"], dir.path()).status.code(), Some(0));
}

fn oracle_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let dates = weekdays(5);
    let prices = dir.join("p.csv");
    write_prices(&prices, &dates, &[10.0, 11.0, 12.0, 11.0, 13.0]);
    let scores = dir.join("s.csv");
    let mut s = String::from("Date,Score\n");
    for (d, v) in dates.iter().zip([0.7, 0.5, 0.3, 0.65, 0.9]) {
        s.push_str(&format!("{d},{v}\n"));
    }
    fs::write(&scores, s).unwrap();
    (prices, scores)
}

#[test]
fn backtest_matches_hand_accounting() {
    let dir = TempDir::new().unwrap();
    let (p, s) = oracle_inputs(dir.path());
    let out = movepred(
        &["backtest", "--prices", p.to_str().unwrap(), "--scores", s.to_str().unwrap(), "--strategy", "6040", "--out", "bt"],
        dir.path(),
    );
    ok(&out);
    // BUY 10, HOLD, SELL 12, BUY 11, forced SELL 13; 100 shares, 0.3% per fill
    let gross = 100.0 * (12.0 - 10.0) + 100.0 * (13.0 - 11.0);
    let cost = 0.003 * 100.0 * (10.0 + 12.0 + 11.0 + 13.0);
    let summary = json(dir.path().join("bt/summary.json"));
    let profit = summary["profit"].as_f64().unwrap();
    assert!((profit - (gross - cost)).abs() < 1e-9, "{profit}");
    assert_eq!(summary["n_trades"], 4);
    assert_eq!(summary["forced_close"], true);
    let ledger = fs::read_to_string(dir.path().join("bt/ledger.csv")).unwrap();
    let actions: Vec<&str> = ledger.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(actions, ["BUY", "HOLD", "SELL", "BUY", "SELL"]);
    assert_eq!(fs::read_to_string(dir.path().join("bt/returns.csv")).unwrap().lines().count(), 5);
    let trades = fs::read_to_string(dir.path().join("bt/trades.csv")).unwrap();
    let r: Vec<f64> = trades.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let hand = [(1200.0 - 1000.0 - 3.6 - 3.0) / 1000.0, (1300.0 - 1100.0 - 3.9 - 3.3) / 1100.0];
    assert_eq!(r.len(), 2);
    for (a, b) in r.iter().zip(hand) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn config_and_env_precedence() {
    let dir = TempDir::new().unwrap();
    let (p, s) = oracle_inputs(dir.path());
    fs::write(dir.path().join("run.toml"), "seed = 5\nout = \"from-config\"\n[strategy]\nkind = \"5050\"\n").unwrap();
    let args = ["--config", "run.toml", "backtest", "--prices", p.to_str().unwrap(), "--scores", s.to_str().unwrap()];
    ok(&movepred(&args, dir.path()));
    let run = json(dir.path().join("from-config/run.json"));
    assert_eq!(run["seed"], 5);
    assert_eq!(run["settings"]["strategy"]["kind"], "fifty_fifty");

    let out = Command::new(env!("CARGO_BIN_EXE_movepred"))
        .args(args)
        .args(["--seed", "9", "--strategy", "6040"])
        .env("MOVEPRED_OUT", "from-env")
        .current_dir(dir.path())
        .output()
        .unwrap();
    ok(&out);
    let run = json(dir.path().join("from-env/run.json"));
    assert_eq!(run["seed"], 9);
    assert_eq!(run["settings"]["strategy"]["kind"], "sixty_forty");
}

fn score_dir(dir: &Path, tickers: &[&str], n: usize) {
    fs::create_dir_all(dir.join("scores")).unwrap();
    for (k, t) in tickers.iter().enumerate() {
        let mut s = String::from("Date,Score\n");
        for (i, d) in weekdays(n).iter().enumerate() {
            let v = 0.5 + 0.5 * ((i * (k + 2)) as f64 * 0.9).sin();
            s.push_str(&format!("{d},{v}\n"));
        }
        fs::write(dir.join("scores").join(format!("{t}.csv")), s).unwrap();
    }
}

#[test]
fn monte_carlo_repeats_under_a_seed() {
    let tickers = ["AAA", "BBB", "CCC", "DDD"];
    let fx = fixture(40, &tickers);
    score_dir(fx.path(), &tickers, 40);
    let run = |out: &str| {
        ok(&movepred(
            &["mc", "--prices", "prices", "--scores", "scores", "--runs", "1", "--pick", "2", "--seed", "7", "--out", out],
            fx.path(),
        ))
    };
    run("a");
    run("b");
    for f in ["mc.csv", "mc_summary.json", "tickers.json"] {
        assert_eq!(
            fs::read(fx.path().join("a").join(f)).unwrap(),
            fs::read(fx.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let csv = fs::read_to_string(fx.path().join("a/mc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn pick_larger_than_universe_is_a_data_error() {
    let tickers = ["AAA", "BBB"];
    let fx = fixture(20, &tickers);
    score_dir(fx.path(), &tickers, 20);
    let out = movepred(&["mc", "--prices", "prices", "--scores", "scores", "--pick", "3", "--out", "o"], fx.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_train_predict_backtest_ttest() {
    let fx = fixture(60, &["AAA"]);
    let p = fx.path();
    ok(&build(p, "ds"));
    let split = ["--train-end", "2020-02-14", "--val-end", "2020-02-28", "--test-end", "2020-03-31"];
    let train = |out: &str| {
        let mut args = vec!["train", "--dataset", "ds", "--tiny", "--embed-dim", "6", "--epochs", "2", "--out", out];
        args.extend(split);
        ok(&movepred(&args, p));
    };
    train("tr");
    let metrics = json(p.join("tr/metrics.json"));
    assert_eq!(metrics["epochs_run"], 2);
    assert!(metrics["train"]["accuracy"].as_f64().is_some());

    ok(&movepred(&["evaluate", "--dataset", "ds", "--checkpoint", "tr/model.ckpt", "--split", "train", "--train-end", "2020-02-14", "--out", "ev"], p));
    let ev = json(p.join("ev/metrics.json"));
    assert_eq!(ev["accuracy"], metrics["train"]["accuracy"]);

    ok(&movepred(&["predict", "--dataset", "ds", "--checkpoint", "tr/model.ckpt", "--out", "pr"], p));
    assert_eq!(fs::read_to_string(p.join("pr/scores.csv")).unwrap().lines().count(), 61);

    ok(&movepred(&["backtest", "--prices", "prices/AAA.csv", "--scores", "pr/scores.csv", "--strategy", "5050", "--out", "bt"], p));
    ok(&movepred(&["baseline", "--prices", "prices/AAA.csv", "--indicator", "macd", "--out", "bl"], p));
    assert!(p.join("bl/macd.csv").exists());
    ok(&movepred(&["ttest", "--a", "bt", "--b", "bl", "--returns", "daily", "--out", "tt"], p));
    let t = json(p.join("tt/ttest.json"));
    assert_eq!(t["n_a"], 59);
    assert_eq!(t["column"], "R");
    assert!(t["p_two_sided"].as_f64().is_some());

    // identical seeds reproduce the checkpoint byte for byte
    train("tr2");
    assert_eq!(fs::read(p.join("tr/model.ckpt")).unwrap(), fs::read(p.join("tr2/model.ckpt")).unwrap());
}

#[test]
fn diverging_training_exits_three() {
    let fx = fixture(40, &["AAA"]);
    ok(&build(fx.path(), "ds"));
    let out = movepred(
        &["train", "--dataset", "ds", "--tiny", "--embed-dim", "6", "--epochs", "3", "--lr", "1e300", "--out", "tr"],
        fx.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(fx.path().join("tr/model.ckpt").exists());
}

#[test]
fn constant_returns_leave_t_test_undefined() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("a.csv"), "R\n0\n0\n0\n").unwrap();
    fs::write(dir.path().join("b.csv"), "R\n0\n0\n").unwrap();
    ok(&movepred(&["ttest", "--a", "a.csv", "--b", "b.csv", "--column", "R", "--out", "tt"], dir.path()));
    let t = json(dir.path().join("tt/ttest.json"));
    assert_eq!(t["defined"], false);
    assert!(t["t"].is_null());
}

#[test]
fn t_test_on_per_trade_returns() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("x")).unwrap();
    fs::create_dir(dir.path().join("y")).unwrap();
    let xs = [0.05, 0.02, 0.04, 0.03];
    let ys = [0.01, -0.01, 0.0, 0.02, -0.02];
    let write = |d: &str, v: &[f64]| {
        let mut s = String::from("Entry,Exit,Return\n");
        for r in v {
            s.push_str(&format!("2020-01-02,2020-01-03,{r}\n"));
        }
        fs::write(dir.path().join(d).join("trades.csv"), s).unwrap();
    };
    write("x", &xs);
    write("y", &ys);
    ok(&movepred(&["ttest", "--a", "x", "--b", "y", "--out", "tt"], dir.path()));
    let t = json(dir.path().join("tt/ttest.json"));
    // Welch statistic by hand
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let mu = m(v);
        v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64
    };
    let expected = (m(&xs) - m(&ys)) / (var(&xs) / 4.0 + var(&ys) / 5.0).sqrt();
    assert!((t["t"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(t["returns"], "trade");

    fs::write(dir.path().join("y/trades.csv"), "Entry,Exit,Return\n2020-01-02,2020-01-03,0.1\n").unwrap();
    let out = movepred(&["ttest", "--a", "x", "--b", "y", "--out", "tt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    ok(&movepred(&["gradcheck", "--out", "gc"], dir.path()));
    let r = json(dir.path().join("gc/gradcheck.json"));
    let cases = r["cases"].as_array().unwrap();
    assert!(cases.len() > 20);
    assert!(cases.iter().all(|c| c["passed"] == true));
}

use super::checkpoint;
use super::layers::{blstm_forward, global_attention, local_attention, lstm_step};
use super::*;
use crate::rng::stream;
use crate::text::PriceFusion;
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rand_tensor(shape: &[usize], rng: &mut StreamRng, scale: f64) -> Tensor {
    Tensor::uniform(shape, scale, rng)
}

fn lstm_tensors(d: usize, h: usize, rng: &mut StreamRng) -> LstmParams<Tensor> {
    let mut r = |s: &[usize]| rand_tensor(s, rng, 1.0);
    LstmParams {
        w_i: r(&[d, h]),
        u_i: r(&[h, h]),
        b_i: r(&[h]),
        w_f: r(&[d, h]),
        u_f: r(&[h, h]),
        b_f: r(&[h]),
        w_c: r(&[d, h]),
        u_c: r(&[h, h]),
        b_c: r(&[h]),
        w_o: r(&[d, h]),
        u_o: r(&[h, h]),
        b_o: r(&[h]),
    }
}

fn leaf_lstm(g: &mut Graph, p: &LstmParams<Tensor>) -> LstmParams<Var> {
    let mut l = |t: &Tensor| g.leaf(t.clone());
    LstmParams {
        w_i: l(&p.w_i),
        u_i: l(&p.u_i),
        b_i: l(&p.b_i),
        w_f: l(&p.w_f),
        u_f: l(&p.u_f),
        b_f: l(&p.b_f),
        w_c: l(&p.w_c),
        u_c: l(&p.u_c),
        b_c: l(&p.b_c),
        w_o: l(&p.w_o),
        u_o: l(&p.u_o),
        b_o: l(&p.b_o),
    }
}

/// `x W + h U + b` for one hidden unit `k`, written out as sums.
fn affine(x: &[f64], h: &[f64], w: &Tensor, u: &Tensor, b: &Tensor, k: usize) -> f64 {
    let hid = b.len();
    let mut s = b.data()[k];
    for (j, xv) in x.iter().enumerate() {
        s += xv * w.data()[j * hid + k];
    }
    for (j, hv) in h.iter().enumerate() {
        s += hv * u.data()[j * hid + k];
    }
    s
}

fn ref_lstm_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams<Tensor>) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let mut hn = vec![0.0; hid];
    let mut cn = vec![0.0; hid];
    for k in 0..hid {
        let i = sig(affine(x, h, &p.w_i, &p.u_i, &p.b_i, k));
        let f = sig(affine(x, h, &p.w_f, &p.u_f, &p.b_f, k));
        let cc = affine(x, h, &p.w_c, &p.u_c, &p.b_c, k).tanh();
        let o = sig(affine(x, h, &p.w_o, &p.u_o, &p.b_o, k));
        cn[k] = f * c[k] + i * cc;
        hn[k] = o * cn[k].tanh();
    }
    (hn, cn)
}

fn zero_lstm(d: usize, h: usize) -> LstmParams<Tensor> {
    let z = |s: &[usize]| Tensor::zeros(s);
    LstmParams {
        w_i: z(&[d, h]),
        u_i: z(&[h, h]),
        b_i: z(&[h]),
        w_f: z(&[d, h]),
        u_f: z(&[h, h]),
        b_f: z(&[h]),
        w_c: z(&[d, h]),
        u_c: z(&[h, h]),
        b_c: z(&[h]),
        w_o: z(&[d, h]),
        u_o: z(&[h, h]),
        b_o: z(&[h]),
    }
}

fn run_step(p: &LstmParams<Tensor>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let pv = leaf_lstm(&mut g, p);
    let xv = g.leaf(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
    let hv = g.leaf(Tensor::matrix(1, h.len(), h.to_vec()).unwrap());
    let cv = g.leaf(Tensor::matrix(1, c.len(), c.to_vec()).unwrap());
    let (hn, cn) = lstm_step(&mut g, xv, hv, cv, &pv).unwrap();
    (g.value(hn).data().to_vec(), g.value(cn).data().to_vec())
}

#[test]
fn lstm_zero_weights() {
    let p = zero_lstm(3, 2);
    let (h, c) = run_step(&p, &[0.3, -1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]);
    assert_eq!(h, vec![0.0, 0.0]);
    assert_eq!(c, vec![0.0, 0.0]);
    let (h, c) = run_step(&p, &[0.3, -1.0, 2.0], &[0.0, 0.0], &[1.0, 1.0]);
    for k in 0..2 {
        assert!((c[k] - 0.5).abs() < 1e-12);
        assert!((h[k] - 0.5 * 0.5f64.tanh()).abs() < 1e-12);
    }
    assert!((h[0] - 0.2311).abs() < 1e-4);
}

#[test]
fn lstm_step_matches_reference() {
    let mut rng = stream(3, "lstm");
    for _ in 0..20 {
        let p = lstm_tensors(3, 4, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gh, gc) = run_step(&p, &x, &h, &c);
        let (rh, rc) = ref_lstm_step(&x, &h, &c, &p);
        for k in 0..4 {
            assert!((gh[k] - rh[k]).abs() < 1e-12);
            assert!((gc[k] - rc[k]).abs() < 1e-12);
        }
    }
}

fn run_blstm(p: &LstmParams<Tensor>, q: &LstmParams<Tensor>, seq: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let pv = leaf_lstm(&mut g, p);
    let qv = leaf_lstm(&mut g, q);
    let s = g.leaf(seq.clone());
    let out = blstm_forward(&mut g, s, &pv, &qv).unwrap();
    g.value(out.output).clone()
}

fn reverse_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().unwrap();
    let mut data = Vec::with_capacity(r * c);
    for i in (0..r).rev() {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(r, c, data).unwrap()
}

#[test]
fn blstm_matches_reference_passes() {
    let mut rng = stream(4, "blstm");
    let p = lstm_tensors(2, 3, &mut rng);
    let q = lstm_tensors(2, 3, &mut rng);
    let seq = rand_tensor(&[5, 2], &mut rng, 1.0);
    let out = run_blstm(&p, &q, &seq);
    assert_eq!(out.shape(), &[5, 6]);
    let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
    for t in 0..5 {
        (h, c) = ref_lstm_step(seq.row(t), &h, &c, &p);
        for k in 0..3 {
            assert!((out.at2(t, k) - h[k]).abs() < 1e-12);
        }
    }
    let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
    for t in (0..5).rev() {
        (h, c) = ref_lstm_step(seq.row(t), &h, &c, &q);
        for k in 0..3 {
            assert!((out.at2(t, 3 + k) - h[k]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// With both directions sharing weights, reversing the input reverses
    /// the output rows and swaps the two halves.
    #[test]
    fn blstm_reversal_symmetry(seed in any::<u64>(), len in 1usize..7) {
        let mut rng = stream(seed, "rev");
        let p = lstm_tensors(2, 3, &mut rng);
        let seq = rand_tensor(&[len, 2], &mut rng, 2.0);
        let a = run_blstm(&p, &p, &seq);
        let b = run_blstm(&p, &p, &reverse_rows(&seq));
        for t in 0..len {
            for k in 0..3 {
                prop_assert!((a.at2(t, k) - b.at2(len - 1 - t, 3 + k)).abs() < 1e-12);
                prop_assert!((a.at2(t, 3 + k) - b.at2(len - 1 - t, k)).abs() < 1e-12);
            }
        }
    }
}

fn run_local(seq: &Tensor, w: &Tensor, b: f64) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let s = g.leaf(seq.clone());
    let p = LocalAttentionParams {
        weight: g.leaf(w.clone()),
        bias: g.leaf(Tensor::scalar(b)),
    };
    let (o, sc) = local_attention(&mut g, s, &p).unwrap();
    (g.value(o).clone(), g.value(sc).clone())
}

fn run_global(seq: &Tensor, w: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let s = g.leaf(seq.clone());
    let p = GlobalAttentionParams {
        weight: g.leaf(w.clone()),
        bias: g.leaf(b.clone()),
    };
    let (o, sc) = global_attention(&mut g, s, &p).unwrap();
    (g.value(o).clone(), g.value(sc).clone())
}

#[test]
fn local_attention_brute_force() {
    let mut rng = stream(5, "lal");
    for window in [1usize, 3, 5] {
        let (l, c) = (7, 3);
        let seq = rand_tensor(&[l, c], &mut rng, 1.0);
        let w = rand_tensor(&[window, c], &mut rng, 1.0);
        let b = 0.3;
        let (out, scores) = run_local(&seq, &w, b);
        let half = (window - 1) / 2;
        for i in 0..l {
            let mut s = b;
            for k in 0..window {
                let r = i as isize + k as isize - half as isize;
                if r < 0 || r >= l as isize {
                    continue;
                }
                for j in 0..c {
                    s += w.at2(k, j) * seq.at2(r as usize, j);
                }
            }
            let s = sig(s);
            assert!((scores.data()[i] - s).abs() < 1e-12);
            for j in 0..c {
                assert!((out.at2(i, j) - s * seq.at2(i, j)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn local_attention_identities() {
    let mut rng = stream(6, "lal");
    let seq = rand_tensor(&[6, 4], &mut rng, 2.0);
    let (out, scores) = run_local(&seq, &Tensor::zeros(&[5, 4]), 0.0);
    assert!(scores.data().iter().all(|&s| (s - 0.5).abs() < 1e-12));
    for (o, x) in out.data().iter().zip(seq.data()) {
        assert!((o - 0.5 * x).abs() < 1e-12);
    }
    let (out, _) = run_local(&seq, &Tensor::zeros(&[5, 4]), 20.0);
    for (o, x) in out.data().iter().zip(seq.data()) {
        assert!((o - x).abs() < 1e-8);
    }
}

#[test]
fn even_window_is_rejected() {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::zeros(&[4, 2]));
    let p = LocalAttentionParams {
        weight: g.leaf(Tensor::zeros(&[2, 2])),
        bias: g.leaf(Tensor::scalar(0.0)),
    };
    assert!(local_attention(&mut g, s, &p).is_err());
}

#[test]
fn global_attention_brute_force() {
    let mut rng = stream(7, "gal");
    let (l, c) = (5, 3);
    let seq = rand_tensor(&[l, c], &mut rng, 1.0);
    let w = rand_tensor(&[l * c, l], &mut rng, 1.0);
    let b = rand_tensor(&[l], &mut rng, 1.0);
    let (out, scores) = run_global(&seq, &w, &b);
    for i in 0..l {
        let mut s = b.data()[i];
        for r in 0..l {
            for j in 0..c {
                s += w.at2(r * c + j, i) * seq.at2(r, j);
            }
        }
        let s = sig(s);
        assert!((scores.data()[i] - s).abs() < 1e-12);
        for j in 0..c {
            assert!((out.at2(i, j) - s * seq.at2(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn global_attention_identities() {
    let mut rng = stream(8, "gal");
    let seq = rand_tensor(&[4, 3], &mut rng, 2.0);
    let (out, scores) = run_global(&seq, &Tensor::zeros(&[12, 4]), &Tensor::zeros(&[4]));
    assert!(scores.data().iter().all(|&s| (s - 0.5).abs() < 1e-12));
    for (o, x) in out.data().iter().zip(seq.data()) {
        assert!((o - 0.5 * x).abs() < 1e-12);
    }
    let (out, _) = run_global(&seq, &Tensor::zeros(&[12, 4]), &Tensor::full(&[4], 20.0));
    for (o, x) in out.data().iter().zip(seq.data()) {
        assert!((o - x).abs() < 1e-8);
    }
}

#[test]
fn global_attention_pads_short_sequences() {
    let mut rng = stream(9, "gal");
    let seq = rand_tensor(&[3, 2], &mut rng, 1.0);
    let w = rand_tensor(&[10, 5], &mut rng, 1.0);
    let b = rand_tensor(&[5], &mut rng, 1.0);
    let (_, scores) = run_global(&seq, &w, &b);
    assert_eq!(scores.shape(), &[3, 1]);
    for i in 0..3 {
        let mut s = b.data()[i];
        for r in 0..3 {
            for j in 0..2 {
                s += w.at2(r * 2 + j, i) * seq.at2(r, j);
            }
        }
        assert!((scores.data()[i] - sig(s)).abs() < 1e-12);
    }
    let long = rand_tensor(&[6, 2], &mut rng, 1.0);
    let mut g = Graph::new();
    let s = g.leaf(long);
    let p = GlobalAttentionParams {
        weight: g.leaf(w),
        bias: g.leaf(b),
    };
    assert!(global_attention(&mut g, s, &p).is_err());
}

fn day(tokens: Vec<usize>, price: f64) -> DayRecord {
    DayRecord {
        date: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
        open: price,
        high: price + 1.0,
        low: price - 1.0,
        close: price,
        adj_close: price,
        volume: 1.0,
        tokens,
        covid_flag: false,
        label: None,
    }
}

fn tiny_model(kind: ModelKind) -> Model {
    let cfg = ModelConfig::tiny(kind, 9, 4);
    let table = EmbeddingTable::random(9, 4, 2);
    let norm = PriceNorm {
        min: [0.0; 4],
        max: [10.0; 4],
    };
    Model::new(cfg, &table, norm, 11, true).unwrap()
}

#[test]
fn every_kind_predicts_in_unit_interval() {
    for kind in [ModelKind::Hybrid, ModelKind::CnnLg, ModelKind::CnnBlstm] {
        let m = tiny_model(kind);
        let days = vec![day(vec![1, 2, 3], 5.0), day(vec![], 6.0), day((0..30).map(|i| i % 9).collect(), 4.0)];
        let p = m.predict(&days).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)), "{kind:?}: {p:?}");
        assert_eq!(p, m.predict(&days).unwrap());
    }
}

#[test]
fn relu_head_is_clipped() {
    let mut m = tiny_model(ModelKind::CnnLg);
    m.config.head = Head::ReluClipped;
    m.params.insert("out.bias", Tensor::vector(vec![5.0]));
    let p = m.predict(&[day(vec![1], 5.0)]).unwrap();
    assert_eq!(p, vec![1.0]);
    m.params.insert("out.bias", Tensor::vector(vec![-5.0]));
    let p = m.predict(&[day(vec![1], 5.0)]).unwrap();
    assert_eq!(p, vec![0.0]);
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = tiny_model(ModelKind::Hybrid);
    assert!(m.predict(&[day(vec![9], 5.0)]).is_err());
}

#[test]
fn price_fusion_none_uses_text_only() {
    let mut cfg = ModelConfig::tiny(ModelKind::CnnLg, 9, 4);
    cfg.price_fusion = PriceFusion::None;
    let table = EmbeddingTable::random(9, 4, 2);
    let m = Model::new(cfg, &table, PriceNorm::default(), 1, true).unwrap();
    assert!(m.params.get("price_proj").is_none());
    let a = m.predict(&[day(vec![1, 2], 5.0)]).unwrap();
    let b = m.predict(&[day(vec![1, 2], 9.0)]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frozen_rows_get_no_gradient() {
    let cfg = ModelConfig::tiny(ModelKind::CnnLg, 4, 3);
    let table = EmbeddingTable::from_matrix(
        Tensor::uniform(&[4, 3], 0.5, &mut stream(1, "e")),
        vec![true, false, true, false],
    )
    .unwrap();
    let m = Model::new(cfg, &table, PriceNorm::default(), 3, false).unwrap();
    let mut g = Graph::new();
    let mut rng = stream(1, "d");
    let f = m.forward(&mut g, &[&day(vec![0, 1, 2, 3], 0.5)], Some(&mut rng)).unwrap();
    let loss = g.bce(f.preds, &[1.0]).unwrap();
    g.backward(loss).unwrap();
    let grads = m.gradients(&g, &f.bound);
    let e = &grads[0];
    assert!(e.row(0).iter().all(|&x| x == 0.0));
    assert!(e.row(2).iter().all(|&x| x == 0.0));
    assert!(e.row(1).iter().any(|&x| x != 0.0));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    for kind in [ModelKind::Hybrid, ModelKind::CnnBlstm] {
        let mut m = tiny_model(kind);
        m.running[0].mean[0] = 0.1 + 0.2;
        m.running[0].var[1] = 1.0 / 3.0;
        m.norm.max[2] = std::f64::consts::PI;
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&m, &mut buf).unwrap();
        let back = checkpoint::read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in back.params.iter().zip(m.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let days = vec![day(vec![1, 2], 3.0)];
        assert_eq!(back.predict(&days).unwrap(), m.predict(&days).unwrap());
    }
}

#[test]
fn corrupted_checkpoint_reports_line() {
    let m = tiny_model(ModelKind::CnnLg);
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let bad = text.replacen("param lg.lal.weight 2 3 4", "param lg.lal.weight 2 3 5", 1);
    let err = checkpoint::read_checkpoint(bad.as_bytes(), "mem").unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    let truncated = &text[..text.len() / 2];
    assert!(checkpoint::read_checkpoint(truncated.as_bytes(), "mem").is_err());
}

#[test]
fn running_stats_update_with_momentum() {
    let mut r = RunningStats::new(2);
    r.update(&[1.0, 2.0], &[3.0, 5.0], 0.9);
    assert!((r.mean[0] - 0.1).abs() < 1e-15);
    assert!((r.mean[1] - 0.2).abs() < 1e-15);
    assert!((r.var[0] - 1.2).abs() < 1e-15);
    assert!((r.var[1] - 1.4).abs() < 1e-15);
}

use super::params::{ConvParams, DenseParams, GlobalAttentionParams, LocalAttentionParams, LstmParams};
use crate::error::TensorError;
use crate::tensor::{Activation, Graph, Tensor, Var};

fn rows_cols(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
    match g.value(v).shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            shape: s.to_vec(),
        }),
    }
}

/// Scores every row from the `window` rows centred on it (zero-padded at the
/// ends) with one shared weight matrix, then rescales the rows.
///
/// Returns `(weighted [L × C], scores [L × 1])`.
pub fn local_attention(
    g: &mut Graph,
    seq: Var,
    p: &LocalAttentionParams<Var>,
) -> Result<(Var, Var), TensorError> {
    let (_, c) = rows_cols(g, seq, "local_attention")?;
    let window = match g.value(p.weight).shape() {
        [w, ch] if *ch == c => *w,
        [_, ch] => return Err(TensorError::dim("local_attention", "channel", c, *ch)),
        s => {
            return Err(TensorError::Rank {
                op: "local_attention",
                shape: s.to_vec(),
            })
        }
    };
    if window % 2 == 0 {
        return Err(TensorError::Argument {
            op: "local_attention",
            msg: format!("window must be odd, got {window}"),
        });
    }
    let half = (window - 1) / 2;
    let padded = g.pad_rows(seq, half, half)?;
    let kernel = g.reshape(p.weight, &[window, c, 1])?;
    let logits = g.conv1d(padded, kernel, p.bias, 1)?;
    let scores = g.sigmoid(logits);
    let weighted = g.row_scale(seq, scores)?;
    Ok((weighted, scores))
}

/// Scores of a global attention layer over `seq` (`[L × C]`), shape `[L × 1]`.
///
/// Each position owns a full `[P × C]` weight slice over the sequence; a
/// sequence shorter than `P` is zero-padded before scoring.
pub fn global_scores(
    g: &mut Graph,
    seq: Var,
    p: &GlobalAttentionParams<Var>,
) -> Result<Var, TensorError> {
    let (l, c) = rows_cols(g, seq, "global_attention")?;
    let positions = g.value(p.bias).len();
    if l > positions {
        return Err(TensorError::dim("global_attention", "length", positions, l));
    }
    let wshape = g.value(p.weight).shape().to_vec();
    if wshape != [positions * c, positions] {
        return Err(TensorError::dim(
            "global_attention",
            "weight",
            positions * c,
            wshape.first().copied().unwrap_or(0),
        ));
    }
    let full = if l < positions {
        g.pad_rows(seq, 0, positions - l)?
    } else {
        seq
    };
    let flat = g.reshape(full, &[1, positions * c])?;
    let logits = g.matmul(flat, p.weight)?;
    let logits = g.add_row(logits, p.bias)?;
    let scores = g.sigmoid(logits);
    let column = g.reshape(scores, &[positions, 1])?;
    if l < positions {
        g.slice_rows(column, 0, l)
    } else {
        Ok(column)
    }
}

/// Rows rescaled by their global scores. Returns `(weighted, scores)`.
pub fn global_attention(
    g: &mut Graph,
    seq: Var,
    p: &GlobalAttentionParams<Var>,
) -> Result<(Var, Var), TensorError> {
    let scores = global_scores(g, seq, p)?;
    let weighted = g.row_scale(seq, scores)?;
    Ok((weighted, scores))
}

/// Score-weighted mean of the rows, `[1 × C]`. Returns `(pooled, scores)`.
pub fn global_attention_mean(
    g: &mut Graph,
    seq: Var,
    p: &GlobalAttentionParams<Var>,
) -> Result<(Var, Var), TensorError> {
    let scores = global_scores(g, seq, p)?;
    let pooled = g.weighted_mean_rows(seq, scores)?;
    Ok((pooled, scores))
}

/// Valid convolution followed by tanh.
pub fn conv_tanh(g: &mut Graph, seq: Var, p: &ConvParams<Var>) -> Result<Var, TensorError> {
    let z = g.conv1d(seq, p.kernel, p.bias, 1)?;
    Ok(g.tanh(z))
}

/// Max over all rows, `[1 × C]`.
pub fn global_max_pool(g: &mut Graph, seq: Var) -> Result<Var, TensorError> {
    let (l, _) = rows_cols(g, seq, "global_max_pool")?;
    g.maxpool1d(seq, l, l)
}

pub fn dense(g: &mut Graph, x: Var, p: &DenseParams<Var>) -> Result<Var, TensorError> {
    let z = g.matmul(x, p.weight)?;
    g.add_row(z, p.bias)
}

/// One LSTM step on row vectors `x [1 × D]`, `h, c [1 × H]`.
///
/// ```text
/// i = σ(x W_i + h U_i + b_i)    f = σ(x W_f + h U_f + b_f)
/// c̃ = tanh(x W_c + h U_c + b_c) o = σ(x W_o + h U_o + b_o)
/// c' = f ⊙ c + i ⊙ c̃            h' = o ⊙ tanh(c')
/// ```
/// Returns `(h', c')`.
pub fn lstm_step(
    g: &mut Graph,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmParams<Var>,
) -> Result<(Var, Var), TensorError> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, act: Activation| {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        let s = g.add_row(s, b)?;
        Ok::<_, TensorError>(g.activation(s, act))
    };
    let i = gate(g, p.w_i, p.u_i, p.b_i, Activation::Sigmoid)?;
    let f = gate(g, p.w_f, p.u_f, p.b_f, Activation::Sigmoid)?;
    let cand = gate(g, p.w_c, p.u_c, p.b_c, Activation::Tanh)?;
    let o = gate(g, p.w_o, p.u_o, p.b_o, Activation::Sigmoid)?;
    let fc = g.hadamard(f, c)?;
    let ic = g.hadamard(i, cand)?;
    let c_next = g.add(fc, ic)?;
    let tc = g.tanh(c_next);
    let h_next = g.hadamard(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs one direction over `seq`; returns the hidden state per position in
/// sequence order.
fn lstm_pass(
    g: &mut Graph,
    seq: Var,
    p: &LstmParams<Var>,
    reverse: bool,
) -> Result<Vec<Var>, TensorError> {
    let (l, _) = rows_cols(g, seq, "lstm")?;
    let hidden = g.value(p.b_i).len();
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let x = g.slice_rows(seq, t, 1)?;
        (h, c) = lstm_step(g, x, h, c, p)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional LSTM from zero states. Output row `t` is
/// `[h_fwd(t), h_bwd(t)]`, shape `[L × 2H]`. Also returns the per-position
/// states of each direction.
pub fn blstm_forward(
    g: &mut Graph,
    seq: Var,
    fwd: &LstmParams<Var>,
    bwd: &LstmParams<Var>,
) -> Result<BlstmOutput, TensorError> {
    let hf = lstm_pass(g, seq, fwd, false)?;
    let hb = lstm_pass(g, seq, bwd, true)?;
    let mut rows = Vec::with_capacity(hf.len());
    for (&a, &b) in hf.iter().zip(&hb) {
        rows.push(g.concat(&[a, b], 1)?);
    }
    let output = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat(&rows, 0)?
    };
    Ok(BlstmOutput {
        output,
        forward: hf,
        backward: hb,
    })
}

#[derive(Debug, Clone)]
pub struct BlstmOutput {
    pub output: Var,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

use super::config::{AttentionMode, BlstmReadout, Head, ModelConfig};
use super::layers::{
    blstm_forward, conv_tanh, dense, global_attention, global_attention_mean, global_max_pool,
    local_attention,
};
use super::params::{CnnBlstmParams, CnnLgParams, HeadParams, ModelParams};
use crate::rng::StreamRng;
use crate::error::TensorError;
use crate::tensor::{Graph, Var};
use rand::Rng;

/// Path output plus the attention scores computed on the way.
#[derive(Debug, Clone)]
pub struct PathOutput {
    /// `[1 × features]`
    pub features: Var,
    pub scores: Vec<Var>,
}

/// Local attention, conv + tanh, max-pool, global attention, then either the
/// flattened sequence or the concatenated max-pooled convolutions over it.
pub fn cnn_lg_forward(
    g: &mut Graph,
    seq: Var,
    cfg: &ModelConfig,
    p: &CnnLgParams<Var>,
) -> Result<PathOutput, TensorError> {
    let c = &cfg.cnn_lg;
    let (x, s_local) = local_attention(g, seq, &p.lal)?;
    let x = conv_tanh(g, x, &p.conv)?;
    let x = g.maxpool1d(x, c.pool_window, c.pool_stride)?;
    let (x, s_global) = global_attention(g, x, &p.gal)?;
    let features = if p.gal_convs.is_empty() {
        let n = g.value(x).len();
        g.reshape(x, &[1, n])?
    } else {
        let mut parts = Vec::with_capacity(p.gal_convs.len());
        for conv in &p.gal_convs {
            let y = conv_tanh(g, x, conv)?;
            parts.push(global_max_pool(g, y)?);
        }
        g.concat(&parts, 1)?
    };
    Ok(PathOutput {
        features,
        scores: vec![s_local, s_global],
    })
}

/// conv + tanh, global attention, optional second conv + attention, optional
/// global max-pool, BLSTM and the configured readout.
pub fn cnn_blstm_forward(
    g: &mut Graph,
    seq: Var,
    cfg: &ModelConfig,
    p: &CnnBlstmParams<Var>,
) -> Result<PathOutput, TensorError> {
    let c = &cfg.cnn_blstm;
    let x = conv_tanh(g, seq, &p.conv1)?;
    let (mut x, s1) = global_attention(g, x, &p.att1)?;
    let mut scores = vec![s1];
    if let (Some(conv2), Some(att2)) = (&p.conv2, &p.att2) {
        let y = conv_tanh(g, x, conv2)?;
        let (y, s2) = match c.second_attention {
            AttentionMode::Reweight => global_attention(g, y, att2)?,
            AttentionMode::WeightedMean => global_attention_mean(g, y, att2)?,
        };
        scores.push(s2);
        x = y;
    }
    if c.global_pool {
        x = global_max_pool(g, x)?;
    }
    let out = blstm_forward(g, x, &p.fwd, &p.bwd)?;
    let last = out.forward.len() - 1;
    let features = match c.readout {
        BlstmReadout::LastRow => g.concat(&[out.forward[last], out.backward[last]], 1)?,
        BlstmReadout::FinalStates => g.concat(&[out.forward[last], out.backward[0]], 1)?,
    };
    Ok(PathOutput { features, scores })
}

/// Concatenated features of the enabled paths for one embedded sequence.
pub fn path_features(
    g: &mut Graph,
    seq: Var,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(2);
    if let Some(lg) = &p.lg {
        parts.push(cnn_lg_forward(g, seq, cfg, lg)?.features);
    }
    if let Some(bl) = &p.blstm {
        parts.push(cnn_blstm_forward(g, seq, cfg, bl)?.features);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 1)
    }
}

/// Batch-norm statistics carried between batches.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`
    pub fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub const BN_EPSILON: f64 = 1e-5;

pub enum HeadMode<'a> {
    /// Dropout masks drawn from `rng`; batch norm on batch statistics.
    Train { rng: &'a mut StreamRng },
    /// No dropout; batch norm on the running statistics.
    Infer { running: &'a [RunningStats] },
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `[B × 1]`
    pub preds: Var,
    /// Training-mode batch norm nodes, one per hidden layer.
    pub bn_nodes: Vec<Var>,
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut StreamRng) -> Result<Var, TensorError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mask(x, mask)
}

/// Hidden tanh layers (each optionally batch-normalised and followed by
/// dropout in training) and the single output neuron.
pub fn head_forward(
    g: &mut Graph,
    features: Var,
    cfg: &ModelConfig,
    p: &HeadParams<Var>,
    mut mode: HeadMode<'_>,
) -> Result<HeadOutput, TensorError> {
    let mut x = features;
    let mut bn_nodes = Vec::new();
    if p.dense.is_empty() {
        if let HeadMode::Train { rng } = &mut mode {
            x = dropout(g, x, cfg.dropout, rng)?;
        }
    }
    for (i, layer) in p.dense.iter().enumerate() {
        let mut z = dense(g, x, layer)?;
        if let Some(&(gamma, beta)) = p.bn.get(i) {
            z = match &mode {
                HeadMode::Train { .. } => {
                    let n = g.batch_norm(z, gamma, beta, BN_EPSILON, None)?;
                    bn_nodes.push(n);
                    n
                }
                HeadMode::Infer { running } => {
                    let r = running.get(i).ok_or_else(|| TensorError::Argument {
                        op: "head",
                        msg: format!("no running statistics for layer {i}"),
                    })?;
                    g.batch_norm(z, gamma, beta, BN_EPSILON, Some((&r.mean, &r.var)))?
                }
            };
        }
        x = g.tanh(z);
        if let HeadMode::Train { rng } = &mut mode {
            x = dropout(g, x, cfg.dropout, rng)?;
        }
    }
    let z = dense(g, x, &p.out)?;
    let preds = match cfg.head {
        Head::Sigmoid => g.sigmoid(z),
        Head::ReluClipped => {
            let r = g.relu(z);
            g.clamp(r, 0.0, 1.0)
        }
    };
    Ok(HeadOutput { preds, bn_nodes })
}

//! The hybrid movement classifier and its two component paths.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;
mod paths;
#[cfg(test)]
mod tests;

pub use config::{
    AttentionMode, BlstmReadout, CnnBlstmConfig, CnnLgConfig, ConvSpec, Head, ModelConfig,
    ModelKind, DEFAULT_MAX_LEN,
};
pub use params::{
    init_params, param_specs, BoundParams, CnnBlstmParams, CnnLgParams, ConvParams, DenseParams,
    GlobalAttentionParams, HeadParams, Init, LocalAttentionParams, LstmParams, ModelParams,
    ParamSpec, ParamStore, INIT_SCALE,
};
pub use paths::{
    cnn_blstm_forward, cnn_lg_forward, head_forward, path_features, HeadMode, HeadOutput,
    PathOutput, RunningStats, BN_EPSILON,
};

use crate::error::{Error, Result};
use crate::record::DayRecord;
use crate::rng::{self, streams, StreamRng};
use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{embed_day, EmbeddingTable, PriceNorm};
use rayon::prelude::*;

/// Rows per inference batch in [`Model::predict`].
pub const PREDICT_CHUNK: usize = 64;

/// A configured classifier with its parameters and inference state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
    pub norm: PriceNorm,
    pub seed: u64,
    /// Embedding rows that receive gradient updates.
    pub trainable_rows: Vec<bool>,
}

/// Output of a forward pass over a batch of days.
#[derive(Debug, Clone)]
pub struct Forward {
    pub bound: BoundParams,
    /// `[B × 1]`
    pub preds: Var,
    pub bn_nodes: Vec<Var>,
}

impl Model {
    /// Initialises every non-embedding parameter from the `param-init` stream
    /// of `seed`. Pretrained embedding rows stay frozen unless `fine_tune`.
    pub fn new(
        config: ModelConfig,
        embeddings: &EmbeddingTable,
        norm: PriceNorm,
        seed: u64,
        fine_tune: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::stream(seed, streams::PARAM_INIT);
        let params = init_params(&config, embeddings, &mut init_rng)?;
        let running = if config.batch_norm {
            config.dense.iter().map(|&w| RunningStats::new(w)).collect()
        } else {
            Vec::new()
        };
        let trainable_rows = embeddings.pretrained().iter().map(|&p| fine_tune || !p).collect();
        Ok(Self {
            config,
            params,
            running,
            norm,
            seed,
            trainable_rows,
        })
    }

    /// Embeds each day and runs paths and head on `g`. Pass `Some(rng)` for
    /// training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        days: &[&DayRecord],
        train_rng: Option<&mut StreamRng>,
    ) -> Result<Forward> {
        if days.is_empty() {
            return Err(Error::Contract("forward needs at least one day".into()));
        }
        let unknown = self.config.vocab_rows - 1;
        if let Some(d) = days.iter().find(|d| d.tokens.iter().any(|&t| t > unknown)) {
            return Err(Error::Contract(format!(
                "{}: token index beyond the {}-row embedding table",
                d.date, self.config.vocab_rows
            )));
        }
        let bound = self.params.bind(g);
        let p = ModelParams::from_bound(&self.config, &bound)?;
        let proj = p.price_proj.unwrap_or(p.embedding);
        let mut rows = Vec::with_capacity(days.len());
        for day in days {
            let seq = embed_day(
                g,
                day,
                p.embedding,
                proj,
                &self.norm,
                self.config.max_len,
                self.config.price_fusion,
            )?;
            rows.push(path_features(g, seq, &self.config, &p)?);
        }
        let feats = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat(&rows, 0)?
        };
        let mode = match train_rng {
            Some(rng) => HeadMode::Train { rng },
            None => HeadMode::Infer {
                running: &self.running,
            },
        };
        let out = head_forward(g, feats, &self.config, &p.head, mode)?;
        Ok(Forward {
            bound,
            preds: out.preds,
            bn_nodes: out.bn_nodes,
        })
    }

    /// Inference scores in `[0, 1]`, one per day, in input order.
    pub fn predict(&self, days: &[DayRecord]) -> Result<Vec<f64>> {
        let chunks: Vec<Vec<f64>> = days
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let refs: Vec<&DayRecord> = chunk.iter().collect();
                let mut g = Graph::new();
                let f = self.forward(&mut g, &refs, None)?;
                Ok(g.value(f.preds).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    /// Folds the batch statistics recorded in `bn_nodes` into the running stats.
    pub fn update_running(&mut self, g: &Graph, bn_nodes: &[Var]) {
        let momentum = self.config.bn_momentum;
        for (stats, &node) in self.running.iter_mut().zip(bn_nodes) {
            if let Some((m, v)) = g.batch_stats(node) {
                stats.update(m, v, momentum);
            }
        }
    }

    /// Gradients of `bound` parameters in store order, with frozen embedding
    /// rows zeroed.
    pub fn gradients(&self, g: &Graph, bound: &BoundParams) -> Vec<Tensor> {
        let mut grads: Vec<Tensor> = bound.vars().iter().map(|&v| g.grad(v)).collect();
        let width = self.config.embed_dim;
        if let Some(i) = self.params.names().position(|n| n == "embedding") {
            let data = grads[i].data_mut();
            for (r, &trainable) in self.trainable_rows.iter().enumerate() {
                if !trainable {
                    data[r * width..(r + 1) * width].fill(0.0);
                }
            }
        }
        grads
    }

    pub fn view(&self) -> std::result::Result<ModelParams<&Tensor>, TensorError> {
        ModelParams::from_store(&self.config, &self.params)
    }
}

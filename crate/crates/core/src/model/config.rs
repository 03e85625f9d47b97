use crate::error::{Error, Result};
use crate::text::PriceFusion;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Both paths fused by the dense head.
    Hybrid,
    /// CNN with local/global attention alone.
    CnnLg,
    /// CNN + attention + bidirectional LSTM alone.
    CnnBlstm,
}

impl ModelKind {
    pub fn uses_lg(self) -> bool {
        matches!(self, ModelKind::Hybrid | ModelKind::CnnLg)
    }

    pub fn uses_blstm(self) -> bool {
        matches!(self, ModelKind::Hybrid | ModelKind::CnnBlstm)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hybrid" => Ok(ModelKind::Hybrid),
            "cnn-lg" | "cnn_lg" => Ok(ModelKind::CnnLg),
            "cnn-blstm" | "cnn_blstm" => Ok(ModelKind::CnnBlstm),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// Output activation of the single-neuron head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    #[default]
    Sigmoid,
    /// ReLU, clipped to `[0, 1]` so scores stay comparable to the trading thresholds.
    ReluClipped,
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sigmoid" => Ok(Head::Sigmoid),
            "relu" | "relu-clipped" | "relu_clipped" => Ok(Head::ReluClipped),
            other => Err(format!("unknown head `{other}`")),
        }
    }
}

/// What the second attention layer of the CNN-BLSTM path produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Rows multiplied by their scores.
    Reweight,
    /// Score-weighted mean of the rows (a single row).
    WeightedMean,
}

/// Which BLSTM output row(s) become the path's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlstmReadout {
    /// Output row of the last position: `[h_fwd(L-1), h_bwd(L-1)]`.
    LastRow,
    /// Each direction's final state: `[h_fwd(L-1), h_bwd(0)]`.
    FinalStates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnLgConfig {
    /// Local attention window (odd).
    pub lal_window: usize,
    pub conv: ConvSpec,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Optional convolutions over the globally attended sequence, one per
    /// kernel length, each reduced by a global max-pool.
    pub gal_conv_kernels: Vec<usize>,
    pub gal_conv_filters: usize,
}

impl CnnLgConfig {
    pub fn conv_len(&self, max_len: usize) -> usize {
        max_len + 1 - self.conv.kernel
    }

    /// Rows after max-pooling: the global attention width.
    pub fn pooled_len(&self, max_len: usize) -> usize {
        (self.conv_len(max_len) - self.pool_window) / self.pool_stride + 1
    }

    pub fn feature_width(&self, max_len: usize) -> usize {
        if self.gal_conv_kernels.is_empty() {
            self.pooled_len(max_len) * self.conv.filters
        } else {
            self.gal_conv_kernels.len() * self.gal_conv_filters
        }
    }

    fn validate(&self, max_len: usize) -> Result<()> {
        if self.lal_window.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "local attention window must be odd, got {}",
                self.lal_window
            )));
        }
        if self.conv.kernel == 0 || self.conv.filters == 0 || self.conv.kernel > max_len {
            return Err(Error::Contract(format!(
                "cnn-lg conv kernel {} does not fit max_len {max_len}",
                self.conv.kernel
            )));
        }
        if self.pool_window == 0 || self.pool_stride == 0 || self.pool_window > self.conv_len(max_len) {
            return Err(Error::Contract("cnn-lg pooling does not fit the conv output".into()));
        }
        let pooled = self.pooled_len(max_len);
        if let Some(&k) = self.gal_conv_kernels.iter().find(|&&k| k == 0 || k > pooled) {
            return Err(Error::Contract(format!(
                "global-attention conv kernel {k} does not fit {pooled} rows"
            )));
        }
        if !self.gal_conv_kernels.is_empty() && self.gal_conv_filters == 0 {
            return Err(Error::Contract("gal_conv_filters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnBlstmConfig {
    pub conv1: ConvSpec,
    pub conv2: Option<ConvSpec>,
    pub second_attention: AttentionMode,
    pub global_pool: bool,
    pub hidden: usize,
    pub readout: BlstmReadout,
}

impl CnnBlstmConfig {
    pub fn conv1_len(&self, max_len: usize) -> usize {
        max_len + 1 - self.conv1.kernel
    }

    pub fn conv2_len(&self, max_len: usize) -> Option<usize> {
        self.conv2.map(|c| self.conv1_len(max_len) + 1 - c.kernel)
    }

    /// Width of the sequence entering the BLSTM.
    pub fn blstm_input(&self) -> usize {
        self.conv2.map_or(self.conv1.filters, |c| c.filters)
    }

    pub fn feature_width(&self) -> usize {
        2 * self.hidden
    }

    fn validate(&self, max_len: usize) -> Result<()> {
        if self.conv1.kernel == 0 || self.conv1.filters == 0 || self.conv1.kernel > max_len {
            return Err(Error::Contract(format!(
                "cnn-blstm conv1 kernel {} does not fit max_len {max_len}",
                self.conv1.kernel
            )));
        }
        if let Some(c2) = self.conv2 {
            if c2.kernel == 0 || c2.filters == 0 || c2.kernel > self.conv1_len(max_len) {
                return Err(Error::Contract(format!(
                    "cnn-blstm conv2 kernel {} does not fit {} rows",
                    c2.kernel,
                    self.conv1_len(max_len)
                )));
            }
        }
        if self.hidden == 0 {
            return Err(Error::Contract("BLSTM hidden size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding rows, including the unknown slot.
    pub vocab_rows: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub price_fusion: PriceFusion,
    pub cnn_lg: CnnLgConfig,
    pub cnn_blstm: CnnBlstmConfig,
    /// Hidden dense widths between the path features and the output neuron.
    pub dense: Vec<usize>,
    pub head: Head,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
}

pub const DEFAULT_MAX_LEN: usize = 64;

impl ModelConfig {
    /// The fused model at its full layer sizes.
    pub fn hybrid(vocab_rows: usize, embed_dim: usize) -> Self {
        Self {
            kind: ModelKind::Hybrid,
            vocab_rows,
            embed_dim,
            max_len: DEFAULT_MAX_LEN,
            price_fusion: PriceFusion::Token,
            cnn_lg: CnnLgConfig {
                lal_window: 5,
                conv: ConvSpec {
                    filters: 80,
                    kernel: 15,
                },
                pool_window: 2,
                pool_stride: 2,
                gal_conv_kernels: Vec::new(),
                gal_conv_filters: 0,
            },
            cnn_blstm: CnnBlstmConfig {
                conv1: ConvSpec {
                    filters: 50,
                    kernel: 25,
                },
                conv2: Some(ConvSpec {
                    filters: 100,
                    kernel: 25,
                }),
                second_attention: AttentionMode::WeightedMean,
                global_pool: true,
                hidden: 250,
                readout: BlstmReadout::LastRow,
            },
            dense: vec![100, 50],
            head: Head::Sigmoid,
            dropout: 0.5,
            batch_norm: true,
            bn_momentum: 0.9,
        }
    }

    /// Stand-alone CNN local/global model: 80 filters after local attention,
    /// 50 filters of lengths 2 and 3 after global attention, then the output
    /// layer behind dropout.
    pub fn cnn_lg(vocab_rows: usize, embed_dim: usize) -> Self {
        let mut c = Self::hybrid(vocab_rows, embed_dim);
        c.kind = ModelKind::CnnLg;
        c.cnn_lg.gal_conv_kernels = vec![2, 3];
        c.cnn_lg.gal_conv_filters = 50;
        c.dense = Vec::new();
        c
    }

    /// Stand-alone CNN-BLSTM model: one 64-filter conv, attention, max-pool,
    /// BLSTM(250), dense 300 then the output layer.
    pub fn cnn_blstm(vocab_rows: usize, embed_dim: usize) -> Self {
        let mut c = Self::hybrid(vocab_rows, embed_dim);
        c.kind = ModelKind::CnnBlstm;
        c.cnn_blstm.conv1 = ConvSpec {
            filters: 64,
            kernel: 25,
        };
        c.cnn_blstm.conv2 = None;
        c.dense = vec![300];
        c
    }

    pub fn for_kind(kind: ModelKind, vocab_rows: usize, embed_dim: usize) -> Self {
        match kind {
            ModelKind::Hybrid => Self::hybrid(vocab_rows, embed_dim),
            ModelKind::CnnLg => Self::cnn_lg(vocab_rows, embed_dim),
            ModelKind::CnnBlstm => Self::cnn_blstm(vocab_rows, embed_dim),
        }
    }

    /// Desk-scale variant: short sequences, small kernels and widths.
    pub fn tiny(kind: ModelKind, vocab_rows: usize, embed_dim: usize) -> Self {
        let mut c = Self::for_kind(kind, vocab_rows, embed_dim);
        c.max_len = 12;
        c.cnn_lg.lal_window = 3;
        c.cnn_lg.conv = ConvSpec {
            filters: 4,
            kernel: 3,
        };
        if !c.cnn_lg.gal_conv_kernels.is_empty() {
            c.cnn_lg.gal_conv_filters = 3;
        }
        c.cnn_blstm.conv1 = ConvSpec {
            filters: 4,
            kernel: 3,
        };
        if c.cnn_blstm.conv2.is_some() {
            c.cnn_blstm.conv2 = Some(ConvSpec {
                filters: 8,
                kernel: 3,
            });
        }
        c.cnn_blstm.hidden = 5;
        c.dense = c.dense.iter().map(|w| (w / 10).max(2)).collect();
        c
    }

    pub fn feature_width(&self) -> usize {
        let mut w = 0;
        if self.kind.uses_lg() {
            w += self.cnn_lg.feature_width(self.max_len);
        }
        if self.kind.uses_blstm() {
            w += self.cnn_blstm.feature_width();
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 || self.embed_dim == 0 || self.vocab_rows == 0 {
            return Err(Error::Contract(
                "max_len >= 2, embed_dim >= 1 and vocab_rows >= 1 required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Contract("bn_momentum must be in [0, 1)".into()));
        }
        if self.dense.contains(&0) {
            return Err(Error::Contract("dense widths must be positive".into()));
        }
        if self.kind.uses_lg() {
            self.cnn_lg.validate(self.max_len)?;
        }
        if self.kind.uses_blstm() {
            self.cnn_blstm.validate(self.max_len)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sizes() {
        let h = ModelConfig::hybrid(100, 50);
        h.validate().unwrap();
        assert_eq!(h.cnn_lg.conv.kernel, 15);
        assert_eq!(h.cnn_blstm.conv1, ConvSpec { filters: 50, kernel: 25 });
        assert_eq!(h.cnn_blstm.conv2, Some(ConvSpec { filters: 100, kernel: 25 }));
        assert_eq!(h.cnn_blstm.hidden, 250);
        assert_eq!(h.dense, vec![100, 50]);
        // (64 - 15 + 1 - 2) / 2 + 1 = 25 pooled rows of 80 filters, plus 2 * 250
        assert_eq!(h.feature_width(), 25 * 80 + 500);

        let lg = ModelConfig::cnn_lg(100, 50);
        lg.validate().unwrap();
        assert_eq!(lg.cnn_lg.lal_window, 5);
        assert_eq!(lg.cnn_lg.conv.filters, 80);
        assert_eq!(lg.feature_width(), 100);

        let bl = ModelConfig::cnn_blstm(100, 50);
        bl.validate().unwrap();
        assert_eq!(bl.cnn_blstm.conv1.filters, 64);
        assert_eq!(bl.dense, vec![300]);
    }

    #[test]
    fn tiny_configs_validate() {
        for kind in [ModelKind::Hybrid, ModelKind::CnnLg, ModelKind::CnnBlstm] {
            ModelConfig::tiny(kind, 10, 4).validate().unwrap();
        }
    }

    #[test]
    fn even_window_is_rejected() {
        let mut c = ModelConfig::tiny(ModelKind::Hybrid, 10, 4);
        c.cnn_lg.lal_window = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(ModelKind::Hybrid, 10, 4);
        c.cnn_blstm.conv1.kernel = 40;
        assert!(c.validate().is_err());
    }
}

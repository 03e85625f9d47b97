//! Named parameter storage and typed views over it.
//!
//! Every view is generic over the element type so the same layout serves
//! graph variables (`Var`) and plain tensors (`&Tensor`) in reference code.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{EmbeddingTable, PriceFusion};
use std::collections::HashMap;

/// Half-width of the uniform initialiser for weights.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> std::result::Result<&Tensor, TensorError> {
        self.get(name).ok_or_else(|| missing(name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

fn missing(name: &str) -> TensorError {
    TensorError::Argument {
        op: "params",
        msg: format!("missing parameter `{name}`"),
    }
}

/// Graph variables for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> std::result::Result<Var, TensorError> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| missing(name))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

type Lookup<'f, T> = dyn FnMut(&str) -> std::result::Result<T, TensorError> + 'f;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[in × out]`
    pub weight: T,
    /// `[out]`
    pub bias: T,
}

impl<T> DenseParams<T> {
    pub fn lookup(prefix: &str, get: &mut Lookup<'_, T>) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            weight: get(&format!("{prefix}.weight"))?,
            bias: get(&format!("{prefix}.bias"))?,
        })
    }

    fn shapes(prefix: &str, input: usize, out: usize, specs: &mut Vec<ParamSpec>) {
        specs.push(spec(format!("{prefix}.weight"), vec![input, out], Init::Uniform));
        specs.push(spec(format!("{prefix}.bias"), vec![out], Init::Zeros));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[kernel × channels × filters]`
    pub kernel: T,
    /// `[filters]`
    pub bias: T,
}

impl<T> ConvParams<T> {
    pub fn lookup(prefix: &str, get: &mut Lookup<'_, T>) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            kernel: get(&format!("{prefix}.kernel"))?,
            bias: get(&format!("{prefix}.bias"))?,
        })
    }

    fn shapes(prefix: &str, k: usize, channels: usize, filters: usize, specs: &mut Vec<ParamSpec>) {
        specs.push(spec(format!("{prefix}.kernel"), vec![k, channels, filters], Init::Uniform));
        specs.push(spec(format!("{prefix}.bias"), vec![filters], Init::Zeros));
    }
}

/// Window scorer shared by every position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttentionParams<T> {
    /// `[window × channels]`
    pub weight: T,
    /// `[1]`
    pub bias: T,
}

impl<T> LocalAttentionParams<T> {
    pub fn lookup(prefix: &str, get: &mut Lookup<'_, T>) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            weight: get(&format!("{prefix}.weight"))?,
            bias: get(&format!("{prefix}.bias"))?,
        })
    }

    fn shapes(prefix: &str, window: usize, channels: usize, specs: &mut Vec<ParamSpec>) {
        specs.push(spec(format!("{prefix}.weight"), vec![window, channels], Init::Uniform));
        specs.push(spec(format!("{prefix}.bias"), vec![1], Init::Zeros));
    }
}

/// One weight slice per output position over the whole sequence.
///
/// Column `i` of `weight` is the flattened (row-major) `[positions × channels]`
/// slice scoring position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionParams<T> {
    /// `[positions·channels × positions]`
    pub weight: T,
    /// `[positions]`
    pub bias: T,
}

impl<T> GlobalAttentionParams<T> {
    pub fn lookup(prefix: &str, get: &mut Lookup<'_, T>) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            weight: get(&format!("{prefix}.weight"))?,
            bias: get(&format!("{prefix}.bias"))?,
        })
    }

    fn shapes(prefix: &str, positions: usize, channels: usize, specs: &mut Vec<ParamSpec>) {
        specs.push(spec(
            format!("{prefix}.weight"),
            vec![positions * channels, positions],
            Init::Uniform,
        ));
        specs.push(spec(format!("{prefix}.bias"), vec![positions], Init::Zeros));
    }
}

/// Gate weights of one LSTM direction: `w_*` are `[input × hidden]`,
/// `u_*` are `[hidden × hidden]`, `b_*` are `[hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_i: T,
    pub u_i: T,
    pub b_i: T,
    pub w_f: T,
    pub u_f: T,
    pub b_f: T,
    pub w_c: T,
    pub u_c: T,
    pub b_c: T,
    pub w_o: T,
    pub u_o: T,
    pub b_o: T,
}

const GATES: [&str; 4] = ["i", "f", "c", "o"];

impl<T> LstmParams<T> {
    pub fn lookup(prefix: &str, get: &mut Lookup<'_, T>) -> std::result::Result<Self, TensorError> {
        let mut g = |k: &str| get(&format!("{prefix}.{k}"));
        Ok(Self {
            w_i: g("w_i")?,
            u_i: g("u_i")?,
            b_i: g("b_i")?,
            w_f: g("w_f")?,
            u_f: g("u_f")?,
            b_f: g("b_f")?,
            w_c: g("w_c")?,
            u_c: g("u_c")?,
            b_c: g("b_c")?,
            w_o: g("w_o")?,
            u_o: g("u_o")?,
            b_o: g("b_o")?,
        })
    }

    fn shapes(prefix: &str, input: usize, hidden: usize, specs: &mut Vec<ParamSpec>) {
        for gate in GATES {
            specs.push(spec(format!("{prefix}.w_{gate}"), vec![input, hidden], Init::Uniform));
            specs.push(spec(format!("{prefix}.u_{gate}"), vec![hidden, hidden], Init::Uniform));
            specs.push(spec(format!("{prefix}.b_{gate}"), vec![hidden], Init::Zeros));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnLgParams<T> {
    pub lal: LocalAttentionParams<T>,
    pub conv: ConvParams<T>,
    pub gal: GlobalAttentionParams<T>,
    pub gal_convs: Vec<ConvParams<T>>,
}

impl<T> CnnLgParams<T> {
    pub fn lookup(
        cfg: &ModelConfig,
        get: &mut Lookup<'_, T>,
    ) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            lal: LocalAttentionParams::lookup("lg.lal", get)?,
            conv: ConvParams::lookup("lg.conv", get)?,
            gal: GlobalAttentionParams::lookup("lg.gal", get)?,
            gal_convs: (0..cfg.cnn_lg.gal_conv_kernels.len())
                .map(|i| ConvParams::lookup(&format!("lg.gal_conv{i}"), get))
                .collect::<std::result::Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBlstmParams<T> {
    pub conv1: ConvParams<T>,
    pub att1: GlobalAttentionParams<T>,
    pub conv2: Option<ConvParams<T>>,
    pub att2: Option<GlobalAttentionParams<T>>,
    pub fwd: LstmParams<T>,
    pub bwd: LstmParams<T>,
}

impl<T> CnnBlstmParams<T> {
    pub fn lookup(
        cfg: &ModelConfig,
        get: &mut Lookup<'_, T>,
    ) -> std::result::Result<Self, TensorError> {
        let two = cfg.cnn_blstm.conv2.is_some();
        Ok(Self {
            conv1: ConvParams::lookup("bl.conv1", get)?,
            att1: GlobalAttentionParams::lookup("bl.att1", get)?,
            conv2: if two { Some(ConvParams::lookup("bl.conv2", get)?) } else { None },
            att2: if two {
                Some(GlobalAttentionParams::lookup("bl.att2", get)?)
            } else {
                None
            },
            fwd: LstmParams::lookup("bl.fwd", get)?,
            bwd: LstmParams::lookup("bl.bwd", get)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub dense: Vec<DenseParams<T>>,
    /// `(gamma, beta)` per hidden layer when batch norm is on.
    pub bn: Vec<(T, T)>,
    pub out: DenseParams<T>,
}

impl<T> HeadParams<T> {
    pub fn lookup(
        cfg: &ModelConfig,
        get: &mut Lookup<'_, T>,
    ) -> std::result::Result<Self, TensorError> {
        let mut dense = Vec::new();
        let mut bn = Vec::new();
        for i in 0..cfg.dense.len() {
            dense.push(DenseParams::lookup(&format!("dense{i}"), get)?);
            if cfg.batch_norm {
                bn.push((get(&format!("bn{i}.gamma"))?, get(&format!("bn{i}.beta"))?));
            }
        }
        Ok(Self {
            dense,
            bn,
            out: DenseParams::lookup("out", get)?,
        })
    }
}

/// All views of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: T,
    pub price_proj: Option<T>,
    pub lg: Option<CnnLgParams<T>>,
    pub blstm: Option<CnnBlstmParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn lookup(
        cfg: &ModelConfig,
        get: &mut Lookup<'_, T>,
    ) -> std::result::Result<Self, TensorError> {
        Ok(Self {
            embedding: get("embedding")?,
            price_proj: match cfg.price_fusion {
                PriceFusion::Token => Some(get("price_proj")?),
                PriceFusion::None => None,
            },
            lg: if cfg.kind.uses_lg() {
                Some(CnnLgParams::lookup(cfg, get)?)
            } else {
                None
            },
            blstm: if cfg.kind.uses_blstm() {
                Some(CnnBlstmParams::lookup(cfg, get)?)
            } else {
                None
            },
            head: HeadParams::lookup(cfg, get)?,
        })
    }
}

impl ModelParams<Var> {
    pub fn from_bound(cfg: &ModelConfig, bound: &BoundParams) -> std::result::Result<Self, TensorError> {
        Self::lookup(cfg, &mut |n| bound.var(n))
    }
}

impl<'a> ModelParams<&'a Tensor> {
    pub fn from_store(
        cfg: &ModelConfig,
        store: &'a ParamStore,
    ) -> std::result::Result<Self, TensorError> {
        Self::lookup(cfg, &mut |n| store.require(n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

/// Every trainable tensor except the embedding table, in creation order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let e = cfg.embed_dim;
    let l = cfg.max_len;
    if cfg.price_fusion == PriceFusion::Token {
        s.push(spec("price_proj".into(), vec![4, e], Init::Uniform));
    }
    if cfg.kind.uses_lg() {
        let c = &cfg.cnn_lg;
        LocalAttentionParams::<()>::shapes("lg.lal", c.lal_window, e, &mut s);
        ConvParams::<()>::shapes("lg.conv", c.conv.kernel, e, c.conv.filters, &mut s);
        GlobalAttentionParams::<()>::shapes("lg.gal", c.pooled_len(l), c.conv.filters, &mut s);
        for (i, &k) in c.gal_conv_kernels.iter().enumerate() {
            ConvParams::<()>::shapes(
                &format!("lg.gal_conv{i}"),
                k,
                c.conv.filters,
                c.gal_conv_filters,
                &mut s,
            );
        }
    }
    if cfg.kind.uses_blstm() {
        let c = &cfg.cnn_blstm;
        ConvParams::<()>::shapes("bl.conv1", c.conv1.kernel, e, c.conv1.filters, &mut s);
        GlobalAttentionParams::<()>::shapes("bl.att1", c.conv1_len(l), c.conv1.filters, &mut s);
        if let (Some(c2), Some(l2)) = (c.conv2, c.conv2_len(l)) {
            ConvParams::<()>::shapes("bl.conv2", c2.kernel, c.conv1.filters, c2.filters, &mut s);
            GlobalAttentionParams::<()>::shapes("bl.att2", l2, c2.filters, &mut s);
        }
        LstmParams::<()>::shapes("bl.fwd", c.blstm_input(), c.hidden, &mut s);
        LstmParams::<()>::shapes("bl.bwd", c.blstm_input(), c.hidden, &mut s);
    }
    let mut width = cfg.feature_width();
    for (i, &w) in cfg.dense.iter().enumerate() {
        DenseParams::<()>::shapes(&format!("dense{i}"), width, w, &mut s);
        if cfg.batch_norm {
            s.push(spec(format!("bn{i}.gamma"), vec![w], Init::Ones));
            s.push(spec(format!("bn{i}.beta"), vec![w], Init::Zeros));
        }
        width = w;
    }
    DenseParams::<()>::shapes("out", width, 1, &mut s);
    s
}

/// Builds a store: the embedding table first, then every spec initialised
/// from `rng` in order.
pub fn init_params(
    cfg: &ModelConfig,
    embeddings: &EmbeddingTable,
    rng: &mut StreamRng,
) -> Result<ParamStore> {
    if embeddings.rows() != cfg.vocab_rows || embeddings.width() != cfg.embed_dim {
        return Err(Error::Contract(format!(
            "embedding table is {}x{}, config expects {}x{}",
            embeddings.rows(),
            embeddings.width(),
            cfg.vocab_rows,
            cfg.embed_dim
        )));
    }
    let mut store = ParamStore::new();
    store.insert("embedding", embeddings.matrix().clone());
    for p in param_specs(cfg) {
        let t = match p.init {
            Init::Uniform => Tensor::uniform(&p.shape, INIT_SCALE, rng),
            Init::Zeros => Tensor::zeros(&p.shape),
            Init::Ones => Tensor::full(&p.shape, 1.0),
        };
        store.insert(p.name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::rng::stream;

    #[test]
    fn store_views_resolve_every_name() {
        for kind in [ModelKind::Hybrid, ModelKind::CnnLg, ModelKind::CnnBlstm] {
            let cfg = ModelConfig::tiny(kind, 7, 3);
            let table = EmbeddingTable::random(7, 3, 1);
            let store = init_params(&cfg, &table, &mut stream(1, "p")).unwrap();
            assert_eq!(store.len(), param_specs(&cfg).len() + 1);
            let view = ModelParams::from_store(&cfg, &store).unwrap();
            assert_eq!(view.lg.is_some(), kind.uses_lg());
            assert_eq!(view.blstm.is_some(), kind.uses_blstm());
            assert_eq!(view.head.dense.len(), cfg.dense.len());
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            ModelParams::from_bound(&cfg, &bound).unwrap();
        }
    }

    #[test]
    fn missing_name_is_reported() {
        let store = ParamStore::new();
        let err = store.require("lg.lal.weight").unwrap_err();
        assert!(err.to_string().contains("lg.lal.weight"));
    }

    #[test]
    fn initialisation_is_bounded_and_seeded() {
        let cfg = ModelConfig::tiny(ModelKind::Hybrid, 7, 3);
        let table = EmbeddingTable::random(7, 3, 1);
        let a = init_params(&cfg, &table, &mut stream(9, "p")).unwrap();
        let b = init_params(&cfg, &table, &mut stream(9, "p")).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with("bias") || name.contains(".b_") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            } else if name != "embedding" && !name.ends_with("gamma") {
                assert!(t.data().iter().all(|x| x.abs() <= INIT_SCALE), "{name}");
            }
        }
    }
}

//! Tweet tokenisation, vocabulary construction, pre-trained embedding
//! loading and per-day input assembly.

use crate::error::{Error, Result, TensorError};
use crate::record::DayRecord;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

/// Scale of the uniform initialisation for embedding rows without a
/// pre-trained vector.
pub const EMBEDDING_INIT_SCALE: f64 = 0.05;

pub const DEFAULT_MIN_COUNT: usize = 5;

fn url_or_mention() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(https?://\S*|www\.\S*|@\w+)").expect("static regex"))
}

/// Lowercases, removes URLs and @-mentions, drops `#` (keeping the hashtag
/// word) and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped = url_or_mention().replace_all(&lowered, " ");
    stripped
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// True for tokens that mark a COVID-19 related tweet.
pub fn is_covid_token(token: &str) -> bool {
    token.starts_with("covid") || token == "coronavirus" || token == "sarscov2"
}

/// Token ↔ index map over tokens that met the frequency cut-off. The
/// unknown slot sits just past the retained tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// count then lexicographically.
    pub fn build<I, D, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Contract("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref().to_owned()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = kept.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            index,
            tokens,
            min_count,
        }
    }

    /// Number of retained tokens (excluding the unknown slot).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rows needed in an embedding table, including the unknown slot.
    pub fn table_rows(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn unknown_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.unknown_index())
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    /// Writes `min_count N` followed by one token per line in index order.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "min_count {}", self.min_count)?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 1, "empty vocabulary file"))?;
        let min_count = header
            .strip_prefix("min_count ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(&name, 1, "expected `min_count N` header"))?;
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        let vocab = Self::from_tokens(tokens, min_count);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::parse(&name, 0, "duplicate tokens in vocabulary"));
        }
        Ok(vocab)
    }
}

/// Embedding matrix with one row per vocabulary index plus the unknown row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    /// Rows that came from the pre-trained file.
    pretrained: Vec<bool>,
}

impl EmbeddingTable {
    /// Every row drawn uniformly from `[-0.05, 0.05]` using the
    /// embedding-init stream of `seed`.
    pub fn random(rows: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::streams::EMBEDDING_INIT);
        Self {
            matrix: Tensor::uniform(&[rows, width], EMBEDDING_INIT_SCALE, &mut r),
            pretrained: vec![false; rows],
        }
    }

    pub fn from_matrix(matrix: Tensor, pretrained: Vec<bool>) -> Result<Self> {
        let (rows, _) = matrix
            .dims2()
            .filter(|_| matrix.rank() == 2)
            .ok_or_else(|| Error::Contract("embedding matrix must be rank 2".into()))?;
        if rows != pretrained.len() || !matrix.is_finite() {
            return Err(Error::Contract("malformed embedding table".into()));
        }
        Ok(Self { matrix, pretrained })
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    pub fn pretrained(&self) -> &[bool] {
        &self.pretrained
    }
}

/// Reads a whitespace-separated `token f1 .. fN` embedding file. Rows for
/// vocabulary tokens found in the file are copied; every other row keeps its
/// seeded random initialisation.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(f, &path.display().to_string(), vocab, seed)
}

pub fn read_embeddings<R: Read>(
    reader: R,
    source_name: &str,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut width: Option<usize> = None;
    let mut found: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(source_name, lineno, format!("bad float `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None if values.is_empty() => {
                return Err(Error::parse(source_name, lineno, "no vector values"))
            }
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("expected {w} values, found {}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if let Some(idx) = vocab.get(token) {
            found.push((idx, values));
        }
    }
    let width = width.ok_or_else(|| Error::parse(source_name, 0, "empty embedding file"))?;
    let mut table = EmbeddingTable::random(vocab.table_rows(), width, seed);
    for (idx, values) in found {
        table.matrix.data_mut()[idx * width..(idx + 1) * width].copy_from_slice(&values);
        table.pretrained[idx] = true;
    }
    Ok(table)
}

/// Writes the pre-trained rows of `table` back out in embedding-file format.
pub fn write_embeddings<W: Write>(
    mut w: W,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> std::io::Result<()> {
    for (i, tok) in vocab.tokens().iter().enumerate() {
        if !table.pretrained[i] {
            continue;
        }
        write!(w, "{tok}")?;
        for v in table.row(i) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Tweets with fewer retweets are dropped by default.
pub const DEFAULT_MIN_RETWEETS: u64 = 1;

/// One tweet of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweet {
    pub date: NaiveDate,
    pub text: String,
    pub retweets: u64,
}

/// Reads a JSON-lines tweet corpus, keeping tweets with at least
/// `min_retweets` retweets.
pub fn read_tweets<R: Read>(reader: R, source_name: &str, min_retweets: u64) -> Result<Vec<Tweet>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::parse(source_name, lineno + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let tweet: Tweet = serde_json::from_str(&line)
            .map_err(|e| Error::parse(source_name, lineno + 1, e.to_string()))?;
        if tweet.retweets >= min_retweets {
            out.push(tweet);
        }
    }
    Ok(out)
}

pub fn load_tweets(path: &Path, min_retweets: u64) -> Result<Vec<Tweet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tweets(f, &path.display().to_string(), min_retweets)
}

/// How daily prices enter the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriceFusion {
    /// A learned synthetic price token at position 0.
    #[default]
    Token,
    /// Text only.
    None,
}

/// Per-feature min/max scaling of `[open, high, low, adj_close]`, fitted on
/// the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceNorm {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl Default for PriceNorm {
    fn default() -> Self {
        Self {
            min: [0.0; 4],
            max: [1.0; 4],
        }
    }
}

impl PriceNorm {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a DayRecord>) -> Self {
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        let mut any = false;
        for r in records {
            any = true;
            for (j, v) in r.price_features().into_iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if !any {
            return Self::default();
        }
        Self { min, max }
    }

    pub fn apply(&self, features: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for j in 0..4 {
            let span = self.max[j] - self.min[j];
            out[j] = if span > 0.0 {
                (features[j] - self.min[j]) / span
            } else {
                0.0
            };
        }
        out
    }
}

/// Builds the `[max_len × width]` input sequence for one day on `g`.
///
/// With [`PriceFusion::Token`], row 0 is the normalised price vector
/// projected through `price_proj` (`[4 × width]`); token rows follow as
/// lookups into `table`. The sequence is truncated or zero-padded to
/// `max_len` rows.
#[allow(clippy::too_many_arguments)]
pub fn embed_day(
    g: &mut Graph,
    day: &DayRecord,
    table: Var,
    price_proj: Var,
    norm: &PriceNorm,
    max_len: usize,
    fusion: PriceFusion,
) -> Result<Var, TensorError> {
    if max_len < 2 {
        return Err(TensorError::Argument {
            op: "embed_day",
            msg: format!("max_len must be at least 2, got {max_len}"),
        });
    }
    let width = match g.value(table).shape() {
        [_, w] => *w,
        s => {
            return Err(TensorError::Rank {
                op: "embed_day",
                shape: s.to_vec(),
            })
        }
    };
    let mut parts = Vec::with_capacity(3);
    let mut rows = 0;
    if fusion == PriceFusion::Token {
        let p = norm.apply(day.price_features());
        let pv = g.constant(Tensor::matrix(1, 4, p.to_vec())?);
        parts.push(g.matmul(pv, price_proj)?);
        rows += 1;
    }
    let take = day.tokens.len().min(max_len - rows);
    if take > 0 {
        parts.push(g.gather_rows(table, &day.tokens[..take])?);
        rows += take;
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[max_len, width])));
    }
    let seq = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 0)?
    };
    if rows < max_len {
        g.pad_rows(seq, 0, max_len - rows)
    } else {
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("DOW surges!"), vec!["dow", "surges"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("#Covid19 @user http://x.co"), vec!["covid19"]);
        assert_eq!(tokenize("$DJI #Covid-19 CoronaVirus"), vec!["dji", "covid", "19", "coronavirus"]);
    }

    #[test]
    fn vocab_min_count_filter() {
        let mut corpus = vec![vec!["a"; 5], vec!["b"; 4]];
        corpus.push(vec![]);
        let v = Vocabulary::build(&corpus, 5).unwrap();
        assert_eq!(v.tokens(), &["a".to_string()]);
        assert_eq!(v.unknown_index(), 1);
        assert_eq!(v.index_of("b"), 1);

        let all = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.tokens(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocabulary::build([vec!["z", "y", "x", "x"]], 1).unwrap();
        assert_eq!(v.tokens(), &["x", "y", "z"]);
    }

    #[test]
    fn empty_corpus_has_only_unknown() {
        let v = Vocabulary::build(Vec::<Vec<&str>>::new(), DEFAULT_MIN_COUNT).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.unknown_index(), 0);
        assert_eq!(v.table_rows(), 1);
        assert!(Vocabulary::build(Vec::<Vec<&str>>::new(), 0).is_err());
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let v = Vocabulary::build([vec!["b", "a", "b"]], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn embedding_file_reading() {
        let vocab = Vocabulary::build([vec!["cat", "dog"]], 1).unwrap();
        let t = read_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 3).unwrap();
        let cat = vocab.index_of("cat");
        assert_eq!(t.row(cat), &[1.0, 0.0]);
        assert!(t.pretrained()[cat]);
        let dog = vocab.index_of("dog");
        assert!(!t.pretrained()[dog]);
        assert!(t.row(dog).iter().all(|v| v.abs() <= EMBEDDING_INIT_SCALE));

        let again = read_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 3).unwrap();
        assert_eq!(again, t);
        let other = read_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 4).unwrap();
        assert_ne!(other.row(dog), t.row(dog));
    }

    #[test]
    fn embedding_file_errors_carry_line_numbers() {
        let vocab = Vocabulary::build([vec!["cat"]], 1).unwrap();
        match read_embeddings("cat 1 2\ndog 1 2 3\n".as_bytes(), "mem", &vocab, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match read_embeddings("cat 1 x\n".as_bytes(), "mem", &vocab, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tweets_below_retweet_floor_are_dropped() {
        let src = r#"{"date":"2020-03-02","text":"a","retweets":0}
{"date":"2020-03-02","text":"b","retweets":3}
"#;
        let t = read_tweets(src.as_bytes(), "mem", 1).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].text, "b");
        assert!(read_tweets("{bad".as_bytes(), "mem", 1).is_err());
    }

    fn day(tokens: Vec<usize>) -> DayRecord {
        DayRecord {
            date: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
            open: 10.0,
            high: 12.0,
            low: 9.0,
            close: 11.0,
            adj_close: 11.0,
            volume: 1.0,
            tokens,
            covid_flag: false,
            label: None,
        }
    }

    #[test]
    fn embed_day_contracts() {
        let table = EmbeddingTable::random(5, 3, 9);
        let norm = PriceNorm::default();

        let mut g = Graph::new();
        let tv = g.leaf(table.matrix().clone());
        let zero_proj = g.leaf(Tensor::zeros(&[4, 3]));
        let out = embed_day(&mut g, &day(vec![]), tv, zero_proj, &norm, 6, PriceFusion::Token).unwrap();
        assert_eq!(g.value(out).shape(), &[6, 3]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let out = embed_day(&mut g, &day(vec![2]), tv, zero_proj, &norm, 6, PriceFusion::Token).unwrap();
        assert_eq!(g.value(out).row(1), table.row(2));

        let long = day((0..20).map(|i| i % 5).collect());
        let out = embed_day(&mut g, &long, tv, zero_proj, &norm, 6, PriceFusion::Token).unwrap();
        assert_eq!(g.value(out).shape(), &[6, 3]);
        assert_eq!(g.value(out).row(5), table.row(4));

        let out = embed_day(&mut g, &long, tv, zero_proj, &norm, 6, PriceFusion::None).unwrap();
        assert_eq!(g.value(out).row(0), table.row(0));

        assert!(embed_day(&mut g, &long, tv, zero_proj, &norm, 1, PriceFusion::Token).is_err());
    }

    #[test]
    fn one_hot_product_equals_row_lookup() {
        let table = EmbeddingTable::random(10, 4, 21);
        for i in 0..10 {
            let mut g = Graph::new();
            let w = g.leaf(table.matrix().clone());
            let mut onehot = vec![0.0; 10];
            onehot[i] = 1.0;
            let e = g.constant(Tensor::matrix(1, 10, onehot).unwrap());
            let via_matmul = g.matmul(e, w).unwrap();
            let via_lookup = g.gather_rows(w, &[i]).unwrap();
            assert_eq!(g.value(via_matmul).data(), g.value(via_lookup).data());
        }
    }

    #[test]
    fn price_norm_maps_training_range_to_unit_interval() {
        let mut a = day(vec![]);
        let mut b = day(vec![]);
        a.open = 5.0;
        b.open = 15.0;
        let n = PriceNorm::fit([&a, &b]);
        assert_eq!(n.apply(a.price_features())[0], 0.0);
        assert_eq!(n.apply(b.price_features())[0], 1.0);
        // constant feature
        assert_eq!(n.apply(a.price_features())[1], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn vocab_ignores_document_order(
                docs in prop::collection::vec(prop::collection::vec("[a-e]", 0..8), 0..10),
                min_count in 1usize..4,
            ) {
                let v1 = Vocabulary::build(&docs, min_count).unwrap();
                let mut rev = docs.clone();
                rev.reverse();
                let v2 = Vocabulary::build(&rev, min_count).unwrap();
                prop_assert_eq!(&v1, &v2);
                // rebuilding from the retained tokens keeps them all when min_count is 1
                let again = Vocabulary::build([v1.tokens().to_vec()], 1).unwrap();
                let mut a = again.tokens().to_vec();
                let mut b = v1.tokens().to_vec();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn embed_day_shape_is_fixed(n_tokens in 0usize..30, max_len in 2usize..12) {
                let table = EmbeddingTable::random(4, 2, 1);
                let mut g = Graph::new();
                let tv = g.leaf(table.matrix().clone());
                let proj = g.leaf(Tensor::full(&[4, 2], 0.1));
                let d = day((0..n_tokens).map(|i| i % 4).collect());
                let out = embed_day(&mut g, &d, tv, proj, &PriceNorm::default(), max_len, PriceFusion::Token).unwrap();
                prop_assert_eq!(g.value(out).shape(), &[max_len, 2]);
            }
        }
    }
}

//! Mixed-precision bit assignment and model-size accounting.
//!
//! Embedding rows are clustered by word frequency: with `b` clusters and
//! ratio `r`, frequency-rank cluster `i` holds a share `rⁱ / Σₖ rᵏ` of the
//! vocabulary and receives `b − i` bits. Encoder and decoder weights get a
//! bit width per sub-layer type. [`model_size`] turns a plan into exact
//! byte counts using the packed-plane layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bcq::{quantize_matrix, quantize_matrix_ordered, BitCluster, MAX_BITS};
use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::kernel::footprint_for;

/// Sub-layer type a weight matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    EncEe,
    EncFfn,
    DecDd,
    DecEd,
    DecFfn,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::Embedding, Group::EncEe, Group::EncFfn, Group::DecDd, Group::DecEd, Group::DecFfn];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::EncEe => "enc_ee",
            Group::EncFfn => "enc_ffn",
            Group::DecDd => "dec_dd",
            Group::DecEd => "dec_ed",
            Group::DecFfn => "dec_ffn",
        }
    }

    pub fn block(self) -> Block {
        match self {
            Group::Embedding => Block::Embedding,
            Group::EncEe | Group::EncFfn => Block::Encoder,
            Group::DecDd | Group::DecEd | Group::DecFfn => Block::Decoder,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown group {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Embedding,
    Encoder,
    Decoder,
}

/// Architecture sizes that determine every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
}

impl ModelDims {
    /// Transformer base: 512/2048, 6+6 layers, 32768 shared vocabulary.
    pub const BASE: ModelDims =
        ModelDims { d_model: 512, d_ffn: 2048, enc_layers: 6, dec_layers: 6, vocab: 32768 };
}

/// One named parameter tensor of the model. `group` is `None` for biases
/// and layer-norm parameters, which always stay in full precision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: Option<Group>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// Every parameter of the pre-norm encoder-decoder, in canonical order.
///
/// Weight matrices are `[out, in]` so a layer computes `W·x + b`. The
/// embedding is shared by the encoder input, decoder input and output
/// projection and is listed once.
pub fn model_parameters(dims: &ModelDims) -> Vec<ParamSpec> {
    let d = dims.d_model;
    let mut out = Vec::new();
    let mut push = |name: String, rows, cols, group| out.push(ParamSpec { name, rows, cols, group });
    push("embedding".into(), dims.vocab, d, Some(Group::Embedding));

    fn ln(push: &mut impl FnMut(String, usize, usize, Option<Group>), p: &str, d: usize) {
        push(format!("{p}.gain"), 1, d, None);
        push(format!("{p}.bias"), 1, d, None);
    }
    fn attn(push: &mut impl FnMut(String, usize, usize, Option<Group>), p: &str, d: usize, g: Group) {
        for m in ATTN_PROJ {
            push(format!("{p}.{m}.weight"), d, d, Some(g));
            push(format!("{p}.{m}.bias"), 1, d, None);
        }
    }
    fn ffn(push: &mut impl FnMut(String, usize, usize, Option<Group>), p: &str, d: usize, f: usize, g: Group) {
        push(format!("{p}.w1.weight"), f, d, Some(g));
        push(format!("{p}.w1.bias"), 1, f, None);
        push(format!("{p}.w2.weight"), d, f, Some(g));
        push(format!("{p}.w2.bias"), 1, d, None);
    }

    for l in 0..dims.enc_layers {
        ln(&mut push, &format!("enc.{l}.ln1"), d);
        attn(&mut push, &format!("enc.{l}.self_attn"), d, Group::EncEe);
        ln(&mut push, &format!("enc.{l}.ln2"), d);
        ffn(&mut push, &format!("enc.{l}.ffn"), d, dims.d_ffn, Group::EncFfn);
    }
    ln(&mut push, "enc.final_ln", d);
    for l in 0..dims.dec_layers {
        ln(&mut push, &format!("dec.{l}.ln1"), d);
        attn(&mut push, &format!("dec.{l}.self_attn"), d, Group::DecDd);
        ln(&mut push, &format!("dec.{l}.ln2"), d);
        attn(&mut push, &format!("dec.{l}.cross_attn"), d, Group::DecEd);
        ln(&mut push, &format!("dec.{l}.ln3"), d);
        ffn(&mut push, &format!("dec.{l}.ffn"), d, dims.d_ffn, Group::DecFfn);
    }
    ln(&mut push, "dec.final_ln", d);
    out
}

/// Group of a parameter name, or `None` for parameters never quantized.
pub fn group_of(name: &str) -> Option<Group> {
    if name == "embedding" {
        return Some(Group::Embedding);
    }
    if !name.ends_with(".weight") {
        return None;
    }
    let mut parts = name.split('.');
    let stack = parts.next()?;
    parts.next()?.parse::<usize>().ok()?;
    match (stack, parts.next()?) {
        ("enc", "self_attn") => Some(Group::EncEe),
        ("enc", "ffn") => Some(Group::EncFfn),
        ("dec", "self_attn") => Some(Group::DecDd),
        ("dec", "cross_attn") => Some(Group::DecEd),
        ("dec", "ffn") => Some(Group::DecFfn),
        _ => None,
    }
}

/// Parameters of a frequency-clustered embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub ratio: f64,
}

/// Precision of one group or matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    Full,
    Bits(u8),
    Clustered(ClusterConfig),
}

impl Precision {
    pub fn is_quantized(&self) -> bool {
        !matches!(self, Precision::Full)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PrecisionRepr {
    Bits(u8),
    Word(String),
    Clustered(ClusterConfig),
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Precision::Full => PrecisionRepr::Word("fp".into()),
            Precision::Bits(b) => PrecisionRepr::Bits(b),
            Precision::Clustered(c) => PrecisionRepr::Clustered(c),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PrecisionRepr::deserialize(d)? {
            PrecisionRepr::Bits(b) => Ok(Precision::Bits(b)),
            PrecisionRepr::Word(w) if w == "fp" || w == "fp32" => Ok(Precision::Full),
            PrecisionRepr::Word(w) => Err(serde::de::Error::custom(format!(
                "precision must be a bit count, \"fp\" or {{clusters, ratio}}, got {w:?}"
            ))),
            PrecisionRepr::Clustered(c) => Ok(Precision::Clustered(c)),
        }
    }
}

/// Bit assignment for every weight group of a model.
///
/// Plan files are JSON:
///
/// ```json
/// {
///   "model": {"d_model": 512, "d_ffn": 2048, "enc_layers": 6, "dec_layers": 6, "vocab": 32768},
///   "groups": {"embedding": {"clusters": 4, "ratio": 1.0}, "enc_ee": 3, "enc_ffn": 4,
///              "dec_dd": 2, "dec_ed": 3, "dec_ffn": 1},
///   "overrides": {"dec.0.ffn.w1.weight": "fp"}
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub model: ModelDims,
    pub groups: BTreeMap<Group, Precision>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Precision>,
}

impl PrecisionPlan {
    pub fn new(model: ModelDims) -> Self {
        Self { model, groups: BTreeMap::new(), overrides: BTreeMap::new() }
    }

    pub fn with(mut self, group: Group, p: Precision) -> Self {
        self.groups.insert(group, p);
        self
    }

    pub fn uniform(model: ModelDims, bits: u8) -> Self {
        Group::ALL.into_iter().fold(Self::new(model), |p, g| p.with(g, Precision::Bits(bits)))
    }

    pub fn full_precision(model: ModelDims) -> Self {
        Group::ALL.into_iter().fold(Self::new(model), |p, g| p.with(g, Precision::Full))
    }

    /// Embedding clustered with `b = 4`, ratio `r`; decoder (dd, ed, ffn) =
    /// (2, 3, 1); encoder (ee, ffn) = (3, 4).
    pub fn mixed(model: ModelDims, ratio: f64) -> Self {
        Self::new(model)
            .with(Group::Embedding, Precision::Clustered(ClusterConfig { clusters: 4, ratio }))
            .with(Group::DecDd, Precision::Bits(2))
            .with(Group::DecEd, Precision::Bits(3))
            .with(Group::DecFfn, Precision::Bits(1))
            .with(Group::EncEe, Precision::Bits(3))
            .with(Group::EncFfn, Precision::Bits(4))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Precision of one parameter; biases and norms are always full.
    pub fn precision_for(&self, param: &ParamSpec) -> Result<Precision> {
        if let Some(p) = self.overrides.get(&param.name) {
            return Ok(*p);
        }
        match param.group {
            None => Ok(Precision::Full),
            Some(g) => self
                .groups
                .get(&g)
                .copied()
                .ok_or_else(|| Error::Coverage(format!("{} (group {g})", param.name))),
        }
    }

    /// Checks coverage of every weight matrix and the range of every entry.
    pub fn validate(&self) -> Result<()> {
        let params = model_parameters(&self.model);
        for name in self.overrides.keys() {
            match params.iter().find(|p| &p.name == name) {
                Some(p) if p.group.is_some() => {}
                Some(_) => {
                    return Err(Error::InvalidInput(format!(
                        "override for {name}: biases and norms are never quantized"
                    )))
                }
                None => return Err(Error::InvalidInput(format!("override for unknown matrix {name}"))),
            }
        }
        for p in params.iter().filter(|p| p.group.is_some()) {
            match self.precision_for(p)? {
                Precision::Full => {}
                Precision::Bits(b) if (1..=MAX_BITS).contains(&(b as usize)) => {}
                Precision::Bits(b) => return Err(Error::BitsOutOfRange(b as usize)),
                Precision::Clustered(c) => {
                    if p.group != Some(Group::Embedding) {
                        return Err(Error::InvalidInput(format!(
                            "{}: frequency clustering only applies to the embedding",
                            p.name
                        )));
                    }
                    cluster_embedding(p.rows, c.clusters, c.ratio)?;
                }
            }
        }
        Ok(())
    }

    /// Row clusters for one weight matrix, `None` when it stays dense.
    pub fn clusters_for(&self, param: &ParamSpec) -> Result<Option<Vec<BitCluster>>> {
        Ok(match self.precision_for(param)? {
            Precision::Full => None,
            Precision::Bits(b) => {
                if !(1..=MAX_BITS).contains(&(b as usize)) {
                    return Err(Error::BitsOutOfRange(b as usize));
                }
                Some(BitCluster::uniform(param.rows, b as usize))
            }
            Precision::Clustered(c) => Some(cluster_embedding(param.rows, c.clusters, c.ratio)?.clusters),
        })
    }

    /// Groups that are quantized (not full precision) under this plan.
    pub fn quantized_groups(&self) -> BTreeSet<Group> {
        self.groups.iter().filter(|(_, p)| p.is_quantized()).map(|(g, _)| *g).collect()
    }

    pub fn embedding_clusters(&self) -> Option<ClusterConfig> {
        match self.groups.get(&Group::Embedding) {
            Some(Precision::Clustered(c)) => Some(*c),
            _ => None,
        }
    }
}

/// Cluster layout: sizes in stored (frequency-rank) order, bits
/// `b, b−1, …, 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub clusters: Vec<BitCluster>,
    pub ratio: f64,
}

impl ClusterSpec {
    pub fn count(&self) -> usize {
        self.clusters.len()
    }

    pub fn vocab(&self) -> usize {
        self.clusters.iter().map(|c| c.rows).sum()
    }
}

/// Splits `v` rows into `b` clusters of ideal size `v·rⁱ / Σₖ rᵏ`. The first
/// `b − 1` clusters take the floor of their ideal size and the last cluster
/// absorbs the remainder.
pub fn cluster_embedding(v: usize, b: usize, r: f64) -> Result<ClusterSpec> {
    if b == 0 || b > MAX_BITS {
        return Err(Error::InvalidInput(format!("cluster count {b} outside 1..={MAX_BITS}")));
    }
    if v < b {
        return Err(Error::InvalidInput(format!("vocabulary {v} smaller than cluster count {b}")));
    }
    if !r.is_finite() || r < 1.0 {
        return Err(Error::InvalidInput(format!("ratio {r} must be finite and ≥ 1")));
    }
    let denom: f64 = (0..b).map(|k| r.powi(k as i32)).sum();
    let mut clusters = Vec::with_capacity(b);
    let mut assigned = 0;
    for i in 0..b {
        let rows = if i + 1 == b {
            v - assigned
        } else {
            // nudge keeps exact integers (e.g. r = 1) from flooring one short
            let ideal = v as f64 * r.powi(i as i32) / denom;
            ((ideal + 1e-9).floor() as usize).min(v - assigned)
        };
        assigned += rows;
        clusters.push(BitCluster { rows, bits: (b - i) as u8 });
    }
    Ok(ClusterSpec { clusters, ratio: r })
}

/// `Σ c_size · c_bit / v`.
pub fn average_bits_embedding(spec: &ClusterSpec) -> f64 {
    let v = spec.vocab();
    if v == 0 {
        return 0.0;
    }
    let bits: usize = spec.clusters.iter().map(|c| c.rows * c.bits as usize).sum();
    bits as f64 / v as f64
}

/// Corpus count per token id, ids dense in `[0, v)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    /// Every token seen once; sorting then falls back to token id.
    pub fn uniform(vocab: usize) -> Self {
        Self { counts: vec![1; vocab] }
    }

    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Parses `token<TAB>count` lines, `token` being an integer id below
    /// `vocab`. Ids that never appear get count 0; blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_tsv(text: &str, vocab: usize) -> Result<Self> {
        let mut counts = vec![0u64; vocab];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidInput(format!("frequency line {}: {line:?}", lineno + 1));
            let (tok, count) = line.split_once('\t').ok_or_else(bad)?;
            let id: usize = tok.trim().parse().map_err(|_| bad())?;
            let count: u64 = count.trim().parse().map_err(|_| bad())?;
            if id >= vocab {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary of {vocab}")));
            }
            counts[id] += count;
        }
        Ok(Self { counts })
    }

    /// Counts whitespace-separated token ids of a tokenized corpus.
    pub fn from_corpus(text: &str, vocab: usize) -> Result<Self> {
        let mut counts = vec![0u64; vocab];
        for tok in text.split_whitespace() {
            let id: usize = tok
                .parse()
                .map_err(|_| Error::InvalidInput(format!("corpus token {tok:?} is not an id")))?;
            if id >= vocab {
                return Err(Error::InvalidInput(format!("token id {id} outside vocabulary of {vocab}")));
            }
            counts[id] += 1;
        }
        Ok(Self { counts })
    }

    pub fn to_tsv(&self) -> String {
        self.counts.iter().enumerate().map(|(i, c)| format!("{i}\t{c}\n")).collect()
    }
}

/// Output of [`assign_word_bits`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordBits {
    /// Token ids by descending count (ties by ascending id).
    pub order: Vec<u32>,
    /// Bits of the row at each sorted position.
    pub bits: Vec<u8>,
}

impl WordBits {
    /// Bits indexed by token id.
    pub fn bits_by_id(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.order.len()];
        for (&id, &b) in self.order.iter().zip(&self.bits) {
            out[id as usize] = b;
        }
        out
    }
}

pub fn frequency_order(f: &FrequencyTable) -> Vec<u32> {
    let mut order: Vec<u32> = (0..f.vocab() as u32).collect();
    order.sort_by(|&a, &b| f.counts[b as usize].cmp(&f.counts[a as usize]).then(a.cmp(&b)));
    order
}

pub fn assign_word_bits(f: &FrequencyTable, spec: &ClusterSpec) -> Result<WordBits> {
    if f.vocab() != spec.vocab() {
        return Err(Error::ShapeMismatch(format!(
            "frequency table has {} tokens, cluster spec covers {}",
            f.vocab(),
            spec.vocab()
        )));
    }
    let order = frequency_order(f);
    let bits = spec.clusters.iter().flat_map(|c| std::iter::repeat_n(c.bits, c.rows)).collect();
    Ok(WordBits { order, bits })
}

fn matrix_bits(plan: &PrecisionPlan, p: &ParamSpec) -> Result<f64> {
    Ok(match plan.precision_for(p)? {
        Precision::Full => 32.0,
        Precision::Bits(b) => b as f64,
        Precision::Clustered(c) => average_bits_embedding(&cluster_embedding(p.rows, c.clusters, c.ratio)?),
    })
}

/// Parameter-weighted mean bits of the weight matrices of one block. Full
/// precision matrices count as 32 bits.
pub fn sublayer_average_bits(plan: &PrecisionPlan, block: Block) -> Result<f64> {
    let mut bits = 0.0;
    let mut count = 0usize;
    for p in model_parameters(&plan.model) {
        if p.group.map(Group::block) != Some(block) {
            continue;
        }
        bits += matrix_bits(plan, &p)? * p.numel() as f64;
        count += p.numel();
    }
    if count == 0 {
        return Err(Error::InvalidInput(format!("block {block:?} has no weight matrices")));
    }
    Ok(bits / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSize {
    /// Mean bits over quantization-target weights only.
    pub avg_bits: f64,
    /// Mean bits over every parameter, unquantized ones at 32.
    pub whole_model_avg_bits: f64,
    pub embedding_bits: f64,
    pub encoder_bits: f64,
    pub decoder_bits: f64,
    pub target_params: usize,
    pub other_params: usize,
    pub quantized_bytes: usize,
    pub dense_bytes: usize,
    pub ratio: f64,
}

/// Exact byte accounting of a plan: packed planes plus scales for quantized
/// matrices, 4 bytes for every other parameter.
pub fn model_size(plan: &PrecisionPlan) -> Result<ModelSize> {
    let mut target_params = 0;
    let mut other_params = 0;
    let mut target_bits = 0.0;
    let mut quantized_bytes = 0;
    for p in model_parameters(&plan.model) {
        if p.group.is_none() {
            other_params += p.numel();
            quantized_bytes += 4 * p.numel();
            continue;
        }
        target_params += p.numel();
        target_bits += matrix_bits(plan, &p)? * p.numel() as f64;
        quantized_bytes += match plan.clusters_for(&p)? {
            Some(clusters) => footprint_for(p.cols, &clusters),
            None => 4 * p.numel(),
        };
    }
    let dense_bytes = 4 * (target_params + other_params);
    let block_bits = |b| sublayer_average_bits(plan, b).unwrap_or(0.0);
    Ok(ModelSize {
        avg_bits: target_bits / target_params as f64,
        whole_model_avg_bits: (target_bits + 32.0 * other_params as f64)
            / (target_params + other_params) as f64,
        embedding_bits: block_bits(Block::Embedding),
        encoder_bits: block_bits(Block::Encoder),
        decoder_bits: block_bits(Block::Decoder),
        target_params,
        other_params,
        quantized_bytes,
        dense_bytes,
        ratio: dense_bytes as f64 / quantized_bytes as f64,
    })
}

/// Quantizes the dense tensors of a model per `plan`.
///
/// Tensors are returned in canonical parameter order. Full-precision
/// tensors pass through untouched. A clustered embedding needs `freq` to
/// decide which rows get the wider codes; its rows are stored by descending
/// frequency and the permutation is kept in `row_order`.
pub fn quantize_model(
    tensors: &[Tensor],
    plan: &PrecisionPlan,
    freq: Option<&FrequencyTable>,
) -> Result<Vec<Tensor>> {
    plan.validate()?;
    let params = model_parameters(&plan.model);
    for t in tensors {
        if !params.iter().any(|p| p.name == t.name()) {
            return Err(Error::InvalidInput(format!("{} is not a parameter of the planned model", t.name())));
        }
    }
    let mut out = Vec::with_capacity(params.len());
    for p in &params {
        let t = tensors
            .iter()
            .find(|t| t.name() == p.name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint is missing {}", p.name)))?;
        if t.shape() != (p.rows, p.cols) {
            return Err(Error::ShapeMismatch(format!(
                "{}: checkpoint has {:?}, model expects {:?}",
                p.name,
                t.shape(),
                (p.rows, p.cols)
            )));
        }
        let Some(clusters) = plan.clusters_for(p)? else {
            out.push(t.clone());
            continue;
        };
        let dense = t
            .as_dense()
            .ok_or_else(|| Error::InvalidInput(format!("{} is already quantized", p.name)))?;
        let q = match plan.precision_for(p)? {
            Precision::Clustered(_) => {
                let f = freq.ok_or_else(|| {
                    Error::InvalidInput("plan clusters the embedding by frequency; a frequency table is required".into())
                })?;
                if f.vocab() != p.rows {
                    return Err(Error::ShapeMismatch(format!(
                        "frequency table has {} tokens, embedding has {} rows",
                        f.vocab(),
                        p.rows
                    )));
                }
                quantize_matrix_ordered(dense, &clusters, frequency_order(f))?
            }
            _ => quantize_matrix(dense, &clusters)?,
        };
        out.push(Tensor::Quantized(q));
    }
    Ok(out)
}

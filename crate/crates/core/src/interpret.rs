//! Reading symbols and roles back out of a trained network.
//!
//! Role clusters come from thresholding the L2-normalized role attention.
//! Symbols are assigned per occurrence by cosine between `s = S a_S` and the
//! columns of `S`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::Direction;
use crate::data::{EmbeddingTable, Example};
use crate::error::{Error, IoContext, Result};
use crate::jsonfmt;
use crate::linalg::{self, Matrix, Vector};
use crate::model::TprModel;

/// Attention recorded for one token occurrence in one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TraceRecord {
    pub token_text: String,
    pub example_id: usize,
    pub position: usize,
    pub direction: Direction,
    pub a_s: Vec<f64>,
    pub a_r: Vec<f64>,
}

impl TraceRecord {
    /// `â_R = a_R / ‖a_R‖`.
    pub fn role_normalized(&self) -> Result<Vector> {
        linalg::l2_normalize(&Vector::new(self.a_r.clone())?)
    }

    /// `s = S a_S`.
    pub fn symbol_vector(&self, symbols: &Matrix) -> Result<Vector> {
        symbols.matvec(&Vector::new(self.a_s.clone())?)
    }
}

/// Runs both directions over every example. Records are grouped by
/// example; within an example forward records precede backward ones.
pub fn dump_traces(model: &TprModel, corpus: &[Example], table: &EmbeddingTable) -> Result<Vec<TraceRecord>> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("empty corpus".into()));
    }
    let per_example: Vec<Result<Vec<TraceRecord>>> = corpus
        .par_iter()
        .enumerate()
        .map(|(id, ex)| {
            let inputs = ex
                .tokens
                .iter()
                .map(|&t| {
                    (t < table.len())
                        .then(|| table.vector(t).clone())
                        .ok_or_else(|| Error::Input(format!("example {id}: token {t} outside the embedding table")))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = model.run(&inputs)?;
            let mut recs = Vec::with_capacity(2 * inputs.len());
            for (dir, traces) in [(Direction::Forward, &out.forward), (Direction::Backward, &out.backward)] {
                for tr in traces {
                    recs.push(TraceRecord {
                        token_text: table.token(ex.tokens[tr.token_index]).to_string(),
                        example_id: id,
                        position: tr.token_index,
                        direction: dir,
                        a_s: tr.a_s.as_slice().to_vec(),
                        a_r: tr.a_r.as_slice().to_vec(),
                    });
                }
            }
            Ok(recs)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_example {
        all.extend(r?);
    }
    Ok(all)
}

pub fn write_dump<W: Write>(records: &[TraceRecord], mut w: W) -> Result<()> {
    for r in records {
        jsonfmt::to_writer(&mut w, r)?;
        w.write_all(b"\n").io_context(|| "writing trace dump".into())?;
    }
    Ok(())
}

pub fn save_dump(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).io_context(|| format!("creating {}", path.display()))?);
    write_dump(records, &mut f)?;
    f.flush().io_context(|| format!("writing {}", path.display()))
}

pub fn load_dump(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse { path: path.into(), line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

/// Which directions feed the statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionFilter {
    #[default]
    Forward,
    Backward,
    Pooled,
}

impl DirectionFilter {
    pub fn admits(self, d: Direction) -> bool {
        match self {
            DirectionFilter::Forward => d == Direction::Forward,
            DirectionFilter::Backward => d == Direction::Backward,
            DirectionFilter::Pooled => true,
        }
    }
}

/// Per-role thresholds `θ_k`: a default plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleThresholds {
    pub default: f64,
    #[serde(with = "index_keys")]
    pub overrides: BTreeMap<usize, f64>,
}

/// Map keys as decimal strings, which every text format accepts.
mod index_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("role index {k:?} is not a number"))))
            .collect()
    }
}

impl Default for RoleThresholds {
    fn default() -> Self {
        Self { default: 0.5, overrides: BTreeMap::new() }
    }
}

impl RoleThresholds {
    pub fn get(&self, role: usize) -> f64 {
        self.overrides.get(&role).copied().unwrap_or(self.default)
    }

    pub fn validate(&self, n_roles: usize) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.default) {
            return Err(Error::Config(format!("role threshold {} not in (0, 1)", self.default)));
        }
        for (&k, &t) in &self.overrides {
            if k >= n_roles {
                return Err(Error::Config(format!("threshold override for role {k}, only {n_roles} roles")));
            }
            if !ok(t) {
                return Err(Error::Config(format!("threshold {t} for role {k} not in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoleAssignment {
    pub role: usize,
    pub threshold: f64,
    /// Indices into the record slice.
    pub members: Vec<usize>,
}

/// Occurrence `i` joins role `k` iff `â_R[k] > θ_k`. An occurrence may join
/// several roles or none.
pub fn assign_roles(records: &[TraceRecord], thresholds: &RoleThresholds) -> Result<Vec<RoleAssignment>> {
    let n_roles = records.first().map_or(0, |r| r.a_r.len());
    thresholds.validate(n_roles)?;
    let normalized: Vec<Vector> = records.par_iter().map(|r| r.role_normalized()).collect::<Result<_>>()?;
    let mut out: Vec<RoleAssignment> =
        (0..n_roles).map(|k| RoleAssignment { role: k, threshold: thresholds.get(k), members: Vec::new() }).collect();
    for (i, r) in normalized.iter().enumerate() {
        if r.len() != n_roles {
            return Err(Error::Input(format!("record {i} has {} role weights, expected {n_roles}", r.len())));
        }
        for (k, a) in out.iter_mut().enumerate() {
            if r[k] > a.threshold {
                a.members.push(i);
            }
        }
    }
    Ok(out)
}

/// What a symbol's attention is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SymbolMode {
    /// Cosine between `s = S a_S` and each column of `S`.
    #[default]
    Embedding,
    /// Cosine between `a_S` and each one-hot vector, i.e. `a_S[j] / ‖a_S‖`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymbolChoice {
    pub symbol: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolAssignment {
    /// One entry per record, aligned with the input slice.
    pub per_occurrence: Vec<SymbolChoice>,
    /// Per symbol: best similarity per token type, descending, ties by
    /// token text, truncated to `top_k`.
    pub top_tokens: Vec<Vec<RankedToken>>,
    /// Occurrences assigned to each symbol.
    pub counts: Vec<usize>,
}

fn argmax_similarity(sims: impl Iterator<Item = f64>) -> SymbolChoice {
    let mut best = SymbolChoice { symbol: 0, similarity: f64::NEG_INFINITY };
    for (j, s) in sims.enumerate() {
        if s > best.similarity {
            best = SymbolChoice { symbol: j, similarity: s };
        }
    }
    best
}

pub fn assign_symbols(
    records: &[TraceRecord],
    symbols: &Matrix,
    mode: SymbolMode,
    top_k: usize,
) -> Result<SymbolAssignment> {
    let n = symbols.cols();
    let columns: Vec<Vector> = (0..n).map(|j| Vector::new(symbols.column(j).to_vec())).collect::<Result<_>>()?;
    if let Some(j) = columns.iter().position(|c| c.norm() == 0.0) {
        return Err(Error::Degenerate(format!("symbol column {j} has zero norm")));
    }
    let per_occurrence: Vec<SymbolChoice> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.a_s.len() != n {
                return Err(Error::Input(format!("record {i} has {} symbol weights, S has {n} columns", r.a_s.len())));
            }
            let degenerate = || Error::Degenerate(format!("record {i} has a zero symbol vector"));
            match mode {
                SymbolMode::Embedding => {
                    let s = r.symbol_vector(symbols)?;
                    if s.norm() == 0.0 {
                        return Err(degenerate());
                    }
                    let sims = columns.iter().map(|c| linalg::cosine(&s, c)).collect::<Result<Vec<_>>>()?;
                    Ok(argmax_similarity(sims.into_iter()))
                }
                SymbolMode::Literal => {
                    let norm = linalg::norm(&r.a_s);
                    if norm == 0.0 {
                        return Err(degenerate());
                    }
                    Ok(argmax_similarity(r.a_s.iter().map(|a| a / norm)))
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0; n];
    let mut best: Vec<BTreeMap<&str, f64>> = vec![BTreeMap::new(); n];
    for (r, c) in records.iter().zip(&per_occurrence) {
        counts[c.symbol] += 1;
        let e = best[c.symbol].entry(&r.token_text).or_insert(f64::NEG_INFINITY);
        *e = e.max(c.similarity);
    }
    let top_tokens = best
        .into_iter()
        .map(|m| {
            let mut v: Vec<RankedToken> =
                m.into_iter().map(|(t, s)| RankedToken { token: t.to_string(), similarity: s }).collect();
            v.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.token.cmp(&b.token)));
            v.truncate(top_k);
            v
        })
        .collect();
    Ok(SymbolAssignment { per_occurrence, top_tokens, counts })
}

/// One cell of a cluster-by-label contingency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Cell {
    pub cluster: String,
    pub label: String,
    pub count: usize,
    pub p_label_given_cluster: f64,
    pub p_cluster_given_label: f64,
}

/// Raw-count contingency table with both conditional distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContingencyTable {
    pub name: String,
    /// Nonzero cells, sorted by cluster then label.
    pub cells: Vec<Cell>,
}

/// Sort key that puts numeric ids in numeric order.
fn natural_key(s: &str) -> (u8, u64, &str) {
    match s.parse::<u64>() {
        Ok(n) => (0, n, ""),
        Err(_) => (1, 0, s),
    }
}

impl ContingencyTable {
    /// Builds the table from `(cluster, label)` observations.
    pub fn from_pairs<I, C, L>(name: impl Into<String>, pairs: I) -> Self
    where
        I: IntoIterator<Item = (C, L)>,
        C: ToString,
        L: ToString,
    {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (c, l) in pairs {
            *counts.entry((c.to_string(), l.to_string())).or_default() += 1;
        }
        let mut by_cluster: BTreeMap<&str, usize> = BTreeMap::new();
        let mut by_label: BTreeMap<&str, usize> = BTreeMap::new();
        for ((c, l), &n) in &counts {
            *by_cluster.entry(c).or_default() += n;
            *by_label.entry(l).or_default() += n;
        }
        let mut cells: Vec<Cell> = counts
            .iter()
            .map(|((c, l), &n)| Cell {
                cluster: c.clone(),
                label: l.clone(),
                count: n,
                p_label_given_cluster: n as f64 / by_cluster[c.as_str()] as f64,
                p_cluster_given_label: n as f64 / by_label[l.as_str()] as f64,
            })
            .collect();
        cells.sort_by(|a, b| {
            natural_key(&a.cluster).cmp(&natural_key(&b.cluster)).then_with(|| natural_key(&a.label).cmp(&natural_key(&b.label)))
        });
        Self { name: name.into(), cells }
    }

    pub fn clusters(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.cells.iter().map(|c| c.cluster.as_str()).filter(|c| seen.insert(*c)).collect()
    }

    pub fn cluster_size(&self, cluster: &str) -> usize {
        self.cells.iter().filter(|c| c.cluster == cluster).map(|c| c.count).sum()
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Majority label per cluster with at least `min_size` members, as
    /// `(cluster, label, p(label | cluster), size)`. Ties go to the first
    /// label in table order.
    pub fn majorities(&self, min_size: usize) -> Vec<(String, String, f64, usize)> {
        let mut out = Vec::new();
        for cluster in self.clusters() {
            let size = self.cluster_size(cluster);
            if size < min_size {
                continue;
            }
            let mut best: Option<&Cell> = None;
            for c in self.cells.iter().filter(|c| c.cluster == cluster) {
                if best.map_or(true, |b| c.count > b.count) {
                    best = Some(c);
                }
            }
            let b = best.expect("cluster has cells");
            out.push((cluster.to_string(), b.label.clone(), b.p_label_given_cluster, size));
        }
        out
    }

    /// Count in a cell, zero if absent.
    pub fn count(&self, cluster: &str, label: &str) -> usize {
        self.cells.iter().find(|c| c.cluster == cluster && c.label == label).map_or(0, |c| c.count)
    }
}

/// Role clusters against a per-occurrence gold label.
pub fn role_purity<F>(name: &str, records: &[TraceRecord], roles: &[RoleAssignment], gold: F) -> Result<ContingencyTable>
where
    F: Fn(&TraceRecord) -> Result<String>,
{
    let mut pairs = Vec::new();
    for a in roles {
        for &i in &a.members {
            pairs.push((a.role, gold(&records[i])?));
        }
    }
    Ok(ContingencyTable::from_pairs(name, pairs))
}

/// Symbol assignments against a per-occurrence gold label.
pub fn symbol_purity<F>(name: &str, records: &[TraceRecord], symbols: &SymbolAssignment, gold: F) -> Result<ContingencyTable>
where
    F: Fn(&TraceRecord) -> Result<String>,
{
    let pairs = records
        .iter()
        .zip(&symbols.per_occurrence)
        .map(|(r, c)| Ok((c.symbol, gold(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContingencyTable::from_pairs(name, pairs))
}

/// Context class by assigned symbol for every occurrence of `word`.
/// Clusters are symbols, labels are contexts.
pub fn polysemy_table<F>(word: &str, records: &[TraceRecord], symbols: &SymbolAssignment, context: F) -> Result<ContingencyTable>
where
    F: Fn(&TraceRecord) -> Result<String>,
{
    let mut pairs = Vec::new();
    for (r, c) in records.iter().zip(&symbols.per_occurrence) {
        if r.token_text == word {
            pairs.push((c.symbol, context(r)?));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Input(format!("word {word:?} does not occur in the dump")));
    }
    Ok(ContingencyTable::from_pairs(format!("polysemy:{word}"), pairs))
}

/// The standard context split: first token of its sequence or not.
pub fn initial_context(r: &TraceRecord) -> Result<String> {
    Ok(if r.position == 0 { "initial" } else { "non-initial" }.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub tables: Vec<ContingencyTable>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&ContingencyTable> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

const CSV_HEADER: [&str; 6] = ["table", "cluster", "label", "count", "pLabelGivenCluster", "pClusterGivenLabel"];

pub fn write_report<W: Write>(report: &Report, format: ReportFormat, mut w: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let s = jsonfmt::to_string_pretty(report)?;
            w.write_all(s.as_bytes()).and_then(|_| w.write_all(b"\n")).io_context(|| "writing report".into())
        }
        ReportFormat::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            let err = |e: csv::Error| Error::Input(format!("writing report: {e}"));
            csv.write_record(CSV_HEADER).map_err(err)?;
            for t in &report.tables {
                for c in &t.cells {
                    csv.write_record([
                        t.name.as_str(),
                        &c.cluster,
                        &c.label,
                        &c.count.to_string(),
                        &jsonfmt::sig17(c.p_label_given_cluster),
                        &jsonfmt::sig17(c.p_cluster_given_label),
                    ])
                    .map_err(err)?;
                }
            }
            csv.flush().io_context(|| "writing report".into())
        }
    }
}

pub fn save_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).io_context(|| format!("creating {}", path.display()))?);
    write_report(report, format, &mut f)?;
    f.flush().io_context(|| format!("writing {}", path.display()))
}

pub fn read_report<R: std::io::Read>(r: R, format: ReportFormat) -> Result<Report> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_reader(r)?),
        ReportFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(r);
            let bad = |e: String| Error::Input(format!("reading report: {e}"));
            let header = rdr.headers().map_err(|e| bad(e.to_string()))?;
            if header.iter().ne(CSV_HEADER) {
                return Err(bad(format!("unexpected header {header:?}")));
            }
            let mut report = Report::default();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
                let cell = Cell {
                    cluster: rec[1].to_string(),
                    label: rec[2].to_string(),
                    count: rec[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    p_label_given_cluster: num(4)?,
                    p_cluster_given_label: num(5)?,
                };
                match report.tables.last_mut() {
                    Some(t) if t.name == rec[0] => t.cells.push(cell),
                    _ => report.tables.push(ContingencyTable { name: rec[0].to_string(), cells: vec![cell] }),
                }
            }
            Ok(report)
        }
    }
}

pub fn load_report(path: &Path, format: ReportFormat) -> Result<Report> {
    let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    read_report(BufReader::new(f), format)
}

/// Settings for [`interpret`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub direction: DirectionFilter,
    pub thresholds: RoleThresholds,
    pub symbol_mode: SymbolMode,
    pub top_k: usize,
    /// Words whose symbol choice is tabulated against [`initial_context`].
    pub polysemy_words: Vec<String>,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            direction: DirectionFilter::Forward,
            thresholds: RoleThresholds::default(),
            symbol_mode: SymbolMode::Embedding,
            top_k: 30,
            polysemy_words: Vec::new(),
        }
    }
}

/// Everything [`interpret`] derives from a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpretation {
    /// The records selected by the direction filter.
    pub records: Vec<TraceRecord>,
    pub roles: Vec<RoleAssignment>,
    pub symbols: SymbolAssignment,
    pub report: Report,
}

/// Role and symbol clusters for the filtered records, with purity tables
/// against the corpus gold roles and classes and optional POS tags.
pub fn interpret(
    model: &TprModel,
    dump: &[TraceRecord],
    corpus: &[Example],
    pos: Option<&crate::data::PosAnnotation>,
    cfg: &InterpretConfig,
) -> Result<Interpretation> {
    let records: Vec<TraceRecord> = dump.iter().filter(|r| cfg.direction.admits(r.direction)).cloned().collect();
    if records.is_empty() {
        return Err(Error::Degenerate("no trace records for the selected direction".into()));
    }
    // Both directions share nothing, so pooled symbols use each record's own S.
    let roles = assign_roles(&records, &cfg.thresholds)?;
    let symbols = match cfg.direction {
        DirectionFilter::Backward => assign_symbols(&records, &model.backward.symbols, cfg.symbol_mode, cfg.top_k)?,
        DirectionFilter::Forward => assign_symbols(&records, &model.forward.symbols, cfg.symbol_mode, cfg.top_k)?,
        DirectionFilter::Pooled => {
            let (fwd, bwd): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.direction == Direction::Forward);
            let f = assign_symbols(&fwd, &model.forward.symbols, cfg.symbol_mode, cfg.top_k)?;
            let b = assign_symbols(&bwd, &model.backward.symbols, cfg.symbol_mode, cfg.top_k)?;
            let (mut fi, mut bi) = (f.per_occurrence.into_iter(), b.per_occurrence.into_iter());
            let per_occurrence: Vec<SymbolChoice> = records
                .iter()
                .map(|r| if r.direction == Direction::Forward { fi.next() } else { bi.next() }.expect("partition sizes"))
                .collect();
            let mut counts = vec![0; model.hyper.n_symbols];
            per_occurrence.iter().for_each(|c| counts[c.symbol] += 1);
            // Token rankings only make sense within one S; keep the forward ones.
            SymbolAssignment { per_occurrence, top_tokens: f.top_tokens, counts }
        }
    };

    let example = |r: &TraceRecord| {
        corpus.get(r.example_id).filter(|e| r.position < e.len()).ok_or_else(|| {
            Error::Input(format!("record at example {} position {} has no gold annotation", r.example_id, r.position))
        })
    };
    let gold_role = |r: &TraceRecord| Ok(example(r)?.gold_roles[r.position].to_string());
    let gold_class = |r: &TraceRecord| Ok(example(r)?.gold_classes[r.position].to_string());
    let mut tables = vec![
        role_purity("role-vs-gold-role", &records, &roles, gold_role)?,
        symbol_purity("symbol-vs-gold-class", &records, &symbols, gold_class)?,
    ];
    if let Some(pos) = pos {
        let tag = |r: &TraceRecord| {
            pos.get(r.example_id, r.position)
                .map(str::to_string)
                .ok_or_else(|| Error::Input(format!("no POS tag at example {} position {}", r.example_id, r.position)))
        };
        let tagged: Vec<usize> =
            (0..records.len()).filter(|&i| pos.get(records[i].example_id, records[i].position).is_some()).collect();
        if !tagged.is_empty() {
            let sub: Vec<TraceRecord> = tagged.iter().map(|&i| records[i].clone()).collect();
            let sub_roles = assign_roles(&sub, &cfg.thresholds)?;
            tables.push(role_purity("role-vs-pos", &sub, &sub_roles, tag)?);
        }
    }
    for w in &cfg.polysemy_words {
        tables.push(polysemy_table(w, &records, &symbols, initial_context)?);
    }
    Ok(Interpretation { records, roles, symbols, report: Report { tables } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(token: &str, a_s: Vec<f64>, a_r: Vec<f64>) -> TraceRecord {
        TraceRecord { token_text: token.into(), example_id: 0, position: 0, direction: Direction::Forward, a_s, a_r }
    }

    fn one_hot(n: usize, j: usize) -> Vec<f64> {
        (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn one_hot_role_lands_in_its_argmax() {
        let recs: Vec<_> = (0..4).map(|k| rec("x", vec![1.0], one_hot(4, k))).collect();
        let roles = assign_roles(&recs, &RoleThresholds::default()).unwrap();
        for (k, a) in roles.iter().enumerate() {
            assert_eq!(a.members, vec![k]);
        }
    }

    #[test]
    fn threshold_overrides() {
        let t = RoleThresholds { default: 0.5, overrides: [(1, 0.65), (2, 0.25)].into() };
        t.validate(3).unwrap();
        assert_eq!(t.get(1), 0.65);
        // â_R = (0.6, 0.6, 0.53): role 1 needs 0.65 now, role 2 only 0.25.
        let r = rec("x", vec![1.0], vec![0.6, 0.6, 0.53]);
        let n = r.role_normalized().unwrap();
        let roles = assign_roles(&[r], &t).unwrap();
        assert_eq!(roles[0].members.len(), usize::from(n[0] > 0.5));
        assert!(roles[1].members.is_empty());
        assert_eq!(roles[2].members, vec![0]);
        assert!(RoleThresholds { default: 1.0, ..Default::default() }.validate(3).is_err());
        assert!(RoleThresholds { default: 0.5, overrides: [(0, 0.0)].into() }.validate(3).is_err());
        assert!(RoleThresholds { default: 0.5, overrides: [(5, 0.3)].into() }.validate(3).is_err());
    }

    #[test]
    fn midpoint_threshold_splits_two_groups() {
        // Role 0 carries a graded feature: high for one group, low for the other.
        let mut recs = Vec::new();
        for i in 0..50 {
            let hi = i % 2 == 0;
            let x = if hi { 0.9 - 0.002 * i as f64 } else { 0.05 + 0.002 * i as f64 };
            recs.push(rec(if hi { "plural" } else { "singular" }, vec![1.0], vec![x, 0.8]));
        }
        let t = RoleThresholds { default: 0.5, overrides: [(0, 0.25)].into() };
        let roles = assign_roles(&recs, &t).unwrap();
        assert_eq!(roles[0].members.len(), 25);
        assert!(roles[0].members.iter().all(|&i| recs[i].token_text == "plural"));
    }

    #[test]
    fn orthonormal_symbols_with_one_hot_attention() {
        let s = Matrix::identity(4);
        let recs: Vec<_> = (0..4).map(|j| rec(&format!("t{j}"), one_hot(4, j), vec![1.0])).collect();
        for mode in [SymbolMode::Embedding, SymbolMode::Literal] {
            let a = assign_symbols(&recs, &s, mode, 30).unwrap();
            for (j, c) in a.per_occurrence.iter().enumerate() {
                assert_eq!(c.symbol, j);
                assert!((c.similarity - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicate_types_collapse_and_ties_sort_by_text() {
        let s = Matrix::identity(2);
        let recs = vec![
            rec("b", vec![1.0, 0.1], vec![1.0]),
            rec("a", vec![1.0, 0.1], vec![1.0]),
            rec("b", vec![1.0, 0.0], vec![1.0]),
            rec("c", vec![1.0, 0.5], vec![1.0]),
        ];
        let a = assign_symbols(&recs, &s, SymbolMode::Embedding, 30).unwrap();
        let list: Vec<&str> = a.top_tokens[0].iter().map(|t| t.token.as_str()).collect();
        assert_eq!(list, vec!["b", "a", "c"]);
        assert_eq!(a.top_tokens[0][0].similarity, 1.0);
        assert_eq!(a.counts, vec![4, 0]);
        let short = assign_symbols(&recs, &s, SymbolMode::Embedding, 2).unwrap();
        assert_eq!(short.top_tokens[0].len(), 2);
    }

    #[test]
    fn zero_symbol_column_is_named() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.0, 0.0, 0.5]]).unwrap();
        match assign_symbols(&[rec("x", vec![1.0, 0.0, 0.0], vec![1.0])], &s, SymbolMode::Embedding, 30) {
            Err(Error::Degenerate(m)) => assert!(m.contains("column 1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matches_brute_force_cosine() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (d, n) = (3, 5);
        let data: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Matrix::from_col_major(d, n, data).unwrap();
        let recs: Vec<_> =
            (0..40).map(|i| rec(&format!("w{}", i % 7), (0..n).map(|_| rng.gen::<f64>()).collect(), vec![1.0])).collect();
        let a = assign_symbols(&recs, &s, SymbolMode::Embedding, 30).unwrap();
        for (r, c) in recs.iter().zip(&a.per_occurrence) {
            let v: Vec<f64> = (0..d).map(|i| (0..n).map(|j| s.get(i, j) * r.a_s[j]).sum()).collect();
            let mut best = (0, f64::MIN);
            for j in 0..n {
                let col = s.column(j);
                let dot: f64 = v.iter().zip(col).map(|(x, y)| x * y).sum();
                let cos = dot / (v.iter().map(|x| x * x).sum::<f64>().sqrt() * col.iter().map(|x| x * x).sum::<f64>().sqrt());
                if cos > best.1 {
                    best = (j, cos);
                }
            }
            assert_eq!(c.symbol, best.0);
            assert!((c.similarity - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn purity_cases() {
        let aligned = ContingencyTable::from_pairs("t", [(0, "a"), (0, "a"), (1, "b")]);
        assert!(aligned.cells.iter().all(|c| c.p_label_given_cluster == 1.0 && c.p_cluster_given_label == 1.0));
        let split = ContingencyTable::from_pairs("t", [(0, "a"), (0, "b")]);
        assert!(split.cells.iter().all(|c| c.p_label_given_cluster == 0.5 && c.p_cluster_given_label == 1.0));
    }

    #[test]
    fn hand_counted_contingency() {
        // cluster 0: a a a b ; cluster 1: b b c ; label totals a3 b3 c1
        let pairs = [(0, "a"), (0, "a"), (0, "a"), (0, "b"), (1, "b"), (1, "b"), (1, "c")];
        let t = ContingencyTable::from_pairs("t", pairs);
        let cell = |c: &str, l: &str| t.cells.iter().find(|x| x.cluster == c && x.label == l).unwrap().clone();
        assert_eq!(cell("0", "a").p_label_given_cluster, 0.75);
        assert_eq!(cell("0", "b").p_cluster_given_label, 1.0 / 3.0);
        assert_eq!(cell("1", "b").p_label_given_cluster, 2.0 / 3.0);
        assert_eq!(cell("1", "b").p_cluster_given_label, 2.0 / 3.0);
        assert_eq!(cell("1", "c").p_cluster_given_label, 1.0);
        assert_eq!(t.majorities(4), vec![("0".into(), "a".into(), 0.75, 4)]);
        assert_eq!(t.total(), 7);
    }

    #[test]
    fn polysemy_conserves_occurrences() {
        let s = Matrix::identity(2);
        let mut recs = vec![
            rec("who", vec![1.0, 0.0], vec![1.0]),
            rec("who", vec![0.0, 1.0], vec![1.0]),
            rec("who", vec![0.0, 1.0], vec![1.0]),
            rec("cat", vec![1.0, 0.0], vec![1.0]),
        ];
        recs[1].position = 3;
        recs[2].position = 1;
        let a = assign_symbols(&recs, &s, SymbolMode::Embedding, 30).unwrap();
        let t = polysemy_table("who", &recs, &a, initial_context).unwrap();
        assert_eq!(t.total(), 3);
        assert_eq!(t.count("0", "initial"), 1);
        assert_eq!(t.count("1", "non-initial"), 2);
        let single = polysemy_table("cat", &recs, &a, initial_context).unwrap();
        assert_eq!(single.cells.len(), 1);
        assert!(polysemy_table("dog", &recs, &a, initial_context).is_err());
    }

    #[test]
    fn one_hot_attention_partitions_occurrences() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0, 0.7], vec![0.0, 1.0, 0.7]]).unwrap();
        let recs: Vec<_> = (0..9).map(|i| rec("x", one_hot(3, i % 3), one_hot(4, i % 4))).collect();
        let roles = assign_roles(&recs, &RoleThresholds::default()).unwrap();
        let mut seen = vec![0; recs.len()];
        roles.iter().flat_map(|a| &a.members).for_each(|&i| seen[i] += 1);
        assert!(seen.iter().all(|&n| n == 1));
        let a = assign_symbols(&recs, &s, SymbolMode::Embedding, 30).unwrap();
        assert_eq!(a.counts.iter().sum::<usize>(), recs.len());
    }

    #[test]
    fn reports_round_trip() {
        let empty = Report::default();
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let mut buf = Vec::new();
            write_report(&empty, fmt, &mut buf).unwrap();
            assert_eq!(read_report(&buf[..], fmt).unwrap(), empty);
        }
        let mut buf = Vec::new();
        write_report(&empty, ReportFormat::Csv, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "table,cluster,label,count,pLabelGivenCluster,pClusterGivenLabel\n");

        let report = Report {
            tables: vec![
                ContingencyTable::from_pairs("r", [(0, "a"), (0, "b"), (2, "b"), (10, "a")]),
                ContingencyTable::from_pairs("polysemy:who", [(3, "initial"), (5, "non-initial,odd")]),
            ],
        };
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let mut buf = Vec::new();
            write_report(&report, fmt, &mut buf).unwrap();
            assert_eq!(read_report(&buf[..], fmt).unwrap(), report);
            let mut again = Vec::new();
            write_report(&report, fmt, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn natural_cluster_order() {
        let t = ContingencyTable::from_pairs("t", [(10, "x"), (2, "x"), (1, "x")]);
        assert_eq!(t.clusters(), vec!["1", "2", "10"]);
    }

    proptest! {
        #[test]
        fn symbols_ignore_scale(seed in 0u64..500, c in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Matrix::from_col_major(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let recs: Vec<_> = (0..10).map(|_| rec("w", (0..4).map(|_| rng.gen_range(0.01..1.0)).collect(), vec![1.0])).collect();
            let scaled: Vec<_> = recs.iter().map(|r| TraceRecord { a_s: r.a_s.iter().map(|x| x * c).collect(), ..r.clone() }).collect();
            for mode in [SymbolMode::Embedding, SymbolMode::Literal] {
                let a = assign_symbols(&recs, &s, mode, 30).unwrap();
                let b = assign_symbols(&scaled, &s, mode, 30).unwrap();
                for (x, y) in a.per_occurrence.iter().zip(&b.per_occurrence) {
                    prop_assert_eq!(x.symbol, y.symbol);
                    prop_assert!((x.similarity - y.similarity).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn roles_ignore_scale(seed in 0u64..500, c in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..20).map(|_| rec("w", vec![1.0], (0..5).map(|_| rng.gen_range(0.01..1.0)).collect())).collect();
            let scaled: Vec<_> = recs.iter().map(|r| TraceRecord { a_r: r.a_r.iter().map(|x| x * c).collect(), ..r.clone() }).collect();
            let t = RoleThresholds::default();
            let a = assign_roles(&recs, &t).unwrap();
            let b = assign_roles(&scaled, &t).unwrap();
            // Memberships agree except where â_R sits within rounding of θ.
            for (x, y) in a.iter().zip(&b) {
                for i in x.members.iter().filter(|i| !y.members.contains(i)).chain(y.members.iter().filter(|i| !x.members.contains(i))) {
                    let v = recs[*i].role_normalized().unwrap()[x.role];
                    prop_assert!((v - 0.5).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn conditionals_sum_to_one(pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..200)) {
            let t = ContingencyTable::from_pairs("t", pairs);
            for cl in t.clusters() {
                let s: f64 = t.cells.iter().filter(|c| c.cluster == cl).map(|c| c.p_label_given_cluster).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let labels: BTreeSet<&str> = t.cells.iter().map(|c| c.label.as_str()).collect();
            for l in labels {
                let s: f64 = t.cells.iter().filter(|c| c.label == l).map(|c| c.p_cluster_given_label).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

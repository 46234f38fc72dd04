//! Word embeddings, the synthetic grammar and its corpora, and POS ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::linalg::{Matrix, Vector};
use crate::objective::{TaskKind, TokenTarget};
use crate::train::{Sample, Target};

/// Splits on Unicode whitespace. Desk corpora arrive pre-tokenized.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Token vocabulary with one `d_word` vector per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vector>,
    d_word: usize,
}

impl EmbeddingTable {
    pub fn new(entries: Vec<(String, Vector)>) -> Result<Self> {
        let d_word = entries.first().map(|(_, v)| v.len()).ok_or_else(|| Error::Input("no embeddings".into()))?;
        let mut table = Self { tokens: Vec::new(), index: HashMap::new(), vectors: Vec::new(), d_word };
        for (token, v) in entries {
            table.insert(token, v)?;
        }
        Ok(table)
    }

    fn insert(&mut self, token: String, v: Vector) -> Result<()> {
        if v.len() != self.d_word {
            return Err(Error::Input(format!("{token}: {} values, expected {}", v.len(), self.d_word)));
        }
        if let Some(&i) = self.index.get(&token) {
            log::warn!("duplicate embedding for {token:?}; keeping the later one");
            self.vectors[i] = v;
        } else {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
            self.vectors.push(v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d_word(&self) -> usize {
        self.d_word
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vector(&self, i: usize) -> &Vector {
        &self.vectors[i]
    }

    pub fn get(&self, token: &str) -> Option<&Vector> {
        self.index_of(token).map(|i| &self.vectors[i])
    }

    /// `|V| x d_word` matrix, one row per token.
    pub fn matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.vectors.iter().map(|v| v.as_slice().to_vec()).collect();
        Matrix::from_rows(&rows).expect("rows share d_word")
    }

    /// The stored vector, or a random one derived from `(seed, token)` so
    /// repeated lookups of the same unknown token agree.
    pub fn vector_or_oov(&self, token: &str, seed: u64) -> Vector {
        if let Some(v) = self.get(token) {
            return v.clone();
        }
        log::info!("out-of-vocabulary token {token:?}");
        let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(token.as_bytes()).finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let a = (3.0 / self.d_word as f64).sqrt();
        Vector::from_vec_unchecked((0..self.d_word).map(|_| rng.gen_range(-a..=a)).collect())
    }

    /// GloVe text layout: token followed by `d_word` reals, one line each.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            write!(w, "{t}")?;
            for x in v.as_slice() {
                write!(w, " {x:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path).io_context(|| format!("creating {}", path.display()))?);
        self.write(&mut f).and_then(|_| f.flush()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
        Self::read(BufReader::new(f), path)
    }

    /// Parses the GloVe layout; `path` only labels errors. Dimension is taken
    /// from the first line.
    pub fn read<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line.io_context(|| format!("reading {}", path.display()))?;
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Parse { path: path.into(), line: lineno, msg: e.to_string() })?;
            let v = Vector::new(values)
                .map_err(|e| Error::Parse { path: path.into(), line: lineno, msg: e.to_string() })?;
            match table.as_mut() {
                None => table = Some(Self::new(vec![(token.to_string(), v)])?),
                Some(t) => {
                    if v.len() != t.d_word {
                        return Err(Error::Parse {
                            path: path.into(),
                            line: lineno,
                            msg: format!("{} values, expected {}", v.len(), t.d_word),
                        });
                    }
                    t.insert(token.to_string(), v)?;
                }
            }
        }
        table.ok_or_else(|| Error::Input(format!("{}: no embeddings", path.display())))
    }
}

/// Settings for [`gen_grammar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarParams {
    pub seed: u64,
    pub n_classes: usize,
    pub n_roles: usize,
    pub vocab_per_class: usize,
    pub d_word: usize,
    pub n_templates: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-coordinate standard deviation of word vectors around their class centroid.
    pub noise: f64,
    /// Multiplies every word vector; centroid coordinates are standard normal before scaling.
    pub scale: f64,
    /// Adds one extra word that fills slots of two different classes.
    pub polysemous: bool,
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 12,
            n_roles: 6,
            vocab_per_class: 20,
            d_word: 16,
            n_templates: 24,
            min_len: 4,
            max_len: 8,
            noise: 0.25,
            scale: 1.0,
            polysemous: true,
        }
    }
}

impl GrammarParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_roles == 0 || self.vocab_per_class == 0 || self.d_word == 0 {
            return Err(Error::Config("grammar sizes must be positive".into()));
        }
        if self.n_templates == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need at least one template and 1 <= min_len <= max_len".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("grammar noise must be non-negative and scale positive".into()));
        }
        if self.polysemous && (self.n_classes < 2 || self.n_templates < 2 || self.max_len < 2) {
            return Err(Error::Config("a polysemous word needs two classes, two templates, and length >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexicalClass {
    pub id: usize,
    /// Global token indices.
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub class: usize,
    pub role: usize,
    /// Forces a specific token instead of a draw from the class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Vec<Slot>,
}

/// Where the planted ambiguous word occurs: `(template, position, class)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolysemousWord {
    pub token: usize,
    pub senses: Vec<(usize, usize, usize)>,
}

/// Classes of words, fixed class/role templates, and the vocabulary.
///
/// The first `n_classes / 3` classes are function classes, each bound to a
/// fixed role among the first `n_roles / 2`. A content-class word takes a
/// role set by the class of the word before it, so roles depend on context
/// that a left-to-right reader has already seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGrammar {
    pub params: GrammarParams,
    pub vocab: Vec<String>,
    pub classes: Vec<LexicalClass>,
    pub templates: Vec<Template>,
    pub polysemous: Option<PolysemousWord>,
}

fn role_split(k: usize, l: usize) -> (usize, usize) {
    let fn_roles = l / 2;
    let fn_classes = if fn_roles == 0 { 0 } else { k / 3 };
    (fn_classes, fn_roles)
}

/// Gold role of a word of class `class` following a word of class `prev`.
pub fn role_for(k: usize, l: usize, prev: Option<usize>, class: usize) -> usize {
    let (fn_classes, fn_roles) = role_split(k, l);
    if class < fn_classes {
        return class % fn_roles;
    }
    let content = l - fn_roles;
    fn_roles + prev.map_or(0, |p| (p + 1) % content)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_template(classes: &[usize], k: usize, l: usize) -> Template {
    let slots = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| Slot { class: c, role: role_for(k, l, i.checked_sub(1).map(|j| classes[j]), c), word: None })
        .collect();
    Template { slots }
}

/// Deterministic grammar. Every class and every reachable role occurs in
/// some template.
pub fn gen_grammar(params: &GrammarParams) -> Result<SyntheticGrammar> {
    params.validate()?;
    let (k, l) = (params.n_classes, params.n_roles);
    let mut rng = seeded(params.seed, 1);
    let mut vocab = Vec::new();
    let mut classes = Vec::with_capacity(k);
    for c in 0..k {
        let words = (0..params.vocab_per_class)
            .map(|j| {
                vocab.push(format!("c{c:02}w{j:02}"));
                vocab.len() - 1
            })
            .collect();
        classes.push(LexicalClass { id: c, words });
    }

    let (fn_classes, _) = role_split(k, l);
    let reachable: BTreeSet<usize> = (0..k)
        .flat_map(|c| std::iter::once(role_for(k, l, None, c)).chain((0..k).map(move |p| role_for(k, l, Some(p), c))))
        .collect();
    let senses: Option<[usize; 2]> = params.polysemous.then(|| {
        let content: Vec<usize> = (fn_classes..k).collect();
        let pool = if content.len() >= 2 { content } else { (0..k).collect() };
        let picks: Vec<usize> = pool.choose_multiple(&mut rng, 2).copied().collect();
        [picks[0], picks[1]]
    });
    let poly_token = vocab.len();

    let mut best = None;
    for _attempt in 0..1000 {
        // Every class is dealt into the templates once, then slots are filled at random.
        let mut deck: Vec<usize> = (0..k).collect();
        deck.shuffle(&mut rng);
        let mut seqs: Vec<Vec<usize>> = vec![Vec::with_capacity(params.max_len); params.n_templates];
        for (i, c) in deck.into_iter().enumerate() {
            seqs[i % params.n_templates].push(c);
        }
        for s in seqs.iter_mut() {
            let len = rng.gen_range(params.min_len..=params.max_len).max(s.len());
            while s.len() < len {
                s.push(rng.gen_range(0..k));
            }
            s.shuffle(&mut rng);
        }
        // Sense A opens template 0; sense B sits later in template 1.
        let mut forced = Vec::new();
        if let Some([a, b]) = senses {
            if seqs[1].len() < 2 {
                seqs[1].push(rng.gen_range(0..k));
            }
            let pos_b = rng.gen_range(1..seqs[1].len());
            seqs[0][0] = a;
            seqs[1][pos_b] = b;
            forced = vec![(0, 0, a), (1, pos_b, b)];
        }
        let mut templates: Vec<Template> = seqs.iter().map(|s| build_template(s, k, l)).collect();
        for &(t, pos, _) in &forced {
            templates[t].slots[pos].word = Some(poly_token);
        }
        let free = || templates.iter().flat_map(|t| t.slots.iter()).filter(|s| s.word.is_none());
        let classes_seen: BTreeSet<usize> = free().map(|s| s.class).collect();
        let roles_seen: BTreeSet<usize> = free().map(|s| s.role).collect();
        let covered = classes_seen.len() == k && roles_seen == reachable;
        best = Some((templates, forced));
        if covered {
            break;
        }
    }
    let (templates, forced) = best.expect("at least one attempt");
    let polysemous = senses.map(|_| {
        vocab.push("poly".to_string());
        PolysemousWord { token: poly_token, senses: forced }
    });

    Ok(SyntheticGrammar { params: params.clone(), vocab, classes, templates, polysemous })
}

impl SyntheticGrammar {
    pub fn n_classes(&self) -> usize {
        self.params.n_classes
    }

    pub fn n_roles(&self) -> usize {
        self.params.n_roles
    }

    /// Class of a regular vocabulary entry; `None` for the polysemous word.
    pub fn class_of(&self, token: usize) -> Option<usize> {
        let vpc = self.params.vocab_per_class;
        (token < self.params.n_classes * vpc).then(|| token / vpc)
    }

    /// Class centroids plus Gaussian noise; the polysemous word sits at
    /// the midpoint of its two senses' centroids.
    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        let p = &self.params;
        let mut rng = seeded(p.seed, 2);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let noise = Normal::new(0.0, p.noise).map_err(|e| Error::Config(e.to_string()))?;
        let centroids: Vec<Vec<f64>> =
            (0..p.n_classes).map(|_| (0..p.d_word).map(|_| unit.sample(&mut rng)).collect()).collect();
        let mut entries = Vec::with_capacity(self.vocab.len());
        for (t, name) in self.vocab.iter().enumerate() {
            let center: Vec<f64> = match self.class_of(t) {
                Some(c) => centroids[c].clone(),
                None => {
                    let senses = &self.polysemous.as_ref().expect("extra token is the polysemous word").senses;
                    let (a, b) = (senses[0].2, senses[1].2);
                    centroids[a].iter().zip(&centroids[b]).map(|(x, y)| 0.5 * (x + y)).collect()
                }
            };
            let v = center.iter().map(|c| p.scale * (c + noise.sample(&mut rng))).collect();
            entries.push((name.clone(), Vector::new(v)?));
        }
        EmbeddingTable::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        let g: Self = serde_json::from_str(&text)?;
        g.params.validate()?;
        Ok(g)
    }
}

/// One generated sequence with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub gold_roles: Vec<usize>,
    pub gold_classes: Vec<usize>,
    #[serde(default)]
    pub span: Option<(usize, usize)>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: usize, k: usize, l: usize) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 || self.gold_roles.len() != n || self.gold_classes.len() != n {
            return Err(Error::Input("example sequences are empty or differ in length".into()));
        }
        if self.tokens.iter().any(|&t| t >= vocab) {
            return Err(Error::Input("token index out of vocabulary".into()));
        }
        if self.gold_roles.iter().any(|&r| r >= l) || self.gold_classes.iter().any(|&c| c >= k) {
            return Err(Error::Input("gold label out of range".into()));
        }
        if let Some((s, e)) = self.span {
            if s > e || e >= n {
                return Err(Error::Input(format!("span ({s}, {e}) outside length {n}")));
            }
        }
        Ok(())
    }
}

/// Longest run of content-class tokens, first one on ties.
fn content_span(classes: &[usize], fn_classes: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_len = 0;
    let mut start = None;
    for i in 0..=classes.len() {
        let content = i < classes.len() && classes[i] >= fn_classes;
        match (content, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s > best_len {
                    best_len = i - s;
                    best = (s, i - 1);
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// `n` examples. The first `|templates|` use each template once in order,
/// the rest draw templates uniformly.
pub fn gen_corpus(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let mut rng = seeded(seed, 3);
    let (fn_classes, _) = role_split(grammar.n_classes(), grammar.n_roles());
    let nt = grammar.templates.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = if i < nt { i } else { rng.gen_range(0..nt) };
        let slots = &grammar.templates[t].slots;
        let tokens =
            slots.iter().map(|s| s.word.unwrap_or_else(|| *grammar.classes[s.class].words.choose(&mut rng).unwrap())).collect();
        let gold_classes: Vec<usize> = slots.iter().map(|s| s.class).collect();
        let span = Some(content_span(&gold_classes, fn_classes));
        out.push(Example { tokens, gold_roles: slots.iter().map(|s| s.role).collect(), gold_classes, span });
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(corpus: &[Example], mut w: W) -> Result<()> {
    for ex in corpus {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").io_context(|| "writing corpus".into())?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &[Example], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).io_context(|| format!("creating {}", path.display()))?);
    write_corpus(corpus, &mut f)?;
    f.flush().io_context(|| format!("writing {}", path.display()))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, msg: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

/// POS tags keyed by `(example id, position)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PosAnnotation {
    pub tags: BTreeMap<(usize, usize), String>,
}

impl PosAnnotation {
    pub fn get(&self, example: usize, position: usize) -> Option<&str> {
        self.tags.get(&(example, position)).map(String::as_str)
    }
}

/// Reads `exampleId<TAB>position<TAB>tag` rows, checking each against the
/// example lengths in `lengths`.
pub fn read_pos<R: BufRead>(r: R, path: &Path, lengths: &[usize]) -> Result<PosAnnotation> {
    let mut ann = PosAnnotation::default();
    for (i, line) in r.lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.into(), line: row, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let ex: usize = fields[0].trim().parse().map_err(|e| parse_err(format!("example id: {e}")))?;
        let pos: usize = fields[1].trim().parse().map_err(|e| parse_err(format!("position: {e}")))?;
        let Some(&len) = lengths.get(ex) else {
            return Err(Error::Input(format!("{}: row {row}: example {ex} not in corpus", path.display())));
        };
        if pos >= len {
            return Err(Error::Input(format!(
                "{}: row {row}: position {pos} outside example {ex} of length {len}",
                path.display()
            )));
        }
        ann.tags.insert((ex, pos), fields[2].trim().to_string());
    }
    Ok(ann)
}

pub fn load_pos(path: &Path, lengths: &[usize]) -> Result<PosAnnotation> {
    let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    read_pos(BufReader::new(f), path, lengths)
}

/// Number of token-head labels for `target`.
pub fn n_labels(target: TokenTarget, k: usize, l: usize) -> usize {
    match target {
        TokenTarget::Joint => k * l,
        TokenTarget::Class => k,
        TokenTarget::Role => l,
    }
}

/// Turns examples into training samples for the given head.
pub fn to_samples(
    corpus: &[Example],
    table: &EmbeddingTable,
    task: TaskKind,
    target: TokenTarget,
    n_roles: usize,
) -> Result<Vec<Sample>> {
    corpus
        .iter()
        .map(|ex| {
            let inputs = ex
                .tokens
                .iter()
                .map(|&t| {
                    if t < table.len() {
                        Ok(table.vector(t).clone())
                    } else {
                        Err(Error::Input(format!("token {t} outside embedding table of {}", table.len())))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let target = match task {
                TaskKind::TokenClassification => Target::Tokens(
                    ex.gold_classes
                        .iter()
                        .zip(&ex.gold_roles)
                        .map(|(&c, &r)| match target {
                            TokenTarget::Joint => c * n_roles + r,
                            TokenTarget::Class => c,
                            TokenTarget::Role => r,
                        })
                        .collect(),
                ),
                TaskKind::SpanPointing => {
                    let (start, end) = ex.span.ok_or_else(|| Error::Input("example has no span".into()))?;
                    Target::Span { start, end }
                }
            };
            Ok(Sample { inputs, target })
        })
        .collect()
}

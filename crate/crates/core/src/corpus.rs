//! Cluster ingestion, vocabularies, bag-of-words vectors and batching.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const DOC: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<doc>"];

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_punctuation(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

/// A cluster as read from disk, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCluster {
    pub id: String,
    pub documents: Vec<String>,
    pub summary: String,
}

impl RawCluster {
    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Delimited,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "delimited" | "tsv" => Ok(Self::Delimited),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

const DOC_SEPARATOR: &str = "|||||";

#[derive(Deserialize)]
struct JsonRecord {
    documents: Vec<String>,
    summary: String,
    #[serde(default)]
    id: Option<String>,
}

/// Streams clusters out of a JSONL or delimited file in file order.
///
/// Records without any non-blank document are skipped with a warning.
pub struct ClusterReader<R> {
    lines: std::io::Lines<R>,
    format: InputFormat,
    path: PathBuf,
    line_no: usize,
    pub skipped: usize,
}

impl<R: BufRead> ClusterReader<R> {
    pub fn new(reader: R, format: InputFormat, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: reader.lines(),
            format,
            path: path.into(),
            line_no: 0,
            skipped: 0,
        }
    }

    fn parse_error(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn parse(&self, line: &str) -> Result<RawCluster> {
        let default_id = format!("{}", self.line_no);
        match self.format {
            InputFormat::Jsonl => {
                let rec: JsonRecord =
                    serde_json::from_str(line).map_err(|e| self.parse_error(e.to_string()))?;
                Ok(RawCluster {
                    id: rec.id.unwrap_or(default_id),
                    documents: rec.documents,
                    summary: rec.summary,
                })
            }
            InputFormat::Delimited => {
                let (docs, summary) = line
                    .split_once('\t')
                    .ok_or_else(|| self.parse_error("missing TAB between documents and summary"))?;
                if summary.contains('\t') {
                    return Err(self.parse_error("more than one TAB in record"));
                }
                Ok(RawCluster {
                    id: default_id,
                    documents: docs.split(DOC_SEPARATOR).map(|d| d.trim().to_string()).collect(),
                    summary: summary.trim().to_string(),
                })
            }
        }
    }
}

impl<R: BufRead> Iterator for ClusterReader<R> {
    type Item = Result<RawCluster>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cluster = match self.parse(&line) {
                Ok(c) => c,
                Err(e) => return Some(Err(e)),
            };
            cluster.documents.retain(|d| !d.trim().is_empty());
            if cluster.documents.is_empty() {
                warn!(
                    "{}:{}: record has no documents, skipping",
                    self.path.display(),
                    self.line_no
                );
                self.skipped += 1;
                continue;
            }
            return Some(Ok(cluster));
        }
    }
}

pub fn load_multinews(path: &Path, format: InputFormat) -> Result<ClusterReader<BufReader<File>>> {
    let file = File::open(path)?;
    Ok(ClusterReader::new(BufReader::new(file), format, path))
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    Ok(parse_stopwords(&std::fs::read_to_string(path)?))
}

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Token <-> id bijection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Bimap {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Bimap {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Bimap> for Vec<String> {
    fn from(b: Bimap) -> Self {
        b.tokens
    }
}

impl Bimap {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Sequence vocabulary (with reserved ids) and the stopword-free
/// bag-of-words vocabulary used by the topic model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub seq: Bimap,
    pub bow: Bimap,
}

/// Tokens sorted by descending count, ties broken lexicographically.
fn ranked(counts: HashMap<String, usize>, limit: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().take(limit).map(|(t, _)| t).collect()
}

pub fn build_vocabulary<'a>(
    corpus: impl IntoIterator<Item = &'a RawCluster>,
    seq_size: usize,
    bow_size: usize,
    stopwords: &HashSet<String>,
) -> Result<Vocabulary> {
    if seq_size <= RESERVED.len() {
        return Err(Error::Config(format!(
            "sequence vocabulary size must exceed {} reserved tokens",
            RESERVED.len()
        )));
    }
    if bow_size == 0 {
        return Err(Error::Config("bag-of-words vocabulary size must be positive".into()));
    }
    let mut seq_counts: HashMap<String, usize> = HashMap::new();
    let mut bow_counts: HashMap<String, usize> = HashMap::new();
    let mut clusters = 0usize;
    for cluster in corpus {
        clusters += 1;
        for doc in &cluster.documents {
            for tok in tokenize(doc) {
                if !RESERVED.contains(&tok.as_str())
                    && !stopwords.contains(&tok)
                    && !is_punctuation(&tok)
                {
                    *bow_counts.entry(tok.clone()).or_default() += 1;
                }
                *seq_counts.entry(tok).or_default() += 1;
            }
        }
        for tok in tokenize(&cluster.summary) {
            *seq_counts.entry(tok).or_default() += 1;
        }
    }
    if clusters == 0 {
        return Err(Error::EmptyCorpus);
    }
    for r in RESERVED {
        seq_counts.remove(r);
    }
    let mut seq: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    seq.extend(ranked(seq_counts, seq_size - RESERVED.len()));
    Ok(Vocabulary {
        seq: seq.into(),
        bow: ranked(bow_counts, bow_size).into(),
    })
}

/// One tokenized training instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentCluster {
    pub id: String,
    /// Content token ids per document, without the DOC marker.
    pub documents: Vec<Vec<u32>>,
    /// Summary ids, `BOS ... EOS`.
    pub summary: Vec<u32>,
    pub raw_documents: Vec<String>,
    pub raw_summary: String,
    /// Number of source documents in the original record.
    pub source_docs: usize,
}

impl Vocabulary {
    pub fn seq_len(&self) -> usize {
        self.seq.len()
    }

    pub fn bow_len(&self) -> usize {
        self.bow.len()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.seq.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Decodes ids to tokens, stopping at EOS and dropping BOS/PAD/DOC.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD && i != DOC)
            .map(|&i| self.seq.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    pub fn encode_cluster(
        &self,
        raw: &RawCluster,
        max_doc_len: usize,
        max_summary_len: usize,
    ) -> Result<DocumentCluster> {
        let mut documents = Vec::new();
        let mut raw_documents = Vec::new();
        for doc in &raw.documents {
            let mut ids = self.encode_tokens(&tokenize(doc));
            ids.truncate(max_doc_len);
            if !ids.is_empty() {
                documents.push(ids);
                raw_documents.push(doc.clone());
            }
        }
        if documents.is_empty() {
            return Err(Error::EmptyCluster(raw.id.clone()));
        }
        let mut summary = vec![BOS];
        let mut body = self.encode_tokens(&tokenize(&raw.summary));
        body.truncate(max_summary_len);
        summary.extend(body);
        summary.push(EOS);
        Ok(DocumentCluster {
            id: raw.id.clone(),
            documents,
            summary,
            raw_documents,
            raw_summary: raw.summary.clone(),
            source_docs: raw.n_docs(),
        })
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("seq_vocab.txt"), self.seq.tokens().join("\n") + "\n")?;
        std::fs::write(dir.join("bow_vocab.txt"), self.bow.tokens().join("\n") + "\n")?;
        Ok(())
    }

    pub fn read_files(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Bimap> {
            let text = std::fs::read_to_string(dir.join(name))?;
            Ok(text.lines().map(str::to_string).collect::<Vec<_>>().into())
        };
        Ok(Self {
            seq: read("seq_vocab.txt")?,
            bow: read("bow_vocab.txt")?,
        })
    }
}

/// Term frequencies over the bag-of-words vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowVector {
    pub counts: Vec<u32>,
}

impl BowVector {
    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Counts bag-of-words tokens over all source documents of the cluster
/// (full text, summary excluded).
pub fn to_bow(cluster: &DocumentCluster, vocab: &Vocabulary) -> BowVector {
    let mut counts = vec![0u32; vocab.bow_len()];
    for doc in &cluster.raw_documents {
        for tok in tokenize(doc) {
            if let Some(id) = vocab.bow.id(&tok) {
                counts[id as usize] += 1;
            }
        }
    }
    BowVector { counts }
}

/// Model-ready view of one cluster: each document starts with the DOC
/// marker, followed by its (truncated) content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInput {
    pub docs: Vec<Vec<u32>>,
    pub summary: Vec<u32>,
}

impl ClusterInput {
    pub fn n_words(&self) -> usize {
        self.docs.iter().map(|d| d.len() - 1).sum()
    }

    /// Token id of every word node, in (document, position) order.
    pub fn word_tokens(&self) -> Vec<u32> {
        self.docs.iter().flat_map(|d| d[1..].iter().copied()).collect()
    }
}

/// Padded batch: `tokens[b][i]` has width `max_doc_len + 1` (DOC slot
/// included), `summaries[b]` is padded to the longest summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<Vec<u32>>>,
    pub token_mask: Vec<Vec<Vec<bool>>>,
    pub doc_mask: Vec<Vec<bool>>,
    pub summaries: Vec<Vec<u32>>,
    pub summary_mask: Vec<Vec<bool>>,
}

pub fn make_batch(
    clusters: &[DocumentCluster],
    max_doc_len: usize,
    max_docs: usize,
    pad_id: u32,
) -> Batch {
    let width = max_doc_len + 1;
    let n_docs = clusters
        .iter()
        .map(|c| c.documents.len().min(max_docs))
        .max()
        .unwrap_or(0);
    let sum_len = clusters.iter().map(|c| c.summary.len()).max().unwrap_or(0);
    let mut batch = Batch {
        tokens: Vec::with_capacity(clusters.len()),
        token_mask: Vec::with_capacity(clusters.len()),
        doc_mask: Vec::with_capacity(clusters.len()),
        summaries: Vec::with_capacity(clusters.len()),
        summary_mask: Vec::with_capacity(clusters.len()),
    };
    for c in clusters {
        let mut rows = vec![vec![pad_id; width]; n_docs];
        let mut masks = vec![vec![false; width]; n_docs];
        let mut doc_mask = vec![false; n_docs];
        for (i, doc) in c.documents.iter().take(max_docs).enumerate() {
            rows[i][0] = DOC;
            masks[i][0] = true;
            for (j, &tok) in doc.iter().take(max_doc_len).enumerate() {
                rows[i][j + 1] = tok;
                masks[i][j + 1] = true;
            }
            doc_mask[i] = true;
        }
        let mut summary = c.summary.clone();
        let mut smask = vec![true; summary.len()];
        summary.resize(sum_len, pad_id);
        smask.resize(sum_len, false);
        batch.tokens.push(rows);
        batch.token_mask.push(masks);
        batch.doc_mask.push(doc_mask);
        batch.summaries.push(summary);
        batch.summary_mask.push(smask);
    }
    batch
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Strips padding from cluster `b`.
    pub fn unmask(&self, b: usize) -> ClusterInput {
        let docs = self.tokens[b]
            .iter()
            .zip(&self.token_mask[b])
            .zip(&self.doc_mask[b])
            .filter(|(_, &keep)| keep)
            .map(|((row, mask), _)| {
                row.iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&t, _)| t)
                    .collect()
            })
            .collect();
        let summary = self.summaries[b]
            .iter()
            .zip(&self.summary_mask[b])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        ClusterInput { docs, summary }
    }

    pub fn inputs(&self) -> Vec<ClusterInput> {
        (0..self.len()).map(|b| self.unmask(b)).collect()
    }
}

/// Shortcut for a single cluster.
pub fn cluster_input(cluster: &DocumentCluster, max_doc_len: usize, max_docs: usize) -> ClusterInput {
    make_batch(std::slice::from_ref(cluster), max_doc_len, max_docs, PAD).unmask(0)
}

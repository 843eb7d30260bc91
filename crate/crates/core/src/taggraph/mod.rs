//! Static tag-association graph mined from co-occurring tag pairs, and
//! per-query token adjacency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::querydata::QueryRecord;

#[derive(Debug, Error)]
pub enum TagGraphError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("min_support must be at least 1")]
    ZeroSupport,
    #[error("support fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unordered tag pair with `.0 <= .1`.
pub type TagPair = (String, String);

fn ordered(a: &str, b: &str) -> TagPair {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Number of queries in which each tag pair co-occurs. A pair is counted
/// once per query; `(a, a)` counts queries where `a` tags two or more tokens.
pub fn count_tag_pairs(records: &[QueryRecord]) -> BTreeMap<TagPair, usize> {
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    let mut multiplicity: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        multiplicity.clear();
        for t in &r.tags {
            *multiplicity.entry(t.as_str()).or_default() += 1;
        }
        let distinct: Vec<(&str, usize)> = multiplicity.iter().map(|(&t, &c)| (t, c)).collect();
        for (i, &(a, ca)) in distinct.iter().enumerate() {
            if ca > 1 {
                *counts.entry((a, a)).or_default() += 1;
            }
            for &(b, _) in &distinct[i + 1..] {
                *counts.entry((a, b)).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|((a, b), c)| ((a.to_string(), b.to_string()), c))
        .collect()
}

/// Absolute support threshold or a fraction of the corpus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinSupport {
    Count(usize),
    Fraction(f64),
}

impl Default for MinSupport {
    fn default() -> Self {
        MinSupport::Fraction(0.005)
    }
}

impl MinSupport {
    /// Absolute count for a corpus of `n` queries (fractions round up).
    pub fn resolve(self, n: usize) -> Result<usize, TagGraphError> {
        match self {
            MinSupport::Count(0) => Err(TagGraphError::ZeroSupport),
            MinSupport::Count(c) => Ok(c),
            MinSupport::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(TagGraphError::BadFraction(f)),
            MinSupport::Fraction(f) => Ok(((f * n as f64).ceil() as usize).max(1)),
        }
    }
}

/// Edge filter applied on top of the support threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Frequency,
    /// Also require pointwise mutual information `ln(N c_ab / (c_a c_b))`
    /// of at least `min_pmi`, with `c_a` the number of queries containing `a`.
    MutualInformation { min_pmi: f64 },
}

/// Undirected tag graph with the support count of every edge.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagGraph {
    pub min_support: usize,
    edges: BTreeMap<TagPair, usize>,
}

impl TagGraph {
    pub fn empty(min_support: usize) -> Self {
        Self {
            min_support,
            edges: BTreeMap::new(),
        }
    }

    pub fn from_edges(min_support: usize, edges: impl IntoIterator<Item = (String, String, usize)>) -> Self {
        Self {
            min_support,
            edges: edges.into_iter().map(|(a, b, c)| (ordered(&a, &b), c)).collect(),
        }
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        self.edges.contains_key(&ordered(a, b))
    }

    pub fn support(&self, a: &str, b: &str) -> Option<usize> {
        self.edges.get(&ordered(a, b)).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.edges.iter().map(|((a, b), &c)| (a.as_str(), b.as_str(), c))
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges between ids of `tag_id`, both orientations.
    pub fn id_edges(&self, tag_id: impl Fn(&str) -> Option<usize>) -> HashSet<(usize, usize)> {
        let mut out = HashSet::new();
        for (a, b) in self.edges.keys() {
            if let (Some(i), Some(k)) = (tag_id(a), tag_id(b)) {
                out.insert((i, k));
                out.insert((k, i));
            }
        }
        out
    }

    /// TSV form: `#min_support=<n>` header, then sorted `a<TAB>b<TAB>count`.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("#min_support={}\n", self.min_support);
        for ((a, b), c) in &self.edges {
            let _ = writeln!(s, "{a}\t{b}\t{c}");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, TagGraphError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let min_support = header
            .strip_prefix("#min_support=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| TagGraphError::Parse {
                line: 1,
                message: "expected `#min_support=<n>` header".into(),
            })?;
        let mut edges = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| TagGraphError::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, c] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let count: usize = c.trim().parse().map_err(|_| err(format!("bad count `{c}`")))?;
            if a > b {
                return Err(err(format!("tags out of order: `{a}` > `{b}`")));
            }
            if edges.insert((a.to_string(), b.to_string()), count).is_some() {
                return Err(err(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { min_support, edges })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TagGraphError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TagGraphError> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// Keeps the tag pairs that co-occur in at least `min_support` queries.
pub fn mine_tag_pairs(records: &[QueryRecord], min_support: usize) -> Result<TagGraph, TagGraphError> {
    mine_tag_pairs_scored(records, min_support, Scoring::Frequency)
}

pub fn mine_tag_pairs_scored(
    records: &[QueryRecord],
    min_support: usize,
    scoring: Scoring,
) -> Result<TagGraph, TagGraphError> {
    if records.is_empty() {
        return Err(TagGraphError::EmptyCorpus);
    }
    if min_support == 0 {
        return Err(TagGraphError::ZeroSupport);
    }
    let counts = count_tag_pairs(records);
    let mut edges: BTreeMap<TagPair, usize> = counts.into_iter().filter(|(_, c)| *c >= min_support).collect();
    if let Scoring::MutualInformation { min_pmi } = scoring {
        let mut tag_counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            let distinct: HashSet<&str> = r.tags.iter().map(String::as_str).collect();
            for t in distinct {
                *tag_counts.entry(t).or_default() += 1;
            }
        }
        let n = records.len() as f64;
        edges.retain(|(a, b), c| {
            let (ca, cb) = (tag_counts[a.as_str()] as f64, tag_counts[b.as_str()] as f64);
            (n * *c as f64 / (ca * cb)).ln() >= min_pmi
        });
    }
    Ok(TagGraph { min_support, edges })
}

/// Symmetric 0/1 token adjacency of one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenAdjacency {
    n: usize,
    cells: Vec<u8>,
}

impl TokenAdjacency {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        self.cells[i * self.n + k] != 0
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.cells[i * self.n..(i + 1) * self.n]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&c| c != 0).count()
    }
}

/// Self edges, consecutive-token edges, and an edge between every pair of
/// tokens whose tags form a graph edge.
pub fn query_adjacency<S: AsRef<str>>(tags: &[S], graph: &TagGraph) -> TokenAdjacency {
    adjacency_with(tags.len(), |i, k| graph.contains(tags[i].as_ref(), tags[k].as_ref()))
}

/// Same as [`query_adjacency`] for tags already mapped to ids.
pub fn query_adjacency_ids(tags: &[usize], edges: &HashSet<(usize, usize)>) -> TokenAdjacency {
    adjacency_with(tags.len(), |i, k| edges.contains(&(tags[i], tags[k])))
}

fn adjacency_with(n: usize, linked: impl Fn(usize, usize) -> bool) -> TokenAdjacency {
    let mut cells = vec![0u8; n * n];
    for i in 0..n {
        for k in i..n {
            if k == i || k == i + 1 || linked(i, k) {
                cells[i * n + k] = 1;
                cells[k * n + i] = 1;
            }
        }
    }
    TokenAdjacency { n, cells }
}

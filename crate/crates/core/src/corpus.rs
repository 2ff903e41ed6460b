//! Image records, the tag vocabulary, corpus files and the synthetic
//! generator used for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type TagId = u32;

pub const FEATURES_FILE: &str = "features.tsv";
pub const TAGS_FILE: &str = "tags.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// Lowercases and trims a raw tag. Misspellings and non-English tags are
/// left alone.
pub fn normalize_token(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Ordered tag vocabulary. Ids are dense and ordered by descending
/// frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    index: HashMap<String, TagId>,
}

impl TagVocabulary {
    /// Builds a vocabulary from token counts, keeping at most `max_vocab`
    /// tokens that occur at least `min_freq` times.
    pub fn from_counts(counts: HashMap<String, u64>, min_freq: u64, max_vocab: usize) -> Self {
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_vocab);
        Self::from_entries_unchecked(entries)
    }

    /// Builds a vocabulary from `(token, frequency)` pairs already in id
    /// order, as stored in `vocab.tsv` and checkpoints.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (tok, _) in &entries {
            if !seen.insert(tok.as_str()) {
                return Err(Error::invalid(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self::from_entries_unchecked(entries))
    }

    fn from_entries_unchecked(entries: Vec<(String, u64)>) -> Self {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut frequencies = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, freq)) in entries.into_iter().enumerate() {
            index.insert(tok.clone(), i as TagId);
            tokens.push(tok);
            frequencies.push(freq);
        }
        TagVocabulary {
            tokens,
            frequencies,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TagId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TagId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (tok, freq) in self.tokens.iter().zip(&self.frequencies) {
            writeln!(w, "{tok}\t{freq}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in read_lines(path)? {
            let (tok, freq) = line.split_once('\t').ok_or_else(|| {
                parse_error(path, lineno, "expected `<token>\\t<frequency>`")
            })?;
            let freq = freq
                .trim()
                .parse::<u64>()
                .map_err(|e| parse_error(path, lineno, format!("bad frequency: {e}")))?;
            entries.push((tok.to_string(), freq));
        }
        Self::from_entries(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub tag_ids: Vec<TagId>,
}

/// An immutable collection of tagged images sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<ImageRecord>,
    vocab: Arc<TagVocabulary>,
    feature_dim: usize,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && *self.vocab == *other.vocab
            && self.records == other.records
    }
}

/// A parsed but not yet indexed record: tokens instead of ids.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub tokens: Vec<String>,
}

impl Corpus {
    /// Assembles a corpus, checking every record against the vocabulary.
    /// Records without tags are rejected; use [`Corpus::index`] to filter.
    pub fn new(records: Vec<ImageRecord>, vocab: Arc<TagVocabulary>) -> Result<Self> {
        let feature_dim = records.first().map_or(0, |r| r.features.len());
        for r in &records {
            if r.features.len() != feature_dim {
                return Err(Error::dimension(
                    format!("features of `{}`", r.id),
                    feature_dim,
                    r.features.len(),
                ));
            }
            if r.tag_ids.is_empty() {
                return Err(Error::invalid(format!("record `{}` has no tags", r.id)));
            }
            let mut seen = HashSet::new();
            for &t in &r.tag_ids {
                if t as usize >= vocab.len() || !seen.insert(t) {
                    return Err(Error::invalid(format!(
                        "record `{}` has invalid or duplicate tag id {t}",
                        r.id
                    )));
                }
            }
        }
        Ok(Corpus {
            records,
            vocab,
            feature_dim,
        })
    }

    /// Maps raw records onto `vocab`, dropping tokens outside it and any
    /// record left without tags.
    pub fn index(raw: Vec<RawRecord>, vocab: Arc<TagVocabulary>) -> Result<Self> {
        let records = raw
            .into_iter()
            .filter_map(|r| {
                let mut seen = HashSet::new();
                let tag_ids: Vec<TagId> = r
                    .tokens
                    .iter()
                    .filter_map(|t| vocab.id(t))
                    .filter(|id| seen.insert(*id))
                    .collect();
                (!tag_ids.is_empty()).then_some(ImageRecord {
                    id: r.id,
                    features: r.features,
                    tag_ids,
                })
            })
            .collect();
        Corpus::new(records, vocab)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn vocab(&self) -> &Arc<TagVocabulary> {
        &self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes `features.tsv`, `tags.tsv` and `vocab.tsv` into `dir`.
    pub fn write_canonical(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut feats = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
        let mut tags = BufWriter::new(fs::File::create(dir.join(TAGS_FILE))?);
        for r in &self.records {
            write!(feats, "{}\t", r.id)?;
            for (i, x) in r.features.iter().enumerate() {
                if i > 0 {
                    feats.write_all(b",")?;
                }
                write!(feats, "{x:?}")?;
            }
            feats.write_all(b"\n")?;
            let toks: Vec<&str> = r.tag_ids.iter().map(|&t| self.vocab.token(t)).collect();
            writeln!(tags, "{}\t{}", r.id, toks.join(" "))?;
        }
        feats.flush()?;
        tags.flush()?;
        self.vocab.write_tsv(&dir.join(VOCAB_FILE))
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if !line.trim().is_empty() {
            out.push((i + 1, line.to_string()));
        }
    }
    Ok(out)
}

/// Parses the features and tags files into raw records in features-file
/// order. Tags are normalized and deduplicated.
pub fn read_raw(features_path: &Path, tags_path: &Path) -> Result<Vec<RawRecord>> {
    let mut records: Vec<RawRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in read_lines(features_path)? {
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(features_path, lineno, "expected `<id>\\t<f1>,<f2>,...`"))?;
        let features = values
            .split(',')
            .map(|v| {
                let x = v.trim().parse::<f64>().map_err(|e| {
                    parse_error(features_path, lineno, format!("bad feature `{v}`: {e}"))
                })?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(parse_error(features_path, lineno, "non-finite feature"))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::dimension(
                    format!("{}:{lineno}", features_path.display()),
                    d,
                    features.len(),
                ))
            }
            _ => {}
        }
        if by_id.insert(id.to_string(), records.len()).is_some() {
            return Err(parse_error(features_path, lineno, format!("duplicate id `{id}`")));
        }
        records.push(RawRecord {
            id: id.to_string(),
            features,
            tokens: Vec::new(),
        });
    }
    for (lineno, line) in read_lines(tags_path)? {
        let (id, rest) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        if id.trim().is_empty() {
            return Err(parse_error(tags_path, lineno, "missing image id"));
        }
        let slot = *by_id.get(id).ok_or_else(|| Error::Referential { id: id.to_string() })?;
        let rec = &mut records[slot];
        let mut seen: HashSet<String> = rec.tokens.iter().cloned().collect();
        for tok in rest.split_whitespace().map(normalize_token) {
            if !tok.is_empty() && seen.insert(tok.clone()) {
                rec.tokens.push(tok);
            }
        }
    }
    Ok(records)
}

/// Per-token document counts over raw records.
pub fn count_tokens(raw: &[RawRecord]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for r in raw {
        for t in &r.tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Loads a corpus, building a vocabulary of at most `max_vocab` tokens with
/// frequency at least `min_freq`. Records left without tags are dropped.
pub fn load_corpus(
    features_path: &Path,
    tags_path: &Path,
    min_freq: u64,
    max_vocab: usize,
) -> Result<Corpus> {
    if min_freq < 1 || max_vocab < 1 {
        return Err(Error::invalid("min_freq and max_vocab must be at least 1"));
    }
    let raw = read_raw(features_path, tags_path)?;
    let vocab = TagVocabulary::from_counts(count_tokens(&raw), min_freq, max_vocab);
    Corpus::index(raw, Arc::new(vocab))
}

/// Loads a corpus against an existing vocabulary (e.g. one stored in a
/// checkpoint).
pub fn load_corpus_with_vocab(
    features_path: &Path,
    tags_path: &Path,
    vocab: Arc<TagVocabulary>,
) -> Result<Corpus> {
    Corpus::index(read_raw(features_path, tags_path)?, vocab)
}

/// Paths of the canonical corpus files inside `dir`.
pub fn canonical_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(FEATURES_FILE), dir.join(TAGS_FILE), dir.join(VOCAB_FILE))
}

/// Reloads a corpus written by [`Corpus::write_canonical`].
pub fn load_canonical(dir: &Path) -> Result<Corpus> {
    let (f, t, v) = canonical_paths(dir);
    let vocab = TagVocabulary::read_tsv(&v)?;
    load_corpus_with_vocab(&f, &t, Arc::new(vocab))
}

/// Partitions a corpus into train/val/test. All three share the source
/// vocabulary; records keep their relative order within each split.
pub fn split_corpus(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    if ![a, b, c].iter().all(|x| x.is_finite()) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = corpus.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, frac, size) in [("train", a, n_train), ("val", b, n_val), ("test", c, n_test)] {
        if frac <= 0.0 || size == 0 {
            return Err(Error::DegenerateSplit { split: name });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[0x5911]));
    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        Corpus {
            records: idx.iter().map(|&i| corpus.records[i].clone()).collect(),
            vocab: Arc::clone(&corpus.vocab),
            feature_dim: corpus.feature_dim,
        }
    };
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_val),
        take(n_train + n_val..n),
    ))
}

/// Normalized tag frequencies.
pub fn tag_distribution(corpus: &Corpus) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("tag distribution of an empty corpus"));
    }
    let freqs = corpus.vocab.frequencies();
    let total: u64 = freqs.iter().sum();
    if total == 0 {
        return Err(Error::invalid("vocabulary has zero total frequency"));
    }
    Ok(freqs.iter().map(|&f| f as f64 / total as f64).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_clusters: usize,
    pub images_per_cluster: usize,
    pub tags_per_cluster: usize,
    pub feature_dim: usize,
    pub noise_tag_rate: f64,
    /// Per-component standard deviation of the additive feature noise.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_clusters: 3,
            images_per_cluster: 100,
            tags_per_cluster: 10,
            feature_dim: 16,
            noise_tag_rate: 0.1,
            feature_noise: 0.15,
            seed: 1,
        }
    }
}

/// A generated corpus plus the generator's ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Cluster of each record, aligned with `corpus.records()`.
    pub image_cluster: Vec<usize>,
    /// Cluster owning each vocabulary id.
    pub tag_cluster: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Tags drawn from another cluster's pool.
    pub noise_tags: usize,
    pub total_tags: usize,
}

pub const MIN_TAGS_PER_IMAGE: usize = 3;
pub const MAX_TAGS_PER_IMAGE: usize = 10;

pub fn synthetic_tag_token(cluster: usize, j: usize) -> String {
    format!("c{cluster}_t{j:02}")
}

/// Cluster encoded in a synthetic image id or tag token.
pub fn synthetic_cluster_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('c')?;
    let (num, _) = rest.split_once('_')?;
    num.parse().ok()
}

/// Generates a clustered corpus: each cluster has a unit-norm feature
/// centroid (mutually orthogonal) and a pool of tags whose popularity
/// within the cluster decays as 1/rank. Each image carries 3 to 10 tags;
/// each tag slot is independently swapped for a tag of another cluster with
/// probability `noise_tag_rate`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let k = cfg.num_clusters;
    if k == 0 || cfg.images_per_cluster == 0 || cfg.tags_per_cluster == 0 || cfg.feature_dim == 0 {
        return Err(Error::invalid("synthetic corpus counts must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.noise_tag_rate) {
        return Err(Error::invalid("noise_tag_rate must be in [0, 1)"));
    }
    if cfg.feature_dim < k {
        return Err(Error::invalid(format!(
            "feature_dim {} < num_clusters {k}: cannot construct separated centroids",
            cfg.feature_dim
        )));
    }
    let mut rng = seed::rng(cfg.seed, &[0x5e7]);
    let centroids = orthonormal_vectors(k, cfg.feature_dim, &mut rng);
    let pool_weights: Vec<f64> = (0..cfg.tags_per_cluster).map(|j| 1.0 / (j + 1) as f64).collect();

    let mut raw = Vec::with_capacity(k * cfg.images_per_cluster);
    let mut image_cluster = Vec::with_capacity(raw.capacity());
    let (mut noise_tags, mut total_tags) = (0usize, 0usize);
    for c in 0..k {
        for i in 0..cfg.images_per_cluster {
            let features: Vec<f64> = centroids[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.feature_noise * z
                })
                .collect();
            let count = rng.random_range(MIN_TAGS_PER_IMAGE..=MAX_TAGS_PER_IMAGE);
            let mut n_noise = if k > 1 {
                (0..count).filter(|_| rng.random::<f64>() < cfg.noise_tag_rate).count()
            } else {
                0
            };
            let n_own = (count - n_noise).min(cfg.tags_per_cluster);
            n_noise = n_noise.min((k - 1) * cfg.tags_per_cluster);
            let own = index::sample_weighted(&mut rng, cfg.tags_per_cluster, |j| pool_weights[j], n_own)
                .map_err(|e| Error::invalid(format!("weighted sampling failed: {e}")))?;
            let mut tokens: Vec<String> = own.iter().map(|j| synthetic_tag_token(c, j)).collect();
            let others = index::sample(&mut rng, (k - 1) * cfg.tags_per_cluster, n_noise);
            for o in others.iter() {
                let oc = o / cfg.tags_per_cluster;
                let oc = if oc >= c { oc + 1 } else { oc };
                tokens.push(synthetic_tag_token(oc, o % cfg.tags_per_cluster));
            }
            noise_tags += n_noise;
            total_tags += tokens.len();
            raw.push(RawRecord {
                id: format!("c{c}_img{i:05}"),
                features,
                tokens,
            });
            image_cluster.push(c);
        }
    }
    let vocab = Arc::new(TagVocabulary::from_counts(count_tokens(&raw), 1, usize::MAX));
    let tag_cluster = vocab
        .tokens()
        .iter()
        .map(|t| synthetic_cluster_of(t).expect("synthetic token"))
        .collect();
    let corpus = Corpus::index(raw, vocab)?;
    Ok(SyntheticCorpus {
        corpus,
        image_cluster,
        tag_cluster,
        centroids,
        noise_tags,
        total_tags,
    })
}

/// `count` orthonormal vectors of dimension `dim` via Gram-Schmidt on
/// Gaussian draws.
fn orthonormal_vectors(count: usize, dim: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

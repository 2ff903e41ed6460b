//! Tagging (image to top-k words), retrieval (words to top-n images) and
//! precision/recall/F1 at top-k.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_token, Corpus, TagId, TagVocabulary};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::ProjectorNet;
use crate::par;

/// Descending score, then ascending key.
fn ranked<K: Ord>(a: &(K, f64), b: &(K, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// The `k` best `(key, score)` pairs under [`ranked`] order.
fn top_k<K: Ord>(mut items: Vec<(K, f64)>, k: usize) -> Vec<(K, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, ranked);
        items.truncate(k);
    }
    items.sort_unstable_by(ranked);
    items
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

fn unit(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| &v / n)
}

/// Cosine scorer over a fixed table, optionally restricted to a subset of
/// tags.
#[derive(Debug, Clone)]
pub struct TagScorer<'a> {
    unit_table: Array2<f64>,
    allowed: Option<&'a [bool]>,
    len: usize,
}

impl<'a> TagScorer<'a> {
    pub fn new(table: &EmbeddingTable, allowed: Option<&'a [bool]>) -> Result<Self> {
        if let Some(a) = allowed {
            if a.len() != table.len() {
                return Err(Error::dimension("allowed-tag mask", table.len(), a.len()));
            }
        }
        Ok(TagScorer {
            unit_table: normalize_rows(table.vectors()),
            allowed,
            len: table.len(),
        })
    }

    fn candidates(&self) -> usize {
        self.allowed.map_or(self.len, |a| a.iter().filter(|&&x| x).count())
    }

    /// `None` for a zero query.
    fn rank(&self, f: ArrayView1<f64>, k: usize) -> Option<Vec<(TagId, f64)>> {
        let q = unit(f)?;
        let scores = self.unit_table.dot(&q);
        let items = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| self.allowed.is_none_or(|a| a[*i]))
            .map(|(i, &s)| (i as TagId, s))
            .collect();
        Some(top_k(items, k))
    }

    /// Top-k tags for each row of `f`. Rows with a zero projection get an
    /// empty list; the second value counts them.
    pub fn tag_batch(&self, f: ArrayView2<f64>, k: usize) -> Result<(Vec<Vec<(TagId, f64)>>, usize)> {
        self.check(f.ncols(), k)?;
        let rows = par::map_indexed(f.nrows(), |i| self.rank(f.row(i), k));
        let degenerate = rows.iter().filter(|r| r.is_none()).count();
        Ok((rows.into_iter().map(Option::unwrap_or_default).collect(), degenerate))
    }

    fn check(&self, dim: usize, k: usize) -> Result<()> {
        if dim != self.unit_table.ncols() {
            return Err(Error::dimension("query vector", self.unit_table.ncols(), dim));
        }
        if k == 0 || k > self.candidates() {
            return Err(Error::invalid(format!("k must be in 1..={}, got {k}", self.candidates())));
        }
        Ok(())
    }
}

/// Top-k tags of one projected image by cosine similarity, ties to the
/// lower id.
pub fn tag_image(f: ArrayView1<f64>, table: &EmbeddingTable, k: usize) -> Result<Vec<(TagId, f64)>> {
    let scorer = TagScorer::new(table, None)?;
    scorer.check(f.len(), k)?;
    scorer.rank(f, k).ok_or(Error::DegenerateQuery)
}

/// Unit-length projections of a corpus, searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub ids: Vec<String>,
    pub unit_vectors: Array2<f64>,
    /// Images dropped because their projection was zero.
    pub skipped: usize,
}

impl RetrievalIndex {
    /// Normalizes `vectors` row-wise, dropping zero rows.
    pub fn from_vectors(ids: Vec<String>, vectors: ArrayView2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::dimension("index ids", vectors.nrows(), ids.len()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate image id {dup}")));
        }
        let units: Vec<Option<Array1<f64>>> = par::map_indexed(vectors.nrows(), |i| unit(vectors.row(i)));
        let keep: Vec<usize> = (0..units.len()).filter(|&i| units[i].is_some()).collect();
        let mut m = Array2::zeros((keep.len(), vectors.ncols()));
        for (row, &i) in keep.iter().enumerate() {
            m.row_mut(row).assign(units[i].as_ref().expect("kept rows are nonzero"));
        }
        let skipped = ids.len() - keep.len();
        if skipped > 0 {
            log::warn!("{skipped} images have a zero projection and were left out of the index");
        }
        Ok(RetrievalIndex {
            ids: keep.iter().map(|&i| ids[i].clone()).collect(),
            unit_vectors: m,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Top-n rows by dot product with a unit query; ties by image id.
    pub fn search(&self, q: ArrayView1<f64>, n: usize) -> Result<Vec<(String, f64)>> {
        if q.len() != self.unit_vectors.ncols() {
            return Err(Error::dimension("retrieval query", self.unit_vectors.ncols(), q.len()));
        }
        const BLOCK: usize = 8192;
        let m = self.len();
        let blocks = par::map_indexed(m.div_ceil(BLOCK), |b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(m);
            let scores = self.unit_vectors.slice(s![lo..hi, ..]).dot(&q);
            top_k(scores.iter().enumerate().map(|(i, &x)| (&self.ids[lo + i], x)).collect(), n)
        });
        let hits = top_k(blocks.into_iter().flatten().collect(), n);
        Ok(hits.into_iter().map(|(id, s)| (id.clone(), s)).collect())
    }
}

/// Projects every image of `corpus` through `net` and normalizes.
pub fn build_index(corpus: &Corpus, net: &ProjectorNet) -> Result<RetrievalIndex> {
    let x = features_matrix(corpus);
    let f = net.project(x.view())?;
    RetrievalIndex::from_vectors(corpus.records().iter().map(|r| r.id.clone()).collect(), f.view())
}

/// `M x F` feature matrix in record order.
pub fn features_matrix(corpus: &Corpus) -> Array2<f64> {
    let mut x = Array2::zeros((corpus.len(), corpus.feature_dim()));
    for (mut row, r) in x.axis_iter_mut(Axis(0)).zip(corpus.records()) {
        row.assign(&ArrayView1::from(&r.features));
    }
    x
}

/// Unit query vector: the normalized mean of the in-vocabulary tokens.
pub fn query_vector<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Result<Array1<f64>> {
    let ids: Vec<TagId> = tokens
        .iter()
        .filter_map(|t| table.vocab().id(&normalize_token(t.as_ref())))
        .collect();
    if ids.is_empty() {
        return Err(Error::UnknownQuery(tokens.iter().map(|t| t.as_ref().to_string()).collect()));
    }
    let mut sum = Array1::zeros(table.dim());
    for &id in &ids {
        sum += &table.row(id);
    }
    unit((sum / ids.len() as f64).view()).ok_or(Error::DegenerateQuery)
}

/// Top-n images for a text query; `n` is clamped to the index size.
pub fn retrieve_images<S: AsRef<str>>(
    query_tokens: &[S],
    table: &EmbeddingTable,
    index: &RetrievalIndex,
    n: usize,
) -> Result<Vec<(String, f64)>> {
    let q = query_vector(query_tokens, table)?;
    index.search(q.view(), n.min(index.len()))
}

/// Confusion counts of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub images: usize,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageCounts>>,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Macro (per-image mean) and micro (pooled) precision/recall/F1.
/// Undefined per-image ratios count as 0 in the macro means.
pub fn evaluate(predictions: &[Vec<TagId>], truths: &[Vec<TagId>], k: usize) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::dimension("predictions vs truths", truths.len(), predictions.len()));
    }
    if let Some(i) = predictions.iter().position(|p| p.len() > k) {
        return Err(Error::invalid(format!("image {i} has more than k={k} predictions")));
    }
    let counts: Vec<ImageCounts> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let p: BTreeSet<TagId> = p.iter().copied().collect();
            let t: BTreeSet<TagId> = t.iter().copied().collect();
            let tp = p.intersection(&t).count();
            ImageCounts {
                tp,
                fp: p.len() - tp,
                fn_: t.len() - tp,
            }
        })
        .collect();
    let n = counts.len();
    let mean = |f: &dyn Fn(&ImageCounts) -> f64| {
        if n == 0 {
            0.0
        } else {
            counts.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let macro_p = mean(&|c| ratio(c.tp, c.tp + c.fp));
    let macro_r = mean(&|c| ratio(c.tp, c.tp + c.fn_));
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |(a, b, c), x| (a + x.tp, b + x.fp, c + x.fn_));
    let micro_p = ratio(tp, tp + fp);
    let micro_r = ratio(tp, tp + fn_);
    Ok(EvalReport {
        k,
        images: n,
        macro_p,
        macro_r,
        macro_f1: f1(macro_p, macro_r),
        micro_p,
        micro_r,
        micro_f1: f1(micro_p, micro_r),
        per_image: Some(counts),
    })
}

impl EvalReport {
    pub fn without_detail(mut self) -> Self {
        self.per_image = None;
        self
    }

    pub fn to_table(&self) -> String {
        format!(
            "top-{k} over {n} images\n\
             {:<8}{:>10}{:>10}{:>10}\n\
             {:<8}{:>10.4}{:>10.4}{:>10.4}\n\
             {:<8}{:>10.4}{:>10.4}{:>10.4}\n",
            "", "P", "R", "F1",
            "macro", self.macro_p, self.macro_r, self.macro_f1,
            "micro", self.micro_p, self.micro_r, self.micro_f1,
            k = self.k,
            n = self.images,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.clone().without_detail()).expect("report serializes")
    }
}

/// Projects a corpus and returns the top-k tags of every image (empty for
/// zero projections) with the number of such images.
pub fn predict_corpus(
    corpus: &Corpus,
    net: &ProjectorNet,
    table: &EmbeddingTable,
    k: usize,
    allowed: Option<&[bool]>,
) -> Result<(Vec<Vec<(TagId, f64)>>, usize)> {
    let f = net.project(features_matrix(corpus).view())?;
    TagScorer::new(table, allowed)?.tag_batch(f.view(), k)
}

/// Tags the corpus and scores the result against its own tag sets.
pub fn evaluate_corpus(corpus: &Corpus, net: &ProjectorNet, table: &EmbeddingTable, k: usize) -> Result<EvalReport> {
    let (preds, _) = predict_corpus(corpus, net, table, k, None)?;
    let ids: Vec<Vec<TagId>> = preds.iter().map(|p| p.iter().map(|x| x.0).collect()).collect();
    let truths: Vec<Vec<TagId>> = corpus.records().iter().map(|r| r.tag_ids.clone()).collect();
    evaluate(&ids, &truths, k)
}

/// Tokens present in both vocabularies.
pub fn intersection_vocabulary(a: &TagVocabulary, b: &TagVocabulary) -> BTreeSet<String> {
    let other: BTreeSet<&str> = b.tokens().iter().map(String::as_str).collect();
    a.tokens().iter().filter(|t| other.contains(t.as_str())).cloned().collect()
}

/// Cross-vocabulary evaluation: predictions are restricted to the tags of
/// `table` that also occur in `truth_vocab`, and truths are filtered to the
/// same set. Returns the report and the size of the shared vocabulary.
pub fn evaluate_on_intersection(
    corpus: &Corpus,
    net: &ProjectorNet,
    table: &EmbeddingTable,
    k: usize,
) -> Result<(EvalReport, usize)> {
    let shared = intersection_vocabulary(table.vocab(), corpus.vocab());
    if shared.is_empty() {
        return Err(Error::invalid("the two vocabularies share no tokens"));
    }
    let allowed: Vec<bool> = table.vocab().tokens().iter().map(|t| shared.contains(t)).collect();
    let (preds, _) = predict_corpus(corpus, net, table, k.min(shared.len()), Some(&allowed))?;
    let preds: Vec<Vec<TagId>> = preds.iter().map(|p| p.iter().map(|x| x.0).collect()).collect();
    let truths: Vec<Vec<TagId>> = corpus
        .records()
        .iter()
        .map(|r| {
            r.tag_ids
                .iter()
                .filter_map(|&t| table.vocab().id(corpus.vocab().token(t)))
                .collect()
        })
        .collect();
    Ok((evaluate(&preds, &truths, k)?, shared.len()))
}

/// Writes `<image_id>\t<tag>:<score> ...` lines.
pub fn write_predictions<W: Write>(
    mut out: W,
    ids: &[String],
    predictions: &[Vec<(TagId, f64)>],
    vocab: &TagVocabulary,
) -> Result<()> {
    for (id, preds) in ids.iter().zip(predictions) {
        out.write_all(id.as_bytes())?;
        out.write_all(b"\t")?;
        for (j, (t, s)) in preds.iter().enumerate() {
            if j > 0 {
                out.write_all(b" ")?;
            }
            write!(out, "{}:{s:.6}", vocab.token(*t))?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

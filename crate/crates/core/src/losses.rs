//! Training objectives and their analytic gradients.
//!
//! Every objective is a quantity to MAXIMIZE. Gradients are returned with
//! respect to the projector outputs `f` (dense, one row per image) and the
//! word vectors (sparse, only the rows an objective touches).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::corpus::TagId;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::par;

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log sigma(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Sampled positives against sampled negatives plus tag co-occurrence
    /// terms.
    SampledNce,
    /// Full-vocabulary multi-label cross-entropy. Dense; oracle use.
    FullXent,
    /// Pairwise ranking over every (tag, non-tag) pair of each image.
    Fast0tagFull,
    /// Pairwise ranking over the sampled P x N pairs.
    Fast0tagSampled,
    /// Squared-error regression onto the mean of the positive tag vectors.
    AvgWordvec,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::SampledNce,
        LossKind::FullXent,
        LossKind::Fast0tagFull,
        LossKind::Fast0tagSampled,
        LossKind::AvgWordvec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SampledNce => "sampled-nce",
            LossKind::FullXent => "full-xent",
            LossKind::Fast0tagFull => "fast0tag",
            LossKind::Fast0tagSampled => "fast0tag-sampled",
            LossKind::AvgWordvec => "avg-wv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the objective reads the sampled negatives.
    pub fn uses_negatives(self) -> bool {
        matches!(self, LossKind::SampledNce | LossKind::Fast0tagSampled)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the positive/positive co-occurrence term.
    pub alpha_pp: f64,
    /// Weight of the positive/negative co-occurrence term.
    pub alpha_pn: f64,
    /// Scale of the ranking objective.
    pub beta: f64,
    /// Joint optimization of the word vectors.
    pub optimize_wordvecs: bool,
    /// Use `sigma(.)` instead of `log sigma(.)` in the co-occurrence terms.
    pub raw_sigmoid_tag_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::SampledNce,
            alpha_pp: 0.01,
            alpha_pn: 0.01,
            beta: 1.0,
            optimize_wordvecs: true,
            raw_sigmoid_tag_terms: false,
        }
    }
}

impl LossConfig {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_pp = alpha;
        self.alpha_pn = alpha;
        self
    }

    pub fn kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Gradient rows for a subset of the table, ids ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    ids: Vec<TagId>,
    values: Array2<f64>,
}

impl SparseGrad {
    pub fn empty(dim: usize) -> Self {
        SparseGrad {
            ids: Vec::new(),
            values: Array2::zeros((0, dim)),
        }
    }

    pub fn from_map(map: BTreeMap<TagId, Array1<f64>>, dim: usize) -> Self {
        let mut values = Array2::zeros((map.len(), dim));
        let ids = map
            .into_iter()
            .enumerate()
            .map(|(i, (id, v))| {
                values.row_mut(i).assign(&v);
                id
            })
            .collect();
        SparseGrad { ids, values }
    }

    /// Every row of a dense `|V| x d` gradient.
    pub fn from_dense(values: Array2<f64>) -> Self {
        SparseGrad {
            ids: (0..values.nrows() as TagId).collect(),
            values,
        }
    }

    pub fn ids(&self) -> &[TagId] {
        &self.ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: TagId) -> Option<ArrayView1<'_, f64>> {
        self.ids.binary_search(&id).ok().map(|i| self.values.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TagId, ArrayView1<'_, f64>)> {
        self.ids.iter().copied().zip(self.values.rows())
    }

    pub fn to_dense(&self, rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, self.values.ncols()));
        for (id, v) in self.iter() {
            out.row_mut(id as usize).assign(&v);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    /// Value to maximize, summed over the batch.
    pub objective: f64,
    /// `d objective / d f`, `B x d`.
    pub grad_f: Array2<f64>,
    /// `d objective / d v` for touched rows only.
    pub grad_v: SparseGrad,
}

/// Row access for per-image tag id lists, fixed-width or ragged.
pub trait TagRows: Sync {
    fn num_rows(&self) -> usize;
    fn tag_row(&self, i: usize) -> &[TagId];
}

impl TagRows for Array2<TagId> {
    fn num_rows(&self) -> usize {
        self.nrows()
    }

    fn tag_row(&self, i: usize) -> &[TagId] {
        let w = self.ncols();
        let all = self.as_slice().expect("tag matrix in standard layout");
        &all[i * w..(i + 1) * w]
    }
}

impl TagRows for Vec<Vec<TagId>> {
    fn num_rows(&self) -> usize {
        self.len()
    }

    fn tag_row(&self, i: usize) -> &[TagId] {
        &self[i]
    }
}

impl TagRows for [Vec<TagId>] {
    fn num_rows(&self) -> usize {
        self.len()
    }

    fn tag_row(&self, i: usize) -> &[TagId] {
        &self[i]
    }
}

struct RowResult {
    objective: f64,
    grad_f: Array1<f64>,
    grad_v: RowGrads,
}

/// Word-vector gradient rows produced by one batch row, possibly repeating
/// ids. Row `k` is `coefs[k] * base + extra[k]`; `extra` is only allocated by
/// terms that are not a multiple of `base`.
struct RowGrads {
    ids: Vec<TagId>,
    coefs: Vec<f64>,
    base: Array1<f64>,
    extra: Option<Array2<f64>>,
}

impl RowGrads {
    fn none(dim: usize) -> Self {
        Self::scaled(Vec::new(), Vec::new(), Array1::zeros(dim))
    }

    fn scaled(ids: Vec<TagId>, coefs: Vec<f64>, base: Array1<f64>) -> Self {
        RowGrads {
            ids,
            coefs,
            base,
            extra: None,
        }
    }

    fn extra_row(&mut self, k: usize) -> ArrayViewMut1<'_, f64> {
        let (n, d) = (self.ids.len(), self.base.len());
        self.extra.get_or_insert_with(|| Array2::zeros((n, d))).row_mut(k)
    }

    fn add_to(&self, k: usize, out: &mut ArrayViewMut1<f64>) {
        out.scaled_add(self.coefs[k], &self.base);
        if let Some(e) = &self.extra {
            *out += &e.row(k);
        }
    }
}

fn check_inputs(f: &ArrayView2<f64>, table: &EmbeddingTable, rows: &[&dyn TagRows]) -> Result<()> {
    if f.ncols() != table.dim() {
        return Err(Error::dimension("projector output vs word vectors", table.dim(), f.ncols()));
    }
    for r in rows {
        if r.num_rows() != f.nrows() {
            return Err(Error::dimension("tag rows vs batch", f.nrows(), r.num_rows()));
        }
        for i in 0..r.num_rows() {
            if let Some(&bad) = r.tag_row(i).iter().find(|&&t| t as usize >= table.len()) {
                return Err(Error::invalid(format!("tag id {bad} out of range in row {i}")));
            }
        }
    }
    Ok(())
}

/// Combines per-row results. Repeated ids are summed in (row, position)
/// order, so the result does not depend on how rows were scheduled.
fn merge_rows(rows: Vec<RowResult>, dim: usize, context: &str) -> Result<LossValue> {
    let b = rows.len();
    let mut grad_f = Array2::zeros((b, dim));
    let mut objective = 0.0;
    let mut entries: Vec<(TagId, usize, usize)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if !r.objective.is_finite() || !r.grad_f.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("{context}, batch row {i}")));
        }
        objective += r.objective;
        grad_f.row_mut(i).assign(&r.grad_f);
        entries.extend(r.grad_v.ids.iter().enumerate().map(|(k, &id)| (id, i, k)));
    }
    entries.sort_by_key(|e| e.0);
    let mut ids: Vec<TagId> = entries.iter().map(|e| e.0).collect();
    ids.dedup();
    let mut values = Array2::zeros((ids.len(), dim));
    let mut out = 0;
    for (j, &(id, i, k)) in entries.iter().enumerate() {
        if j > 0 && entries[j - 1].0 != id {
            out += 1;
        }
        rows[i].grad_v.add_to(k, &mut values.row_mut(out));
    }
    if !values.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical(format!("{context}, word-vector gradient")));
    }
    Ok(LossValue {
        objective,
        grad_f,
        grad_v: SparseGrad { ids, values },
    })
}

/// Sampled objective: per image
///
/// `sum_p log s(f.v_p) + sum_n log s(-f.v_n)
///  + a_pp sum_{p<p'} log s(v_p.v_p') + a_pn sum_{p,n} log s(-v_p.v_n)`
///
/// where `s` is the logistic function. With `raw_sigmoid_tag_terms` the
/// two co-occurrence terms use `s(.)` instead of `log s(.)`.
pub fn sampled_nce_loss(
    f: ArrayView2<f64>,
    positives: &dyn TagRows,
    negatives: &dyn TagRows,
    table: &EmbeddingTable,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_inputs(&f, table, &[positives, negatives])?;
    let want_v = cfg.optimize_wordvecs;
    let v = table.vectors();
    // Term value and its derivative w.r.t. the pair's dot product.
    let tag_term = |u: f64| -> (f64, f64) {
        if cfg.raw_sigmoid_tag_terms {
            let s = sigmoid(u);
            (s, s * (1.0 - s))
        } else {
            (log_sigmoid(u), sigmoid(-u))
        }
    };
    let rows = par::map_indexed(f.nrows(), |i| {
        let fi = f.row(i);
        let pos = positives.tag_row(i);
        let neg = negatives.tag_row(i);
        let mut objective = 0.0;
        let mut grad_f = Array1::zeros(fi.len());
        // Coefficients on f for each sampled position.
        let mut coef_p = vec![0.0; pos.len()];
        let mut coef_n = vec![0.0; neg.len()];
        for (k, &p) in pos.iter().enumerate() {
            let s = fi.dot(&v.row(p as usize));
            objective += log_sigmoid(s);
            let g = sigmoid(-s);
            grad_f.scaled_add(g, &v.row(p as usize));
            coef_p[k] = g;
        }
        for (k, &n) in neg.iter().enumerate() {
            let s = fi.dot(&v.row(n as usize));
            objective += log_sigmoid(-s);
            let g = -sigmoid(s);
            grad_f.scaled_add(g, &v.row(n as usize));
            coef_n[k] = g;
        }
        let mut grad_v = if want_v {
            let ids = pos.iter().chain(neg).copied().collect();
            RowGrads::scaled(ids, coef_p.iter().chain(&coef_n).copied().collect(), fi.to_owned())
        } else {
            RowGrads::none(fi.len())
        };
        let (np, nn) = (pos.len(), neg.len());
        if cfg.alpha_pp != 0.0 {
            for a in 0..np {
                for b in a + 1..np {
                    let (va, vb) = (v.row(pos[a] as usize), v.row(pos[b] as usize));
                    let (val, d) = tag_term(va.dot(&vb));
                    objective += cfg.alpha_pp * val;
                    if want_v {
                        grad_v.extra_row(a).scaled_add(cfg.alpha_pp * d, &vb);
                        grad_v.extra_row(b).scaled_add(cfg.alpha_pp * d, &va);
                    }
                }
            }
        }
        if cfg.alpha_pn != 0.0 {
            for a in 0..np {
                for b in 0..nn {
                    let (vp, vn) = (v.row(pos[a] as usize), v.row(neg[b] as usize));
                    let (val, d) = tag_term(-vp.dot(&vn));
                    objective += cfg.alpha_pn * val;
                    if want_v {
                        grad_v.extra_row(a).scaled_add(-cfg.alpha_pn * d, &vn);
                        grad_v.extra_row(np + b).scaled_add(-cfg.alpha_pn * d, &vp);
                    }
                }
            }
        }
        RowResult {
            objective,
            grad_f,
            grad_v,
        }
    });
    merge_rows(rows, table.dim(), "sampled objective")
}

/// Builds a `B x |V|` multi-hot label matrix from per-image tag lists.
pub fn multi_hot(tags: &dyn TagRows, vocab_len: usize) -> Array2<f64> {
    let mut y = Array2::zeros((tags.num_rows(), vocab_len));
    for i in 0..tags.num_rows() {
        for &t in tags.tag_row(i) {
            y[(i, t as usize)] = 1.0;
        }
    }
    y
}

/// Full-vocabulary cross-entropy
/// `y^T log s(V f) + (1 - y)^T log(1 - s(V f))`, summed over the batch.
/// Every table row receives a gradient.
pub fn full_xent_loss(
    f: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    table: &EmbeddingTable,
    optimize_wordvecs: bool,
) -> Result<LossValue> {
    check_inputs(&f, table, &[])?;
    if labels.dim() != (f.nrows(), table.len()) {
        return Err(Error::dimension("label columns", table.len(), labels.ncols()));
    }
    let v = table.vectors();
    let scores = f.dot(&v.t());
    let mut residual = Array2::zeros(scores.raw_dim());
    let mut objective = 0.0;
    Zip::from(&mut residual)
        .and(&scores)
        .and(&labels)
        .for_each(|r, &s, &y| {
            objective += y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s);
            *r = y - sigmoid(s);
        });
    if !objective.is_finite() {
        let row = scores
            .axis_iter(Axis(0))
            .position(|r| !r.iter().all(|x| x.is_finite()))
            .unwrap_or(0);
        return Err(Error::Numerical(format!("full cross-entropy, batch row {row}")));
    }
    let grad_f = residual.dot(v);
    let grad_v = if optimize_wordvecs {
        SparseGrad::from_dense(residual.t().dot(&f))
    } else {
        SparseGrad::empty(table.dim())
    };
    Ok(LossValue {
        objective,
        grad_f,
        grad_v,
    })
}

/// Pairwise ranking objective `beta sum_p sum_n log s(f.(v_p - v_n))`.
/// Each pair's difference vector is formed explicitly, so the cost per
/// image is `O(P N d)`.
pub fn fast0tag_loss(
    f: ArrayView2<f64>,
    positives: &dyn TagRows,
    negatives: &dyn TagRows,
    table: &EmbeddingTable,
    beta: f64,
    optimize_wordvecs: bool,
) -> Result<LossValue> {
    check_inputs(&f, table, &[positives, negatives])?;
    let v = table.vectors();
    let d = table.dim();
    let rows = par::map_indexed(f.nrows(), |i| {
        let fi = f.row(i);
        let pos = positives.tag_row(i);
        let neg = negatives.tag_row(i);
        let mut objective = 0.0;
        let mut grad_f = Array1::zeros(d);
        let mut coef_p = vec![0.0; pos.len()];
        let mut coef_n = vec![0.0; neg.len()];
        let mut diff = Array1::zeros(d);
        for (a, &p) in pos.iter().enumerate() {
            let vp = v.row(p as usize);
            for (b, &n) in neg.iter().enumerate() {
                Zip::from(&mut diff)
                    .and(&vp)
                    .and(&v.row(n as usize))
                    .for_each(|o, &x, &y| *o = x - y);
                let s = fi.dot(&diff);
                objective += beta * log_sigmoid(s);
                let w = beta * sigmoid(-s);
                grad_f.scaled_add(w, &diff);
                coef_p[a] += w;
                coef_n[b] -= w;
            }
        }
        let grad_v = if optimize_wordvecs {
            let coefs = coef_p.iter().chain(&coef_n).copied().collect();
            RowGrads::scaled(pos.iter().chain(neg).copied().collect(), coefs, fi.to_owned())
        } else {
            RowGrads::none(d)
        };
        RowResult {
            objective,
            grad_f,
            grad_v,
        }
    });
    merge_rows(rows, d, "ranking objective")
}

/// Complement of each tag set within `0..vocab_len`.
pub fn complement_sets(tag_sets: &dyn TagRows, vocab_len: usize) -> Vec<Vec<TagId>> {
    (0..tag_sets.num_rows())
        .map(|i| {
            let mut mask = vec![false; vocab_len];
            for &t in tag_sets.tag_row(i) {
                mask[t as usize] = true;
            }
            (0..vocab_len as TagId).filter(|&t| !mask[t as usize]).collect()
        })
        .collect()
}

/// Ranking objective over every (tag, non-tag) pair of each image.
pub fn fast0tag_full_loss(
    f: ArrayView2<f64>,
    tag_sets: &dyn TagRows,
    table: &EmbeddingTable,
    beta: f64,
    optimize_wordvecs: bool,
) -> Result<LossValue> {
    let negatives = complement_sets(tag_sets, table.len());
    fast0tag_loss(f, tag_sets, &negatives, table, beta, optimize_wordvecs)
}

/// Mean of the positive rows.
pub fn avg_wordvec_target(positives: &[TagId], table: &EmbeddingTable) -> Result<Array1<f64>> {
    if positives.is_empty() {
        return Err(Error::invalid("average word vector of an empty tag list"));
    }
    let mut acc = Array1::zeros(table.dim());
    for &p in positives {
        acc += &table.row(p);
    }
    Ok(acc / positives.len() as f64)
}

/// Baseline objective `-||f - mean(v_p)||^2` per image.
pub fn avg_wordvec_loss(
    f: ArrayView2<f64>,
    positives: &dyn TagRows,
    table: &EmbeddingTable,
    optimize_wordvecs: bool,
) -> Result<LossValue> {
    check_inputs(&f, table, &[positives])?;
    let rows = par::map_indexed(f.nrows(), |i| {
        let pos = positives.tag_row(i);
        let target = match avg_wordvec_target(pos, table) {
            Ok(t) => t,
            Err(_) => {
                return RowResult {
                    objective: f64::NAN,
                    grad_f: Array1::zeros(table.dim()),
                    grad_v: RowGrads::none(table.dim()),
                }
            }
        };
        let diff = &f.row(i) - &target;
        let objective = -diff.dot(&diff);
        let grad_v = if optimize_wordvecs {
            let share = 2.0 / pos.len() as f64;
            RowGrads::scaled(pos.to_vec(), vec![share; pos.len()], diff.clone())
        } else {
            RowGrads::none(table.dim())
        };
        RowResult {
            objective,
            grad_f: diff * -2.0,
            grad_v,
        }
    });
    merge_rows(rows, table.dim(), "average word-vector objective")
}

/// Everything a loss may read for one batch.
pub struct LossInputs<'a> {
    pub f: ArrayView2<'a, f64>,
    pub positives: &'a dyn TagRows,
    pub negatives: &'a dyn TagRows,
    /// Full per-image tag sets (full-vocabulary objectives).
    pub tag_sets: &'a dyn TagRows,
}

/// Evaluates the configured objective.
pub fn evaluate_loss(inputs: &LossInputs<'_>, table: &EmbeddingTable, cfg: &LossConfig) -> Result<LossValue> {
    let want_v = cfg.optimize_wordvecs;
    match cfg.kind {
        LossKind::SampledNce => sampled_nce_loss(inputs.f, inputs.positives, inputs.negatives, table, cfg),
        LossKind::FullXent => {
            let y = multi_hot(inputs.tag_sets, table.len());
            full_xent_loss(inputs.f, y.view(), table, want_v)
        }
        LossKind::Fast0tagFull => fast0tag_full_loss(inputs.f, inputs.tag_sets, table, cfg.beta, want_v),
        LossKind::Fast0tagSampled => {
            fast0tag_loss(inputs.f, inputs.positives, inputs.negatives, table, cfg.beta, want_v)
        }
        LossKind::AvgWordvec => avg_wordvec_loss(inputs.f, inputs.positives, table, want_v),
    }
}

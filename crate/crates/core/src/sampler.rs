//! Fixed-shape positive/negative tag sampling.
//!
//! Every image in a batch gets exactly `P` positives and `N` negatives so
//! that batches are dense tensors. Negatives never include the image's own
//! tags.

use ndarray::Array2;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageRecord, TagId};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    /// i.i.d. draws from the (powered) tag distribution.
    Unigram,
    /// Uniform draws from a pool pre-sampled once per epoch.
    EpochPool,
    /// Tags of the next image in the shuffled batch.
    Adjacent,
}

impl NegativeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            NegativeStrategy::Unigram => "unigram",
            NegativeStrategy::EpochPool => "epoch-pool",
            NegativeStrategy::Adjacent => "adjacent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Unigram, Self::EpochPool, Self::Adjacent]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_positive: usize,
    pub num_negative: usize,
    pub strategy: NegativeStrategy,
    pub unigram_power: f64,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_positive: 5,
            num_negative: 10,
            strategy: NegativeStrategy::Unigram,
            unigram_power: 1.0,
            pool_size: 1000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_positive == 0 || self.num_negative == 0 {
            return Err(Error::invalid("P and N must be at least 1"));
        }
        if !(self.unigram_power >= 0.0 && self.unigram_power.is_finite()) {
            return Err(Error::invalid("unigram_power must be a finite value >= 0"));
        }
        if self.strategy == NegativeStrategy::EpochPool && self.pool_size < self.num_negative {
            return Err(Error::invalid("pool_size must be at least N for the epoch pool strategy"));
        }
        Ok(())
    }
}

/// One batch: features plus `B x P` positive and `B x N` negative ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub features: Array2<f64>,
    pub positives: Array2<TagId>,
    pub negatives: Array2<TagId>,
    /// Index of each row's record in the source corpus.
    pub record_indices: Vec<usize>,
    /// Full tag set of each row.
    pub tag_sets: Vec<Vec<TagId>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.record_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_indices.is_empty()
    }
}

/// P tags of a record: without replacement when it has at least P tags,
/// otherwise uniformly with replacement.
pub fn sample_positives(tags: &[TagId], p: usize, rng: &mut Rng) -> Result<Vec<TagId>> {
    if tags.is_empty() {
        return Err(Error::invalid("cannot sample positives from an empty tag list"));
    }
    Ok(if tags.len() >= p {
        index::sample(rng, tags.len(), p).iter().map(|i| tags[i]).collect()
    } else {
        (0..p).map(|_| tags[rng.random_range(0..tags.len())]).collect()
    })
}

/// Alias-table sampler over `dist^power`, renormalized.
#[derive(Debug, Clone)]
pub struct UnigramSampler {
    alias: WeightedAliasIndex<f64>,
    probs: Vec<f64>,
}

impl UnigramSampler {
    pub fn new(dist: &[f64], power: f64) -> Result<Self> {
        if dist.is_empty() || dist.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::invalid("tag distribution must be non-empty and non-negative"));
        }
        let weights: Vec<f64> = dist
            .iter()
            .map(|&p| if p > 0.0 { p.powf(power) } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Exhausted);
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::invalid(format!("alias table: {e}")))?;
        Ok(UnigramSampler { alias, probs })
    }

    /// Renormalized sampling probabilities.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn draw(&self, rng: &mut Rng) -> TagId {
        self.alias.sample(rng) as TagId
    }

    /// `n` i.i.d. draws, rejecting ids in `tabu`.
    pub fn sample_excluding(&self, tabu: &[TagId], n: usize, rng: &mut Rng) -> Result<Vec<TagId>> {
        let tabu_mass: f64 = tabu
            .iter()
            .filter_map(|&t| self.probs.get(t as usize))
            .sum();
        let allowed = self
            .probs
            .iter()
            .enumerate()
            .any(|(i, &p)| p > 0.0 && !tabu.contains(&(i as TagId)));
        if !allowed {
            return Err(Error::Exhausted);
        }
        if tabu_mass < 0.9 {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let t = self.draw(rng);
                if !tabu.contains(&t) {
                    out.push(t);
                }
            }
            return Ok(out);
        }
        // Most of the mass is excluded: sample the restricted distribution
        // directly instead of rejecting.
        let restricted: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if tabu.contains(&(i as TagId)) { 0.0 } else { p })
            .collect();
        let alias = WeightedAliasIndex::new(restricted)
            .map_err(|e| Error::invalid(format!("alias table: {e}")))?;
        Ok((0..n).map(|_| alias.sample(rng) as TagId).collect())
    }
}

/// `n` negatives from `dist^power`, excluding `tabu`.
pub fn sample_negatives_unigram(
    dist: &[f64],
    tabu: &[TagId],
    n: usize,
    power: f64,
    rng: &mut Rng,
) -> Result<Vec<TagId>> {
    UnigramSampler::new(dist, power)?.sample_excluding(tabu, n, rng)
}

/// Pre-samples `pool_size` ids for one epoch.
pub fn build_epoch_pool(unigram: &UnigramSampler, pool_size: usize, rng: &mut Rng) -> Result<Vec<TagId>> {
    if pool_size == 0 {
        return Err(Error::invalid("pool_size must be at least 1"));
    }
    Ok((0..pool_size).map(|_| unigram.draw(rng)).collect())
}

/// Uniform draws from the epoch pool excluding `tabu`. Falls back to the
/// unigram sampler when the whole pool is excluded.
pub fn sample_from_pool(
    pool: &[TagId],
    tabu: &[TagId],
    n: usize,
    fallback: &UnigramSampler,
    rng: &mut Rng,
) -> Result<Vec<TagId>> {
    if !pool.iter().any(|t| !tabu.contains(t)) {
        return fallback.sample_excluding(tabu, n, rng);
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = pool[rng.random_range(0..pool.len())];
        if !tabu.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Negatives from the tags of the next image in the batch (cyclically),
/// minus the current image's own tags. Without replacement when enough
/// candidates remain, with replacement otherwise, and from the unigram
/// sampler when none remain.
pub fn sample_negatives_adjacent(
    batch_tags: &[&[TagId]],
    index: usize,
    n: usize,
    fallback: &UnigramSampler,
    rng: &mut Rng,
) -> Result<Vec<TagId>> {
    if batch_tags.len() < 2 {
        return Err(Error::invalid("adjacent negatives need a batch of at least 2"));
    }
    let own = batch_tags[index];
    let next = batch_tags[(index + 1) % batch_tags.len()];
    let candidates: Vec<TagId> = next.iter().copied().filter(|t| !own.contains(t)).collect();
    Ok(if candidates.is_empty() {
        fallback.sample_excluding(own, n, rng)?
    } else if candidates.len() >= n {
        index::sample(rng, candidates.len(), n).iter().map(|i| candidates[i]).collect()
    } else {
        (0..n)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    })
}

/// Per-tag record counts of a corpus, normalized. Tags that never occur in
/// this corpus get zero mass and are never drawn as negatives.
pub fn corpus_tag_distribution(corpus: &Corpus) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; corpus.vocab().len()];
    for r in corpus.records() {
        for &t in &r.tag_ids {
            counts[t as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("corpus has no tags"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

const SHUFFLE_STREAM: u64 = 0x5bff;
const POOL_STREAM: u64 = 0x9001;
const ROW_STREAM: u64 = 0x7a11;

/// Lazily generated batches for one epoch. Every batch is a pure function of
/// `(corpus, config, epoch, batch index)`.
#[derive(Debug)]
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    config: SamplerConfig,
    epoch: u64,
    batch_size: usize,
    order: Vec<usize>,
    unigram: UnigramSampler,
    pool: Vec<TagId>,
    next: usize,
}

/// Shuffles the corpus by `(seed, epoch)` and cuts it into full batches;
/// the final partial batch is dropped.
pub fn make_batches<'a>(
    corpus: &'a Corpus,
    batch_size: usize,
    config: &SamplerConfig,
    epoch: u64,
) -> Result<BatchStream<'a>> {
    config.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if config.strategy == NegativeStrategy::Adjacent && batch_size < 2 {
        return Err(Error::invalid("adjacent negatives need batch_size >= 2"));
    }
    let unigram = UnigramSampler::new(&corpus_tag_distribution(corpus)?, config.unigram_power)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seed::rng(config.seed, &[epoch, SHUFFLE_STREAM]));
    let pool = if config.strategy == NegativeStrategy::EpochPool {
        build_epoch_pool(&unigram, config.pool_size, &mut seed::rng(config.seed, &[epoch, POOL_STREAM]))?
    } else {
        Vec::new()
    };
    Ok(BatchStream {
        corpus,
        config: config.clone(),
        epoch,
        batch_size,
        order,
        unigram,
        pool,
        next: 0,
    })
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn pool(&self) -> &[TagId] {
        &self.pool
    }

    /// Builds batch `k` of the epoch.
    pub fn batch(&self, k: usize) -> Result<SampleBatch> {
        let (p, n, b) = (self.config.num_positive, self.config.num_negative, self.batch_size);
        let idx = &self.order[k * b..(k + 1) * b];
        let records: Vec<&ImageRecord> = idx.iter().map(|&i| &self.corpus.records()[i]).collect();
        let tags: Vec<&[TagId]> = records.iter().map(|r| r.tag_ids.as_slice()).collect();
        let mut features = Array2::zeros((b, self.corpus.feature_dim()));
        let mut positives = Array2::zeros((b, p));
        let mut negatives = Array2::zeros((b, n));
        for (row, rec) in records.iter().enumerate() {
            let mut rng = seed::rng(self.config.seed, &[self.epoch, ROW_STREAM, k as u64, row as u64]);
            features
                .row_mut(row)
                .iter_mut()
                .zip(&rec.features)
                .for_each(|(o, &x)| *o = x);
            let pos = sample_positives(&rec.tag_ids, p, &mut rng)?;
            let neg = match self.config.strategy {
                NegativeStrategy::Unigram => self.unigram.sample_excluding(&rec.tag_ids, n, &mut rng)?,
                NegativeStrategy::EpochPool => {
                    sample_from_pool(&self.pool, &rec.tag_ids, n, &self.unigram, &mut rng)?
                }
                NegativeStrategy::Adjacent => {
                    sample_negatives_adjacent(&tags, row, n, &self.unigram, &mut rng)?
                }
            };
            positives.row_mut(row).iter_mut().zip(pos).for_each(|(o, t)| *o = t);
            negatives.row_mut(row).iter_mut().zip(neg).for_each(|(o, t)| *o = t);
        }
        Ok(SampleBatch {
            features,
            positives,
            negatives,
            record_indices: idx.to_vec(),
            tag_sets: tags.iter().map(|t| t.to_vec()).collect(),
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<SampleBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.num_batches() {
            return None;
        }
        let k = self.next;
        self.next += 1;
        Some(self.batch(k))
    }
}

//! Per-batch timing of the output-layer objectives across `(loss, P, N, |V|)`.
//!
//! A cell times one evaluation of the loss and its gradients for a random
//! batch against a random table; the projector is excluded because its cost
//! does not depend on any of the swept parameters.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TagId, TagVocabulary};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::losses::{evaluate_loss, LossConfig, LossInputs, LossKind};
use crate::{par, seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub losses: Vec<LossKind>,
    pub p_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    /// Timed samples per cell; the median is reported.
    pub repetitions: usize,
    /// Untimed evaluations before sampling.
    pub warmup: usize,
    pub batch_size: usize,
    pub dim: usize,
    /// A sample shorter than this is repeated with more inner iterations.
    pub min_sample_ms: f64,
    /// Co-occurrence weight for the sampled objective.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            losses: vec![LossKind::SampledNce, LossKind::Fast0tagSampled],
            p_values: vec![10, 20],
            n_values: vec![10, 20],
            vocab_sizes: vec![10_000],
            repetitions: 9,
            warmup: 2,
            batch_size: 32,
            dim: 64,
            min_sample_ms: 5.0,
            alpha: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub loss: LossKind,
    pub p: usize,
    pub n: usize,
    pub vocab: usize,
    pub ms_per_batch_median: f64,
    /// Inner iterations per timed sample after resolution scaling.
    pub inner: usize,
}

struct Instance {
    f: Array2<f64>,
    positives: Array2<TagId>,
    negatives: Array2<TagId>,
    tag_sets: Vec<Vec<TagId>>,
}

fn random_table(vocab: usize, d: usize, seed: u64) -> Result<EmbeddingTable> {
    let voc = TagVocabulary::from_entries((0..vocab).map(|i| (format!("w{i}"), 1)).collect())?;
    EmbeddingTable::random(voc.into(), d, seed)
}

fn instance(vocab: usize, b: usize, d: usize, p: usize, n: usize, seed: u64) -> Instance {
    let mut rng = seed::rng(seed, &[vocab as u64, p as u64, n as u64]);
    let scale = 1.0 / (d as f64).sqrt();
    let f = Array2::from_shape_simple_fn((b, d), || scale * rng.sample::<f64, _>(StandardNormal));
    let positives = Array2::from_shape_simple_fn((b, p), || rng.random_range(0..vocab as TagId));
    let negatives = Array2::from_shape_simple_fn((b, n), || rng.random_range(0..vocab as TagId));
    let tag_sets = positives
        .rows()
        .into_iter()
        .map(|r| {
            let mut t = r.to_vec();
            t.sort_unstable();
            t.dedup();
            t
        })
        .collect();
    Instance {
        f,
        positives,
        negatives,
        tag_sets,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

struct Cell<'a> {
    loss: LossConfig,
    p: usize,
    n: usize,
    table: &'a EmbeddingTable,
    inst: Instance,
    inner: usize,
    samples: Vec<f64>,
}

impl Cell<'_> {
    fn run(&self) -> Result<()> {
        let inputs = LossInputs {
            f: self.inst.f.view(),
            positives: &self.inst.positives,
            negatives: &self.inst.negatives,
            tag_sets: &self.inst.tag_sets,
        };
        std::hint::black_box(evaluate_loss(&inputs, self.table, &self.loss)?);
        Ok(())
    }

    /// Mean milliseconds per evaluation over `inner` back-to-back runs,
    /// after one untimed run so the previous cell's cache and heap state
    /// does not leak into this one.
    fn sample(&self) -> Result<f64> {
        self.run()?;
        let t = Instant::now();
        for _ in 0..self.inner {
            self.run()?;
        }
        Ok(t.elapsed().as_secs_f64() * 1e3 / self.inner as f64)
    }
}

/// Times every `(loss, P, N, |V|)` cell single-threaded. Samples are taken
/// round-robin over the cells so slow drift in machine speed spreads evenly.
/// Full-vocabulary losses use tag sets built from the P positives and ignore
/// N.
pub fn benchmark_scaling(bc: &BenchConfig) -> Result<Vec<BenchCell>> {
    if bc.repetitions == 0 || bc.batch_size == 0 || bc.dim == 0 {
        return Err(Error::invalid("repetitions, batch_size and dim must be at least 1"));
    }
    for (name, xs) in [("P", &bc.p_values), ("N", &bc.n_values), ("vocab", &bc.vocab_sizes)] {
        if xs.is_empty() || xs.contains(&0) {
            return Err(Error::invalid(format!("{name} values must be a non-empty list of positive sizes")));
        }
    }
    let tables = bc
        .vocab_sizes
        .iter()
        .map(|&v| random_table(v, bc.dim, bc.seed))
        .collect::<Result<Vec<_>>>()?;
    par::single_threaded(|| {
        let mut cells = Vec::new();
        for &loss in &bc.losses {
            for (&vocab, table) in bc.vocab_sizes.iter().zip(&tables) {
                for &p in &bc.p_values {
                    for &n in &bc.n_values {
                        cells.push(Cell {
                            loss: LossConfig::default().with_alpha(bc.alpha).kind(loss),
                            p,
                            n,
                            table,
                            inst: instance(vocab, bc.batch_size, bc.dim, p, n, bc.seed),
                            inner: 1,
                            samples: Vec::with_capacity(bc.repetitions),
                        });
                    }
                }
            }
        }
        for c in &mut cells {
            for _ in 0..bc.warmup {
                c.run()?;
            }
            while c.sample()? * (c.inner as f64) < bc.min_sample_ms && c.inner < 1 << 20 {
                c.inner *= 2;
            }
        }
        for _ in 0..bc.repetitions {
            for c in &mut cells {
                let s = c.sample()?;
                c.samples.push(s);
            }
        }
        Ok(cells
            .into_iter()
            .map(|c| BenchCell {
                loss: c.loss.kind,
                p: c.p,
                n: c.n,
                vocab: c.table.len(),
                ms_per_batch_median: median(c.samples),
                inner: c.inner,
            })
            .collect())
    })
}

/// `loss\tP\tN\tvocab\tms_per_batch_median` with a header line.
pub fn bench_table(cells: &[BenchCell]) -> String {
    let mut s = String::from("loss\tP\tN\tvocab\tms_per_batch_median\n");
    for c in cells {
        writeln!(s, "{}\t{}\t{}\t{}\t{:.6}", c.loss.name(), c.p, c.n, c.vocab, c.ms_per_batch_median).unwrap();
    }
    s
}

//! Epoch loop: batches come from a producer thread through a bounded
//! queue; the consumer evaluates the loss and applies every update.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::Corpus;
use crate::embeddings::{EmbeddingSnapshot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalReport};
use crate::losses::{evaluate_loss, LossConfig, LossInputs};
use crate::model::{OptimizerConfig, OptimizerState, ProjectorNet};
use crate::sampler::{make_batches, NegativeStrategy, SampleBatch, SamplerConfig};
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// `sampler.seed` is replaced by a stream derived from `seed`.
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: u64,
    pub eval_k: usize,
    /// Written after every epoch when set. Not stored in checkpoints.
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    /// Batches buffered between producer and consumer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval_every: 1,
            eval_k: 5,
            checkpoint_path: None,
            seed: 0,
            queue_depth: 4,
        }
    }
}

const SAMPLER_STREAM: u64 = 0x5a3;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.sampler.strategy == NegativeStrategy::Adjacent && self.batch_size < 2 {
            return Err(Error::invalid("adjacent negatives need batch_size >= 2"));
        }
        if self.eval_k == 0 {
            return Err(Error::invalid("eval_k must be at least 1"));
        }
        let o = &self.optimizer;
        for (name, v) in [("lr_net", o.lr_net), ("lr_table", o.lr_table), ("lr_decay", o.lr_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        self.sampler_config().validate()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: seed::derive(self.seed, &[SAMPLER_STREAM]),
            ..self.sampler.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&EvalReport> for EpochMetrics {
    fn from(r: &EvalReport) -> Self {
        EpochMetrics {
            precision: r.macro_p,
            recall: r.macro_r,
            f1: r.macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    /// Mean objective per image.
    pub objective: f64,
    pub ms_per_batch: f64,
    /// Macro validation metrics at `eval_k`.
    pub metrics: Option<EpochMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation metrics before the first update of this run.
    pub initial: Option<EpochMetrics>,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_f1(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metrics.map(|m| m.f1))
    }

    /// Tab-separated records. Comment lines carry the header and the
    /// untrained metrics; `timing: false` writes `-` for the time column.
    pub fn to_tsv(&self, timing: bool) -> String {
        let mut s = String::from("# epoch\tobjective\tms_per_batch\tP\tR\tF1\n");
        if let Some(m) = self.initial {
            writeln!(s, "# untrained\t-\t-\t{}\t{}\t{}", m.precision, m.recall, m.f1).unwrap();
        }
        for r in &self.records {
            let t = if timing { format!("{:.4}", r.ms_per_batch) } else { "-".into() };
            let m = r
                .metrics
                .map(|m| format!("{}\t{}\t{}", m.precision, m.recall, m.f1))
                .unwrap_or_else(|| "-\t-\t-".into());
            writeln!(s, "{}\t{}\t{t}\t{m}", r.epoch, r.objective).unwrap();
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv(true))?;
        Ok(())
    }

    /// Appends the records of a later run.
    pub fn extend(&mut self, later: TrainLog) {
        if self.initial.is_none() {
            self.initial = later.initial;
        }
        self.records.extend(later.records);
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: ProjectorNet,
    pub table: EmbeddingTable,
    /// The table before any update.
    pub snapshot: EmbeddingSnapshot,
    pub optimizer: OptimizerState,
    pub epochs_done: u64,
}

impl TrainState {
    pub fn new(net: ProjectorNet, table: EmbeddingTable, optimizer: OptimizerConfig) -> Self {
        let optimizer = OptimizerState::new(optimizer, &net, &table);
        TrainState {
            snapshot: table.snapshot(),
            net,
            table,
            optimizer,
            epochs_done: 0,
        }
    }
}

fn check_dims(state: &TrainState, corpus: &Corpus, which: &str) -> Result<()> {
    let net = state.net.config();
    if corpus.feature_dim() != net.input_dim {
        return Err(Error::dimension(format!("{which} features vs projector input"), net.input_dim, corpus.feature_dim()));
    }
    if net.output_dim != state.table.dim() {
        return Err(Error::dimension("projector output vs word vectors", state.table.dim(), net.output_dim));
    }
    if !Arc::ptr_eq(corpus.vocab(), state.table.vocab()) && **corpus.vocab() != **state.table.vocab() {
        return Err(Error::invalid(format!("{which} vocabulary differs from the embedding table's")));
    }
    Ok(())
}

fn at_batch(epoch: u64, batch: usize, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {}, batch {batch}: {m}", epoch + 1)),
        other => other,
    }
}

fn step(state: &mut TrainState, b: &SampleBatch, cfg: &TrainConfig, epoch: u64) -> Result<f64> {
    let (f, cache) = state.net.forward(b.features.view())?;
    let inputs = LossInputs {
        f: f.view(),
        positives: &b.positives,
        negatives: &b.negatives,
        tag_sets: &b.tag_sets,
    };
    let lv = evaluate_loss(&inputs, &state.table, &cfg.loss)?;
    if !lv.objective.is_finite() {
        return Err(Error::Numerical(format!("objective {}", lv.objective)));
    }
    let grads = state.net.backward(&cache, lv.grad_f.view())?;
    state.optimizer.apply_net(&mut state.net, &grads, epoch)?;
    if cfg.loss.optimize_wordvecs {
        state.optimizer.apply_table(&mut state.table, &lv.grad_v, epoch)?;
    }
    Ok(lv.objective)
}

fn run_epoch(state: &mut TrainState, train: &Corpus, cfg: &TrainConfig, epoch: u64) -> Result<(f64, f64)> {
    let stream = make_batches(train, cfg.batch_size, &cfg.sampler_config(), epoch)?;
    let nb = stream.num_batches();
    if nb == 0 {
        return Err(Error::invalid(format!(
            "training split has {} images, fewer than batch_size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let start = Instant::now();
    let total = thread::scope(|s| {
        let (tx, rx) = sync_channel(cfg.queue_depth.max(1));
        s.spawn(move || {
            for b in stream {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        let mut total = 0.0;
        for (k, b) in rx.iter().enumerate() {
            total += b.and_then(|b| step(state, &b, cfg, epoch)).map_err(|e| at_batch(epoch, k, e))?;
        }
        Ok::<_, Error>(total)
    })?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / nb as f64;
    Ok((total / (nb * cfg.batch_size) as f64, ms.max(f64::MIN_POSITIVE)))
}

/// Trains from `state.epochs_done` up to `cfg.epochs`. Every epoch is a pure
/// function of the state and `(cfg.seed, epoch)`, so a state restored from a
/// checkpoint continues exactly as an uninterrupted run would.
pub fn train_state(
    state: &mut TrainState,
    train: &Corpus,
    validation: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dims(state, train, "training")?;
    if let Some(v) = validation {
        check_dims(state, v, "validation")?;
    }
    let validate = |state: &TrainState| -> Result<EpochMetrics> {
        let v = validation.expect("checked by caller");
        Ok(EpochMetrics::from(&evaluate_corpus(v, &state.net, &state.table, cfg.eval_k)?))
    };
    let mut log = TrainLog::default();
    if validation.is_some() && cfg.eval_every > 0 {
        log.initial = Some(validate(state)?);
    }
    for epoch in state.epochs_done..cfg.epochs {
        let (objective, ms_per_batch) = run_epoch(state, train, cfg, epoch)?;
        state.epochs_done = epoch + 1;
        let due = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let metrics = if due && validation.is_some() { Some(validate(state)?) } else { None };
        log::info!("epoch {} objective {objective:.6} ms/batch {ms_per_batch:.3}", epoch + 1);
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            objective,
            ms_per_batch,
            metrics,
        });
        if let Some(path) = &cfg.checkpoint_path {
            checkpoint::save_checkpoint(path, state, cfg)?;
        }
    }
    Ok(log)
}

/// Trains a fresh state for `cfg.epochs` epochs.
pub fn train(
    train: &Corpus,
    validation: Option<&Corpus>,
    net: ProjectorNet,
    table: EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(ProjectorNet, EmbeddingTable, TrainLog)> {
    let mut state = TrainState::new(net, table, cfg.optimizer.clone());
    let log = train_state(&mut state, train, validation, cfg)?;
    Ok((state.net, state.table, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, split_corpus, SyntheticConfig};
    use crate::model::{Activation, ProjectorConfig};

    fn setup() -> (Corpus, Corpus, ProjectorNet, EmbeddingTable) {
        let syn = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let (tr, va, _) = split_corpus(&syn.corpus, (0.8, 0.1, 0.1), 4).unwrap();
        let net = ProjectorNet::new(ProjectorConfig {
            input_dim: 16,
            hidden_dims: vec![32],
            output_dim: 8,
            activation: Activation::Relu,
            init_seed: 1,
        })
        .unwrap();
        let table = EmbeddingTable::random(syn.corpus.vocab().clone(), 8, 2).unwrap();
        (tr, va, net, table)
    }

    fn cfg(epochs: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_table_is_bit_identical() {
        let (tr, va, net, table) = setup();
        let mut c = cfg(5);
        c.loss.optimize_wordvecs = false;
        let (net2, table2, log) = train(&tr, Some(&va), net.clone(), table.clone(), &c).unwrap();
        assert_eq!(table2.vectors(), table.vectors());
        assert_ne!(net2, net);
        assert_eq!(log.records.len(), 5);
    }

    #[test]
    fn epoch_count_contract() {
        let (tr, va, net, table) = setup();
        assert!(train(&tr, Some(&va), net.clone(), table.clone(), &cfg(0)).is_err());
        let (_, _, log) = train(&tr, Some(&va), net, table, &cfg(1)).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(log.records[0].ms_per_batch > 0.0);
        assert!(log.initial.is_some() && log.records[0].metrics.is_some());
    }

    #[test]
    fn deterministic_given_seed() {
        let (tr, va, net, table) = setup();
        let a = train(&tr, Some(&va), net.clone(), table.clone(), &cfg(3)).unwrap();
        let b = train(&tr, Some(&va), net, table, &cfg(3)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2.to_tsv(false), b.2.to_tsv(false));
    }

    #[test]
    fn unsampled_rows_untouched() {
        let (tr, va, net, table) = setup();
        let mut c = cfg(2);
        c.sampler.strategy = NegativeStrategy::Adjacent;
        let mut state = TrainState::new(net, table.clone(), c.optimizer.clone());
        train_state(&mut state, &tr, Some(&va), &c).unwrap();
        for (i, &seen) in state.table.trainable_mask().iter().enumerate() {
            if !seen {
                assert_eq!(state.table.vectors().row(i), table.vectors().row(i));
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (tr, va, _, table) = setup();
        let net = ProjectorNet::new(ProjectorConfig {
            input_dim: 16,
            hidden_dims: vec![],
            output_dim: 5,
            activation: Activation::Relu,
            init_seed: 1,
        })
        .unwrap();
        assert!(matches!(train(&tr, Some(&va), net, table, &cfg(1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nan_aborts_with_coordinates() {
        let (tr, va, net, table) = setup();
        let mut c = cfg(1);
        c.optimizer.lr_net = 1e300;
        c.optimizer.kind = crate::model::OptimizerKind::Sgd;
        match train(&tr, Some(&va), net, table, &c) {
            Err(Error::Numerical(m)) => assert!(m.starts_with("epoch 1, batch "), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn objective_rises_over_early_epochs() {
        // At the default rates the mean plateaus within ~5 epochs and then
        // moves with the negative-sampling noise, so use a fifth of them.
        let (tr, va, net, table) = setup();
        for seed in 0..4 {
            let mut c = cfg(10);
            c.seed = seed;
            c.optimizer.lr_net /= 5.0;
            c.optimizer.lr_table /= 5.0;
            let (_, _, log) = train(&tr, Some(&va), net.clone(), table.clone(), &c).unwrap();
            let obj: Vec<f64> = log.records.iter().map(|r| r.objective).collect();
            assert!(obj.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {obj:?}");
        }
    }

    #[test]
    fn log_format() {
        let log = TrainLog {
            initial: None,
            records: vec![EpochRecord {
                epoch: 1,
                objective: -2.5,
                ms_per_batch: 1.25,
                metrics: Some(EpochMetrics {
                    precision: 0.5,
                    recall: 0.25,
                    f1: 1.0 / 3.0,
                }),
            }],
        };
        let tsv = log.to_tsv(true);
        let line = tsv.lines().nth(1).unwrap();
        assert_eq!(line.split('\t').count(), 6);
        assert!(line.starts_with("1\t-2.5\t1.2500\t0.5\t0.25\t"));
    }
}

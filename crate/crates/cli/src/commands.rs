use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tagembed::bench::{bench_table, benchmark_scaling, BenchConfig};
use tagembed::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tagembed::corpus::{
    canonical_paths, generate_synthetic, load_canonical, load_corpus, load_corpus_with_vocab, split_corpus, Corpus,
    SyntheticConfig, TagId,
};
use tagembed::embeddings::{load_pretrained, snap_oov, EmbeddingTable, InitPolicy, SnapConfig};
use tagembed::eval::{build_index, evaluate, evaluate_on_intersection, predict_corpus, retrieve_images, write_predictions};
use tagembed::losses::{LossConfig, LossKind};
use tagembed::model::{Activation, OptimizerConfig, OptimizerKind, ProjectorConfig, ProjectorNet};
use tagembed::sampler::{NegativeStrategy, SamplerConfig};
use tagembed::seed;
use tagembed::trainer::{train_state, TrainConfig, TrainState};
use tagembed::Error;

use crate::args::*;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const VECTORS_FILE: &str = "word_vectors.txt";

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| usage(format!("bad {what} value `{x}`"))))
        .collect()
}

pub fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let syn = generate_synthetic(&SyntheticConfig {
        num_clusters: a.clusters,
        images_per_cluster: a.per_cluster,
        tags_per_cluster: a.tags_per_cluster,
        feature_dim: a.dim,
        noise_tag_rate: a.noise,
        feature_noise: a.feature_noise,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    syn.corpus.write_canonical(&a.out)?;
    println!(
        "wrote {} images, {} tags, {} noise tags to {}",
        syn.corpus.len(),
        syn.corpus.vocab().len(),
        syn.noise_tags,
        a.out.display()
    );
    Ok(())
}

/// A corpus directory with its own vocabulary, or built from the tag
/// counts when it has no vocab.tsv.
fn load_data(dir: &Path, min_freq: u64, max_vocab: usize) -> Result<Corpus> {
    let (f, t, v) = canonical_paths(dir);
    Ok(if v.exists() {
        load_canonical(dir)?
    } else {
        load_corpus(&f, &t, min_freq, max_vocab)?
    })
}

fn split_names(train: &Corpus, val: &Corpus, test: &Corpus) -> String {
    let mut s = String::new();
    for (name, c) in [("train", train), ("val", val), ("test", test)] {
        for r in c.records() {
            s.push_str(&format!("{}\t{name}\n", r.id));
        }
    }
    s
}

pub fn train(a: &TrainArgs, resolved: &str) -> Result<()> {
    let fractions: Vec<f64> = parse_list(&a.split, "split")?;
    let &[ft, fv, fs_] = fractions.as_slice() else {
        return Err(usage("--split needs three fractions: train,val,test"));
    };
    let hidden: Vec<usize> = if a.hidden.trim() == "none" { Vec::new() } else { parse_list(&a.hidden, "hidden")? };
    let corpus = load_data(&a.data, a.min_freq, a.max_vocab)?;
    let (train, val, test) = split_corpus(&corpus, (ft, fv, fs_), seed::derive(a.seed, &[1]))?;

    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        loss: LossConfig {
            kind: LossKind::parse(&a.loss).expect("checked by clap"),
            alpha_pp: a.alpha,
            alpha_pn: a.alpha,
            beta: a.beta,
            optimize_wordvecs: a.optimize_wordvecs.get(),
            raw_sigmoid_tag_terms: false,
        },
        sampler: SamplerConfig {
            num_positive: a.p,
            num_negative: a.n,
            strategy: NegativeStrategy::parse(&a.neg_strategy).expect("checked by clap"),
            unigram_power: a.unigram_power,
            pool_size: a.pool_size,
            seed: 0,
        },
        optimizer: OptimizerConfig {
            kind: OptimizerKind::parse(&a.optimizer).expect("checked by clap"),
            lr_net: a.lr,
            lr_table: a.lr_table,
            lr_decay: a.lr_decay,
            ..Default::default()
        },
        eval_every: a.eval_every,
        eval_k: a.eval_k,
        checkpoint_path: Some(a.out.join(CHECKPOINT_FILE)),
        seed: seed::derive(a.seed, &[4]),
        queue_depth: 4,
    };
    cfg.validate()?;

    fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let resuming = a.resume.get() && ck_path.exists();
    let mut state = if resuming {
        let ck = load_checkpoint(&ck_path)?;
        if **ck.state.table.vocab() != **corpus.vocab() {
            return Err(usage("corpus vocabulary differs from the checkpoint's"));
        }
        ck.state
    } else {
        let table = match &a.word_vectors {
            Some(p) => {
                let policy = if a.missing_vectors == "error" { InitPolicy::Error } else { InitPolicy::Random };
                load_pretrained(p, Arc::clone(corpus.vocab()), a.dim, policy, seed::derive(a.seed, &[3]))?.0
            }
            None => EmbeddingTable::random(Arc::clone(corpus.vocab()), a.dim, seed::derive(a.seed, &[3]))?,
        };
        let net = ProjectorNet::new(ProjectorConfig {
            input_dim: corpus.feature_dim(),
            hidden_dims: hidden,
            output_dim: a.dim,
            activation: Activation::parse(&a.activation).expect("checked by clap"),
            init_seed: seed::derive(a.seed, &[2]),
        })?;
        TrainState::new(net, table, cfg.optimizer.clone())
    };

    fs::write(a.out.join(SPLITS_FILE), split_names(&train, &val, &test))?;
    fs::write(a.out.join(CONFIG_FILE), resolved)?;
    let log = train_state(&mut state, &train, Some(&val), &cfg)?;
    if resuming && a.out.join(LOG_FILE).exists() {
        let tsv = log.to_tsv(true);
        let mut f = fs::OpenOptions::new().append(true).open(a.out.join(LOG_FILE))?;
        for line in tsv.lines().filter(|l| !l.starts_with('#')) {
            writeln!(f, "{line}")?;
        }
    } else {
        log.write_tsv(&a.out.join(LOG_FILE))?;
    }
    if log.records.is_empty() {
        save_checkpoint(&ck_path, &state, &cfg)?;
    }
    state.table.save(&a.out.join(VECTORS_FILE))?;

    if let Some(m) = log.initial {
        println!("untrained\tP={:.4}\tR={:.4}\tF1={:.4}", m.precision, m.recall, m.f1);
    }
    for r in &log.records {
        match r.metrics {
            Some(m) => println!(
                "epoch {}\tobjective={:.6}\tP={:.4}\tR={:.4}\tF1={:.4}",
                r.epoch, r.objective, m.precision, m.recall, m.f1
            ),
            None => println!("epoch {}\tobjective={:.6}", r.epoch, r.objective),
        }
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

struct Run {
    ck: Checkpoint,
    corpus: Corpus,
}

fn load_run(r: &RunArgs, default_split: &str) -> Result<Run> {
    let ck_path = r.run.join(CHECKPOINT_FILE);
    let ck = load_checkpoint(&ck_path)?;
    let (f, t, _) = canonical_paths(&r.data);
    let corpus = load_corpus_with_vocab(&f, &t, Arc::clone(ck.state.table.vocab()))?;
    let split = r.split.as_deref().unwrap_or(default_split);
    let corpus = if split == "all" { corpus } else { select_split(&corpus, &r.run.join(SPLITS_FILE), split)? };
    Ok(Run { ck, corpus })
}

fn select_split(corpus: &Corpus, splits: &Path, which: &str) -> Result<Corpus> {
    let text = fs::read_to_string(splits).map_err(|e| usage(format!("{}: {e}", splits.display())))?;
    let names: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('\t')).collect();
    let records = corpus
        .records()
        .iter()
        .filter(|r| names.get(r.id.as_str()) == Some(&which))
        .cloned()
        .collect::<Vec<_>>();
    if records.is_empty() {
        return Err(usage(format!("split `{which}` selects no images of this corpus")));
    }
    Ok(Corpus::new(records, Arc::clone(corpus.vocab()))?)
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn tag(a: &TagArgs) -> Result<()> {
    let run = load_run(&a.run, "test")?;
    let s = &run.ck.state;
    let (preds, zero) = predict_corpus(&run.corpus, &s.net, &s.table, a.k, None)?;
    if zero > 0 {
        eprintln!("{zero} images have a zero projection and no tags");
    }
    let ids: Vec<String> = run.corpus.records().iter().map(|r| r.id.clone()).collect();
    let mut out = output(a.out.as_ref())?;
    write_predictions(&mut out, &ids, &preds, s.table.vocab())?;
    out.flush()?;
    Ok(())
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let run = load_run(&a.run, "all")?;
    let s = &run.ck.state;
    let tokens: Vec<&str> = a.query.split([' ', ',']).filter(|t| !t.is_empty()).collect();
    if tokens.is_empty() {
        return Err(usage("--query is empty"));
    }
    let index = build_index(&run.corpus, &s.net)?;
    if index.skipped > 0 {
        eprintln!("{} images have a zero projection and were not indexed", index.skipped);
    }
    let hits = retrieve_images(&tokens, &s.table, &index, a.top)?;
    let mut out = io::stdout().lock();
    for (id, score) in hits {
        writeln!(out, "{id}\t{score:.6}")?;
    }
    Ok(())
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let s;
    let (report, shared) = if a.intersection.get() {
        let ck = load_checkpoint(&a.run.run.join(CHECKPOINT_FILE))?;
        let corpus = load_data(&a.run.data, 1, usize::MAX)?;
        let split = a.run.split.as_deref().unwrap_or("all");
        let corpus = if split == "all" { corpus } else { select_split(&corpus, &a.run.run.join(SPLITS_FILE), split)? };
        s = ck.state;
        let (r, n) = evaluate_on_intersection(&corpus, &s.net, &s.table, a.k)?;
        (r, Some(n))
    } else {
        let run = load_run(&a.run, "test")?;
        s = run.ck.state;
        let (preds, _) = predict_corpus(&run.corpus, &s.net, &s.table, a.k, None)?;
        let ids: Vec<Vec<TagId>> = preds.iter().map(|p| p.iter().map(|x| x.0).collect()).collect();
        let truths: Vec<Vec<TagId>> = run.corpus.records().iter().map(|r| r.tag_ids.clone()).collect();
        (evaluate(&ids, &truths, a.k)?, None)
    };
    let report = report.without_detail();
    let json = match shared {
        Some(n) => {
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v["intersection_vocab"] = n.into();
            v.to_string()
        }
        None => report.to_json(),
    };
    if let Some(p) = &a.report {
        fs::write(p, format!("{json}\n")).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    match a.format {
        Format::Json => println!("{json}"),
        Format::Table => {
            print!("{}", report.to_table());
            if let Some(n) = shared {
                println!("intersection vocabulary: {n} tags");
            }
        }
    }
    Ok(())
}

pub fn snap(a: &SnapArgs) -> Result<()> {
    let ck_path = a.run.join(CHECKPOINT_FILE);
    let Checkpoint { config, mut state } = load_checkpoint(&ck_path)?;
    let report = snap_oov(
        &mut state.table,
        &state.snapshot,
        &SnapConfig {
            anchors_per_step: a.anchors,
            steps: a.steps,
            lr: a.lr,
            seed: a.seed,
        },
    )?;
    let out = a.out.clone().unwrap_or(ck_path);
    save_checkpoint(&out, &state, &config)?;
    if a.out.is_none() {
        state.table.save(&a.run.join(VECTORS_FILE))?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let losses = a
        .losses
        .split(',')
        .map(str::trim)
        .map(|s| LossKind::parse(s).ok_or_else(|| usage(format!("unknown loss `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let cells = benchmark_scaling(&BenchConfig {
        losses,
        p_values: parse_list(&a.p, "P")?,
        n_values: parse_list(&a.n, "N")?,
        vocab_sizes: parse_list(&a.vocab, "vocab")?,
        repetitions: a.repetitions,
        batch_size: a.batch_size,
        dim: a.dim,
        alpha: a.alpha,
        seed: a.seed,
        ..Default::default()
    })?;
    let mut out = output(a.out.as_ref())?;
    out.write_all(bench_table(&cells).as_bytes())?;
    out.flush()?;
    Ok(())
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

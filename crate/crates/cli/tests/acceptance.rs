//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one `criterion N: PASS|FAIL` line per check; exits non-zero if any fail.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagembed::bench::{benchmark_scaling, BenchCell, BenchConfig};
use tagembed::corpus::{generate_synthetic, split_corpus, Corpus, SyntheticConfig, SyntheticCorpus, TagId, TagVocabulary};
use tagembed::embeddings::{snap_eval_pairs, snap_objective, snap_oov, EmbeddingTable, SnapConfig};
use tagembed::eval::{build_index, evaluate, retrieve_images, RetrievalIndex};
use tagembed::losses::{
    complement_sets, evaluate_loss, full_xent_loss, multi_hot, sampled_nce_loss, LossConfig, LossInputs, LossKind,
};
use tagembed::model::{Activation, ProjectorConfig, ProjectorNet};
use tagembed::trainer::{train, TrainConfig, TrainLog};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn plain_table(m: Array2<f64>) -> EmbeddingTable {
    let vocab = TagVocabulary::from_entries((0..m.nrows()).map(|i| (format!("t{i}"), 1)).collect()).unwrap();
    EmbeddingTable::from_matrix(Arc::new(vocab), m).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- criterion 1

const FD_H: f64 = 1e-5;

/// `max |a - n| / max(|a|, |n|)` over every component of one tensor.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = max_abs_diff(analytic, numeric);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_check() -> Outcome {
    let base = LossConfig::default();
    let configs = [
        ("sampled_nce a=0", base.clone().with_alpha(0.0)),
        ("sampled_nce a=0.01", base.clone().with_alpha(0.01)),
        ("full_xent", base.clone().kind(LossKind::FullXent)),
        ("fast0tag full", base.clone().kind(LossKind::Fast0tagFull)),
        ("fast0tag sampled", base.clone().kind(LossKind::Fast0tagSampled)),
        ("avg_wordvec", base.kind(LossKind::AvgWordvec)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for (name, cfg) in &configs {
        for trial in 0..20 {
            let b = rng.random_range(1..=4);
            let d = rng.random_range(1..=8);
            let vocab = rng.random_range(8..=20);
            let p = rng.random_range(1..=4);
            let n = rng.random_range(1..=6);
            let f = uniform(&mut rng, (b, d), 1.0);
            let tab = uniform(&mut rng, (vocab, d), 0.7);
            let pos = Array2::from_shape_simple_fn((b, p), || rng.random_range(0..vocab as TagId));
            let neg = Array2::from_shape_simple_fn((b, n), || rng.random_range(0..vocab as TagId));
            let sets: Vec<Vec<TagId>> = pos
                .rows()
                .into_iter()
                .map(|r| {
                    let mut t = r.to_vec();
                    t.sort_unstable();
                    t.dedup();
                    t
                })
                .collect();
            let obj = |f: ArrayView2<f64>, tab: &Array2<f64>| {
                let inputs = LossInputs {
                    f,
                    positives: &pos,
                    negatives: &neg,
                    tag_sets: &sets,
                };
                evaluate_loss(&inputs, &plain_table(tab.clone()), cfg).unwrap()
            };
            let lv = obj(f.view(), &tab);
            let mut num_f = Vec::new();
            for idx in ndarray::indices(f.dim()) {
                let (mut hi, mut lo) = (f.clone(), f.clone());
                hi[idx] += FD_H;
                lo[idx] -= FD_H;
                num_f.push((obj(hi.view(), &tab).objective - obj(lo.view(), &tab).objective) / (2.0 * FD_H));
            }
            let mut num_v = Vec::new();
            for idx in ndarray::indices(tab.dim()) {
                let (mut hi, mut lo) = (tab.clone(), tab.clone());
                hi[idx] += FD_H;
                lo[idx] -= FD_H;
                num_v.push((obj(f.view(), &hi).objective - obj(f.view(), &lo).objective) / (2.0 * FD_H));
            }
            let ef = rel_error(lv.grad_f.as_slice().unwrap(), &num_f);
            let ev = rel_error(lv.grad_v.to_dense(vocab).as_slice().unwrap(), &num_v);
            worst = worst.max(ef).max(ev);
            instances += 1;
            if ef >= 1e-6 || ev >= 1e-6 {
                return Err(format!("{name} trial {trial}: rel error f {ef:.2e}, v {ev:.2e}"));
            }
        }
    }
    Ok(format!("{instances} instances, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 2

fn selector_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = LossConfig::default().with_alpha(0.0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let vocab = rng.random_range(2..=32);
        let b = rng.random_range(1..=6);
        let d = rng.random_range(1..=12);
        let f = uniform(&mut rng, (b, d), 1.5);
        let table = plain_table(uniform(&mut rng, (vocab, d), 1.0));
        // Every image carries a non-empty proper subset so both sides are used.
        let sets: Vec<Vec<TagId>> = (0..b)
            .map(|_| {
                let size = rng.random_range(1..vocab);
                let mut ids: Vec<TagId> = (0..vocab as TagId).collect();
                for i in 0..size {
                    let j = rng.random_range(i..vocab);
                    ids.swap(i, j);
                }
                let mut s = ids[..size].to_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let negatives = complement_sets(&sets, vocab);
        let sampled = sampled_nce_loss(f.view(), &sets, &negatives, &table, &cfg).map_err(|e| e.to_string())?;
        let y = multi_hot(&sets, vocab);
        let full = full_xent_loss(f.view(), y.view(), &table, true).map_err(|e| e.to_string())?;
        let err = [
            (sampled.objective - full.objective).abs(),
            max_abs_diff(sampled.grad_f.as_slice().unwrap(), full.grad_f.as_slice().unwrap()),
            max_abs_diff(
                sampled.grad_v.to_dense(vocab).as_slice().unwrap(),
                full.grad_v.to_dense(vocab).as_slice().unwrap(),
            ),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("trial {trial} (|V|={vocab}): absolute difference {err:.2e}"));
        }
    }
    Ok(format!("100 trials, worst absolute difference {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 3 / 8

struct Split {
    syn: SyntheticCorpus,
    train: Corpus,
    val: Corpus,
}

fn synthetic_split() -> Split {
    let syn = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let (train, val, _) = split_corpus(&syn.corpus, (0.8, 0.1, 0.1), 7).unwrap();
    Split { syn, train, val }
}

fn small_net(seed: u64) -> ProjectorNet {
    ProjectorNet::new(ProjectorConfig {
        input_dim: 16,
        hidden_dims: vec![64],
        output_dim: 16,
        activation: Activation::Relu,
        init_seed: seed,
    })
    .unwrap()
}

fn small_config(kind: LossKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        seed,
        ..Default::default()
    };
    cfg.loss.kind = kind;
    cfg.sampler.num_positive = 5;
    cfg.sampler.num_negative = 10;
    cfg
}

fn run(split: &Split, kind: LossKind) -> (ProjectorNet, EmbeddingTable, TrainLog) {
    let table = EmbeddingTable::random(Arc::clone(split.syn.corpus.vocab()), 16, 3).unwrap();
    train(&split.train, Some(&split.val), small_net(2), table, &small_config(kind, 4)).unwrap()
}

fn sampling_parity(split: &Split) -> (Outcome, Option<(ProjectorNet, EmbeddingTable)>) {
    let t = Instant::now();
    let (net, table, sampled) = run(split, LossKind::SampledNce);
    let (_, _, full) = run(split, LossKind::FullXent);
    let base = sampled.initial.expect("initial metrics").f1;
    let (fs, ff) = (sampled.final_f1().unwrap(), full.final_f1().unwrap());
    let detail = format!(
        "F1 sampled {fs:.3}, full {ff:.3}, untrained {base:.3}, {:.1}s",
        t.elapsed().as_secs_f64()
    );
    let ok = (fs - ff).abs() <= 0.05 && fs - base >= 0.3 && ff - base >= 0.3;
    (ensure(ok, detail), Some((net, table)))
}

fn retrieval_sanity(split: &Split, trained: &(ProjectorNet, EmbeddingTable)) -> Outcome {
    let (net, table) = trained;
    let index = build_index(&split.syn.corpus, net).map_err(|e| e.to_string())?;
    let vocab = table.vocab();
    let mut worst = 5;
    for (id, token) in vocab.tokens().iter().enumerate() {
        let cluster = split.syn.tag_cluster[id];
        let hits = retrieve_images(&[token], table, &index, 5).map_err(|e| e.to_string())?;
        let right = hits
            .iter()
            .filter(|(img, _)| img.starts_with(&format!("c{cluster}_")))
            .count();
        worst = worst.min(right);
        if right < 4 {
            return Err(format!("query `{token}`: {right}/5 from cluster {cluster}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (rows, dim) = (100_000, 300);
    let vectors = uniform(&mut rng, (rows, dim), 1.0);
    let ids: Vec<String> = (0..rows).map(|i| format!("img{i}")).collect();
    let big = RetrievalIndex::from_vectors(ids, vectors.view()).map_err(|e| e.to_string())?;
    drop(vectors);
    let mut times = Vec::new();
    for _ in 0..5 {
        let q: Array1<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let t = Instant::now();
        std::hint::black_box(big.search(q.view(), 5).map_err(|e| e.to_string())?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[2];
    ensure(
        median < 0.05,
        format!(
            "{} tag queries, worst {worst}/5 in-cluster; 100k x 300 query median {:.1} ms",
            vocab.len(),
            median * 1e3
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Word vectors aligned with the cluster structure, except that the most
/// frequent tag of cluster 0 and of cluster 1 share one vector placed
/// between the two clusters.
fn confounded_table(syn: &SyntheticCorpus, dim: usize, seed: u64) -> (EmbeddingTable, TagId, TagId) {
    let vocab = syn.corpus.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::<f64>::zeros((vocab.len(), dim));
    for (id, &c) in syn.tag_cluster.iter().enumerate() {
        for j in 0..dim {
            m[(id, j)] = if j == c { 1.0 } else { 0.0 } + 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    let red = vocab.id("c0_t00").expect("synthetic token");
    let green = vocab.id("c1_t00").expect("synthetic token");
    let shared: Array1<f64> = (0..dim)
        .map(|j| if j < 2 { 0.5f64.sqrt() } else { 0.0 } + 0.1 * (rng.random::<f64>() - 0.5))
        .collect();
    m.row_mut(red as usize).assign(&shared);
    m.row_mut(green as usize).assign(&shared);
    (EmbeddingTable::from_matrix(Arc::clone(vocab), m).unwrap(), red, green)
}

fn joint_optimization() -> Outcome {
    let t = Instant::now();
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in 0..5u64 {
        let syn = generate_synthetic(&SyntheticConfig {
            seed: 100 + seed,
            ..Default::default()
        })
        .unwrap();
        let (train_c, val, _) = split_corpus(&syn.corpus, (0.8, 0.1, 0.1), seed).unwrap();
        let (table, red, green) = confounded_table(&syn, 16, seed);
        for (joint, out) in [(true, &mut on), (false, &mut off)] {
            let mut cfg = small_config(LossKind::SampledNce, seed);
            cfg.loss.optimize_wordvecs = joint;
            let (_, trained, log) = train(&train_c, Some(&val), small_net(seed), table.clone(), &cfg).unwrap();
            if !joint && trained.row(red) != trained.row(green) {
                return Err("frozen table changed".into());
            }
            out.push(log.final_f1().unwrap());
        }
    }
    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    };
    let (m_on, m_off) = (median(&mut on), median(&mut off));
    ensure(
        m_on > m_off,
        format!(
            "median F1 joint {m_on:.3} vs frozen {m_off:.3} over 5 seeds, {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn complexity_scaling() -> Outcome {
    let t = Instant::now();
    let cells = benchmark_scaling(&BenchConfig {
        losses: vec![LossKind::SampledNce, LossKind::Fast0tagSampled, LossKind::FullXent],
        p_values: vec![10, 20],
        n_values: vec![10, 20],
        vocab_sizes: vec![10_000, 20_000],
        repetitions: 41,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let get = |l: LossKind, pn: usize, v: usize| {
        cells
            .iter()
            .find(|c: &&BenchCell| c.loss == l && c.p == pn && c.n == pn && c.vocab == v)
            .unwrap()
            .ms_per_batch_median
    };
    let nce_pn = get(LossKind::SampledNce, 20, 10_000) / get(LossKind::SampledNce, 10, 10_000);
    let f0_pn = get(LossKind::Fast0tagSampled, 20, 10_000) / get(LossKind::Fast0tagSampled, 10, 10_000);
    let nce_v = get(LossKind::SampledNce, 10, 20_000) / get(LossKind::SampledNce, 10, 10_000);
    let full_v = get(LossKind::FullXent, 10, 20_000) / get(LossKind::FullXent, 10, 10_000);
    let ok = (nce_pn - 2.0).abs() <= 0.5 && (f0_pn - 4.0).abs() <= 1.0 && (nce_v - 1.0).abs() < 0.2 && full_v >= 1.7;
    ensure(
        ok,
        format!(
            "(P,N) x2: sampled_nce {nce_pn:.2}, fast0tag {f0_pn:.2}; |V| x2: sampled_nce {nce_v:.2}, full_xent {full_v:.2}; {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn oov_snapping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (words, dim) = (50, 8);
    let mut table = plain_table(uniform(&mut rng, (words, dim), 0.8));
    let unseen: Vec<TagId> = (40..50).collect();
    table
        .set_trainable_mask((0..words).map(|i| !unseen.contains(&(i as TagId))).collect())
        .unwrap();
    let snapshot = table.snapshot();
    let cfg = SnapConfig::default();

    // Fixed point: nothing drifted.
    let mut fixed = table.clone();
    snap_oov(&mut fixed, &snapshot, &cfg).map_err(|e| e.to_string())?;
    let fixed_err = max_abs_diff(fixed.vectors().as_slice().unwrap(), table.vectors().as_slice().unwrap());
    if fixed_err > 1e-6 {
        return Err(format!("fixed point moved unseen rows by {fixed_err:.2e}"));
    }

    // Rotate the seen rows by a random orthogonal matrix (Gram-Schmidt).
    let mut q = uniform(&mut rng, (dim, dim), 1.0);
    for i in 0..dim {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|x| x / n);
    }
    let mut drifted = table.clone();
    for id in 0..40 {
        let r = q.dot(&table.row(id));
        drifted.set_row(id, r.view());
    }
    let before_seen = drifted.vectors().slice(ndarray::s![..40, ..]).to_owned();
    let pairs = snap_eval_pairs(&drifted, 64, cfg.seed);
    let (obj_before, _) = snap_objective(&drifted, &snapshot, &pairs);
    let report = snap_oov(&mut drifted, &snapshot, &cfg).map_err(|e| e.to_string())?;
    let (obj_after, _) = snap_objective(&drifted, &snapshot, &pairs);
    let seen_same = drifted.vectors().slice(ndarray::s![..40, ..]) == before_seen;
    ensure(
        seen_same && obj_after > obj_before && report.unseen == 10,
        format!(
            "seen rows bit-identical {seen_same}; fixed-point drift {fixed_err:.1e}; objective {obj_before:.4} -> {obj_after:.4}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

struct Oracle {
    macro_p: f64,
    macro_r: f64,
    micro_p: f64,
    micro_r: f64,
}

/// Direct transcription of the metric definitions over distinct tags.
fn oracle(preds: &[Vec<TagId>], truths: &[Vec<TagId>]) -> Oracle {
    let distinct = |v: &Vec<TagId>| {
        let mut out: Vec<TagId> = Vec::new();
        for &x in v {
            if !out.contains(&x) {
                out.push(x);
            }
        }
        out
    };
    let (mut sp, mut sr, mut tp_all, mut pred_all, mut truth_all) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (distinct(p), distinct(t));
        let tp = p.iter().filter(|x| t.contains(x)).count();
        if !p.is_empty() {
            sp += tp as f64 / p.len() as f64;
        }
        if !t.is_empty() {
            sr += tp as f64 / t.len() as f64;
        }
        tp_all += tp;
        pred_all += p.len();
        truth_all += t.len();
    }
    let n = preds.len() as f64;
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Oracle {
        macro_p: sp / n,
        macro_r: sr / n,
        micro_p: div(tp_all, pred_all),
        micro_r: div(tp_all, truth_all),
    }
}

fn metric_definitions() -> Outcome {
    let preds = vec![vec![0, 1, 2, 3], vec![4, 5]];
    let truths = vec![vec![0], vec![4, 5, 6]];
    let r = evaluate(&preds, &truths, 4).map_err(|e| e.to_string())?;
    let hand = [(r.macro_p, 0.625), (r.macro_r, (1.0 + 2.0 / 3.0) / 2.0), (r.micro_p, 0.5), (r.micro_r, 0.75)];
    if hand.iter().any(|(a, b)| a != b) {
        return Err(format!("hand example: got {hand:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=6);
        let vocab = rng.random_range(2..=12) as TagId;
        let preds: Vec<Vec<TagId>> = (0..n)
            .map(|_| {
                let len = rng.random_range(0..=k);
                let mut v: Vec<TagId> = Vec::new();
                while v.len() < len.min(vocab as usize) {
                    let t = rng.random_range(0..vocab);
                    if !v.contains(&t) {
                        v.push(t);
                    }
                }
                v
            })
            .collect();
        let truths: Vec<Vec<TagId>> = (0..n)
            .map(|_| (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        let got = evaluate(&preds, &truths, k).map_err(|e| e.to_string())?;
        let want = oracle(&preds, &truths);
        let pairs = [
            (got.macro_p, want.macro_p),
            (got.macro_r, want.macro_r),
            (got.micro_p, want.micro_p),
            (got.micro_r, want.micro_r),
        ];
        if pairs.iter().any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!("case {case}: evaluate {pairs:?}"));
        }
    }
    Ok("hand example exact; 100 random cases agree with the oracle".into())
}

// ---------------------------------------------------------------- criterion 9

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tagembed"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

/// Runs the whole pipeline into `dir` and returns its artifacts.
fn pipeline(dir: &Path, threads: &str) -> Result<Vec<(&'static str, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let (data, run) = (p("data"), p("run"));
    cli(&["--threads", threads, "gen-synthetic", "--out", &data, "--seed", "5"])?;
    cli(&[
        "--threads", threads, "train", "--data", &data, "--out", &run, "--dim", "16", "--hidden", "32",
        "--epochs", "4", "--batch-size", "16", "--seed", "9",
    ])?;
    let tags = cli(&["tag", "--run", &run, "--data", &data, "--k", "3"])?;
    cli(&["evaluate", "--run", &run, "--data", &data, "--report", &p("report.json")])?;
    let retrieved = cli(&["retrieve", "--run", &run, "--data", &data, "--query", "c1_t00"])?;
    cli(&["snap-oov", "--run", &run, "--out", &p("snapped.bin")])?;
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| e.to_string());
    // Drop the timing column from the log.
    let log: Vec<u8> = String::from_utf8(read("run/train_log.tsv")?)
        .unwrap()
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split('\t').collect();
            if cols.len() > 2 {
                cols.remove(2);
            }
            cols.join("\t") + "\n"
        })
        .collect::<String>()
        .into_bytes();
    Ok(vec![
        ("checkpoint", read("run/checkpoint.bin")?),
        ("log", log),
        ("splits", read("run/splits.tsv")?),
        ("word vectors", read("run/word_vectors.txt")?),
        ("tags", tags),
        ("report", read("report.json")?),
        ("retrieval", retrieved),
        ("snapped checkpoint", read("snapped.bin")?),
    ])
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), "4")?;
    let second = pipeline(b.path(), "1")?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} artifacts bit-identical across runs and thread counts", first.len()))
}

// ----------------------------------------------------------------------------

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, outcome: Outcome| {
        match outcome {
            Ok(d) => println!("criterion {n}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL ({d})");
            }
        }
    };
    report(1, gradient_check());
    report(2, selector_equivalence());
    let split = synthetic_split();
    let (c3, trained) = sampling_parity(&split);
    report(3, c3);
    report(4, joint_optimization());
    report(5, complexity_scaling());
    report(6, oov_snapping());
    report(7, metric_definitions());
    report(8, retrieval_sanity(&split, trained.as_ref().unwrap()));
    report(9, determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

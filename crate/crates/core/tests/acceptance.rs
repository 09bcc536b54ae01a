//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ewun --test acceptance`.

mod common;

use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ewun::checkpoint;
use ewun::corpus::{
    generate_synthetic_corpus, ConceptDictionary, ConceptIds, SurfaceNormalization,
};
use ewun::encoder::toy::ToyConfig;
use ewun::encoder::{make_toy_encoder, make_toy_encoder_with, EmbeddingMatrix};
use ewun::eval::{edit_distance, f1_score, pair_metrics, ConfusionCounts, PairMetrics};
use ewun::graph::{build_similarity_graph, similarity_graph_from_embeddings};
use ewun::inference::PairDecision;
use ewun::trainer::{
    kl_edge_loss, kl_edge_loss_with_grad, read_metrics, softmax, train, CheckpointPolicy,
    TrainConfig, TrainData, METRICS_FILE,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

fn kl_properties() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_grad: f64 = 0.0;
    for case in 0..1000 {
        let k = rng.random_range(1..=10);
        let gt = random_gt(&mut rng, k);
        let sim = random_sims(&mut rng, k);
        let (loss, grad) = kl_edge_loss_with_grad(&gt, &sim).map_err(|e| e.to_string())?;

        ensure(loss >= 0.0, || format!("case {case}: negative loss {loss}"))?;
        ensure((loss - oracle_kl(&gt, &sim)).abs() < 1e-12, || {
            format!("case {case}: oracle mismatch")
        })?;

        let c = rng.random_range(-10.0..10.0);
        let matched: Vec<f64> = gt.iter().map(|g| g + c).collect();
        let zero = kl_edge_loss(&gt, &matched).map_err(|e| e.to_string())?;
        ensure(zero < 1e-12, || {
            format!("case {case}: equal softmaxes give {zero}")
        })?;
        let gap = softmax(&gt)
            .iter()
            .zip(softmax(&sim))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(gap <= 1e-6 || loss > 0.0, || {
            format!("case {case}: differing softmaxes give zero")
        })?;

        let shifted: Vec<f64> = sim.iter().map(|s| s + c).collect();
        let moved = kl_edge_loss(&gt, &shifted).map_err(|e| e.to_string())?;
        ensure((moved - loss).abs() < 1e-9, || {
            format!("case {case}: shift changed loss")
        })?;

        let f = |x: &[f64]| oracle_kl(&gt, x);
        for i in 0..k {
            let numeric = central_difference(f, &sim, i, 1e-5);
            let err = (numeric - grad[i]).abs();
            worst_grad = worst_grad.max(err);
            ensure(err <= 1e-5, || {
                format!("case {case}: gradient[{i}] off by {err:e}")
            })?;
        }
    }
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "1000 instances, max |grad - fd| = {worst_grad:.1e}, {:.2?}",
        started.elapsed()
    ))
}

fn worked_example() -> Outcome {
    let gt = [1.0, 1.0, 1.0, 0.0, 0.0];
    let sim = [0.8, 0.9, 0.6, 0.7, 0.5];
    let loss = kl_edge_loss(&gt, &sim).map_err(|e| e.to_string())?;
    let expected = oracle_kl(&gt, &sim);
    ensure((loss - expected).abs() <= 1e-9, || {
        format!("loss {loss} vs oracle {expected}")
    })?;
    Ok(format!("loss {loss:.12} nats, oracle {expected:.12}"))
}

fn graph_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphabet = ['a', 'b', 'c', ' '];
    let mut ties = 0usize;
    for case in 0..100 {
        let n_queries = rng.random_range(1..=20);
        let n_dict = rng.random_range(1..=50);
        let k = rng.random_range(1..=12);
        let draw = |rng: &mut ChaCha8Rng| loop {
            let s = random_string(rng, &alphabet, 5).trim().to_string();
            if !s.is_empty() {
                break s;
            }
        };
        let dict = ConceptDictionary::from_pairs(
            (0..n_dict).map(|i| (draw(&mut rng), ConceptIds::from([format!("C{}", i % 7)]))),
        )
        .map_err(|e| e.to_string())?;
        let queries: Vec<String> = (0..n_queries).map(|_| draw(&mut rng)).collect();

        let mut enc = make_toy_encoder_with(ToyConfig {
            dim: 4,
            buckets: 32,
            seed: case,
        })
        .map_err(|e| e.to_string())?;
        for w in enc.toy_mut().expect("toy").weights_mut() {
            *w = f64::from(rng.random_range(-3i32..=3));
        }

        let graph = build_similarity_graph(&queries, &dict, &enc, k).map_err(|e| e.to_string())?;
        let q_emb = enc.encode(&queries).map_err(|e| e.to_string())?;
        let d_emb = enc.encode(&dict.surfaces()).map_err(|e| e.to_string())?;
        for (qi, row) in graph.rows.iter().enumerate() {
            let q = q_emb.row(qi).to_vec();
            let sims: Vec<f64> = (0..n_dict)
                .map(|d| oracle_dot(&q, &d_emb.row(d).to_vec()))
                .collect();
            let weights = oracle_weights(&sims);
            let expected = oracle_top_k(&weights, k);
            let expected_w: Vec<f64> = expected.iter().map(|&i| weights[i]).collect();
            ensure(row.indices == expected && row.weights == expected_w, || {
                format!(
                    "case {case} query {qi}: {:?} vs oracle {:?}",
                    row.indices, expected
                )
            })?;
            ties += expected_w.windows(2).filter(|w| w[0] == w[1]).count();
        }
    }
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "100 instances exact, {ties} tied neighbours resolved by index, {:.2?}",
        started.elapsed()
    ))
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut bit_identical = 0usize;
    let mut rows = 0usize;
    for case in 0..200 {
        let n_q = rng.random_range(1..=10);
        let n_d = rng.random_range(1..=40);
        let dim = rng.random_range(2..=8);
        let k = rng.random_range(1..=10);
        let mut sample = |n: usize| {
            EmbeddingMatrix::new(Array2::from_shape_fn((n, dim), |_| {
                rng.random_range(-1.0..1.0)
            }))
        };
        let queries = sample(n_q).map_err(|e| e.to_string())?;
        let dict = sample(n_d).map_err(|e| e.to_string())?;
        let c = 10.0 - rng.random_range(0.0..10.0);
        let base = similarity_graph_from_embeddings(&queries, &dict, k, String::new())
            .map_err(|e| e.to_string())?;
        let scaled = similarity_graph_from_embeddings(&queries, &dict.scaled(c), k, String::new())
            .map_err(|e| e.to_string())?;
        for (a, b) in base.rows.iter().zip(&scaled.rows) {
            let sims: Vec<f64> = (0..n_d)
                .map(|d| oracle_dot(&queries.row(a.query).to_vec(), &dict.row(d).to_vec()))
                .collect();
            if sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max) <= 0.0 {
                continue;
            }
            rows += 1;
            ensure(a.indices == b.indices, || {
                format!("case {case}: candidates changed under c = {c}")
            })?;
            let q = queries.row(a.query).to_vec();
            let abs_dot = |d: usize| {
                oracle_dot(
                    &q.iter().map(|x| x.abs()).collect::<Vec<_>>(),
                    &dict.row(d).mapv(f64::abs).to_vec(),
                )
            };
            let max_sim = sims[a.indices[0]];
            let gamma = 4.0 * (dim as f64 + 2.0) * f64::EPSILON;
            for ((&d, x), y) in a.indices.iter().zip(&a.weights).zip(&b.weights) {
                let bound = gamma * (abs_dot(d) + x.abs() * abs_dot(a.indices[0])) / max_sim
                    + gamma * x.abs();
                let dev = (x - y).abs();
                worst = worst.max(dev / bound.max(f64::MIN_POSITIVE));
                ensure(dev <= bound, || {
                    format!("case {case}: weight moved by {dev:e}, rounding bound {bound:e}")
                })?;
            }
            bit_identical += usize::from(a.weights == b.weights);
        }
    }
    Ok(format!(
        "{rows} rows: candidates identical, weights bit-identical in {bit_identical}, otherwise within {:.0}% of the rounding bound",
        worst * 100.0
    ))
}

fn desk_scale_learning() -> Outcome {
    let started = Instant::now();
    let corpus = generate_synthetic_corpus(50, 4, 0).map_err(|e| e.to_string())?;
    let mut enc = make_toy_encoder(64, 0).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        k: 10,
        batch_size: 16,
        epochs: 50,
        learning_rate: 1e-3,
        weight_decay: 0.01,
        seed: 0,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &corpus.train,
        dev: &[],
        test: &corpus.test,
        dictionary: &corpus.dictionary,
    };
    let state = train(data, &mut enc, &config, None).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = state.history.iter().take(5).map(|m| m.mean_loss).collect();
    let reached = state
        .history
        .iter()
        .find(|m| m.top1_accuracy == 1.0)
        .map(|m| m.epoch);
    let final_acc = state.history.last().map(|m| m.top1_accuracy).unwrap_or(0.0);
    let first_perfect = reached.map_or("never".to_owned(), |e| format!("at epoch {e}"));
    let summary = format!(
        "{} held-out queries, accuracy {:.3} untrained, 1.00 first {first_perfect}, {final_acc:.3} at epoch 50, first-5 losses {losses:.4?}, {:.1?}",
        corpus.test.len(),
        state.initial_top1_accuracy,
        started.elapsed()
    );
    ensure(losses.windows(2).all(|w| w[1] <= w[0]), || {
        format!("loss increased: {summary}")
    })?;
    ensure(reached.is_some(), || {
        format!("never reached 1.00: {summary}")
    })?;
    within(started.elapsed(), Duration::from_secs(300))?;
    Ok(summary)
}

fn metric_fidelity() -> Outcome {
    let f1 = f1_score(0.9343, 0.8211);
    ensure((f1 - 0.8740).abs() <= 0.0005, || format!("F1 {f1}"))?;
    let cases = [
        (
            ConfusionCounts {
                tp: 3,
                fp: 1,
                fn_: 2,
                tn: 4,
            },
            0.75,
            0.6,
            2.0 / 3.0,
            0.7,
        ),
        (
            ConfusionCounts {
                tp: 5,
                fp: 0,
                fn_: 0,
                tn: 5,
            },
            1.0,
            1.0,
            1.0,
            1.0,
        ),
        (
            ConfusionCounts {
                tp: 0,
                fp: 2,
                fn_: 3,
                tn: 5,
            },
            0.0,
            0.0,
            0.0,
            0.5,
        ),
        (
            ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 4,
                tn: 6,
            },
            0.0,
            0.0,
            0.0,
            0.6,
        ),
        (
            ConfusionCounts {
                tp: 1,
                fp: 3,
                fn_: 0,
                tn: 0,
            },
            0.25,
            1.0,
            0.4,
            0.25,
        ),
    ];
    for (counts, p, r, f, a) in cases {
        let m = PairMetrics::from_counts(counts);
        let exact = [(m.precision, p), (m.recall, r), (m.f1, f), (m.accuracy, a)];
        ensure(
            exact.iter().all(|(got, want)| (got - want).abs() < 1e-15),
            || format!("{counts:?} gave {m:?}"),
        )?;
    }
    let gold: Vec<_> = [
        true, true, true, true, true, false, false, false, false, false,
    ]
    .iter()
    .map(|&l| ewun::corpus::PairRecord::new("a", "b", l, None).expect("pair"))
    .collect();
    let predicted = [
        true, true, true, false, false, true, false, false, false, false,
    ];
    let decisions: Vec<PairDecision> = predicted
        .iter()
        .map(|&p| PairDecision::new("a".into(), "b".into(), f64::from(u8::from(p)), 0.5))
        .collect();
    let m = pair_metrics(&decisions, &gold).map_err(|e| e.to_string())?;
    ensure(m.counts == cases[0].0, || {
        format!("pair_metrics counted {:?}", m.counts)
    })?;
    Ok(format!(
        "F1(0.9343, 0.8211) = {f1:.4}; {} hand-built confusion cases exact",
        cases.len()
    ))
}

fn reproduction_script() -> Outcome {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/reproduce_full.sh");
    let text =
        std::fs::read_to_string(&script).map_err(|e| format!("{}: {e}", script.display()))?;
    for needle in [
        "ncbi",
        "bc5cdr-disease",
        "bc5cdr-chemical",
        "financial",
        "91.7",
        "93.4",
        "96.7",
        "88.13",
        "TOLERANCE:-1.0",
    ] {
        ensure(text.contains(needle), || {
            format!("script does not mention {needle}")
        })?;
    }
    let mode = std::fs::metadata(&script)
        .map_err(|e| e.to_string())?
        .permissions()
        .mode();
    ensure(mode & 0o111 != 0, || "script is not executable".into())?;
    Ok("documented script present (full-scale run needs a pretrained model, licensed data and hours of GPU time; not executed here)".into())
}

fn determinism_and_persistence() -> Outcome {
    let corpus = generate_synthetic_corpus(20, 4, 8).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        k: 10,
        epochs: 5,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut logs = Vec::new();
    let mut encoders = Vec::new();
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    for dir in &dirs {
        let mut enc = make_toy_encoder(32, 0).map_err(|e| e.to_string())?;
        let policy = CheckpointPolicy {
            dir: dir.path().to_path_buf(),
            normalization: SurfaceNormalization::Minimal,
            corpus_fingerprint: corpus.dictionary.fingerprint(),
        };
        let data = TrainData {
            train: &corpus.train,
            dev: &[],
            test: &corpus.test,
            dictionary: &corpus.dictionary,
        };
        train(data, &mut enc, &config, Some(&policy)).map_err(|e| e.to_string())?;
        let log = read_metrics(&dir.path().join(METRICS_FILE)).map_err(|e| e.to_string())?;
        logs.push(
            log.iter()
                .map(|m| m.deterministic_fields())
                .collect::<Vec<_>>(),
        );
        encoders.push(enc);
    }
    ensure(logs[0] == logs[1], || {
        "metric logs differ between identical runs".into()
    })?;

    let restored = checkpoint::restore(&dirs[0].path().join("last")).map_err(|e| e.to_string())?;
    let mut surfaces = corpus.dictionary.surfaces();
    surfaces.extend(corpus.test.iter().map(|q| q.surface.clone()));
    let bits = |m: EmbeddingMatrix| m.vectors().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let original = bits(encoders[0].encode(&surfaces).map_err(|e| e.to_string())?);
    let reloaded = bits(
        restored
            .encoder
            .encode(&surfaces)
            .map_err(|e| e.to_string())?,
    );
    ensure(original == reloaded, || "restored embeddings differ".into())?;
    Ok(format!(
        "{} epochs logged identically twice; {} embeddings bit-exact after restore",
        logs[0].len(),
        surfaces.len()
    ))
}

fn edit_distance_axioms() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet = ['a', 'b', 'c', 'd', 'é', ' '];
    for case in 0..10_000 {
        let [a, b, c] = [0; 3].map(|_| random_string(&mut rng, &alphabet, 8));
        let (ab, ba) = (edit_distance(&a, &b), edit_distance(&b, &a));
        let (ac, bc) = (edit_distance(&a, &c), edit_distance(&b, &c));
        ensure(ab == oracle_levenshtein(&a, &b), || {
            format!("case {case}: {a:?} {b:?} oracle mismatch")
        })?;
        ensure(ab == ba, || format!("case {case}: asymmetric"))?;
        ensure((ab == 0) == (a == b), || {
            format!("case {case}: identity violated")
        })?;
        ensure(edit_distance(&a, &a) == 0, || {
            format!("case {case}: d(a, a) != 0")
        })?;
        ensure(ac <= ab + bc, || format!("case {case}: triangle violated"))?;
    }
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!("10000 triples, {:.2?}", started.elapsed()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("edge loss properties", kl_properties),
        ("worked loss example", worked_example),
        ("similarity graph oracle", graph_oracle),
        ("scale invariance", scale_invariance),
        ("desk-scale learning", desk_scale_learning),
        ("metric fidelity", metric_fidelity),
        ("full-scale reproduction script", reproduction_script),
        ("determinism and persistence", determinism_and_persistence),
        ("edit distance axioms", edit_distance_axioms),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

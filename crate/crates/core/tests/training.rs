use std::path::Path;

use ewun::checkpoint::{self, parameter_checksum};
use ewun::corpus::{
    generate_synthetic_corpus, ConceptDictionary, EntityRecord, SurfaceNormalization,
    SyntheticCorpus,
};
use ewun::encoder::{make_toy_encoder, EncoderHandle};
use ewun::eval::{snapshot_recommendations, snapshot_with_encoders, SNAPSHOT_DEPTH};
use ewun::inference::{normalize, DictionaryIndex};
use ewun::trainer::{
    read_metrics, train, CheckpointPolicy, SelectionSplit, TrainConfig, TrainData, METRICS_FILE,
};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        k: 10,
        batch_size: 16,
        epochs,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn data(corpus: &SyntheticCorpus) -> TrainData<'_> {
    TrainData {
        train: &corpus.train,
        dev: &[],
        test: &corpus.test,
        dictionary: &corpus.dictionary,
    }
}

fn policy(dir: &Path, dict: &ConceptDictionary) -> CheckpointPolicy {
    CheckpointPolicy {
        dir: dir.to_path_buf(),
        normalization: SurfaceNormalization::Minimal,
        corpus_fingerprint: dict.fingerprint(),
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let corpus = generate_synthetic_corpus(20, 4, 5).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    for dir in &dirs {
        let mut enc = make_toy_encoder(32, 0).unwrap();
        let state = train(
            data(&corpus),
            &mut enc,
            &config(4),
            Some(&policy(dir.path(), &corpus.dictionary)),
        )
        .unwrap();
        let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(logged.len(), 4);
        assert_eq!(logged, state.history);
        runs.push((
            logged
                .iter()
                .map(|m| m.deterministic_fields())
                .collect::<Vec<_>>(),
            enc.toy().unwrap().weights().to_vec(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn different_seeds_shuffle_differently() {
    let corpus = generate_synthetic_corpus(20, 4, 5).unwrap();
    let mut weights = Vec::new();
    for seed in [0, 1] {
        let mut enc = make_toy_encoder(32, 0).unwrap();
        let cfg = TrainConfig { seed, ..config(2) };
        train(data(&corpus), &mut enc, &cfg, None).unwrap();
        weights.push(enc.toy().unwrap().weights().to_vec());
    }
    assert_ne!(weights[0], weights[1]);
}

#[test]
fn checkpoints_cover_untrained_first_best_and_last() {
    let corpus = generate_synthetic_corpus(20, 4, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let untrained = make_toy_encoder(32, 0).unwrap();
    let mut enc = make_toy_encoder(32, 0).unwrap();
    let state = train(
        data(&corpus),
        &mut enc,
        &config(3),
        Some(&policy(dir.path(), &corpus.dictionary)),
    )
    .unwrap();

    for name in ["epoch-0", "epoch-1", "best", "last"] {
        assert!(state.checkpoint(name).is_some_and(Path::is_dir), "{name}");
    }
    assert!(state.checkpoint("epoch-2").is_none());

    let epoch0 = checkpoint::restore(state.checkpoint("epoch-0").unwrap()).unwrap();
    assert_eq!(
        parameter_checksum(&epoch0.encoder).unwrap(),
        parameter_checksum(&untrained).unwrap()
    );
    assert_eq!(epoch0.meta.info.epoch, 0);
    assert_eq!(
        epoch0.meta.info.corpus_fingerprint,
        corpus.dictionary.fingerprint()
    );

    let last = checkpoint::restore(state.checkpoint("last").unwrap()).unwrap();
    assert_eq!(
        last.encoder.toy().unwrap().weights(),
        enc.toy().unwrap().weights()
    );
    let stored = last.state.unwrap();
    assert_eq!(stored.history, state.history);
    assert_eq!(stored.best, state.best);

    let best = state.best.as_ref().unwrap();
    assert!(state
        .history
        .iter()
        .all(|m| m.top1_accuracy <= best.top1_accuracy));
    let best_enc = checkpoint::restore(best.checkpoint.as_ref().unwrap())
        .unwrap()
        .encoder;
    let index = DictionaryIndex::build(&corpus.dictionary, &best_enc).unwrap();
    let surfaces: Vec<&str> = corpus.test.iter().map(|q| q.surface.as_str()).collect();
    let predictions = index.normalize_batch(&surfaces, &best_enc, 1).unwrap();
    let accuracy = ewun::eval::top1_accuracy(&predictions, &corpus.test).unwrap();
    assert_eq!(accuracy, best.top1_accuracy);
}

#[test]
fn keep_all_checkpoints_writes_every_epoch() {
    let corpus = generate_synthetic_corpus(10, 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut enc = make_toy_encoder(16, 0).unwrap();
    let cfg = TrainConfig {
        keep_all_checkpoints: true,
        ..config(3)
    };
    let state = train(
        data(&corpus),
        &mut enc,
        &cfg,
        Some(&policy(dir.path(), &corpus.dictionary)),
    )
    .unwrap();
    for epoch in 0..=3 {
        assert!(state.checkpoint(&format!("epoch-{epoch}")).is_some());
    }
}

#[test]
fn dev_best_selects_on_dev() {
    let corpus = generate_synthetic_corpus(20, 4, 3).unwrap();
    let (dev, test) = corpus.test.split_at(corpus.test.len() / 2);
    let mut enc = make_toy_encoder(32, 0).unwrap();
    let cfg = TrainConfig {
        selection_split: SelectionSplit::DevBest,
        ..config(2)
    };
    let d = TrainData {
        train: &corpus.train,
        dev,
        test,
        dictionary: &corpus.dictionary,
    };
    let state = train(d, &mut enc, &cfg, None).unwrap();
    let index = DictionaryIndex::build(&corpus.dictionary, &enc).unwrap();
    let surfaces: Vec<&str> = dev.iter().map(|q| q.surface.as_str()).collect();
    let predictions = index.normalize_batch(&surfaces, &enc, 1).unwrap();
    let dev_accuracy = ewun::eval::top1_accuracy(&predictions, dev).unwrap();
    assert_eq!(state.history.last().unwrap().top1_accuracy, dev_accuracy);
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = generate_synthetic_corpus(5, 2, 0).unwrap();
    for cfg in [
        TrainConfig { k: 0, ..config(1) },
        TrainConfig {
            epochs: 0,
            ..config(1)
        },
        TrainConfig {
            batch_size: 0,
            ..config(1)
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..config(1)
        },
    ] {
        let mut enc = make_toy_encoder(8, 0).unwrap();
        assert!(train(data(&corpus), &mut enc, &cfg, None).is_err());
    }
}

#[test]
fn config_text_round_trips() {
    let cfg = TrainConfig {
        k: 7,
        seed: 42,
        learning_rate: 3e-4,
        selection_split: SelectionSplit::DevBest,
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    assert_eq!(TrainConfig::default().k, 30);
    assert_eq!(TrainConfig::default().batch_size, 16);
    assert_eq!(TrainConfig::default().epochs, 50);
}

fn rich_dictionary_corpus() -> (ConceptDictionary, Vec<EntityRecord>) {
    let corpus = generate_synthetic_corpus(12, 8, 4).unwrap();
    let mut pairs: Vec<_> = corpus
        .dictionary
        .entries()
        .iter()
        .map(|e| (e.surface.clone(), e.concept_ids.clone()))
        .collect();
    let mut queries = Vec::new();
    for record in &corpus.train {
        if queries
            .iter()
            .any(|q: &EntityRecord| q.concept_ids == record.concept_ids)
        {
            pairs.push((record.surface.clone(), record.concept_ids.clone()));
        } else {
            queries.push(record.clone());
        }
    }
    (ConceptDictionary::from_pairs(pairs).unwrap(), queries)
}

#[test]
fn snapshots_list_every_query_and_checkpoint() {
    let (dict, queries) = rich_dictionary_corpus();
    let dir = tempfile::tempdir().unwrap();
    let untrained = make_toy_encoder(64, 0).unwrap();
    let mut enc = make_toy_encoder(64, 0).unwrap();
    let cfg = TrainConfig {
        k: 10,
        epochs: 15,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let d = TrainData {
        train: &queries,
        dev: &[],
        test: &queries,
        dictionary: &dict,
    };
    let state = train(d, &mut enc, &cfg, Some(&policy(dir.path(), &dict))).unwrap();
    let names = ["epoch-0", "epoch-1", "best"];
    let checkpoints: Vec<_> = names
        .iter()
        .map(|n| (n.to_string(), state.checkpoint(n).unwrap().to_path_buf()))
        .collect();
    let rows = snapshot_recommendations(&queries, &checkpoints, &dict).unwrap();
    assert_eq!(rows.len(), queries.len() * names.len());

    let direct = snapshot_with_encoders(
        &queries,
        &[("untrained".into(), &untrained)],
        &dict,
        SNAPSHOT_DEPTH,
    )
    .unwrap();
    for (snap, base) in rows
        .iter()
        .filter(|r| r.checkpoint == "epoch-0")
        .zip(&direct)
    {
        assert_eq!(snap.entries, base.entries);
    }

    assert_eq!(state.best.as_ref().unwrap().top1_accuracy, 1.0);
    let best_rows: Vec<_> = rows.iter().filter(|r| r.checkpoint == "best").collect();
    let fully_correct = best_rows
        .iter()
        .filter(|r| r.entries.iter().all(|e| e.correct))
        .count();
    assert!(
        fully_correct > 0,
        "no query has all {SNAPSHOT_DEPTH} recommendations correct"
    );

    let mut missing = checkpoints.clone();
    missing.push(("epoch-9".into(), dir.path().join("epoch-9")));
    assert!(snapshot_recommendations(&queries, &missing, &dict)
        .unwrap_err()
        .is_integrity_error());
}

#[test]
fn restored_checkpoint_reproduces_embeddings_bit_exactly() {
    let corpus = generate_synthetic_corpus(10, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut enc = make_toy_encoder(16, 7).unwrap();
    train(
        data(&corpus),
        &mut enc,
        &config(2),
        Some(&policy(dir.path(), &corpus.dictionary)),
    )
    .unwrap();
    let restored: EncoderHandle = checkpoint::restore(&dir.path().join("last"))
        .unwrap()
        .encoder;
    let surfaces = corpus.dictionary.surfaces();
    let a = enc.encode(&surfaces).unwrap();
    let b = restored.encode(&surfaces).unwrap();
    let bits = |m: &ewun::encoder::EmbeddingMatrix| {
        m.vectors().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    let q = &corpus.test[0].surface;
    assert_eq!(
        normalize(q, &corpus.dictionary, &enc, 5).unwrap(),
        normalize(q, &corpus.dictionary, &restored, 5).unwrap()
    );
}

use super::*;
use crate::corpus::{generate_synthetic_corpus, DatasetBundle};
use crate::text::build_source_vocab;

fn lstm_params(inputs: usize, units: usize) -> usize {
    4 * units * (inputs + units) + 4 * units
}

fn dense_params(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

fn expected_params(cfg: &ClassifierConfig) -> usize {
    let [u1, u2] = cfg.lstm_units;
    let emb = cfg.vocab_size * cfg.embed_dim;
    let conv = cfg.conv_kernel * cfg.embed_dim * cfg.conv_filters + cfg.conv_filters;
    emb + match cfg.arch {
        Arch::Rnn => 2 * lstm_params(cfg.embed_dim, u1) + 2 * lstm_params(2 * u1, u2) + dense_params(2 * u2, 1),
        Arch::Cnn => conv + dense_params(cfg.conv_filters, cfg.dense_units) + dense_params(cfg.dense_units, 1),
        Arch::CnnRnn => conv + 2 * lstm_params(cfg.conv_filters, u1) + lstm_params(2 * u1, u2) + dense_params(u2, 1),
    }
}

fn paper(arch: Arch, vocab: usize) -> ClassifierConfig {
    ClassifierConfig { vocab_size: vocab, ..ClassifierConfig::paper(arch) }
}

fn tiny(arch: Arch, vocab: usize) -> ClassifierConfig {
    let mut cfg = ClassifierConfig::paper(arch);
    cfg.vocab_size = vocab;
    cfg.seq_len = 10;
    cfg.embed_dim = 8;
    cfg.conv_filters = 6;
    cfg.conv_kernel = 3;
    cfg.lstm_units = [5, 4];
    cfg.dense_units = 6;
    cfg.training.batch_size = 16;
    cfg.training.max_epochs = 6;
    cfg.training.learning_rate = 0.01;
    cfg
}

#[test]
fn paper_parameter_counts() {
    for arch in Arch::ALL {
        let cfg = paper(arch, 1000);
        let model = build_classifier(&cfg).unwrap();
        assert_eq!(model.parameter_count(), expected_params(&cfg), "{arch}");
    }
    // Hand-derived totals for the published layer sizes.
    assert_eq!(expected_params(&paper(Arch::Rnn, 1000)), 300_000 + 603_777);
    assert_eq!(expected_params(&paper(Arch::Cnn, 1000)), 300_000 + 268_928 + 16_512 + 129);
    assert_eq!(expected_params(&paper(Arch::CnnRnn, 1000)), 300_000 + 268_928 + 263_168 + 197_120 + 129);
}

#[test]
fn builders_check_arch() {
    let cfg = tiny(Arch::Cnn, 20);
    assert!(matches!(build_rnn_model(&cfg), Err(ModelError::ConfigMismatch(_))));
    assert!(build_cnn_model(&cfg).is_ok());
    assert!(matches!(build_cnn_rnn_model(&cfg), Err(ModelError::ConfigMismatch(_))));
}

#[test]
fn cnn_shapes() {
    let model = build_cnn_model(&paper(Arch::Cnn, 50)).unwrap();
    let trace = model.shape_trace(&[4; 50]).unwrap();
    let find = |name| trace.iter().find(|(n, _)| *n == name).unwrap().1.clone();
    assert_eq!(find("conv"), vec![2 * 19, 128]);
    assert_eq!(find("global_maxpool"), vec![2, 128]);
    assert_eq!(find("output"), vec![2, 1]);
    let short = ClassifierConfig { seq_len: 6, ..paper(Arch::Cnn, 50) };
    assert!(matches!(build_cnn_model(&short), Err(ModelError::InputTooShort { len: 6, needed: 7 })));
}

#[test]
fn cnn_rnn_shapes() {
    let cfg = paper(Arch::CnnRnn, 50);
    assert_eq!((cfg.embed_dropout, cfg.dropout), (0.2, 0.2));
    let model = build_cnn_rnn_model(&cfg).unwrap();
    let trace = model.shape_trace(&[5; 25]).unwrap();
    let find = |name| trace.iter().find(|(n, _)| *n == name).unwrap().1.clone();
    assert_eq!(find("conv"), vec![19, 128]);
    assert_eq!(find("maxpool"), vec![9, 128]);
    assert_eq!(find("bilstm"), vec![9, 256]);
    assert_eq!(find("lstm"), vec![1, 128]);
}

#[test]
fn rnn_shapes_and_range() {
    let model = build_rnn_model(&tiny(Arch::Rnn, 30)).unwrap();
    let ids: Vec<usize> = (0..30).collect();
    let trace = model.shape_trace(&ids).unwrap();
    assert_eq!(trace[1].1, vec![30, 10]);
    assert_eq!(trace[2].1, vec![3, 8]);
    for p in model.predict_ids(&ids).unwrap() {
        assert!(p > 0.0 && p < 1.0);
    }
    assert!(matches!(model.predict_ids(&ids[..7]), Err(ModelError::ConfigMismatch(_))));
}

#[test]
fn threshold_is_strict() {
    assert_eq!(label_for(0.7), Label::Offensive);
    assert_eq!(label_for(0.5), Label::NotOffensive);
    assert_eq!(label_for(0.2), Label::NotOffensive);
}

fn toy_bundle() -> (Vocabulary, DatasetBundle<LabeledExample>) {
    let corpus = generate_synthetic_corpus(80, 3, 20, 5).unwrap();
    let texts: Vec<&str> = corpus.labeled.train.iter().map(|e| e.text.as_str()).collect();
    (build_source_vocab(&texts, 100).unwrap(), corpus.labeled)
}

#[test]
fn training_is_reproducible_and_descends() {
    let (vocab, bundle) = toy_bundle();
    for arch in Arch::ALL {
        let cfg = ClassifierConfig { embed_dropout: 0.0, dropout: 0.0, ..tiny(arch, vocab.len()) };
        let run = || train_classifier(build_classifier(&cfg).unwrap(), vocab.clone(), &bundle, &cfg.training).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history, "{arch}");
        let losses = a.history.train_losses();
        assert_eq!(losses.len(), 6);
        assert!(losses[1..].iter().all(|&l| l <= losses[0]), "{arch}: {losses:?}");
        assert!(a.history.epochs.iter().all(|e| e.dev_loss.is_some()));
    }
}

#[test]
fn early_stopping_needs_dev_data() {
    let (vocab, mut bundle) = toy_bundle();
    bundle.dev.clear();
    let mut cfg = tiny(Arch::Cnn, vocab.len());
    cfg.training.early_stop_patience = Some(2);
    let err = train_classifier(build_classifier(&cfg).unwrap(), vocab, &bundle, &cfg.training).unwrap_err();
    assert!(matches!(err, ModelError::EmptySplit("dev")));
}

#[test]
fn early_stopping_restores_best_epoch() {
    let (vocab, bundle) = toy_bundle();
    let mut cfg = tiny(Arch::Cnn, vocab.len());
    cfg.training.early_stop_patience = Some(1);
    cfg.training.max_epochs = 40;
    cfg.training.learning_rate = 0.05;
    let trained = train_classifier(build_classifier(&cfg).unwrap(), vocab, &bundle, &cfg.training).unwrap();
    let h = &trained.history;
    let best = h.best_epoch.unwrap();
    let min = h.dev_losses().into_iter().fold(f64::INFINITY, f64::min);
    assert_eq!(h.epochs[best - 1].dev_loss, Some(min));
    if h.stopped_early {
        assert_eq!(h.epochs.len(), best + 1);
    }
    let dev = EncodedSplit::new(&bundle.dev, &trained.vocab, cfg.seq_len);
    let (loss, _) = ClassifierTrainer::loss_and_accuracy(&trained.model, &dev).unwrap();
    assert_eq!(loss, min);
}

#[test]
fn evaluation_matches_brute_force() {
    let (vocab, bundle) = toy_bundle();
    let cfg = tiny(Arch::Rnn, vocab.len());
    let trained = train_classifier(build_classifier(&cfg).unwrap(), vocab, &bundle, &cfg.training).unwrap();
    let report = trained.evaluate(&bundle.test).unwrap();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for ex in &bundle.test {
        let p = trained.predict(&ex.text).unwrap();
        match (p.probability > 0.5, ex.label == Label::Offensive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    assert_eq!((report.confusion.tp, report.confusion.fp, report.confusion.fn_, report.confusion.tn), (tp, fp, fn_, tn));
    assert!(matches!(trained.evaluate(&[]), Err(ModelError::EmptySplit("test"))));
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let (vocab, bundle) = toy_bundle();
    let cfg = tiny(Arch::CnnRnn, vocab.len());
    let trained = train_classifier(build_classifier(&cfg).unwrap(), vocab, &bundle, &cfg.training).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ckpt");
    trained.save(&path).unwrap();
    let loaded = TrainedClassifier::load(&path).unwrap();
    assert_eq!(loaded.history, trained.history);
    assert_eq!(loaded.vocab, trained.vocab);
    for ex in &bundle.test {
        let a = trained.predict(&ex.text).unwrap();
        let b = loaded.predict(&ex.text).unwrap();
        assert_eq!(a.probability.to_bits(), b.probability.to_bits());
    }
}

#[test]
fn pretrained_rows_are_copied() {
    let vocab = Vocabulary::source_with_words(["كلب", "قط"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.txt");
    std::fs::write(&path, "2 3\nكلب 0.1 0.2 0.3\nبيت 1 1 1\n").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (table, cov) = load_pretrained_embeddings(&path, &vocab, 3, &mut rng).unwrap();
    assert_eq!(table.row(2), &[0.1, 0.2, 0.3]);
    assert_eq!(table.row(0), &[0.0, 0.0, 0.0]);
    assert!(table.row(3).iter().all(|v| v.abs() < 0.1 && *v != 0.0));
    assert_eq!((cov.found, cov.total), (1, 2));
    assert!(matches!(
        load_pretrained_embeddings(&path, &vocab, 300, &mut rng),
        Err(ModelError::DimensionMismatch { expected: 300, found: 3 })
    ));
    std::fs::write(&path, "كلب 0.1 0.2\n").unwrap();
    assert!(matches!(
        load_pretrained_embeddings(&path, &vocab, 3, &mut rng),
        Err(ModelError::DimensionMismatch { expected: 3, found: 2 })
    ));

    let mut model = build_classifier(&tiny(Arch::Cnn, vocab.len())).unwrap();
    let (table, _) = {
        std::fs::write(&path, "قط 1 2 3 4 5 6 7 8\n").unwrap();
        load_pretrained_embeddings(&path, &vocab, 8, &mut rng).unwrap()
    };
    model.set_embeddings(table).unwrap();
    assert!(model.set_embeddings(Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn arch_names_parse() {
    assert_eq!("cnn_rnn".parse::<Arch>().unwrap(), Arch::CnnRnn);
    assert!("transformer".parse::<Arch>().is_err());
    assert_eq!(serde_json::to_string(&Arch::CnnRnn).unwrap(), "\"CNN_RNN\"");
}

#[test]
fn config_validation_lists_every_problem() {
    let mut cfg = tiny(Arch::CnnRnn, 10);
    cfg.dropout = 1.5;
    cfg.pool_size = 0;
    cfg.training.batch_size = 0;
    assert_eq!(cfg.validate().len(), 3);
}

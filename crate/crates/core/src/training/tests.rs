use super::*;
use crate::kg::trainings_on_this_thread;
use crate::synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset};

fn tiny_data(seed: u64) -> SyntheticDataset {
    generate_synthetic(&SyntheticConfig {
        branching: vec![2, 2],
        docs_per_leaf: 6,
        vocab_size: 40,
        doc_len: 6,
        train_fraction: 0.5,
        dev_fraction: 0.25,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(2, PathMode::SinglePath).with_seed(seed);
    cfg.encoder = EncoderShape {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 16,
        max_len: 64,
    };
    cfg.node2vec.dim = 8;
    cfg.node2vec.walks_per_node = 4;
    cfg.node2vec.walk_length = 8;
    cfg.batch_size = 4;
    cfg
}

fn tiny_model(ds: &SyntheticDataset, cfg: TrainConfig) -> (Model<f64>, Vec<PreparedDoc<f64>>) {
    let kb = cfg.use_knowledge.then(|| {
        let texts = ds.all_documents().map(|d| d.text.as_str());
        KnowledgeBase::build(texts, ds.catalog.clone(), &ds.kg, cfg.linker, &cfg.node2vec, cfg.neighbor_k, cfg.seed).unwrap()
    });
    let vocab = build_vocab(&ds.train, &ds.explanations, &ds.taxonomy);
    let model = Model::new(cfg, ds.taxonomy.clone(), vocab, &ds.explanations, kb).unwrap();
    let docs = model.prepare(&ds.train).unwrap();
    (model, docs)
}

#[test]
fn early_stopper_examples() {
    let mut s = EarlyStopper::new(10);
    assert!(!s.update(0.5));
    for i in 0..9 {
        assert!(!s.update(0.5), "stopped after {} flat epochs", i + 1);
    }
    assert!(s.update(0.4));
    assert_eq!(s.epochs_since_improve, 10);

    let mut s = EarlyStopper::new(2);
    for i in 0..50 {
        assert!(!s.update(i as f64));
    }

    let mut s = EarlyStopper::new(10);
    s.update(0.5);
    for _ in 0..8 {
        s.update(0.1);
    }
    assert_eq!(s.epochs_since_improve, 8);
    assert!(!s.update(0.6));
    assert_eq!(s.epochs_since_improve, 0);
    assert_eq!(s.best_metric, 0.6);
}

#[test]
fn k_shot_covers_every_leaf_deterministically() {
    let ds = tiny_data(0);
    let one = sample_k_shot(&ds.train, &ds.taxonomy, 1, 5).unwrap();
    let leaves: BTreeSet<LabelId> = one.iter().flat_map(|d| d.deepest_labels()).collect();
    assert_eq!(leaves.len(), ds.taxonomy.level_vocab(2).len());
    assert_eq!(one.len(), leaves.len());
    assert_eq!(one, sample_k_shot(&ds.train, &ds.taxonomy, 1, 5).unwrap());
    let ids: BTreeSet<&str> = one.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids.len(), one.len());
}

#[test]
fn k_shot_takes_all_when_short() {
    let ds = tiny_data(0);
    let leaf = ds.taxonomy.level_vocab(2)[0];
    let two: Vec<Document> = ds
        .train
        .iter()
        .filter(|d| d.deepest_labels().contains(&leaf))
        .take(2)
        .cloned()
        .collect();
    let got = sample_k_shot(&two, &ds.taxonomy, 4, 0).unwrap();
    assert_eq!(got, two);
    assert!(sample_k_shot(&[], &ds.taxonomy, 1, 0).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = tiny_data(1);
    let mut cfg = tiny_config(1);
    cfg.learning_rate = 0.0;
    let (model, docs) = tiny_model(&ds, cfg);
    let before = model.store.clone();
    let mut trainer = Trainer::new(model);
    let batch: Vec<&PreparedDoc<f64>> = docs.iter().take(4).collect();
    let b = trainer.train_step(&batch).unwrap();
    assert!(b.non_finite_component().is_none());
    for id in before.ids() {
        assert_eq!(before.get(id), trainer.model.store.get(id), "{}", before.name(id));
    }
}

#[test]
fn identical_steps_give_identical_losses() {
    let ds = tiny_data(2);
    let (model, docs) = tiny_model(&ds, tiny_config(2));
    let batch: Vec<&PreparedDoc<f64>> = docs.iter().take(4).collect();
    let mut a = Trainer::new(model.clone());
    let mut b = Trainer::new(model);
    for _ in 0..2 {
        assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
    }
    for id in a.model.store.ids() {
        assert_eq!(a.model.store.get(id), b.model.store.get(id));
    }
}

#[test]
fn steps_never_retrain_node_embeddings() {
    let ds = tiny_data(3);
    let (model, docs) = tiny_model(&ds, tiny_config(3));
    let trained = trainings_on_this_thread();
    let mut trainer = Trainer::new(model);
    for chunk in docs.chunks(4) {
        let batch: Vec<&PreparedDoc<f64>> = chunk.iter().collect();
        trainer.train_step(&batch).unwrap();
    }
    assert_eq!(trainings_on_this_thread(), trained);
}

#[test]
fn every_parameter_with_gradient_moves() {
    let ds = tiny_data(4);
    let mut cfg = tiny_config(4);
    cfg.trainable_node_embeddings = true;
    let (model, docs) = tiny_model(&ds, cfg);
    let batch: Vec<&PreparedDoc<f64>> = docs.iter().take(4).collect();
    let (_, grads) = model.batch_gradients(&batch, 0).unwrap();
    let before = model.store.clone();
    let mut trainer = Trainer::new(model);
    trainer.train_step(&batch).unwrap();
    let mut with_grad = 0;
    for id in before.ids() {
        let g = grads.get(id).data();
        let (old, new) = (before.get(id).data(), trainer.model.store.get(id).data());
        for k in 0..g.len() {
            if g[k] != 0.0 {
                with_grad += 1;
                assert_ne!(old[k], new[k], "{}[{k}] has gradient {} but did not move", before.name(id), g[k]);
            }
        }
    }
    assert!(with_grad > 0);
}

fn check_batch_gradients(cfg: TrainConfig, data_seed: u64) {
    let ds = tiny_data(data_seed);
    let (model, docs) = tiny_model(&ds, cfg);
    let batch: Vec<&PreparedDoc<f64>> = docs.iter().take(4).collect();
    let (_, grads) = model.batch_gradients(&batch, 7).unwrap();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut checked = 0;
    for id in model.store.ids() {
        let n = model.store.get(id).len();
        for k in [0, n / 2, n - 1] {
            let mut eval = |delta: f64| {
                probe.store.get_mut(id).data_mut()[k] = model.store.get(id).data()[k] + delta;
                let (b, _) = probe.batch_gradients(&batch, 7).unwrap();
                b.joint
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            eval(0.0);
            let analytic = grads.get(id).data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-4, "{}[{k}]: analytic {analytic} vs numeric {numeric}", model.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn batch_gradients_match_finite_differences() {
    check_batch_gradients(tiny_config(5), 5);
}

#[test]
fn batch_gradients_with_trainable_projected_nodes() {
    let mut cfg = tiny_config(6);
    cfg.node2vec.dim = 5;
    cfg.trainable_node_embeddings = true;
    cfg.weights.sibling_mode = crate::heads::SiblingMode::Literal;
    check_batch_gradients(cfg, 6);
}

#[test]
fn batch_gradients_multi_path_without_knowledge() {
    let mut cfg = tiny_config(7);
    cfg.path_mode = PathMode::MultiPath;
    cfg.weights = crate::heads::LossWeights::defaults(2, PathMode::MultiPath);
    cfg.use_knowledge = false;
    check_batch_gradients(cfg, 7);
}

#[test]
fn fit_restores_best_parameters() {
    let ds = tiny_data(8);
    let mut cfg = tiny_config(8);
    cfg.max_epochs = 4;
    cfg.patience = 2;
    let (model, train) = tiny_model(&ds, cfg);
    let dev = model.prepare(&ds.dev).unwrap();
    let mut trainer = Trainer::new(model);
    let out = fit(&mut trainer, &train, &dev).unwrap();
    assert!(out.best_epoch >= 1 && out.best_epoch <= out.epochs.len());
    assert_eq!(out.step_losses.len() as u64, trainer.steps());
    let (report, _) = trainer.model.evaluate(&dev).unwrap();
    assert_eq!(report.macro_f1, out.best_dev_macro_f1);
    assert_eq!(out.epochs[out.best_epoch - 1].dev.macro_f1, out.best_dev_macro_f1);
}

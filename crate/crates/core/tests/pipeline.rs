//! End-to-end runs through the public API on a small hand-written corpus:
//! uneven depth-3 taxonomy, multi-label documents, partial gold paths.

use std::path::Path;

use htc_core::heads::LossWeights;
use htc_core::run::{load_checkpoint, parse_predictions, save_checkpoint, score_predictions, train_run, Ablation, Dataset, DatasetPaths};
use htc_core::taxonomy::PathMode;
use htc_core::training::{EncoderShape, TrainConfig};

const TAXONOMY: &str = "sci\tROOT\nart\tROOT\nphys\tsci\nbio\tsci\nmusic\tart\nquantum\tphys\noptics\tphys\ncell\tbio\n";

const CATALOG: &str = "\
1\tscience\t\t1\tscience physics biology
2\tphysics\t\t1\tphysics quantum optics
3\tquantum\t\t1\tquantum physics
4\toptics\t\t1\toptics lens physics
5\tbiology\t\t1\tbiology cell
6\tcell\t\t1\tcell biology
7\tart\t\t1\tart music
8\tmusic\t\t1\tmusic art
";

const KG: &str = "1\tbroader\t2\n1\tbroader\t5\n2\tbroader\t3\n2\tbroader\t4\n5\tbroader\t6\n7\tbroader\t8\n";

const EXPLANATIONS: &str = "\
sci\tscience and research
art\tart and culture
phys\tphysics of matter
bio\tbiology of life
music\tmusic and sound
quantum\tquantum states
optics\toptics and lens light
cell\tcell membranes
";

/// Gold paths and the words that signal them.
const KINDS: [(&str, &str); 6] = [
    (r#"[["sci","phys","quantum"]]"#, "science physics quantum qubit"),
    (r#"[["sci","phys","optics"]]"#, "science physics optics lens"),
    (r#"[["sci","bio","cell"]]"#, "science biology cell membrane"),
    (r#"[["art","music"]]"#, "art music melody"),
    (r#"[["sci","phys"]]"#, "science physics energy"),
    (r#"[["sci","bio","cell"],["art","music"]]"#, "biology cell art music"),
];

fn write_split(dir: &Path, name: &str, copies: usize) {
    let mut out = String::new();
    for (k, (paths, words)) in KINDS.iter().enumerate() {
        for c in 0..copies {
            out.push_str(&format!(r#"{{"id":"{name}-{k}-{c}","text":"{words} filler{c} noise{k}","paths":{paths}}}"#));
            out.push('\n');
        }
    }
    std::fs::write(dir.join(format!("{name}.jsonl")), out).unwrap();
}

fn write_dataset(dir: &Path, with_knowledge: bool) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("taxonomy.tsv"), TAXONOMY).unwrap();
    std::fs::write(dir.join("explanations.tsv"), EXPLANATIONS).unwrap();
    if with_knowledge {
        std::fs::write(dir.join("catalog.tsv"), CATALOG).unwrap();
        std::fs::write(dir.join("kg.tsv"), KG).unwrap();
    }
    write_split(dir, "train", 3);
    write_split(dir, "dev", 2);
    write_split(dir, "test", 2);
}

fn config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(3, PathMode::MultiPath).with_seed(seed);
    cfg.weights = LossWeights::defaults(3, PathMode::MultiPath);
    cfg.encoder = EncoderShape {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 16,
        max_len: 96,
    };
    cfg.node2vec.dim = 8;
    cfg.node2vec.walks_per_node = 4;
    cfg.shots = 2;
    cfg.max_epochs = 3;
    cfg
}

#[test]
fn multi_path_run_with_partial_paths_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, true);
    let ds = Dataset::load(&DatasetPaths::in_dir(&data)).unwrap();
    assert_eq!(ds.taxonomy.depth(), 3);

    let run = train_run::<f64>(&ds, &config(1), None).unwrap();
    let m = &run.manifest;
    assert!(m.knowledge.as_ref().is_some_and(|k| k.subgraph_nodes > 0 && k.embedded_entities > 0));
    assert!(!m.episode.is_empty());
    assert_eq!(m.test_documents, ds.test.len());
    for v in [m.test.micro_f1, m.test.macro_f1, m.test.c_micro_f1, m.test.c_macro_f1] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert!(m.loss_curve.iter().all(|x| x.is_finite()));

    for labels in &run.test_predictions {
        for &l in labels {
            assert!(ds.taxonomy.parent(l).is_none_or(|p| labels.contains(&p)), "prediction not closed under parents");
        }
    }

    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &run).unwrap();
    let (model, manifest) = load_checkpoint::<f64>(&ck).unwrap();
    assert_eq!(&manifest, m);
    let (report, _) = model.evaluate(&model.prepare(&ds.test).unwrap()).unwrap();
    assert_eq!(report, m.test);

    let written = std::fs::read_to_string(ck.join("test_predictions.jsonl")).unwrap();
    let preds = parse_predictions(&written, &ds.taxonomy).unwrap();
    assert_eq!(score_predictions(&ds.test, &preds, &ds.taxonomy).unwrap(), m.test);
}

#[test]
fn knowledge_needs_kg_files_unless_ablated() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), false);
    let ds = Dataset::load(&DatasetPaths::in_dir(dir.path())).unwrap();
    assert!(ds.kg.is_none() && ds.catalog.is_none());
    assert!(train_run::<f32>(&ds, &config(2), None).is_err());

    let run = train_run::<f32>(&ds, &config(2), Some(Ablation::HkEncoder)).unwrap();
    assert!(run.manifest.knowledge.is_none());
    assert_eq!(run.manifest.ablation, Some(Ablation::HkEncoder));
}

#[test]
fn path_mode_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), true);
    let ds = Dataset::load(&DatasetPaths::in_dir(dir.path())).unwrap();
    let mut cfg = config(3);
    cfg.path_mode = PathMode::SinglePath;
    cfg.weights = LossWeights::defaults(3, PathMode::SinglePath);
    assert!(train_run::<f32>(&ds, &cfg, None).is_err());

    let mut cfg = config(3);
    cfg.weights.lambda_per_level = vec![0.5, 0.5];
    assert!(train_run::<f32>(&ds, &cfg, None).is_err());
}

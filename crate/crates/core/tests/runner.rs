mod common;

use std::fs;
use std::path::Path;

use airsat_core::dataset::{Split, Target};
use airsat_core::nn::Archive;
use airsat_core::runner::{run_experiment, ExperimentConfig, Family, FeatureSet, RunArtifacts};

fn remove_rasters(dir: &Path) -> usize {
    let mut removed = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            removed += remove_rasters(&p);
        } else if p.extension().is_some_and(|e| e != "csv") {
            fs::remove_file(&p).unwrap();
            removed += 1;
        }
    }
    removed
}

fn config(corpus: &common::Corpus, family: Family, features: FeatureSet) -> ExperimentConfig {
    common::tiny_config(corpus, family, features, Target::OpAa, 4)
}

#[test]
fn baseline_never_reads_scenes() {
    let root = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(root.path(), &common::tiny_synth(1), common::tiny_resnet());
    assert!(remove_rasters(&corpus.data) > 0);
    let run = run_experiment(&config(&corpus, Family::Baseline, FeatureSet::Met), &root.path().join("out")).unwrap();
    assert_eq!(run.n_scenes_read, 0);
    assert!(run.metrics(Split::Test).is_some());
    assert!(run.backbone_digest.is_none());
}

#[test]
fn frozen_backbone_is_untouched_and_fine_tuning_moves_block4() {
    let root = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(root.path(), &common::tiny_synth(2), common::tiny_resnet());
    let out = root.path().join("out");
    let transfer = run_experiment(&config(&corpus, Family::Transfer, FeatureSet::Image), &out).unwrap();
    let (before, after) = transfer.backbone_digest.clone().unwrap();
    assert_eq!(before, after);

    let finetune = run_experiment(&config(&corpus, Family::Finetune, FeatureSet::ImageMet), &out).unwrap();
    let (before, after) = finetune.backbone_digest.clone().unwrap();
    assert_ne!(before, after);
    let ckpt = Archive::read(&finetune.checkpoint, None).unwrap();
    let names: Vec<&String> = ckpt.tensors.keys().collect();
    assert!(names.iter().any(|n| n.starts_with("backbone.layer4.")));
    assert!(!names.iter().any(|n| n.starts_with("backbone.layer3.")));
    assert!(names.iter().any(|n| n.starts_with("head.")));
}

#[test]
fn artifacts_carry_the_config_hash() {
    let root = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(root.path(), &common::tiny_synth(3), common::tiny_resnet());
    let c = config(&corpus, Family::Transfer, FeatureSet::ImageEmbedding);
    let run = run_experiment(&c, &root.path().join("out")).unwrap();
    assert_eq!(run.config_hash, c.hash());
    assert!(run.dir.ends_with(format!("{}_{}", c.run_name(), c.hash())));
    for f in ["metrics.csv", "bootstrap.csv", "predictions.csv", "history.csv"] {
        let text = fs::read_to_string(run.dir.join(f)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().contains("config_hash"), "{f}");
        assert!(lines.all(|l| l.contains(&run.config_hash)), "{f}");
    }
    let snapshot = fs::read_to_string(&run.config_snapshot).unwrap();
    assert!(snapshot.contains(&run.config_hash));
    for p in &run.plots {
        assert!(fs::read_to_string(p).unwrap().contains(&run.config_hash));
    }
    assert_eq!(RunArtifacts::load(&run.dir).unwrap(), run);
    assert_eq!(run.intervals.len(), 9);
}

#[test]
fn failed_run_leaves_no_directory() {
    let root = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(root.path(), &common::tiny_synth(4), common::tiny_resnet());
    let mut c = config(&corpus, Family::Transfer, FeatureSet::ImageMet);
    c.imagenet_weights.as_mut().unwrap().sha256 = Some("0".repeat(64));
    let out = root.path().join("out");
    let err = run_experiment(&c, &out).unwrap_err();
    assert!(err.to_string().contains("backbone"), "{err}");
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

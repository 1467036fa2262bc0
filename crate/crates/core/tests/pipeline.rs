use std::collections::BTreeMap;

use autolabel3d::app::{dataset_for, label_size_table, run_on, run_to_dir};
use autolabel3d::config::{AnnotatorKind, Config};
use autolabel3d::eval::{evaluate, Difficulty};
use autolabel3d::kitti_io::parse_labels;
use autolabel3d::pipeline::RunManifest;

fn small(n: usize) -> Config {
    Config::default().with_overrides(&[format!("synth.n_scenes={n}"), "synth.seed=21".into()]).unwrap()
}

#[test]
fn stages_are_streamed_in_order_and_recorded() {
    let cfg = small(6);
    let ds = dataset_for(&cfg).unwrap();
    let mut seen = Vec::new();
    let out = run_on(&cfg, &ds, &mut |r| seen.push(r.clone())).unwrap();
    assert_eq!(out.stages.len(), cfg.iteration.n_iterations + 1);
    assert_eq!(seen, out.manifest.iterations);
    let kinds: Vec<&str> = seen.iter().map(|r| r.kind.as_str()).collect();
    assert_eq!(kinds, ["iteration", "iteration", "iteration", "refinement"]);
    for (k, r) in seen.iter().enumerate() {
        assert_eq!(r.stage, k);
        assert_eq!(r.annotated + r.failed, ds.num_objects());
        assert!(r.truth_mean_iou.is_some());
        let trusted = out.stages[k]
            .labels
            .iter()
            .flat_map(|f| f.labels.iter().flatten())
            .filter(|l| l.agreement_iou >= cfg.iteration.trust_iou)
            .count();
        assert_eq!(r.trusted, trusted);
    }
    // iteration 0 draws no catalog objects; the refinement draws only catalog objects
    assert_eq!(seen[0].training.pseudo_injected, 0);
    assert_eq!(seen[3].training.proxies, 0);
}

#[test]
fn manifest_roundtrips_and_pins_the_config() {
    let cfg = small(4);
    let dir = tempfile::tempdir().unwrap();
    let out = run_to_dir(&cfg, dir.path(), &mut |_| {}).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    let m = RunManifest::from_toml(&text).unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(m.config_hash, cfg.hash());
    assert_ne!(m.config_hash, small(5).hash());
    assert_eq!(m.frames, 4);
}

#[test]
fn exported_labels_score_against_truth() {
    let cfg = small(10);
    let ds = dataset_for(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_to_dir(&cfg, dir.path(), &mut |_| {}).unwrap();
    let mut preds = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for f in &ds.frames {
        let path = dir.path().join("label_2").join(format!("{:06}.txt", f.frame_id));
        let recs = parse_labels(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!(recs.iter().all(|r| r.score.is_some_and(|s| (0.0..=1.0).contains(&s))));
        preds.insert(f.frame_id, recs);
        truth.insert(f.frame_id, f.truth.clone().unwrap());
    }
    let table = evaluate(&preds, &truth, &cfg.eval);
    let car = table.ap("Car", Difficulty::Moderate).expect("cars present");
    assert!((0.0..=1.0).contains(&car));
    assert!(car > 0.0, "direct pseudo-labels should find some cars: {}", table.to_text());
}

#[test]
fn learned_annotator_runs_end_to_end_deterministically() {
    let mut cfg = small(4);
    cfg.annotator_kind = AnnotatorKind::Learned;
    cfg.train.epochs = 3;
    let ds = dataset_for(&cfg).unwrap();
    let a = run_on(&cfg, &ds, &mut |_| {}).unwrap();
    let b = run_on(&cfg, &ds, &mut |_| {}).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.manifest.annotator, "learned");
    assert!(a.manifest.iterations.iter().all(|r| r.annotator_note.contains("epochs=3")), "{:?}", a.manifest.iterations[0].annotator_note);
    for (x, y) in a.final_labels().iter().zip(b.final_labels()) {
        assert_eq!(x, y);
    }
}

#[test]
fn without_refinement_only_iterations_run() {
    let cfg = small(3).with_overrides(&["iteration.refinement=false", "iteration.n_iterations=2"]).unwrap();
    let ds = dataset_for(&cfg).unwrap();
    let out = run_on(&cfg, &ds, &mut |_| {}).unwrap();
    assert_eq!(out.stages.len(), 2);
    assert!(out.stages.iter().all(|s| s.record.kind == "iteration"));
}

#[test]
fn label_size_reference_comes_from_truth() {
    let cfg = small(6).with_overrides(&["annotator_kind=\"learned\"", "train.epochs=2", "train.size_reference=\"labels\""]).unwrap();
    let ds = dataset_for(&cfg).unwrap();
    let table = label_size_table(&ds).unwrap();
    let cars: Vec<_> = ds.frames.iter().flat_map(|f| f.truth.as_ref().unwrap()).filter(|r| r.class_name == "Car").collect();
    let mean_l = cars.iter().map(|r| r.dimensions.l).sum::<f64>() / cars.len() as f64;
    assert!((table.get("Car").unwrap().mean.l - mean_l).abs() < 1e-12);

    let with_labels = run_on(&cfg, &ds, &mut |_| {}).unwrap();
    let with_priors = run_on(&cfg.with_overrides(&["train.size_reference=\"priors\""]).unwrap(), &ds, &mut |_| {}).unwrap();
    assert_ne!(with_labels.final_labels(), with_priors.final_labels());

    let mut unlabeled = ds.clone();
    unlabeled.frames[2].truth = None;
    let err = run_on(&cfg, &unlabeled, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("frame"), "{err}");
}

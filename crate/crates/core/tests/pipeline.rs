use std::fs;
use std::path::Path;

use atriaseg::augment::CurriculumSchedule;
use atriaseg::infer::{postprocess, predict_case, threshold_argmax, Model, PostprocessConfig};
use atriaseg::metrics::{evaluate_manifest, prediction_file_name};
use atriaseg::network::Checkpoint;
use atriaseg::synth::{generate, write_dataset, PhantomSpec};
use atriaseg::train::{
    read_log, train_bagging, train_loop, ResampleRecord, TrainConfig, TrainOptions, LAST_CHECKPOINT, LOG_FILE,
    RESAMPLE_FILE,
};
use atriaseg::volume::{load_manifest, load_volume, CaseRecord};
use atriaseg::{Error, ErrorClass};

fn dataset(dir: &Path, n: usize) -> Vec<CaseRecord> {
    let spec = PhantomSpec {
        n_cases: n,
        dims: [64, 64, 4],
        seed: 5,
        ..Default::default()
    };
    let manifest = write_dataset(&generate(&spec).unwrap(), &dir.join("data")).unwrap();
    load_manifest(manifest).unwrap()
}

fn tiny(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        curriculum: CurriculumSchedule::single(32, epochs),
        ..Default::default()
    };
    cfg.network.base_width = 2;
    cfg.network.fc_hidden = 8;
    cfg.network.spp_levels = vec![1, 2];
    cfg
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 5);
    let cfg = tiny(4);
    let full = train_loop(&cases, &cfg, &TrainOptions::new(dir.path().join("full"))).unwrap();
    assert!(full.completed);

    let cut_dir = dir.path().join("cut");
    let mut opts = TrainOptions::new(&cut_dir);
    opts.halt_after = Some(2);
    let partial = train_loop(&cases, &cfg, &opts).unwrap();
    assert!(!partial.completed);
    assert_eq!(partial.log.len(), 2);
    assert_eq!(Checkpoint::load(&cut_dir.join(LAST_CHECKPOINT)).unwrap().epoch, 2);

    opts.halt_after = None;
    opts.resume = true;
    let resumed = train_loop(&cases, &cfg, &opts).unwrap();
    assert!(resumed.completed);
    assert_eq!(resumed.log, full.log);
    for f in [LOG_FILE, LAST_CHECKPOINT, "final.ckpt", "best.ckpt"] {
        assert!(bytes(&full.out_dir.join(f)) == bytes(&cut_dir.join(f)), "{f} differs");
    }
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 4);
    let mut opts = TrainOptions::new(dir.path().join("run"));
    opts.halt_after = Some(1);
    train_loop(&cases, &tiny(3), &opts).unwrap();
    opts.resume = true;
    opts.halt_after = None;
    let changed = TrainConfig {
        lr0: 0.01,
        ..tiny(3)
    };
    assert!(matches!(train_loop(&cases, &changed, &opts), Err(Error::Config(_))));
    // extending the epoch budget is allowed
    let mut longer = tiny(4);
    longer.curriculum = tiny(3).curriculum;
    assert_eq!(train_loop(&cases, &longer, &opts).unwrap().log.len(), 4);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 4);
    let cfg = tiny(2);
    let one = train_loop(&cases, &cfg, &TrainOptions::new(dir.path().join("w1"))).unwrap();
    let mut opts = TrainOptions::new(dir.path().join("w3"));
    opts.workers = 3;
    let three = train_loop(&cases, &cfg, &opts).unwrap();
    assert_eq!(one.log, three.log);
    assert!(bytes(&one.final_checkpoint()) == bytes(&three.final_checkpoint()));
}

#[test]
fn log_matches_the_returned_records() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 4);
    let out = train_loop(&cases, &tiny(2), &TrainOptions::new(dir.path().join("run"))).unwrap();
    assert_eq!(read_log(&out.out_dir.join(LOG_FILE)).unwrap(), out.log);
    assert_eq!(out.train_ids.len() + out.val_ids.len(), 4);
    assert!(out.log.iter().all(|r| r.train_l.is_finite() && (0.0..=1.0).contains(&r.val_dice)));
    let best = out.log.iter().map(|r| r.val_dice).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_dice, best);
}

#[test]
fn missing_labels_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = dataset(dir.path(), 4);
    cases[2].mask = None;
    let err = train_loop(&cases, &tiny(1), &TrainOptions::new(dir.path().join("run"))).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
    assert!(!dir.path().join("run").join(LOG_FILE).exists());
}

#[test]
fn bagging_trains_resampled_members() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 6);
    let cfg = tiny(1);
    let out_dir = dir.path().join("bag");
    let runs = train_bagging(&cases, &cfg, 3, &TrainOptions::new(&out_dir)).unwrap();
    assert_eq!(runs.len(), 3);
    let mut draws = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        assert_eq!(run.out_dir, out_dir.join(format!("model_{k}")));
        assert!(run.final_checkpoint().is_file());
        assert_eq!(run.val_ids, runs[0].val_ids);
        let rec: ResampleRecord = serde_json::from_slice(&bytes(&run.out_dir.join(RESAMPLE_FILE))).unwrap();
        assert_eq!(rec.model, k);
        assert_eq!(rec.case_ids, run.train_ids);
        assert!(rec.unique_cases <= rec.case_ids.len());
        assert!(rec.case_ids.iter().all(|id| !run.val_ids.contains(id)));
        draws.push(rec.case_ids);
    }
    assert!(draws[0] != draws[1] || draws[1] != draws[2]);
    assert!(matches!(train_bagging(&cases, &cfg, 1, &TrainOptions::new(dir.path().join("one"))), Err(Error::Config(_))));
}

#[test]
fn ensembles_of_one_model_match_the_single_model_path() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 4);
    let run = train_loop(&cases, &tiny(1), &TrainOptions::new(dir.path().join("run"))).unwrap();
    let model = Model::load(&run.final_checkpoint()).unwrap();
    let vol = load_volume(&cases[0].volume).unwrap();
    let single = predict_case(std::slice::from_ref(&model), &vol).unwrap();
    let copies = vec![model.clone(), model.clone(), model.clone(), model.clone(), model];
    let ensemble = predict_case(&copies, &vol).unwrap();
    assert_eq!(single.probability, ensemble.probability);
    assert_eq!(single.ablation_probability, ensemble.ablation_probability);
    assert_eq!(single.probability.dims(), vol.dims());
}

#[test]
fn synth_train_infer_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dataset(dir.path(), 4);
    let run = train_loop(&cases, &tiny(2), &TrainOptions::new(dir.path().join("run"))).unwrap();
    let model = Model::load(&run.best_checkpoint()).unwrap();
    let pred_dir = dir.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    for c in &cases[..3] {
        let p = predict_case(std::slice::from_ref(&model), &load_volume(&c.volume).unwrap()).unwrap();
        let raw = threshold_argmax(&p.probability);
        let post = postprocess(&p.probability, &PostprocessConfig::default()).unwrap();
        // post-processing only removes or fills; it never changes geometry
        assert!(post.same_geometry(&raw));
        post.save(pred_dir.join(prediction_file_name(&c.case_id))).unwrap();
    }
    let report = evaluate_manifest(&pred_dir, &cases).unwrap();
    assert_eq!(report.cases.len(), 4);
    assert_eq!(report.flagged, vec![cases[3].case_id.clone()]);
    assert_eq!(report.dice.unwrap().n, 3);
    assert!(report.to_table().contains("FLAGGED"));
}

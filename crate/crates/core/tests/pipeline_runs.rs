mod common;

use std::fs;

use common::{sha256, tiny_config};
use vq2_core::codec::Level;
use vq2_core::pipeline::checkpoint::Checkpoint;
use vq2_core::pipeline::codes::CodeDataset;
use vq2_core::pipeline::data::{encode_raw, ingest, synthetic_dataset, write_pnm, write_raw};
use vq2_core::pipeline::generate::{decode_codes, evaluate, generate, GenerateOptions};
use vq2_core::pipeline::train::{
    extract_codes, load_codec, load_datasets, run_classifier, run_extract, run_stage1, run_stage2, RunLock,
    Stage1Trainer,
};
use vq2_core::pipeline::RunDir;
use vq2_core::Error;

fn trained_run(seed: u64) -> (tempfile::TempDir, RunDir, vq2_core::pipeline::config::RunConfig) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(seed);
    run_stage1(&cfg, &dir, None).unwrap();
    run_extract(&cfg, &dir, None).unwrap();
    run_stage2(&cfg, &dir, Level::Top).unwrap();
    run_stage2(&cfg, &dir, Level::Bottom).unwrap();
    (tmp, dir, cfg)
}

#[test]
fn pgm_directory_ingests_in_filename_order() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic_dataset(8, 4, 32, 1, 1).unwrap();
    let images = ds.all().unwrap();
    for i in (0..8).rev() {
        let img = images.batch_item(i).unwrap();
        write_pnm(&img, &tmp.path().join(format!("img_{i:02}.pgm"))).unwrap();
    }
    fs::write(tmp.path().join("labels.txt"), "0\n1\n2\n3\n0\n1\n2\n3\n").unwrap();
    let back = ingest(tmp.path(), Some(&tmp.path().join("labels.txt"))).unwrap();
    assert_eq!(back.len(), 8);
    assert_eq!((back.height, back.width, back.channels), (32, 32, 1));
    assert_eq!(back.labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    for i in 0..8 {
        assert_eq!(back.pixels(i), ds.pixels(i));
    }
    let t = back.all().unwrap();
    assert!(t.data().iter().all(|v| (-0.5..=0.5).contains(v)));
}

#[test]
fn mixed_sizes_are_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic_dataset(1, 1, 8, 1, 0).unwrap().all().unwrap();
    let b = synthetic_dataset(1, 1, 16, 1, 0).unwrap().all().unwrap();
    write_pnm(&a.batch_item(0).unwrap(), &tmp.path().join("a.pgm")).unwrap();
    write_pnm(&b.batch_item(0).unwrap(), &tmp.path().join("b.pgm")).unwrap();
    assert!(matches!(ingest(tmp.path(), None), Err(Error::Format(_))));
}

#[test]
fn raw_file_round_trips_and_rejects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic_dataset(5, 3, 16, 3, 9).unwrap();
    let path = tmp.path().join("d.vq2i");
    write_raw(&ds, &path).unwrap();
    let back = ingest(&path, None).unwrap();
    assert_eq!(encode_raw(&back), encode_raw(&ds));

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(ingest(&path, None), Err(Error::Format(_))));
    fs::write(&path, &encode_raw(&ds)[..30]).unwrap();
    assert!(matches!(ingest(&path, None), Err(Error::Format(_))));
}

#[test]
fn empty_raw_dataset_is_rejected_for_training() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = synthetic_dataset(0, 1, 16, 1, 0).unwrap();
    let path = tmp.path().join("empty.vq2i");
    write_raw(&empty, &path).unwrap();
    assert_eq!(ingest(&path, None).unwrap().len(), 0);
    let mut cfg = tiny_config(0);
    cfg.data.synthetic = None;
    cfg.data.path = Some(path);
    assert!(matches!(load_datasets(&cfg), Err(Error::Config(_))));
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let cfg = tiny_config(4);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut straight = Stage1Trainer::new(cfg.clone()).unwrap();
    let mut reference = Vec::new();
    for _ in 0..15 {
        reference.push(straight.train_step(&train).unwrap().loss.to_bits());
    }

    let mut first = Stage1Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        first.train_step(&train).unwrap();
    }
    let bytes = first.to_checkpoint().to_bytes();
    drop(first);
    let mut resumed = Stage1Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 5);
    let tail: Vec<u64> = (0..10).map(|_| resumed.train_step(&train).unwrap().loss.to_bits()).collect();
    assert_eq!(tail, reference[5..]);
}

#[test]
fn resume_through_the_driver_continues_the_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (RunDir::new(tmp.path().join("a")), RunDir::new(tmp.path().join("b")));
    let cfg = tiny_config(5);
    run_stage1(&cfg, &a, None).unwrap();

    let mut short = cfg.clone();
    short.stage1.steps = 3;
    run_stage1(&short, &b, None).unwrap();
    let ck = tmp.path().join("step3.ckpt");
    fs::copy(b.stage1_checkpoint(), &ck).unwrap();
    run_stage1(&cfg, &b, Some(&ck)).unwrap();

    // The interrupted run also logged its final step 3; every other row matches.
    let rows = |d: &RunDir| fs::read_to_string(d.stage1_metrics()).unwrap();
    let resumed: Vec<String> = rows(&b).lines().filter(|l| !l.starts_with("3,")).map(String::from).collect();
    let straight: Vec<String> = rows(&a).lines().map(String::from).collect();
    assert_eq!(resumed, straight);
    let codec_a = load_codec(&a.stage1_checkpoint()).unwrap();
    let codec_b = load_codec(&b.stage1_checkpoint()).unwrap();
    assert_eq!(codec_a.params, codec_b.params);
}

#[test]
fn extraction_is_idempotent_and_matches_reconstruction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(6);
    run_stage1(&cfg, &dir, None).unwrap();
    let (codes, val) = run_extract(&cfg, &dir, None).unwrap();
    assert_eq!(codes.len(), 6);
    assert_eq!(val.len(), 2);
    let first = fs::read(dir.codes()).unwrap();
    run_extract(&cfg, &dir, None).unwrap();
    assert_eq!(first, fs::read(dir.codes()).unwrap());
    assert_eq!(CodeDataset::load(&dir.codes()).unwrap(), codes);

    // Decoding the stored codes reproduces the evaluated reconstruction error.
    let codec = load_codec(&dir.stage1_checkpoint()).unwrap();
    let (train, _) = load_datasets(&cfg).unwrap();
    let decoded = decode_codes(&codec, &codes.levels).unwrap();
    let x = train.all().unwrap();
    let per_image = x.len() / train.len();
    let mut sq = 0.0;
    for (i, img) in decoded.iter().enumerate() {
        for (a, b) in img.data().iter().zip(&x.data()[i * per_image..(i + 1) * per_image]) {
            sq += (a - b) * (a - b);
        }
    }
    let mse = sq / x.len() as f64;
    let report = evaluate(&cfg, &dir).unwrap();
    assert!((report.train_mse - mse).abs() < 1e-12, "{} vs {mse}", report.train_mse);
}

#[test]
fn mismatched_geometry_fails_extraction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(7);
    run_stage1(&cfg, &dir, None).unwrap();
    let codec = load_codec(&dir.stage1_checkpoint()).unwrap();
    let wrong = synthetic_dataset(2, 2, 32, 1, 0).unwrap();
    assert!(extract_codes(&codec, &wrong, 4).is_err());
}

#[test]
fn prior_training_leaves_stage1_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(8);
    run_stage1(&cfg, &dir, None).unwrap();
    run_extract(&cfg, &dir, None).unwrap();
    let before = (sha256(&dir.stage1_checkpoint()), sha256(&dir.codes()));
    let (_, fit_top) = run_stage2(&cfg, &dir, Level::Top).unwrap();
    let (_, fit_bottom) = run_stage2(&cfg, &dir, Level::Bottom).unwrap();
    assert_eq!(before, (sha256(&dir.stage1_checkpoint()), sha256(&dir.codes())));
    for fit in [fit_top, fit_bottom] {
        assert!(fit.train.unwrap().nats.is_finite());
        assert!(fit.val.unwrap().nats.is_finite());
    }
    let header = fs::read_to_string(dir.prior_metrics(Level::Top)).unwrap();
    assert!(header.starts_with("step,loss,nll_nats_top,nll_bits_top"), "{header}");
}

#[test]
fn vocabulary_mismatch_is_rejected_by_stage2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(9);
    run_stage1(&cfg, &dir, None).unwrap();
    run_extract(&cfg, &dir, None).unwrap();
    let mut other = cfg.clone();
    other.codec.levels[1].codebook_size = 16;
    other.priors.get_mut(&Level::Top).unwrap().num_codes = 16;
    other.priors.get_mut(&Level::Bottom).unwrap().condition.as_mut().unwrap().num_codes = 16;
    other.validate().unwrap();
    let err = run_stage2(&other, &dir, Level::Top).unwrap_err();
    assert!(err.to_string().contains("vocabulary"), "{err}");
}

#[test]
fn generation_counts_determinism_and_rejection() {
    let (_tmp, dir, cfg) = trained_run(10);
    let out = |name: &str| dir.root.join(name);

    let opts = GenerateOptions { n: 4, seed: 1, ..Default::default() };
    let g = generate(&cfg, &dir, &opts, &out("a")).unwrap();
    assert_eq!(g.files.len(), 4);
    assert!(g.images.iter().all(|t| t.shape() == [1, 1, 16, 16]));
    let again = generate(&cfg, &dir, &opts, &out("b")).unwrap();
    for (x, y) in g.files.iter().zip(&again.files) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }

    let no_clf = GenerateOptions { n: 4, keep_fraction: 0.5, ..Default::default() };
    assert!(matches!(generate(&cfg, &dir, &no_clf, &out("c")), Err(Error::Config(_))));

    run_classifier(&cfg, &dir).unwrap();
    let opts = GenerateOptions {
        n: 100,
        keep_fraction: 0.25,
        classifier: Some(dir.classifier_checkpoint()),
        ..Default::default()
    };
    let g = generate(&cfg, &dir, &opts, &out("d")).unwrap();
    assert_eq!(g.kept.len(), 25);
    let images = fs::read_dir(out("d")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm");
    assert_eq!(images.count(), 25);
    let csv = fs::read_to_string(out("d").join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_id,class_label,score,kept"));
    let kept = lines.filter(|l| l.ends_with(",1")).count();
    assert_eq!(kept, 25);
}

#[test]
fn evaluation_reports_every_level_and_is_repeatable() {
    let (_tmp, dir, cfg) = trained_run(11);
    let a = evaluate(&cfg, &dir).unwrap();
    let b = evaluate(&cfg, &dir).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.levels.len(), 2);
    for level in &a.levels {
        assert!(level.train_nll.is_some() && level.val_nll.is_some() && level.val_mse.is_some());
        assert!(level.train_mse.is_finite());
    }
    assert_eq!(a.level(Level::Bottom).unwrap().train_mse, a.train_mse);
    assert!(dir.report_json().exists() && dir.report_csv().exists());
}

#[test]
fn a_locked_run_directory_refuses_a_second_trainer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let cfg = tiny_config(12);
    let lock = RunLock::acquire(&dir).unwrap();
    assert!(matches!(run_stage1(&cfg, &dir, None), Err(Error::State(_))));
    drop(lock);
    run_stage1(&cfg, &dir, None).unwrap();
}

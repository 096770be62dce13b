use std::fs::File;

use fyh::pipeline::{
    run_match, run_prep, run_product, run_reproject, run_stats, run_synth, run_train,
    PipelineConfig, PipelineError, PALETTE,
};
use fyh::prep::read_manifest;
use fyh::scene::{read_scene, SceneKind, NUM_CLASSES};

fn small(work: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        work_dir: work.to_path_buf(),
        ..PipelineConfig::default()
    };
    cfg.synth.n_scenes = 3;
    cfg.val_fraction = 0.25;
    cfg.model.base_width = 2;
    cfg.model.iam_reduction = 2;
    cfg.train.epochs = 1;
    cfg.train.lr_drop_epochs.clear();
    cfg
}

#[test]
fn labels_keep_the_configured_long_tail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_synth(&cfg).unwrap();
    let raw = run_stats(&cfg.raw_dir(SceneKind::Label)).unwrap();
    let want = cfg.synth.class_fractions();
    assert_eq!(want.len(), NUM_CLASSES);
    for (c, (got, want)) in raw.fractions.iter().zip(&want).enumerate() {
        assert!((got - want).abs() < 2e-3, "class {c}");
    }
    assert!(raw.long_tailed);
    assert_eq!(raw.dominant_class, 0);

    // The tiled window is a crop of the label grid, so the tail survives.
    run_reproject(&cfg, &[]).unwrap();
    let eqr = run_stats(&cfg.eqr_dir(SceneKind::Label)).unwrap();
    let f = eqr.fractions;
    assert!((f[0] - want[0]).abs() < 0.05);
    assert!(f[1] > 2.0 * f[10], "{f:?}");
}

#[test]
fn prep_writes_disjoint_relative_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_synth(&cfg).unwrap();
    run_reproject(&cfg, &[]).unwrap();
    let matched = run_match(&cfg).unwrap();
    assert_eq!(matched.matched, 3);
    let report = run_prep(&cfg).unwrap();
    let train = read_manifest(cfg.train_manifest()).unwrap();
    let val = read_manifest(cfg.val_manifest()).unwrap();
    assert_eq!(train.len(), report.train_tiles);
    assert_eq!(val.len(), report.val_tiles);
    assert!(!val.is_empty());
    for rec in train.iter().chain(&val) {
        assert!(
            !std::path::Path::new(&rec.path).is_absolute(),
            "{}",
            rec.path
        );
    }
    for v in &val {
        assert!(train.iter().all(|t| t.origin != v.origin));
    }
}

#[test]
fn product_is_a_label_scene_and_indexed_png() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_synth(&cfg).unwrap();
    run_reproject(&cfg, &[]).unwrap();
    run_match(&cfg).unwrap();
    run_prep(&cfg).unwrap();
    let trained = run_train(&cfg).unwrap();
    let input = &run_synth(&cfg).unwrap().imager[0];
    let report = run_product(&cfg, &trained.checkpoint, input).unwrap();

    let scene = read_scene(&report.scene).unwrap();
    let classes = scene.as_label().expect("label scene");
    let grid = cfg.product_grid;
    assert_eq!((classes.rows, classes.cols), (grid.rows, grid.cols));
    let counted: u64 = report.class_counts.iter().sum::<u64>() + report.fill;
    assert_eq!(counted as usize, grid.len());

    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&report.png).unwrap()));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    assert_eq!(info.color_type, png::ColorType::Indexed);
    assert_eq!(
        (info.width as usize, info.height as usize),
        (grid.cols, grid.rows)
    );
    let palette = info.palette.as_ref().unwrap();
    assert_eq!(palette.len(), 3 * (NUM_CLASSES + 1));
    assert_eq!(&palette[..3], &PALETTE[0]);

    let label = &run_synth(&cfg).unwrap().labels[0];
    let err = run_product(&cfg, &trained.checkpoint, label).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidConfig(_)), "{err}");
}

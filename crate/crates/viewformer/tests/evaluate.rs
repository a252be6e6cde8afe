mod common;

use viewformer::dataset::make_dataset;
use viewformer::evaluate::{evaluate, IDENTITY_POSE, NEAREST_VIEW};
use viewformer::train::{init_codebook, init_transformer};
use viewformer::Error;
use viewformer_core::metrics::{psnr, PSNR_CAP};

#[test]
fn perfect_prediction_hits_the_psnr_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(dir.path());
    cfg.data.scenes = 3;
    cfg.data.test_scenes = 1;
    let data = make_dataset(&cfg.data, &cfg.dataset).unwrap();
    let img = &data.episodes[0].views[0].image;
    assert_eq!(psnr(img, img), PSNR_CAP);
}

#[test]
fn baselines_are_reproducible_and_model_rows_present() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(dir.path());
    let data = make_dataset(&cfg.data, &cfg.dataset).unwrap();
    let cb = init_codebook(&cfg).unwrap();
    let a = evaluate(&cfg, &cb.codebook, None, &data).unwrap();
    let b = evaluate(&cfg, &cb.codebook, None, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, 10);
    for &c in &cfg.eval.context_sizes {
        assert!(a.image(c, NEAREST_VIEW).is_some());
        assert!(a.pose(c, IDENTITY_POSE).is_some());
    }

    let tf = init_transformer(&cfg).unwrap();
    let full = evaluate(&cfg, &cb.codebook, Some(&tf.model), &data).unwrap();
    assert_eq!(full.images.len(), 2 * cfg.eval.context_sizes.len());
    assert_eq!(full.poses.len(), 2 * cfg.eval.context_sizes.len());
    std::fs::create_dir_all(&cfg.out).unwrap();
    full.write(&cfg.out).unwrap();
    for f in ["eval_images.csv", "eval_poses.csv", "eval_codebook.csv", "eval.json"] {
        assert!(cfg.out.join(f).exists());
    }
}

#[test]
fn context_larger_than_episode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(dir.path());
    cfg.data.scenes = 3;
    cfg.data.test_scenes = 1;
    let data = make_dataset(&cfg.data, &cfg.dataset).unwrap();
    let cb = init_codebook(&cfg).unwrap();
    cfg.eval.context_sizes = vec![6];
    let err = evaluate(&cfg, &cb.codebook, None, &data).unwrap_err();
    assert!(
        matches!(err, Error::Core(viewformer_core::error::Error::Validation(_))),
        "{err}"
    );
}

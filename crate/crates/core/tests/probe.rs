use dsc_core::config::{SemanticStrategy, TrainConfig};
use dsc_core::error::DscError;
use dsc_core::probe::{
    emit_heatmap, linear_probe, median, pixel_probe, similarity_grid, FrozenEncoder, ProbeSettings,
};
use dsc_core::synthdata::SyntheticSample;
use dsc_core::trainer::{make_splits, Trainer};
use ndarray::Array3;

fn config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(include_str!("../../../configs/desk.cfg")).unwrap();
    c.apply_text("data.eval_images=300\n").unwrap();
    c.seed_all(seed);
    c
}

struct Arms {
    random: FrozenEncoder,
    trained: FrozenEncoder,
    probe_train: Vec<SyntheticSample>,
    eval: Vec<SyntheticSample>,
}

fn arms(seed: u64) -> Arms {
    let c = config(seed);
    let (train, eval) = make_splits(&c).unwrap();
    let t = Trainer::new(c.clone()).unwrap();
    let init = t.init_state(&train).unwrap().online;
    let dir = tempfile::tempdir().unwrap();
    let fit = t.fit(&train, dir.path(), None).unwrap();
    let trained = FrozenEncoder::load(&fit.final_checkpoint, Some(&c)).unwrap();
    Arms {
        random: FrozenEncoder::new(c.clone(), init).unwrap(),
        trained,
        probe_train: train[..c.probe.train_images].to_vec(),
        eval,
    }
}

#[test]
fn linear_probe_trained_beats_random_and_shuffled_is_chance() {
    let mut random = Vec::new();
    let mut trained = Vec::new();
    let mut shuffled = Vec::new();
    for seed in 0..3 {
        let a = arms(seed);
        let s = ProbeSettings::from_config(&a.trained.config);
        let before = a.trained.params.fingerprint();
        random.push(linear_probe(&a.random, &a.probe_train, &a.eval, s, false).unwrap());
        let acc = linear_probe(&a.trained, &a.probe_train, &a.eval, s, false).unwrap();
        assert_eq!(acc, linear_probe(&a.trained, &a.probe_train, &a.eval, s, false).unwrap());
        trained.push(acc);
        // One shuffled fit is a single random labelling of well separated clusters, so
        // its accuracy swings widely; the chance level shows up in the mean over draws.
        for draw in 0..8 {
            let sd = ProbeSettings { seed: 1000 * seed + draw, ..s };
            shuffled.push(linear_probe(&a.trained, &a.probe_train, &a.eval, sd, true).unwrap());
        }
        pixel_probe(&a.trained, &a.probe_train, &a.eval, s).unwrap();
        assert_eq!(before, a.trained.params.fingerprint());
    }
    println!("linear probe: random {random:?} trained {trained:?} shuffled {shuffled:?}");
    assert!(median(&trained) >= median(&random));
    // Three foreground classes carry the image labels.
    let chance = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
    assert!((chance - 1.0 / 3.0).abs() <= 0.1, "mean shuffled accuracy {chance}");
}

fn tiny_frozen() -> FrozenEncoder {
    let mut c = TrainConfig::default();
    c.apply_text(
        "data.image_size=32\ndata.num_images=8\ndata.eval_images=4\n\
         model.width=4\nmodel.depth=2\nmodel.output_stride=4\nmodel.embed_dim=8\n\
         train.batch_size=4\nqueue.instance=16\nqueue.dense=16\nprobe.train_images=8\n",
    )
    .unwrap();
    let (train, _) = make_splits(&c).unwrap();
    let online = Trainer::new(c.clone()).unwrap().init_state(&train).unwrap().online;
    FrozenEncoder::new(c, online).unwrap()
}

#[test]
fn probe_input_errors() {
    let f = tiny_frozen();
    let (train, eval) = make_splits(&f.config).unwrap();
    let s = ProbeSettings::from_config(&f.config);
    assert!(matches!(pixel_probe(&f, &train, &[], s), Err(DscError::Dataset(_))));
    assert!(matches!(linear_probe(&f, &train, &[], s, false), Err(DscError::Dataset(_))));
    assert!(matches!(linear_probe(&f, &train[..1], &eval, s, false), Err(DscError::Dataset(_))));
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let c = config(0);
    let mut short = c.clone();
    short.train.epochs = 0;
    let (train, _) = make_splits(&short).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fit = Trainer::new(short.clone()).unwrap().fit(&train, dir.path(), None).unwrap();
    assert!(FrozenEncoder::load(&fit.final_checkpoint, Some(&short)).is_ok());
    let mut other = short.clone();
    other.loss.strategy = SemanticStrategy::Km;
    assert!(matches!(
        FrozenEncoder::load(&fit.final_checkpoint, Some(&other)),
        Err(DscError::ConfigMismatch { .. })
    ));
}

#[test]
fn heatmap_bounds_anchor_and_files() {
    let f = tiny_frozen();
    let (_, eval) = make_splits(&f.config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (r, c) in [(0, 0), (3, 5), (7, 7)] {
        let h = emit_heatmap(&f, &eval[0].image, (r, c), dir.path(), "h").unwrap();
        assert_eq!(h.grid.dim(), (8, 8));
        assert!((h.grid[[r, c]] - 1.0).abs() < 1e-9);
        assert!(h.grid.iter().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
        let text = std::fs::read_to_string(&h.text_path).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().all(|l| l.split(' ').count() == 8));
        let png = image::open(&h.image_path).unwrap();
        assert_eq!((png.width(), png.height()), (32, 32));
    }
    assert!(matches!(
        emit_heatmap(&f, &eval[0].image, (8, 0), dir.path(), "x"),
        Err(DscError::Input(_))
    ));
}

#[test]
fn constant_input_gives_near_uniform_heatmap() {
    let f = tiny_frozen();
    let img = Array3::from_elem((32, 32, 3), 0.6);
    let grid = similarity_grid(&f, &img, (4, 4)).unwrap();
    // Cells whose receptive field avoids the zero padding are identical up to rounding;
    // the border ring differs only through padding and is not constrained.
    let interior = grid.slice(ndarray::s![2..6, 2..6]);
    let (lo, hi) = interior.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi - lo < 1e-9, "interior spread {}", hi - lo);
}

use gst_core::body_model::{BodyModel, SyntheticBodyConfig};
use gst_core::dataio::{generate_scene, threshold_mask, GenerateOptions, RigConfig, SceneDataset};
use gst_core::gaussian::{GaussianAttributes, ScaffoldConfig};
use gst_core::gradcheck::rel_err;
use gst_core::losses::LossWeights;
use gst_core::optim::AdamConfig;
use gst_core::pipeline::forward;
use gst_core::predictor::{Predictor, PredictorConfig, TrainSample, Trainer};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (BodyModel, SceneDataset, PredictorConfig) {
    let model = SyntheticBodyConfig {
        vertices: 60,
        ..Default::default()
    }
    .build()
    .unwrap();
    let opts = GenerateOptions {
        rig: RigConfig {
            views: 2,
            width: 16,
            height: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = generate_scene(&model, 1, 2, &opts, "toy.gstb").unwrap();
    let cfg = PredictorConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        groups: 4,
        group_size: 15,
        init_scale: GaussianAttributes::initial_scale(model.mean_nearest_vertex_distance()),
        ..Default::default()
    };
    (model, ds, cfg)
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let (model, ds, cfg) = toy();
    let mut trainer = Trainer::new(
        Predictor::new(cfg).unwrap(),
        ScaffoldConfig::default(),
        LossWeights::default(),
        AdamConfig::default(),
    )
    .unwrap();
    let input = ds.views[0].image.clone();
    let sample = TrainSample {
        input: &input,
        scene: &ds,
    };
    let eval = trainer.evaluate(&model, sample, true).unwrap();
    let analytic = eval.grads.unwrap().to_flat();
    let n = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let picked = sample_indices(&mut rng, n, n.div_ceil(100)).into_vec();
    let base = trainer.predictor.params.to_flat();
    let floor = 1e-4 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-7;
    let mut worst = 0.0f64;
    for &i in &picked {
        let mut x = base.clone();
        x[i] = base[i] + h;
        trainer.predictor.params.set_flat(&x);
        let lp = trainer.evaluate(&model, sample, false).unwrap().objective.report.total;
        x[i] = base[i] - h;
        trainer.predictor.params.set_flat(&x);
        let lm = trainer.evaluate(&model, sample, false).unwrap().objective.report.total;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd, floor));
    }
    trainer.predictor.params.set_flat(&base);
    println!("checked {} of {n} parameters, max rel err {worst:.3e}", picked.len());
    assert!(worst < 1e-2, "max rel err {worst}");
}

#[test]
fn image_gradient_reaches_patch_embedding() {
    let (model, ds, cfg) = toy();
    let trainer = Trainer::new(
        Predictor::new(cfg).unwrap(),
        ScaffoldConfig::default(),
        LossWeights::default(),
        AdamConfig::default(),
    )
    .unwrap();
    let sample = TrainSample {
        input: &ds.views[0].image,
        scene: &ds,
    };
    let g = trainer.evaluate(&model, sample, true).unwrap().grads.unwrap();
    let names = trainer.predictor.params.names();
    let idx = names.iter().position(|n| n == "patch_embed.weight").unwrap();
    assert!(g.0[idx].iter().any(|v| *v != 0.0));
}

#[test]
fn self_render_target_leaves_parameters_unchanged() {
    let (model, mut ds, cfg) = toy();
    let pred = Predictor::new(cfg).unwrap();
    let (out, _) = pred.forward(&ds.views[0].image).unwrap();
    let scaffold = ScaffoldConfig::default();
    let fwd = forward(&model, &out.to_avatar(), &scaffold, &ds.cameras(), &ds.background).unwrap();
    let input = ds.views[0].image.clone();
    for (v, r) in ds.views.iter_mut().zip(&fwd.renders) {
        v.image = r.rgb.clone();
        v.mask = threshold_mask(&r.alpha);
    }
    let mut trainer = Trainer::new(pred, scaffold, LossWeights::mse_only(), AdamConfig::default()).unwrap();
    let before = trainer.predictor.params.to_flat();
    let step = trainer
        .step(
            &model,
            &[TrainSample {
                input: &input,
                scene: &ds,
            }],
        )
        .unwrap();
    assert_eq!(step.report.total, 0.0);
    assert_eq!(step.grad_norm, 0.0);
    assert_eq!(trainer.predictor.params.to_flat(), before);
}

#[test]
fn repeated_sample_loss_mostly_decreases() {
    let (model, ds, cfg) = toy();
    let input = ds.views[0].image.clone();
    let sample = [TrainSample {
        input: &input,
        scene: &ds,
    }];
    let mut fractions = Vec::new();
    for seed in 0..3 {
        let cfg = PredictorConfig { seed, ..cfg.clone() };
        let mut trainer = Trainer::new(
            Predictor::new(cfg).unwrap(),
            ScaffoldConfig::default(),
            LossWeights::default(),
            AdamConfig::with_lr(1e-4),
        )
        .unwrap();
        let mut decreased = 0;
        for _ in 0..100 {
            let before = trainer.step(&model, &sample).unwrap().report.total;
            let after = trainer.evaluate(&model, sample[0], false).unwrap().objective.report.total;
            decreased += usize::from(after <= before);
        }
        fractions.push(decreased as f64 / 100.0);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    println!("fraction of decreasing steps per seed: {fractions:?}");
    assert!(mean >= 0.9, "{fractions:?}");
}

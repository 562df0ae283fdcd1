use kpbe::config::ModelConfig;
use kpbe::frame::{FrameSequence, ImageTensor};
use kpbe::model::Kpbe;
use kpbe::pipeline::toy::{talking_clip, SceneFrame, SyntheticSceneParams};
use kpbe::pipeline::synthesize_toy_dataset;
use kpbe::tensor::nn::Scope;
use kpbe::tensor::optim::Adam;
use kpbe::tensor::{Tensor, Var};
use kpbe::training::{train_stage1, OptimizerConfig, TrainConfig};

fn yaw_of(model: &Kpbe, image: &ImageTensor) -> f64 {
    let r = *model.estimate_pose_expression(image).unwrap().pose.rotation().matrix();
    r[0][2].atan2(r[2][2])
}

#[test]
fn pose_head_trained_on_angles_orders_a_yaw_sweep() {
    let yaws = [-30f64, 0.0, 30.0].map(f64::to_radians);
    let scene = SyntheticSceneParams {
        identity_seed: 31,
        frames: yaws.iter().map(|&yaw| SceneFrame { yaw, ..SceneFrame::frontal(0.4) }).collect(),
        resolution: 64,
    };
    let frames = synthesize_toy_dataset(&scene).unwrap().frames;
    let refs: Vec<&ImageTensor> = frames.frames().iter().collect();
    let batch = Var::constant(ImageTensor::batch::<f32>(&refs).unwrap());
    let target = Var::constant(Tensor::<f32>::from_f64(&[3, 1], &yaws));

    let mut model = Kpbe::new(ModelConfig::default(), 31).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 1e-3,
        ..OptimizerConfig::default()
    };
    let mut adam = Adam::new(opt.adam(), &model.store);
    for _ in 0..300 {
        let grads = {
            let scope = Scope::training(&model.store);
            let code = model.nets.pose.forward(&scope, &batch);
            let loss = code.angles.narrow(1, 0, 1).sub(&target).abs().mean();
            scope.collect(&loss.backward())
        };
        adam.step(&mut model.store, &grads);
    }

    let predicted: Vec<f64> = frames.frames().iter().map(|f| yaw_of(&model, f)).collect();
    assert!(predicted.windows(2).all(|w| w[1] > w[0]), "{predicted:?}");
}

#[test]
fn canonical_keypoints_separate_identities_after_training() {
    let clips: Vec<FrameSequence> = (40..45)
        .map(|seed| synthesize_toy_dataset(&talking_clip(seed, 4, 0.5, 64)).unwrap().frames)
        .collect();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: u64::MAX,
            ..OptimizerConfig::default()
        },
        max_steps: Some(200),
        seed: 9,
        log_every: 0,
        ..TrainConfig::default()
    };
    let model = train_stage1(Kpbe::new(ModelConfig::default(), 40).unwrap(), &clips, &cfg)
        .unwrap()
        .checkpoint
        .model;
    let keypoints: Vec<Vec<_>> = clips
        .iter()
        .map(|c| c.frames().iter().map(|f| model.estimate_canonical_keypoints(f).unwrap()).collect())
        .collect();

    let (mut same, mut different) = (Vec::new(), Vec::new());
    for (a, ka) in keypoints.iter().enumerate() {
        for i in 0..ka.len() {
            for j in i + 1..ka.len() {
                same.push(ka[i].mean_distance(&ka[j]));
            }
        }
        // Cross-identity pairs use the same frame-index pairs as above, so
        // both sets span the same pose differences.
        for kb in &keypoints[a + 1..] {
            for i in 0..ka.len() {
                for j in i + 1..ka.len() {
                    different.push(ka[i].mean_distance(&kb[j]));
                }
            }
        }
    }
    assert!(same.len() >= 20 && different.len() >= 20);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (s, d) = (mean(&same), mean(&different));
    assert!(s < d, "same identity {s:.4e}, different identities {d:.4e}");
}

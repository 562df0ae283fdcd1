mod common;

use kpbe::config::ModelConfig;
use kpbe::frame::{FrameSequence, ImageTensor};
use kpbe::geometry::{HeadPose, RotationMatrix};
use kpbe::metrics::{self, Image8};
use kpbe::model::Kpbe;
use kpbe::pipeline::toy::{render_frame, HeadStyle};
use kpbe::pipeline::{
    enhance, enhance_frames, reenact_novel_view, reenact_pose_sequence, synthesize_toy_dataset, SceneFrame,
    SequenceBackend,
};
use kpbe::training::{train_stage1, OptimizerConfig, TrainConfig};

fn mirrored(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(c, y, x, img.get(c, y, img.width() - 1 - x));
            }
        }
    }
    out
}

fn l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).sum()
}

fn yawed(yaw: f64) -> SceneFrame {
    SceneFrame {
        yaw,
        ..SceneFrame::frontal(0.5)
    }
}

#[test]
fn opposite_yaws_render_near_mirror_images() {
    let style = HeadStyle::from_seed(8);
    let left = render_frame(&style, &yawed(30f64.to_radians()), 64).unwrap();
    let right = render_frame(&style, &yawed(-30f64.to_radians()), 64).unwrap();
    assert!(l1(&mirrored(&left), &right) < l1(&left, &right));
}

fn toy_clip(seed: u64, n: usize) -> FrameSequence {
    synthesize_toy_dataset(&kpbe::pipeline::toy::talking_clip(seed, n, 0.4, 64))
        .unwrap()
        .frames
}

#[test]
fn user_pose_equal_to_the_driver_estimate_reproduces_enhance() {
    let model = Kpbe::new(ModelConfig::default(), 21).unwrap();
    let clip = toy_clip(21, 3);
    let source = &clip.frames()[0];
    let plain = enhance_frames(&model, source, &mut SequenceBackend::new(clip.clone()), &clip).unwrap();
    for (t, frame) in clip.frames().iter().enumerate() {
        let pose = model.estimate_pose_expression(frame).unwrap().pose;
        let backend = FrameSequence::new(vec![frame.clone()]).unwrap();
        let novel = reenact_pose_sequence(&model, source, &mut SequenceBackend::new(backend), &[pose]).unwrap();
        for (a, b) in novel[0].k_d.points().iter().zip(plain[t].k_d.points()) {
            assert!(common::max_abs_diff(&a.to_array(), &b.to_array()) <= 1e-6);
        }
    }
}

#[test]
fn driving_keypoints_follow_a_user_rotation_exactly() {
    let model = Kpbe::new(ModelConfig::default(), 22).unwrap();
    let clip = toy_clip(22, 2);
    let source = &clip.frames()[0];
    let r = common::euler(30f64.to_radians(), 0.0, 0.0);
    let t = [0.05, 0.0, -0.02];
    let pose = HeadPose::new(RotationMatrix::new(r).unwrap(), t).unwrap();
    let frames = reenact_pose_sequence(&model, source, &mut SequenceBackend::new(clip.clone()), &[pose; 2]).unwrap();
    let canonical: Vec<[f64; 3]> = model
        .estimate_canonical_keypoints(source)
        .unwrap()
        .points()
        .iter()
        .map(|k| k.to_array())
        .collect();
    for (f, b) in frames.iter().zip(clip.frames()) {
        let exp = model.estimate_pose_expression(b).unwrap().expression;
        let want = common::compose(&canonical, &r, t, exp.deltas());
        for (g, w) in f.k_d.points().iter().zip(&want) {
            assert!(common::max_abs_diff(&g.to_array(), w) <= 1e-12);
        }
    }
}

#[test]
fn keypoint_x_moves_monotonically_over_a_yaw_sweep() {
    let model = Kpbe::new(ModelConfig::default(), 23).unwrap();
    let clip = toy_clip(23, 1);
    let source = &clip.frames()[0];
    let yaws: Vec<f64> = (-45..=45).step_by(15).map(|d| f64::from(d).to_radians()).collect();
    let poses: Vec<HeadPose> = yaws.iter().map(|&y| HeadPose::from_euler(y, 0.0, 0.0, [0.0; 3]).unwrap()).collect();
    let backend = FrameSequence::new(vec![source.clone(); poses.len()]).unwrap();
    let frames = reenact_pose_sequence(&model, source, &mut SequenceBackend::new(backend), &poses).unwrap();
    let exp = model.estimate_pose_expression(source).unwrap().expression;
    let canonical = model.estimate_canonical_keypoints(source).unwrap();
    for k in 0..canonical.len() {
        // x = cos(yaw)·x' + sin(yaw)·z' is monotone on [-45°, 45°] when the
        // point sits in front of or behind the vertical axis by enough.
        let p = canonical.points()[k].to_array();
        let q = [p[0] + exp.deltas()[k][0], p[2] + exp.deltas()[k][2]];
        if q[1].abs() < q[0].abs() * 1.01 {
            continue;
        }
        let xs: Vec<f64> = frames.iter().map(|f| f.k_d.points()[k].x).collect();
        let up = xs.windows(2).all(|w| w[1] > w[0]);
        let down = xs.windows(2).all(|w| w[1] < w[0]);
        assert!(up || down, "keypoint {k}: {xs:?}");
    }
}

#[test]
fn enhancement_is_deterministic_and_truncates() {
    let model = Kpbe::new(ModelConfig::default(), 24).unwrap();
    let clip = toy_clip(24, 3);
    let source = &clip.frames()[0];
    let run = || enhance(&model, source, &mut SequenceBackend::new(clip.truncated(2)), &clip).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    let novel = reenact_novel_view(&model, source, &mut SequenceBackend::new(clip.clone()), &HeadPose::IDENTITY).unwrap();
    assert_eq!(novel.len(), clip.len());
}

#[test]
fn repeated_source_is_reconstructed_after_overfitting() {
    let clip = toy_clip(25, 4);
    let source = clip.frames()[0].clone();
    let repeated = FrameSequence::new(vec![source.clone(); 4]).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: 1000,
            ..OptimizerConfig::default()
        },
        max_steps: Some(150),
        seed: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let trained = train_stage1(Kpbe::new(ModelConfig::default(), 25).unwrap(), &[clip], &cfg).unwrap();
    let out = enhance(&trained.checkpoint.model, &source, &mut SequenceBackend::new(repeated.clone()), &repeated).unwrap();
    for frame in out.frames() {
        let psnr = metrics::psnr(&Image8::from_image(frame), &Image8::from_image(&source)).unwrap();
        assert!(psnr.db() > 20.0, "PSNR {psnr:?}");
    }
}

//! End-to-end orchestration: frame I/O, backends, the toy dataset, run
//! configuration, and the enhancement / novel-view entry points.

pub mod config;
pub mod io;
pub mod toy;

pub use config::RunConfig;
pub use io::{file_backend, load_frames, write_frames, BackendSource, SequenceBackend};
pub use toy::{synthesize_toy_dataset, SceneFrame, SyntheticClip, SyntheticSceneParams};

use crate::error::{KpbeError, Result};
use crate::frame::{FrameSequence, ImageTensor};
use crate::geometry::{override_pose, HeadPose, RotationMatrix};
use crate::metrics::SelfReenactor;
use crate::model::{Kpbe, SynthesizedFrame};

/// Pairs backend frames with pose-driver frames, truncating to the shorter
/// stream with a warning.
fn drain_backend(backend: &mut dyn BackendSource, limit: usize) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(limit);
    while out.len() < limit {
        match backend.next_frame() {
            Ok(f) => out.push(f),
            Err(KpbeError::EndOfStream) => break,
            Err(e) => return Err(e),
        }
    }
    if out.len() < limit {
        log::warn!(
            "backend ended after {} frames, pose driver has {limit}; truncating",
            out.len()
        );
    } else if backend.remaining().is_some_and(|r| r > 0) {
        log::warn!(
            "backend has {} frames beyond the pose driver's {limit}; truncating",
            backend.remaining().unwrap_or(0)
        );
    }
    if out.is_empty() {
        return Err(KpbeError::invalid("backend produced no frames"));
    }
    Ok(out)
}

/// Per-frame results of [`enhance`], including driving keypoints.
pub fn enhance_frames(
    model: &Kpbe,
    source: &ImageTensor,
    backend: &mut dyn BackendSource,
    pose_driver: &FrameSequence,
) -> Result<Vec<SynthesizedFrame>> {
    let src = model.encode_source(source)?;
    let backend_frames = drain_backend(backend, pose_driver.len())?;
    backend_frames
        .iter()
        .zip(pose_driver.frames())
        .map(|(b, p)| {
            let expression = model.estimate_pose_expression(b)?.expression;
            let pose = model.estimate_pose_expression(p)?.pose;
            model.synthesize(&src, &pose, &expression)
        })
        .collect()
}

/// Expression from the backend frames, head pose from the pose driver,
/// identity from the source image (encoded once).
pub fn enhance(
    model: &Kpbe,
    source: &ImageTensor,
    backend: &mut dyn BackendSource,
    pose_driver: &FrameSequence,
) -> Result<FrameSequence> {
    let frames = enhance_frames(model, source, backend, pose_driver)?;
    FrameSequence::new(frames.into_iter().map(|f| f.image).collect())
}

/// One user pose per output frame; the backend still supplies expression.
pub fn reenact_pose_sequence(
    model: &Kpbe,
    source: &ImageTensor,
    backend: &mut dyn BackendSource,
    poses: &[HeadPose],
) -> Result<Vec<SynthesizedFrame>> {
    if poses.is_empty() {
        return Err(KpbeError::invalid("at least one user pose is required"));
    }
    let src = model.encode_source(source)?;
    let backend_frames = drain_backend(backend, poses.len())?;
    backend_frames
        .iter()
        .zip(poses)
        .map(|(b, user)| {
            let est = model.estimate_pose_expression(b)?;
            model.synthesize(&src, &override_pose(&est.pose, user), &est.expression)
        })
        .collect()
}

/// Free-viewpoint synthesis: the user pose replaces the driving pose in
/// every frame.
pub fn reenact_novel_view(
    model: &Kpbe,
    source: &ImageTensor,
    backend: &mut dyn BackendSource,
    user_pose: &HeadPose,
) -> Result<FrameSequence> {
    let n = backend.remaining().unwrap_or(1).max(1);
    let frames = reenact_pose_sequence(model, source, backend, &vec![*user_pose; n])?;
    FrameSequence::new(frames.into_iter().map(|f| f.image).collect())
}

/// [`reenact_novel_view`] from a raw matrix, validated before any synthesis.
pub fn reenact_novel_view_matrix(
    model: &Kpbe,
    source: &ImageTensor,
    backend: &mut dyn BackendSource,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
) -> Result<FrameSequence> {
    let pose = HeadPose::new(RotationMatrix::new(rotation)?, translation)?;
    reenact_novel_view(model, source, backend, &pose)
}

impl SelfReenactor for Kpbe {
    fn self_reenact(&self, source: &ImageTensor, clip: &FrameSequence) -> Result<FrameSequence> {
        enhance(self, source, &mut SequenceBackend::new(clip.clone()), clip)
    }
}

//! PNG frame directories (`frame_000001.png`, `frame_000002.png`, ...) and
//! backend frame providers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{KpbeError, Result};
use crate::frame::{FrameSequence, ImageTensor};

const PREFIX: &str = "frame_";
const SUFFIX: &str = ".png";

/// File name of the `index`-th frame (1-based).
pub fn frame_file_name(index: usize) -> String {
    format!("{PREFIX}{index:06}{SUFFIX}")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix(PREFIX)?.strip_suffix(SUFFIX)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn frames_error(path: &Path, msg: impl Into<String>) -> KpbeError {
    KpbeError::Frames {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Numbered frame files of `dir` in order; other files are ignored.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| frames_error(dir, format!("cannot read directory: {e}")))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        if let Some(i) = name.to_str().and_then(frame_index) {
            indexed.push((i, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(frames_error(dir, "no frame_NNNNNN.png files"));
    }
    indexed.sort();
    for (expected, (i, _)) in (1..).zip(&indexed) {
        if *i != expected {
            let msg = if *i < expected {
                format!("duplicate frame number {i}")
            } else {
                format!("missing {} (numbering jumps to {i})", frame_file_name(expected))
            };
            return Err(frames_error(dir, msg));
        }
    }
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

pub fn read_frame(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| frames_error(path, format!("unreadable image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ImageTensor::from_rgb8(h as usize, w as usize, img.as_raw())
}

/// Loads a frame directory, resized (bilinear) to `resolution` square.
pub fn load_frames_at(dir: &Path, resolution: usize) -> Result<FrameSequence> {
    let paths = list_frames(dir)?;
    let mut frames = Vec::with_capacity(paths.len());
    let mut size = None;
    for p in &paths {
        let f = read_frame(p)?;
        let dims = (f.height(), f.width());
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(frames_error(
                    p,
                    format!("frame is {}x{}, earlier frames are {}x{}", dims.0, dims.1, s.0, s.1),
                ))
            }
            Some(_) => {}
        }
        frames.push(f.resized(resolution, resolution));
    }
    FrameSequence::new(frames)
}

/// Loads a frame directory at the default 64×64 resolution.
pub fn load_frames(dir: &Path) -> Result<FrameSequence> {
    load_frames_at(dir, 64)
}

pub fn write_frame(path: &Path, frame: &ImageTensor) -> Result<()> {
    image::save_buffer(
        path,
        &frame.to_rgb8(),
        frame.width() as u32,
        frame.height() as u32,
        image::ColorType::Rgb8,
    )?;
    Ok(())
}

/// Writes `frame_000001.png`, ... into `dir`, creating it if needed.
pub fn write_frames(dir: &Path, frames: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.frames().iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i + 1)), f)?;
    }
    Ok(())
}

/// Supplies the intermediate (lip-synced) frames that drive expression.
pub trait BackendSource {
    /// The next frame, or [`KpbeError::EndOfStream`] once exhausted.
    fn next_frame(&mut self) -> Result<ImageTensor>;

    /// Frames left, when known.
    fn remaining(&self) -> Option<usize>;
}

/// Streams an in-memory sequence.
#[derive(Clone, Debug)]
pub struct SequenceBackend {
    frames: FrameSequence,
    next: usize,
}

impl SequenceBackend {
    pub fn new(frames: FrameSequence) -> Self {
        Self { frames, next: 0 }
    }
}

impl BackendSource for SequenceBackend {
    fn next_frame(&mut self) -> Result<ImageTensor> {
        let f = self.frames.get(self.next).cloned().ok_or(KpbeError::EndOfStream)?;
        self.next += 1;
        Ok(f)
    }

    fn remaining(&self) -> Option<usize> {
        Some(self.frames.len() - self.next)
    }
}

/// Backend output precomputed into a frame directory.
pub fn file_backend(dir: &Path) -> Result<SequenceBackend> {
    Ok(SequenceBackend::new(load_frames(dir)?))
}

/// [`file_backend`] at a given resolution.
pub fn file_backend_at(dir: &Path, resolution: usize) -> Result<SequenceBackend> {
    Ok(SequenceBackend::new(load_frames_at(dir, resolution)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> FrameSequence {
        FrameSequence::new(
            (0..n)
                .map(|i| ImageTensor::filled(8, 8, [i as f32 / n as f32, 0.25, 0.75]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn file_names_parse_back() {
        assert_eq!(frame_file_name(7), "frame_000007.png");
        assert_eq!(frame_index("frame_000007.png"), Some(7));
        assert_eq!(frame_index("frame_.png"), None);
        assert_eq!(frame_index("labels.json"), None);
    }

    #[test]
    fn write_then_load_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq(10);
        write_frames(dir.path(), &s).unwrap();
        let back = load_frames_at(dir.path(), 8).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in s.frames().iter().zip(back.frames()) {
            let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(worst <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn a_gap_in_the_numbering_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &seq(5)).unwrap();
        fs::remove_file(dir.path().join(frame_file_name(3))).unwrap();
        let err = load_frames(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_000003.png"), "{err}");
    }

    #[test]
    fn empty_and_inconsistent_directories_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(dir.path()), Err(KpbeError::Frames { .. })));
        write_frames(dir.path(), &seq(2)).unwrap();
        write_frame(&dir.path().join(frame_file_name(3)), &ImageTensor::filled(4, 4, [0.0; 3])).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(KpbeError::Frames { .. })));
        fs::write(dir.path().join(frame_file_name(3)), b"not a png").unwrap();
        assert!(matches!(load_frames(dir.path()), Err(KpbeError::Frames { .. })));
    }

    #[test]
    fn backend_signals_end_of_stream() {
        let mut b = SequenceBackend::new(seq(2));
        assert_eq!(b.remaining(), Some(2));
        b.next_frame().unwrap();
        b.next_frame().unwrap();
        assert!(matches!(b.next_frame(), Err(KpbeError::EndOfStream)));
    }
}

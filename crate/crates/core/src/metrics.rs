//! Objective image quality: MSE, PSNR, SSIM, and the self-reenactment
//! evaluation protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{KpbeError, Result};
use crate::frame::{FrameSequence, ImageTensor};

/// An 8-bit image, channel-interleaved (`data[(y * width + x) * channels + c]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(KpbeError::invalid(format!("images need 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(KpbeError::shape(format!(
                "{} bytes for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn rgb(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, 3, data)
    }

    /// Quantizes a float image as `round(v·255)`.
    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: 3,
            data: img.to_rgb8(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// BT.601 luma for colour images, the raw values for grayscale.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| f64::from(v)).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect()
    }

    fn check_same_shape(&self, other: &Image8) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(KpbeError::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

/// Mean squared error over all pixels and channels.
pub fn mse(s: &Image8, g: &Image8) -> Result<f64> {
    s.check_same_shape(g)?;
    let sum: f64 = s
        .data
        .iter()
        .zip(&g.data)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / s.data.len() as f64)
}

/// A PSNR value, or the marker for a pair with zero error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    /// Decibels, with identical pairs as `+∞`.
    pub fn db(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("inf"),
        }
    }
}

pub const PEAK: f64 = 255.0;

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Finite(10.0 * (PEAK * PEAK / mse).log10())
    }
}

pub fn psnr(s: &Image8, g: &Image8) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(s, g)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
pub const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
pub const SSIM_C3: f64 = SSIM_C2 / 2.0;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Valid-region separable Gaussian filter.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11×11 Gaussian windows inside the image, computed on
/// luma for colour input.
pub fn ssim(s: &Image8, g: &Image8) -> Result<f64> {
    s.check_same_shape(g)?;
    let (h, w) = (s.height, s.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(KpbeError::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (a, b) = (s.luma(), g.luma());
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &taps);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &taps);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        // contrast times structure, with C3 = C2 / 2
        let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        total += l * cs;
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameQuality {
    pub index: usize,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Per-frame and mean quality of a synthesized sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport {
    /// Mean over frames with finite PSNR; `None` when every frame is identical.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub frames: Vec<FrameQuality>,
    pub identical_frames: usize,
    pub frame_count: usize,
    /// Index of the source frame, for self-reenactment reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_index: Option<usize>,
}

impl QualityReport {
    pub fn from_frames(frames: Vec<FrameQuality>) -> Result<Self> {
        if frames.is_empty() {
            return Err(KpbeError::invalid("a quality report needs at least one frame"));
        }
        let finite: Vec<f64> = frames.iter().filter_map(|f| f.psnr.finite()).collect();
        let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / frames.len() as f64;
        Ok(Self {
            mean_psnr,
            mean_ssim,
            identical_frames: frames.len() - finite.len(),
            frame_count: frames.len(),
            frames,
            source_index: None,
        })
    }

    /// Compares predictions to ground truth frame by frame.
    pub fn compare(pred: &[ImageTensor], truth: &[ImageTensor]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(KpbeError::invalid(format!(
                "{} predicted frames for {} ground-truth frames",
                pred.len(),
                truth.len()
            )));
        }
        let frames = pred
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(index, (p, t))| {
                let (p, t) = (Image8::from_image(p), Image8::from_image(t));
                Ok(FrameQuality {
                    index,
                    psnr: psnr(&t, &p)?,
                    ssim: ssim(&t, &p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_frames(frames)
    }

    pub fn psnr_values(&self) -> Vec<Psnr> {
        self.frames.iter().map(|f| f.psnr).collect()
    }

    pub fn ssim_values(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.ssim).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `index,psnr,ssim` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "psnr", "ssim"])?;
        for f in &self.frames {
            let p = f.psnr.finite().map_or_else(|| "inf".to_string(), |v| v.to_string());
            w.write_record([f.index.to_string(), p, f.ssim.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| KpbeError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Anything that can re-synthesize a clip from one of its frames, driving
/// pose and expression with the clip itself.
pub trait SelfReenactor {
    fn self_reenact(&self, source: &ImageTensor, clip: &FrameSequence) -> Result<FrameSequence>;
}

/// Output equals the driving frames; the reference point of the protocol.
pub struct Passthrough;

impl SelfReenactor for Passthrough {
    fn self_reenact(&self, _source: &ImageTensor, clip: &FrameSequence) -> Result<FrameSequence> {
        Ok(clip.clone())
    }
}

/// Picks the source frame with a seeded RNG.
pub fn choose_source_index(len: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..len)
}

/// One frame of `clip` (chosen from `seed`) is the source; every frame of
/// the clip drives pose and expression and is the ground truth.
pub fn evaluate_self_reenactment(model: &dyn SelfReenactor, clip: &FrameSequence, seed: u64) -> Result<QualityReport> {
    if clip.len() < 2 {
        return Err(KpbeError::invalid(format!(
            "self-reenactment needs a clip of at least 2 frames, got {}",
            clip.len()
        )));
    }
    let index = choose_source_index(clip.len(), seed);
    let out = model.self_reenact(&clip.frames()[index], clip)?;
    let mut report = QualityReport::compare(out.frames(), clip.frames())?;
    report.source_index = Some(index);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: &[u8], side: usize) -> Image8 {
        Image8::gray(side, side, v.to_vec()).unwrap()
    }

    #[test]
    fn mse_golden_values() {
        let zeros = gray(&[0; 16], 4);
        let full = gray(&[255; 16], 4);
        assert_eq!(mse(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(mse(&zeros, &full).unwrap(), 65025.0);
        assert_eq!(mse(&zeros, &gray(&[1; 16], 4)).unwrap(), 1.0);
        assert!(mse(&zeros, &gray(&[0; 9], 3)).is_err());
    }

    #[test]
    fn psnr_golden_values() {
        let zeros = gray(&[0; 16], 4);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), Psnr::Identical);
        assert_eq!(psnr(&zeros, &gray(&[255; 16], 4)).unwrap(), Psnr::Finite(0.0));
        let one = psnr(&zeros, &gray(&[1; 16], 4)).unwrap().db();
        assert!((one - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn ssim_of_constant_images_has_a_closed_form() {
        let a = gray(&[0; 256], 16);
        let b = gray(&[255; 256], 16);
        let expect = SSIM_C1 / (PEAK * PEAK + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_needs_a_full_window() {
        let a = gray(&[0; 100], 10);
        assert!(matches!(ssim(&a, &a), Err(KpbeError::InvalidArgument(_))));
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn report_excludes_identical_frames_from_the_psnr_mean() {
        let frames = vec![
            FrameQuality { index: 0, psnr: Psnr::Identical, ssim: 1.0 },
            FrameQuality { index: 1, psnr: Psnr::Finite(30.0), ssim: 0.8 },
            FrameQuality { index: 2, psnr: Psnr::Finite(20.0), ssim: 0.6 },
        ];
        let r = QualityReport::from_frames(frames).unwrap();
        assert_eq!(r.mean_psnr, Some(25.0));
        assert!((r.mean_ssim - 0.8).abs() < 1e-12);
        assert_eq!(r.identical_frames, 1);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["frames"][0]["psnr"], "inf");
        assert!(r.to_csv().unwrap().starts_with("index,psnr,ssim\n0,inf,1\n"));
    }

    #[test]
    fn passthrough_scores_perfectly() {
        let frames: Vec<ImageTensor> = (0..3)
            .map(|i| ImageTensor::filled(16, 16, [0.1 * i as f32, 0.5, 0.2]))
            .collect();
        let clip = FrameSequence::new(frames).unwrap();
        let r = evaluate_self_reenactment(&Passthrough, &clip, 4).unwrap();
        assert_eq!(r.mean_ssim, 1.0);
        assert_eq!(r.identical_frames, 3);
        assert_eq!(r.mean_psnr, None);
        let short = FrameSequence::new(vec![ImageTensor::filled(16, 16, [0.0; 3])]).unwrap();
        assert!(evaluate_self_reenactment(&Passthrough, &short, 4).is_err());
    }
}

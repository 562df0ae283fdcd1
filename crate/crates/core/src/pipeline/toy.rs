//! Procedural "heads" for desk-scale training and tests: a shaded ellipsoid
//! with two eyes, a mouth whose height follows an openness value, and a
//! specular highlight from a fixed light, ray-cast under a head pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{KpbeError, Result};
use crate::frame::{FrameSequence, ImageTensor};
use crate::geometry::{euler_to_rotation, HeadPose, RotationMatrix};

/// Pose and mouth state of one rendered frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// In `[0, 1]`.
    pub openness: f64,
    /// Image-plane shift in normalized units; `z` is ignored by the
    /// orthographic camera.
    pub translation: [f64; 3],
}

impl SceneFrame {
    pub fn frontal(openness: f64) -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            openness,
            translation: [0.0; 3],
        }
    }

    pub fn pose(&self) -> Result<HeadPose> {
        HeadPose::from_euler(self.yaw, self.pitch, self.roll, self.translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneParams {
    pub identity_seed: u64,
    pub frames: Vec<SceneFrame>,
    pub resolution: usize,
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        let bounds = ModelConfig::default();
        if self.frames.is_empty() {
            return Err(KpbeError::invalid("a synthetic scene needs at least one frame"));
        }
        if self.resolution < 8 {
            return Err(KpbeError::invalid(format!("resolution {} is too small", self.resolution)));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let ok = f.yaw.abs() <= bounds.yaw_bound
                && f.pitch.abs() <= bounds.pitch_bound
                && f.roll.abs() <= bounds.roll_bound
                && (0.0..=1.0).contains(&f.openness)
                && f.translation.iter().all(|t| t.abs() <= 1.0);
            if !ok {
                return Err(KpbeError::invalid(format!("scene frame {i} is out of bounds: {f:?}")));
            }
        }
        Ok(())
    }
}

/// Per-frame ground truth of a rendered clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub pose: HeadPose,
    pub openness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub frames: FrameSequence,
    pub labels: Vec<SceneLabel>,
}

/// Identity-dependent appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadStyle {
    pub semi_axes: [f64; 3],
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub eye_spacing: f64,
}

impl HeadStyle {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            semi_axes: [u(0.50, 0.62), u(0.66, 0.78), u(0.50, 0.60)],
            skin: [u(0.65, 0.95), u(0.45, 0.75), u(0.35, 0.60)],
            background: [u(0.10, 0.30), u(0.15, 0.35), u(0.30, 0.50)],
            eye_spacing: u(0.30, 0.40),
        }
    }
}

const EYE_COLOR: [f64; 3] = [0.08, 0.08, 0.12];
const MOUTH_COLOR: [f64; 3] = [0.55, 0.08, 0.12];
/// Light direction (towards the light) in camera space: above and in front.
const LIGHT: [f64; 3] = [0.0, -0.45, -0.893];
const SUPERSAMPLE: usize = 3;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Colour seen along the ray through normalized image point `(u, v)`
/// (`u` to the right, `v` downwards), looking along `+z`, and whether the
/// ray hits the area around the mouth.
fn shade(style: &HeadStyle, rot: &RotationMatrix, frame: &SceneFrame, u: f64, v: f64) -> ([f64; 3], bool) {
    let rt = rot.transpose();
    let t = frame.translation;
    // Ray origin far in front of the head, direction +z, both in head space.
    let o = rt.apply([u - t[0], v - t[1], -10.0]);
    let d = rt.apply([0.0, 0.0, 1.0]);
    let inv = style.semi_axes.map(|s| 1.0 / (s * s));
    let qa = d[0] * d[0] * inv[0] + d[1] * d[1] * inv[1] + d[2] * d[2] * inv[2];
    let qb = 2.0 * (o[0] * d[0] * inv[0] + o[1] * d[1] * inv[1] + o[2] * d[2] * inv[2]);
    let qc = o[0] * o[0] * inv[0] + o[1] * o[1] * inv[1] + o[2] * o[2] * inv[2] - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return (style.background, false);
    }
    let s = (-qb - disc.sqrt()) / (2.0 * qa);
    let q = [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]];
    let [a, b, _] = style.semi_axes;

    let mut albedo = style.skin;
    let front = q[2] < 0.0;
    let near_mouth = front && (q[0] / (0.5 * a)).abs() <= 1.0 && (q[1] - 0.42 * b).abs() <= 0.28 * b;
    if front {
        let openness = frame.openness;
        for side in [-1.0, 1.0] {
            let (ex, ey) = (side * style.eye_spacing * a, -0.22 * b);
            if ((q[0] - ex) / (0.16 * a)).powi(2) + ((q[1] - ey) / (0.12 * b)).powi(2) <= 1.0 {
                albedo = EYE_COLOR;
            }
        }
        let half_h = 0.03 * b + 0.14 * b * openness;
        if (q[0] / (0.34 * a)).abs() <= 1.0 && (q[1] - 0.42 * b).abs() <= half_h {
            albedo = MOUTH_COLOR;
        }
    }

    let n_head = normalize([q[0] * inv[0], q[1] * inv[1], q[2] * inv[2]]);
    let n = rot.apply(n_head);
    let l = LIGHT;
    let diffuse = dot(n, l).max(0.0);
    // Blinn-Phong with the viewer at -z.
    let h = normalize([l[0], l[1], l[2] - 1.0]);
    let spec = dot(n, h).max(0.0).powi(40) * 0.35;
    (albedo.map(|c| (c * (0.3 + 0.7 * diffuse) + spec).clamp(0.0, 1.0)), near_mouth)
}

/// Renders one frame with `SUPERSAMPLE²` samples per pixel.
pub fn render_frame(style: &HeadStyle, frame: &SceneFrame, resolution: usize) -> Result<ImageTensor> {
    Ok(render_with_mouth_weight(style, frame, resolution)?.0)
}

/// The rendered frame and, per pixel, the fraction of samples that hit the
/// area around the mouth.
fn render_with_mouth_weight(style: &HeadStyle, frame: &SceneFrame, resolution: usize) -> Result<(ImageTensor, Vec<f32>)> {
    let rot = euler_to_rotation(frame.yaw, frame.pitch, frame.roll)?;
    let mut img = ImageTensor::filled(resolution, resolution, [0.0; 3]);
    let mut weight = vec![0.0f32; resolution * resolution];
    let n = resolution as f64;
    let ss = SUPERSAMPLE as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0.0; 3];
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((x as f64 + (sx as f64 + 0.5) / ss) / n) * 2.0 - 1.0;
                    let v = ((y as f64 + (sy as f64 + 0.5) / ss) / n) * 2.0 - 1.0;
                    let (c, mouth) = shade(style, &rot, frame, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                    hits += usize::from(mouth);
                }
            }
            for (k, a) in acc.iter().enumerate() {
                img.set(k, y, x, (a / (ss * ss)) as f32);
            }
            weight[y * resolution + x] = hits as f32 / (ss * ss) as f32;
        }
    }
    Ok((img, weight))
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &ImageTensor, horizontal: bool| {
        let mut out = src.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in (-r..=r).zip(&taps) {
                        let (yy, xx) = if horizontal { (y, (x + k).clamp(0, w - 1)) } else { ((y + k).clamp(0, h - 1), x) };
                        acc += t * f64::from(src.get(c, yy as usize, xx as usize));
                    }
                    out.set(c, y as usize, x as usize, (acc / norm) as f32);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// The clip with the region around the mouth Gaussian-blurred: a stand-in
/// for a backend whose lip region is soft.
pub fn blurred_mouth_clip(params: &SyntheticSceneParams, sigma: f64) -> Result<FrameSequence> {
    params.validate()?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(KpbeError::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let style = HeadStyle::from_seed(params.identity_seed);
    let frames = params
        .frames
        .iter()
        .map(|f| {
            let (img, weight) = render_with_mouth_weight(&style, f, params.resolution)?;
            let blurred = gaussian_blur(&img, sigma);
            let mut out = img.clone();
            let side = params.resolution;
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let m = weight[y * side + x];
                        out.set(c, y, x, img.get(c, y, x) * (1.0 - m) + blurred.get(c, y, x) * m);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Renders every frame of `params`, with per-frame ground truth.
pub fn synthesize_toy_dataset(params: &SyntheticSceneParams) -> Result<SyntheticClip> {
    params.validate()?;
    let style = HeadStyle::from_seed(params.identity_seed);
    let mut frames = Vec::with_capacity(params.frames.len());
    let mut labels = Vec::with_capacity(params.frames.len());
    for f in &params.frames {
        frames.push(render_frame(&style, f, params.resolution)?);
        labels.push(SceneLabel {
            pose: f.pose()?,
            openness: f.openness,
        });
    }
    Ok(SyntheticClip {
        frames: FrameSequence::new(frames)?,
        labels,
    })
}

/// A talking-head style clip: yaw sweeps within `±max_yaw`, mouth opens and
/// closes, small pitch and roll wobble.
pub fn talking_clip(identity_seed: u64, frames: usize, max_yaw: f64, resolution: usize) -> SyntheticSceneParams {
    let frames = (0..frames)
        .map(|i| {
            let t = i as f64 / frames.max(1) as f64 * std::f64::consts::TAU;
            SceneFrame {
                yaw: max_yaw * t.sin(),
                pitch: 0.08 * (2.0 * t).sin(),
                roll: 0.05 * t.cos(),
                openness: 0.5 - 0.5 * (3.0 * t).cos(),
                translation: [0.0; 3],
            }
        })
        .collect();
    SyntheticSceneParams {
        identity_seed,
        frames,
        resolution,
    }
}

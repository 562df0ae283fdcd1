//! The three extractors applied to face images: canonical keypoints, the 3D
//! appearance feature volume, and head pose plus expression.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{KpbeError, Result};
use crate::geometry::{euler_rotation_var, ExpressionDeform, HeadPose, KeypointSet, RotationMatrix, NUM_KEYPOINTS};
use crate::grid::VoxelGrid;
use crate::tensor::nn::{Conv2d, Conv3d, Linear, ParamStore, Scope};
use crate::tensor::{Real, Tensor, Var};

const LEAK: f64 = 0.2;

fn act<T: Real>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(T::from_f64_lossy(LEAK))
}

/// `C x D x H' x W'` appearance features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    tensor: Tensor<f32>,
}

impl FeatureVolume {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.ndim() != 4 {
            return Err(KpbeError::shape(format!(
                "feature volume must be (C, D, H, W), got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(KpbeError::invalid("feature volume has non-finite values"));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// `K x D x H' x W'` keypoint heatmaps; each channel is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume<T: Real> {
    tensor: Tensor<T>,
}

impl<T: Real> HeatmapVolume<T> {
    /// Wraps a `(K, D, H, W)` tensor; normalization is checked by [`soft_argmax`].
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.ndim() != 4 || tensor.shape()[0] != NUM_KEYPOINTS {
            return Err(KpbeError::shape(format!(
                "heatmap must be ({NUM_KEYPOINTS}, D, H, W), got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn grid(&self) -> VoxelGrid {
        let s = self.tensor.shape();
        VoxelGrid::new(s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseExpressionEstimate {
    pub pose: HeadPose,
    pub expression: ExpressionDeform,
}

/// Channel sums of a normalized heatmap may drift this far before
/// [`soft_argmax`] refuses it.
pub const HEATMAP_NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Expected coordinate of each heatmap channel over the voxel grid.
pub fn soft_argmax<T: Real>(heatmap: &HeatmapVolume<T>) -> Result<KeypointSet> {
    let grid = heatmap.grid();
    let t = heatmap.tensor();
    for (k, channel) in t.data().chunks_exact(grid.len()).enumerate() {
        let sum: f64 = channel.iter().map(|v| v.to_f64_lossy()).sum();
        let negative = channel.iter().any(|v| *v < T::zero());
        if negative || (sum - 1.0).abs() > HEATMAP_NORMALIZATION_TOLERANCE {
            return Err(KpbeError::Contract(format!(
                "heatmap channel {k} is not a distribution (sum {sum:.6}, negative entries: {negative})"
            )));
        }
    }
    let heat = Var::constant(t.reshape(&[1, NUM_KEYPOINTS, grid.len()]));
    KeypointSet::from_tensor(soft_argmax_var(&heat, &grid).value())
}

/// Differentiable soft-argmax: `(n, K, V)` distributions to `(n, K, 3)` points.
pub fn soft_argmax_var<T: Real>(heat: &Var<T>, grid: &VoxelGrid) -> Var<T> {
    let s = heat.shape().to_vec();
    assert_eq!(s.len(), 3, "heatmap must be (n, K, V)");
    assert_eq!(s[2], grid.len(), "heatmap voxel count does not match grid");
    let coords = Var::constant(grid.coords::<T>());
    heat.reshape(&[s[0] * s[1], s[2]])
        .matmul(&coords)
        .reshape(&[s[0], s[1], 3])
}

/// Canonical keypoints: strided convolutions down to 1/8 resolution, a lift
/// to `K·D` channels, bilinear upsampling to the feature grid, a spatial
/// softmax per keypoint and soft-argmax.
#[derive(Clone, Debug)]
pub struct KeypointEstimator {
    convs: [Conv2d; 3],
    head: Conv2d,
    grid: VoxelGrid,
    temperature: f64,
}

pub struct KeypointOutput<T: Real> {
    /// `(n, K, V)` normalized heatmaps.
    pub heatmap: Var<T>,
    /// `(n, K, 3)`.
    pub keypoints: Var<T>,
}

impl KeypointEstimator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let chans = [3, 16, 32, 64];
        let convs = [0, 1, 2].map(|i| {
            Conv2d::new(store, rng, &format!("kp.conv{i}"), chans[i], chans[i + 1], 3, 2, true)
        });
        let head = Conv2d::new(store, rng, "kp.head", 64, cfg.keypoints * cfg.depth, 1, 1, true);
        Self {
            convs,
            head,
            grid: cfg.grid(),
            temperature: cfg.heatmap_temperature,
        }
    }

    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, image: &Var<T>) -> KeypointOutput<T> {
        let n = image.shape()[0];
        let mut x = image.clone();
        for c in &self.convs {
            x = act(&c.forward(scope, &x));
        }
        let logits = self.head.forward(scope, &x);
        let g = self.grid;
        let logits = logits
            .upsample_bilinear(g.height, g.width)
            .reshape(&[n, NUM_KEYPOINTS, g.len()])
            .scale(T::from_f64_lossy(1.0 / self.temperature));
        let heatmap = logits.softmax(2);
        let keypoints = soft_argmax_var(&heatmap, &g);
        KeypointOutput { heatmap, keypoints }
    }
}

/// 3D appearance features: two strided convolutions, a channel lift reshaped
/// into a `C x D` volume, and two bottleneck residual 3D blocks.
#[derive(Clone, Debug)]
pub struct AppearanceEstimator {
    convs: [Conv2d; 2],
    lift: Conv2d,
    blocks: [(Conv3d, Conv3d); 2],
    channels: usize,
    depth: usize,
}

impl AppearanceEstimator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let convs = [
            Conv2d::new(store, rng, "app.conv0", 3, 32, 3, 2, true),
            Conv2d::new(store, rng, "app.conv1", 32, 64, 3, 2, true),
        ];
        let lift = Conv2d::new(store, rng, "app.lift", 64, cfg.channels * cfg.depth, 1, 1, true);
        let bottleneck = (cfg.channels / 2).max(1);
        let blocks = [0, 1].map(|i| {
            (
                Conv3d::new(store, rng, &format!("app.res{i}.a"), cfg.channels, bottleneck, 3),
                Conv3d::new(store, rng, &format!("app.res{i}.b"), bottleneck, cfg.channels, 1),
            )
        });
        Self {
            convs,
            lift,
            blocks,
            channels: cfg.channels,
            depth: cfg.depth,
        }
    }

    /// `(n, 3, H, W)` to `(n, C, D, H/4, W/4)`.
    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, image: &Var<T>) -> Var<T> {
        let mut x = image.clone();
        for c in &self.convs {
            x = act(&c.forward(scope, &x));
        }
        let lifted = self.lift.forward(scope, &x);
        let s = lifted.shape().to_vec();
        let mut v = lifted.reshape(&[s[0], self.channels, self.depth, s[2], s[3]]);
        for (a, b) in &self.blocks {
            let r = b.forward(scope, &act(&a.forward(scope, &act(&v))));
            v = v.add(&r);
        }
        v
    }
}

/// Head pose and expression: four strided convolutions, global average
/// pooling, and bounded heads for angles, translation and expression.
#[derive(Clone, Debug)]
pub struct PoseExpressionEstimator {
    convs: [Conv2d; 4],
    angles: Linear,
    translation: Linear,
    expression: Linear,
    angle_bounds: [f64; 3],
    expression_bound: f64,
}

/// Differentiable pose/expression outputs for a batch.
#[derive(Clone)]
pub struct PoseCode<T: Real> {
    /// `(n, 3)` yaw, pitch, roll in radians.
    pub angles: Var<T>,
    /// `(n, 3, 3)`.
    pub rotation: Var<T>,
    /// `(n, 3)`.
    pub translation: Var<T>,
    /// `(n, K, 3)`.
    pub expression: Var<T>,
}

impl<T: Real> PoseCode<T> {
    /// Constant code for a known pose and expression (batch of one).
    pub fn fixed(pose: &HeadPose, expression: &ExpressionDeform) -> Self {
        let r = pose.rotation().to_tensor::<T>().reshape(&[1, 3, 3]);
        Self {
            angles: Var::constant(Tensor::zeros(&[1, 3])),
            rotation: Var::constant(r),
            translation: Var::constant(Tensor::from_f64(&[1, 3], &pose.translation())),
            expression: Var::constant(expression.to_tensor::<T>().reshape(&[1, NUM_KEYPOINTS, 3])),
        }
    }

    /// Item `i` of the batch as plain values.
    pub fn estimate(&self, i: usize) -> Result<PoseExpressionEstimate> {
        let rot = self.rotation.narrow(0, i, 1);
        let tr = self.translation.narrow(0, i, 1).value().to_f64_vec();
        let exp = self.expression.narrow(0, i, 1);
        Ok(PoseExpressionEstimate {
            pose: HeadPose::new(RotationMatrix::from_tensor(rot.value())?, [tr[0], tr[1], tr[2]])?,
            expression: ExpressionDeform::from_tensor(exp.value())?,
        })
    }
}

impl PoseExpressionEstimator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let chans = [3, 16, 32, 64, 128];
        let convs = [0, 1, 2, 3].map(|i| {
            Conv2d::new(store, rng, &format!("pose.conv{i}"), chans[i], chans[i + 1], 3, 2, true)
        });
        // Small output gains keep the initial pose near identity and the
        // initial expression near zero.
        Self {
            convs,
            angles: Linear::new(store, rng, "pose.angles", 128, 3, 0.1),
            translation: Linear::new(store, rng, "pose.translation", 128, 3, 0.1),
            expression: Linear::new(store, rng, "pose.expression", 128, 3 * cfg.keypoints, 0.1),
            angle_bounds: [cfg.yaw_bound, cfg.pitch_bound, cfg.roll_bound],
            expression_bound: cfg.expression_bound,
        }
    }

    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, image: &Var<T>) -> PoseCode<T> {
        let n = image.shape()[0];
        let mut x = image.clone();
        for c in &self.convs {
            x = act(&c.forward(scope, &x));
        }
        let s = x.shape().to_vec();
        let pooled = x
            .reshape(&[n, s[1], s[2] * s[3]])
            .sum_axis(2, false)
            .scale(T::from_f64_lossy(1.0 / (s[2] * s[3]) as f64));
        let bounds = Var::constant(Tensor::from_f64(&[1, 3], &self.angle_bounds));
        let angles = self.angles.forward(scope, &pooled).tanh().mul(&bounds);
        let rotation = euler_rotation_var(&angles);
        let translation = self.translation.forward(scope, &pooled).tanh();
        let expression = self
            .expression
            .forward(scope, &pooled)
            .tanh()
            .scale(T::from_f64_lossy(self.expression_bound))
            .reshape(&[n, NUM_KEYPOINTS, 3]);
        PoseCode {
            angles,
            rotation,
            translation,
            expression,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_heatmap(grid: VoxelGrid, hot: &[(usize, f64)]) -> HeatmapVolume<f64> {
        let mut data = vec![0.0; NUM_KEYPOINTS * grid.len()];
        for k in 0..NUM_KEYPOINTS {
            for &(v, w) in hot {
                data[k * grid.len() + v] = w;
            }
        }
        let [d, h, w] = grid.shape();
        HeatmapVolume::new(Tensor::from_vec(&[NUM_KEYPOINTS, d, h, w], data)).unwrap()
    }

    #[test]
    fn delta_at_the_first_voxel_lands_on_the_corner() {
        let grid = VoxelGrid::cube(4);
        let k = soft_argmax(&delta_heatmap(grid, &[(0, 1.0)])).unwrap();
        assert!(k.points().iter().all(|p| p.to_array() == [-1.0, -1.0, -1.0]));
    }

    #[test]
    fn uniform_heatmap_gives_the_origin() {
        let grid = VoxelGrid::cube(5);
        let u = 1.0 / grid.len() as f64;
        let hot: Vec<_> = (0..grid.len()).map(|v| (v, u)).collect();
        let k = soft_argmax(&delta_heatmap(grid, &hot)).unwrap();
        assert!(k.points().iter().all(|p| p.to_array().iter().all(|c| c.abs() < 1e-12)));
    }

    #[test]
    fn center_delta_and_symmetric_pair() {
        let grid = VoxelGrid::cube(5);
        let center = (2 * 5 + 2) * 5 + 2;
        let k = soft_argmax(&delta_heatmap(grid, &[(center, 1.0)])).unwrap();
        assert!(k.points().iter().all(|p| p.to_array() == [0.0, 0.0, 0.0]));
        // (-1, 0, 0) and (1, 0, 0): w = 0 and w = 4 at the center row/slice.
        let left = (2 * 5 + 2) * 5;
        let k = soft_argmax(&delta_heatmap(grid, &[(left, 0.5), (left + 4, 0.5)])).unwrap();
        assert!(k.points().iter().all(|p| p.to_array() == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn unnormalized_heatmap_is_a_contract_violation() {
        let grid = VoxelGrid::cube(3);
        let err = soft_argmax(&delta_heatmap(grid, &[(0, 1.01)])).unwrap_err();
        assert!(matches!(err, KpbeError::Contract(_)));
        // Within tolerance is accepted.
        assert!(soft_argmax(&delta_heatmap(grid, &[(0, 1.0005)])).is_ok());
    }
}

//! Dense 3D motion: per-keypoint first-order flows, the mask that blends
//! them, the 2D occlusion gate, and trilinear warping of feature volumes.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{JacobianMode, ModelConfig};
use crate::error::{KpbeError, Result};
use crate::estimators::FeatureVolume;
use crate::geometry::{Keypoint3, KeypointSet, RotationMatrix, NUM_KEYPOINTS};
use crate::grid::VoxelGrid;
use crate::tensor::nn::{Conv2d, Conv3d, ParamStore, Scope};
use crate::tensor::{Real, Tensor, Var};

/// Per-voxel sample locations `(D, H, W, 3)` into a source volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    grid: VoxelGrid,
    tensor: Tensor<f64>,
}

impl FlowField {
    pub fn new(grid: VoxelGrid, tensor: Tensor<f64>) -> Result<Self> {
        let [d, h, w] = grid.shape();
        if tensor.shape() != [d, h, w, 3] {
            return Err(KpbeError::shape(format!(
                "flow field must be ({d}, {h}, {w}, 3), got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(KpbeError::invalid("flow field has non-finite entries"));
        }
        Ok(Self { grid, tensor })
    }

    pub fn grid(&self) -> VoxelGrid {
        self.grid
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    /// Sample location stored at voxel `(d, h, w)`.
    pub fn at(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        let o = ((d * self.grid.height + h) * self.grid.width + w) * 3;
        let s = &self.tensor.data()[o..o + 3];
        [s[0], s[1], s[2]]
    }

    fn from_points(grid: VoxelGrid, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let [d, h, w] = grid.shape();
        let mut data = Vec::with_capacity(grid.len() * 3);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.extend(f(grid.coord(z, y, x)));
                }
            }
        }
        Self {
            grid,
            tensor: Tensor::from_vec(&[d, h, w, 3], data),
        }
    }
}

/// `(K+1, D, H, W)` blending weights; channel 0 is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    tensor: Tensor<f64>,
}

/// Per-voxel channel sums of a [`MaskVolume`] must be within this of one.
pub const MASK_NORMALIZATION_TOLERANCE: f64 = 1e-5;

impl MaskVolume {
    pub fn new(tensor: Tensor<f64>) -> Result<Self> {
        if tensor.ndim() != 4 {
            return Err(KpbeError::shape(format!(
                "mask must be (channels, D, H, W), got {:?}",
                tensor.shape()
            )));
        }
        let s = tensor.shape();
        let plane = s[1] * s[2] * s[3];
        let data = tensor.data();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(KpbeError::invalid("mask entries must lie in [0, 1]"));
        }
        for v in 0..plane {
            let sum: f64 = (0..s[0]).map(|c| data[c * plane + v]).sum();
            if (sum - 1.0).abs() > MASK_NORMALIZATION_TOLERANCE {
                return Err(KpbeError::invalid(format!(
                    "mask channels sum to {sum} at voxel {v}"
                )));
            }
        }
        Ok(Self { tensor })
    }

    /// Mask putting all weight on `channel` everywhere.
    pub fn one_hot(channels: usize, grid: VoxelGrid, channel: usize) -> Result<Self> {
        let [d, h, w] = grid.shape();
        let mut t = Tensor::zeros(&[channels, d, h, w]);
        let len = grid.len();
        t.data_mut()[channel * len..(channel + 1) * len].fill(1.0);
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// `(1, H, W)` occlusion gate in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    tensor: Tensor<f64>,
}

impl OcclusionMask {
    pub fn new(tensor: Tensor<f64>) -> Result<Self> {
        if tensor.ndim() != 3 || tensor.shape()[0] != 1 {
            return Err(KpbeError::shape(format!(
                "occlusion must be (1, H, W), got {:?}",
                tensor.shape()
            )));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(KpbeError::invalid("occlusion entries must lie in [0, 1]"));
        }
        Ok(Self { tensor })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[1, height, width], value))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }
}

/// `flow(p) = k_s + J·(p − k_d)` at every voxel center.
pub fn per_keypoint_flow(k_s: Keypoint3, k_d: Keypoint3, jacobian: &RotationMatrix, grid: VoxelGrid) -> FlowField {
    let (ks, kd) = (k_s.to_array(), k_d.to_array());
    FlowField::from_points(grid, |p| {
        let r = jacobian.apply([p[0] - kd[0], p[1] - kd[1], p[2] - kd[2]]);
        [ks[0] + r[0], ks[1] + r[1], ks[2] + r[2]]
    })
}

/// `flow(p) = p`.
pub fn identity_flow(grid: VoxelGrid) -> FlowField {
    FlowField::from_points(grid, |p| p)
}

/// Gaussian heatmap difference `(K, D, H, W)`: driving minus source.
pub fn heatmap_difference(k_s: &KeypointSet, k_d: &KeypointSet, grid: VoxelGrid, sigma2: f64) -> Tensor<f64> {
    let [d, h, w] = grid.shape();
    let ks = Var::constant(k_s.to_tensor::<f64>().reshape(&[1, NUM_KEYPOINTS, 3]));
    let kd = Var::constant(k_d.to_tensor::<f64>().reshape(&[1, NUM_KEYPOINTS, 3]));
    heatmap_difference_var(&ks, &kd, grid, sigma2)
        .value()
        .reshape(&[NUM_KEYPOINTS, d, h, w])
}

/// Mask-weighted sum of candidate flows.
pub fn composite_flow(flows: &[FlowField], mask: &MaskVolume) -> Result<FlowField> {
    if flows.len() != mask.channels() {
        return Err(KpbeError::invalid(format!(
            "{} flows but the mask has {} channels",
            flows.len(),
            mask.channels()
        )));
    }
    let grid = flows[0].grid();
    let [d, h, w] = grid.shape();
    if mask.tensor().shape()[1..] != [d, h, w] || flows.iter().any(|f| f.grid() != grid) {
        return Err(KpbeError::shape("flows and mask cover different grids"));
    }
    let v = grid.len();
    let stacked: Vec<f64> = flows.iter().flat_map(|f| f.tensor().data().iter().copied()).collect();
    let flows = Var::constant(Tensor::from_vec(&[1, flows.len(), v, 3], stacked));
    let mask = Var::constant(mask.tensor().reshape(&[1, mask.channels(), v]));
    let out = composite_flow_var(&flows, &mask);
    FlowField::new(grid, out.value().reshape(&[d, h, w, 3]))
}

/// Samples each feature channel at the flow's locations.
pub fn warp_volume(feature: &FeatureVolume, flow: &FlowField) -> Result<FeatureVolume> {
    let s = feature.shape();
    let grid = flow.grid();
    if s[1..] != grid.shape() {
        return Err(KpbeError::shape(format!(
            "feature volume {:?} does not match flow grid {:?}",
            s,
            grid.shape()
        )));
    }
    let vol = Var::constant(feature.tensor().reshape(&[1, s[0], s[1], s[2], s[3]]));
    let pts = Var::constant(flow.tensor().cast::<f32>().reshape(&[1, grid.len(), 3]));
    FeatureVolume::new(vol.trilinear_sample(&pts).value().reshape(s))
}

/// Voxel-center coordinates as a constant `(V, 3)` variable.
fn grid_points<T: Real>(grid: VoxelGrid) -> Var<T> {
    Var::constant(grid.coords::<T>())
}

/// Identity flow for a batch: `(n, V, 3)`.
pub fn identity_flow_var<T: Real>(grid: VoxelGrid, n: usize) -> Var<T> {
    grid_points::<T>(grid).reshape(&[1, grid.len(), 3]).broadcast_to(&[n, grid.len(), 3])
}

/// Candidate flows for a batch, background first: `k_s`, `k_d` are `(n, K, 3)`,
/// `jacobian` is `(n, 3, 3)`; the result is `(n, K+1, V, 3)`.
pub fn candidate_flows_var<T: Real>(k_s: &Var<T>, k_d: &Var<T>, jacobian: &Var<T>, grid: VoxelGrid) -> Var<T> {
    let n = k_s.shape()[0];
    let k = k_s.shape()[1];
    let v = grid.len();
    let jt = jacobian.permute(&[0, 2, 1]);
    let identity = identity_flow_var::<T>(grid, n);
    let jp = identity.bmm(&jt).reshape(&[n, 1, v, 3]);
    let offset = k_s.sub(&k_d.bmm(&jt)).reshape(&[n, k, 1, 3]);
    let flows = jp.add(&offset);
    Var::cat(&[identity.reshape(&[n, 1, v, 3]), flows], 1)
}

/// `(n, K, V)` heatmap difference for a batch.
pub fn heatmap_difference_var<T: Real>(k_s: &Var<T>, k_d: &Var<T>, grid: VoxelGrid, sigma2: f64) -> Var<T> {
    let n = k_s.shape()[0];
    let k = k_s.shape()[1];
    let v = grid.len();
    let p = grid_points::<T>(grid).reshape(&[1, 1, v, 3]);
    let gauss = |kp: &Var<T>| {
        p.sub(&kp.reshape(&[n, k, 1, 3]))
            .square()
            .sum_axis(3, false)
            .scale(T::from_f64_lossy(-1.0 / sigma2))
            .exp()
    };
    gauss(k_d).sub(&gauss(k_s))
}

/// `Σ_k m_k(p)·w_k(p)`: flows `(n, K+1, V, 3)`, mask `(n, K+1, V)` to `(n, V, 3)`.
pub fn composite_flow_var<T: Real>(flows: &Var<T>, mask: &Var<T>) -> Var<T> {
    let s = mask.shape().to_vec();
    flows
        .mul(&mask.reshape(&[s[0], s[1], s[2], 1]))
        .sum_axis(1, false)
}

/// Warps `(n, C, D, H, W)` features through `(n, V, 3)` flows.
pub fn warp_volume_var<T: Real>(feature: &Var<T>, flow: &Var<T>) -> Var<T> {
    let s = feature.shape().to_vec();
    feature.trilinear_sample(flow).reshape(&s)
}

/// Jacobians for a batch of source/driving rotations `(n, 3, 3)`.
pub fn jacobians_var<T: Real>(mode: JacobianMode, r_s: &Var<T>, r_d: &Var<T>) -> Var<T> {
    match mode {
        JacobianMode::Rotation => r_s.bmm(&r_d.permute(&[0, 2, 1])),
        JacobianMode::Identity => {
            let n = r_s.shape()[0];
            let eye = RotationMatrix::IDENTITY.to_tensor::<T>().reshape(&[1, 3, 3]);
            Var::constant(eye).broadcast_to(&[n, 3, 3])
        }
    }
}

/// Mask and occlusion for a batch, shaped like the network emits them.
pub struct MaskOutput<T: Real> {
    /// `(n, K+1, V)`, softmax over channels.
    pub mask: Var<T>,
    /// `(n, 1, H, W)`.
    pub occlusion: Var<T>,
}

/// Two 3D conv blocks over the stacked warped features and heatmap
/// differences, then a softmax mask head and a depth-collapsed occlusion head.
#[derive(Clone, Debug)]
pub struct MaskEstimator {
    reduce: Conv3d,
    block: Conv3d,
    mask_head: Conv3d,
    occlusion_head: Conv2d,
    hidden: usize,
    grid: VoxelGrid,
}

impl MaskEstimator {
    pub const HIDDEN: usize = 32;

    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let k1 = cfg.keypoints + 1;
        let inputs = k1 * cfg.channels + cfg.keypoints;
        let hidden = Self::HIDDEN;
        Self {
            reduce: Conv3d::new(store, rng, "mask.reduce", inputs, hidden, 1),
            block: Conv3d::new(store, rng, "mask.block", hidden, hidden, 3),
            mask_head: Conv3d::new(store, rng, "mask.head", hidden, k1, 3),
            occlusion_head: Conv2d::new(store, rng, "mask.occlusion", hidden * cfg.depth, 1, 3, 1, true),
            hidden,
            grid: cfg.grid(),
        }
    }

    /// `warped` is `(n, K+1, C, V)`, `heat_diff` is `(n, K, V)`.
    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, warped: &Var<T>, heat_diff: &Var<T>) -> MaskOutput<T> {
        let ws = warped.shape().to_vec();
        let n = ws[0];
        let [d, h, w] = self.grid.shape();
        let stacked = warped.reshape(&[n, ws[1] * ws[2], d, h, w]);
        let hk = heat_diff.shape()[1];
        let x = Var::cat(&[stacked, heat_diff.reshape(&[n, hk, d, h, w])], 1);
        let x = self.reduce.forward(scope, &x).relu();
        let x = self.block.forward(scope, &x).relu();
        let logits = self.mask_head.forward(scope, &x);
        let k1 = logits.shape()[1];
        let mask = logits.reshape(&[n, k1, d * h * w]).softmax(1);
        let occlusion = self
            .occlusion_head
            .forward(scope, &x.reshape(&[n, self.hidden * d, h, w]))
            .sigmoid();
        MaskOutput { mask, occlusion }
    }

    /// Plain-value entry point for one example: `K+1` warped volumes,
    /// background first, and the `(K, D, H, W)` heatmap difference.
    pub fn estimate(
        &self,
        store: &ParamStore<f32>,
        warped: &[FeatureVolume],
        heat_diff: &Tensor<f64>,
    ) -> Result<(MaskVolume, OcclusionMask)> {
        let k1 = self.mask_head_channels(store);
        if warped.len() != k1 {
            return Err(KpbeError::invalid(format!(
                "mask estimator needs {k1} warped volumes, got {}",
                warped.len()
            )));
        }
        let v = self.grid.len();
        let [d, h, w] = self.grid.shape();
        let c = warped[0].shape()[0];
        if warped.iter().any(|f| f.shape() != [c, d, h, w]) {
            return Err(KpbeError::shape("warped volumes must share the feature grid"));
        }
        if heat_diff.shape() != [k1 - 1, d, h, w] {
            return Err(KpbeError::shape(format!(
                "heatmap difference must be ({}, {d}, {h}, {w}), got {:?}",
                k1 - 1,
                heat_diff.shape()
            )));
        }
        let data: Vec<f32> = warped.iter().flat_map(|f| f.tensor().data().iter().copied()).collect();
        let scope = Scope::inference(store);
        let out = self.forward(
            &scope,
            &Var::constant(Tensor::from_vec(&[1, k1, c, v], data)),
            &Var::constant(heat_diff.cast::<f32>().reshape(&[1, k1 - 1, v])),
        );
        let mask = out.mask.value().cast::<f64>().reshape(&[k1, d, h, w]);
        let occ = out.occlusion.value().cast::<f64>().reshape(&[1, h, w]);
        Ok((MaskVolume::new(mask)?, OcclusionMask::new(occ)?))
    }

    fn mask_head_channels(&self, store: &ParamStore<f32>) -> usize {
        store.get(self.mask_head.weight()).value.shape()[0]
    }
}

#[derive(Serialize)]
struct DumpSidecar<'a> {
    dtype: &'static str,
    byte_order: &'static str,
    axes: &'a [&'a str],
    shape: &'a [usize],
}

/// Writes `name.f32` (raw little-endian floats) and `name.json` (shape and
/// axis names) into `dir`, returning the path of the data file.
pub fn dump_debug_array(dir: &Path, name: &str, axes: &[&str], tensor: &Tensor<f64>) -> Result<PathBuf> {
    if axes.len() != tensor.ndim() {
        return Err(KpbeError::invalid(format!(
            "{} axis names for a {}-D array",
            axes.len(),
            tensor.ndim()
        )));
    }
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = tensor.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let data_path = dir.join(format!("{name}.f32"));
    fs::write(&data_path, bytes)?;
    let sidecar = DumpSidecar {
        dtype: "float32",
        byte_order: "little",
        axes,
        shape: tensor.shape(),
    };
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(data_path)
}

/// Dumps a flow (as `c,d,h,w` with `c` the x/y/z component), a mask and an
/// occlusion gate for external viewers.
pub fn dump_motion(dir: &Path, flow: &FlowField, mask: &MaskVolume, occlusion: &OcclusionMask) -> Result<()> {
    let [d, h, w] = flow.grid().shape();
    let flow_cdhw = Var::constant(flow.tensor().clone())
        .permute(&[3, 0, 1, 2])
        .value()
        .reshape(&[3, d, h, w]);
    dump_debug_array(dir, "flow", &["c", "d", "h", "w"], &flow_cdhw)?;
    dump_debug_array(dir, "mask", &["c", "d", "h", "w"], mask.tensor())?;
    let occ = occlusion.tensor();
    let s = occ.shape();
    dump_debug_array(dir, "occlusion", &["c", "d", "h", "w"], &occ.reshape(&[1, 1, s[1], s[2]]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euler_to_rotation;

    #[test]
    fn identity_parameters_give_the_identity_flow() {
        let grid = VoxelGrid::new(3, 4, 5);
        let k = Keypoint3::new(0.3, -0.2, 0.1);
        let f = per_keypoint_flow(k, k, &RotationMatrix::IDENTITY, grid);
        assert!(f.tensor().max_abs_diff(identity_flow(grid).tensor()) < 1e-15);
    }

    #[test]
    fn translated_keypoint_shifts_the_origin() {
        let grid = VoxelGrid::cube(3);
        let f = per_keypoint_flow(
            Keypoint3::new(0.2, 0.0, 0.0),
            Keypoint3::new(0.0, 0.0, 0.0),
            &RotationMatrix::IDENTITY,
            grid,
        );
        assert_eq!(f.at(1, 1, 1), [0.2, 0.0, 0.0]);
    }

    #[test]
    fn batched_candidates_match_single_flows() {
        let grid = VoxelGrid::new(2, 3, 4);
        let r = euler_to_rotation(0.3, -0.2, 0.1).unwrap();
        let pts: Vec<[f64; 3]> = (0..NUM_KEYPOINTS)
            .map(|i| [0.05 * i as f64 - 0.3, 0.1, -0.02 * i as f64])
            .collect();
        let ks = KeypointSet::from_arrays(&pts).unwrap();
        let kd = KeypointSet::from_arrays(&pts.iter().map(|p| [p[1], p[0], 0.5]).collect::<Vec<_>>()).unwrap();
        let flows = candidate_flows_var(
            &Var::constant(ks.to_tensor::<f64>().reshape(&[1, NUM_KEYPOINTS, 3])),
            &Var::constant(kd.to_tensor::<f64>().reshape(&[1, NUM_KEYPOINTS, 3])),
            &Var::constant(r.to_tensor::<f64>().reshape(&[1, 3, 3])),
            grid,
        );
        let v = grid.len();
        let data = flows.value().data();
        assert_eq!(&data[..v * 3], identity_flow(grid).tensor().data());
        for k in 0..NUM_KEYPOINTS {
            let single = per_keypoint_flow(ks.points()[k], kd.points()[k], &r, grid);
            let slice = &data[(k + 1) * v * 3..(k + 2) * v * 3];
            for (a, b) in slice.iter().zip(single.tensor().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_difference_is_antisymmetric_and_zero_on_equal_sets() {
        let grid = VoxelGrid::cube(4);
        let a = KeypointSet::from_arrays(&[[0.1, 0.2, -0.3]; NUM_KEYPOINTS]).unwrap();
        let b = KeypointSet::from_arrays(&[[-0.4, 0.0, 0.3]; NUM_KEYPOINTS]).unwrap();
        assert_eq!(heatmap_difference(&a, &a, grid, 0.01).max_abs(), 0.0);
        let ab = heatmap_difference(&a, &b, grid, 0.01);
        let ba = heatmap_difference(&b, &a, grid, 0.01);
        assert!(ab.zip_map(&ba, |x, y| x + y).max_abs() < 1e-15);
        assert!(ab.max_abs() <= 1.0);
    }

    #[test]
    fn composite_of_two_flows_with_half_mask_is_their_average() {
        let grid = VoxelGrid::cube(3);
        let a = identity_flow(grid);
        let b = per_keypoint_flow(Keypoint3::new(0.5, 0.0, 0.0), Keypoint3::new(0.0, 0.0, 0.0), &RotationMatrix::IDENTITY, grid);
        let mask = MaskVolume::new(Tensor::full(&[2, 3, 3, 3], 0.5)).unwrap();
        let c = composite_flow(&[a.clone(), b.clone()], &mask).unwrap();
        let avg = a.tensor().zip_map(b.tensor(), |x, y| 0.5 * (x + y));
        assert!(c.tensor().max_abs_diff(&avg) < 1e-15);
        let wrong = MaskVolume::one_hot(3, grid, 0).unwrap();
        assert!(composite_flow(&[a, b], &wrong).is_err());
    }

    #[test]
    fn mask_volume_rejects_unnormalized_weights() {
        assert!(MaskVolume::new(Tensor::full(&[2, 1, 1, 1], 0.6)).is_err());
        assert!(OcclusionMask::new(Tensor::full(&[1, 2, 2], 1.5)).is_err());
    }

    #[test]
    fn one_voxel_shift_moves_interior_values() {
        let grid = VoxelGrid::new(2, 3, 5);
        let feat = FeatureVolume::new(Tensor::from_fn(&[2, 2, 3, 5], |i| i as f32 * 0.25)).unwrap();
        let pitch = 2.0 / 4.0;
        let shifted = FlowField::from_points(grid, |p| [p[0] + pitch, p[1], p[2]]);
        let out = warp_volume(&feat, &shifted).unwrap();
        let (src, dst) = (feat.tensor(), out.tensor());
        for c in 0..2 {
            for d in 0..2 {
                for h in 0..3 {
                    for w in 0..5 {
                        let expect = src.at(&[c, d, h, (w + 1).min(4)]);
                        assert!((dst.at(&[c, d, h, w]) - expect).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn debug_dump_writes_raw_floats_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let grid = VoxelGrid::new(1, 2, 2);
        let mask = MaskVolume::one_hot(2, grid, 1).unwrap();
        let occ = OcclusionMask::constant(2, 2, 0.25).unwrap();
        dump_motion(dir.path(), &identity_flow(grid), &mask, &occ).unwrap();
        let raw = fs::read(dir.path().join("occlusion.f32")).unwrap();
        assert_eq!(raw.len(), 16);
        assert_eq!(f32::from_le_bytes(raw[..4].try_into().unwrap()), 0.25);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("flow.json")).unwrap()).unwrap();
        assert_eq!(side["shape"], serde_json::json!([3, 1, 2, 2]));
        assert_eq!(side["axes"], serde_json::json!(["c", "d", "h", "w"]));
    }
}

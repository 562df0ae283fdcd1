//! Decodes a warped 3D feature volume into an RGB image.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{KpbeError, Result};
use crate::estimators::FeatureVolume;
use crate::frame::ImageTensor;
use crate::motionfield::OcclusionMask;
use crate::tensor::nn::{Conv2d, ParamStore, Scope};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub warped_feature: FeatureVolume,
    pub occlusion: OcclusionMask,
}

#[derive(Clone, Copy, Debug)]
struct UpBlock {
    a: Conv2d,
    b: Conv2d,
    skip: Conv2d,
}

impl UpBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: Conv2d::new(store, rng, &format!("{name}.a"), cin, cout, 3, 1, true),
            b: Conv2d::new(store, rng, &format!("{name}.b"), cout, cout, 3, 1, true),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, true),
        }
    }

    fn forward<T: Real>(&self, scope: &Scope<'_, T>, x: &Var<T>) -> Var<T> {
        let slope = T::from_f64_lossy(0.2);
        let up = x.upsample_nearest2x();
        let y = self.a.forward(scope, &up).leaky_relu(slope);
        let y = self.b.forward(scope, &y);
        y.add(&self.skip.forward(scope, &up)).leaky_relu(slope)
    }
}

/// Depth-collapse, one conv gated by the occlusion mask, two upsampling
/// residual blocks and a sigmoid RGB head.
#[derive(Clone, Debug)]
pub struct Generator {
    entry: Conv2d,
    blocks: [UpBlock; 2],
    head: Conv2d,
    channels: usize,
    depth: usize,
    feature_res: usize,
}

impl Generator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        Self {
            entry: Conv2d::new(store, rng, "gen.entry", cfg.channels * cfg.depth, 64, 3, 1, true),
            blocks: [
                UpBlock::new(store, rng, "gen.up0", 64, 32),
                UpBlock::new(store, rng, "gen.up1", 32, 16),
            ],
            head: Conv2d::new(store, rng, "gen.head", 16, 3, 3, 1, true),
            channels: cfg.channels,
            depth: cfg.depth,
            feature_res: cfg.feature_res(),
        }
    }

    /// `feature (n, C, D, H', W')`, `occlusion (n, 1, H', W')` to `(n, 3, 4H', 4W')`.
    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, feature: &Var<T>, occlusion: &Var<T>) -> Var<T> {
        let s = feature.shape().to_vec();
        let x = feature.reshape(&[s[0], s[1] * s[2], s[3], s[4]]);
        let mut x = self.entry.forward(scope, &x).mul(occlusion);
        for b in &self.blocks {
            x = b.forward(scope, &x);
        }
        self.head.forward(scope, &x).sigmoid()
    }

    /// Plain-value entry point for one example.
    pub fn generate(&self, store: &ParamStore<f32>, input: &GeneratorInput) -> Result<ImageTensor> {
        let fs = input.warped_feature.shape();
        let r = self.feature_res;
        if fs != [self.channels, self.depth, r, r] {
            return Err(KpbeError::invalid(format!(
                "generator expects a ({}, {}, {r}, {r}) feature volume, got {fs:?}",
                self.channels, self.depth
            )));
        }
        if input.occlusion.tensor().shape() != [1, r, r] {
            return Err(KpbeError::invalid(format!(
                "generator expects a (1, {r}, {r}) occlusion mask, got {:?}",
                input.occlusion.tensor().shape()
            )));
        }
        let scope = Scope::inference(store);
        let feat = Var::constant(input.warped_feature.tensor().reshape(&[1, fs[0], fs[1], fs[2], fs[3]]));
        let occ = Var::constant(input.occlusion.tensor().cast::<f32>().reshape(&[1, 1, r, r]));
        let out = self.forward(&scope, &feat, &occ);
        ImageTensor::from_tensor(out.value(), 4 * r, 4 * r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            depth: 2,
            resolution: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_is_an_image_of_four_times_the_feature_size() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        let feat = FeatureVolume::new(Tensor::from_fn(&[4, 2, 8, 8], |i| (i as f32 * 0.1).sin() * 5.0)).unwrap();
        let input = GeneratorInput {
            warped_feature: feat,
            occlusion: OcclusionMask::constant(8, 8, 1.0).unwrap(),
        };
        let img = g.generate(&store, &input).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_feature_shape_is_rejected() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        let input = GeneratorInput {
            warped_feature: FeatureVolume::new(Tensor::zeros(&[4, 2, 4, 4])).unwrap(),
            occlusion: OcclusionMask::constant(4, 4, 1.0).unwrap(),
        };
        assert!(matches!(g.generate(&store, &input), Err(KpbeError::InvalidArgument(_))));
    }
}

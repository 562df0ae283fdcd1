//! The full frontend: estimators, motion field, generator and the frozen
//! perceptual extractor, sharing one parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::estimators::{
    AppearanceEstimator, FeatureVolume, HeatmapVolume, KeypointEstimator, PoseCode, PoseExpressionEstimate,
    PoseExpressionEstimator,
};
use crate::frame::ImageTensor;
use crate::generator::Generator;
use crate::geometry::{
    compose_keypoints, compose_keypoints_var, ExpressionDeform, HeadPose, KeypointSet, RotationMatrix, NUM_KEYPOINTS,
};
use crate::motionfield::{
    candidate_flows_var, composite_flow_var, heatmap_difference_var, jacobians_var, warp_volume_var, MaskEstimator,
};
use crate::tensor::nn::{ParamStore, Scope};
use crate::tensor::{Real, Tensor, Var};
use crate::training::PerceptualExtractor;

/// Layer layout of the model; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: ModelConfig,
    pub keypoints: KeypointEstimator,
    pub appearance: AppearanceEstimator,
    pub pose: PoseExpressionEstimator,
    pub mask: MaskEstimator,
    pub generator: Generator,
    pub extractor: PerceptualExtractor,
}

/// Source-side quantities, computed once per source image.
#[derive(Clone)]
pub struct SourceCode<T: Real> {
    /// `(n, C, D, H', W')`.
    pub feature: Var<T>,
    /// `(n, K, 3)`.
    pub canonical: Var<T>,
    pub pose: PoseCode<T>,
}

/// Everything a forward synthesis produces.
#[derive(Clone)]
pub struct Synthesis<T: Real> {
    /// `(n, 3, H, W)` in `[0, 1]`.
    pub image: Var<T>,
    /// `(n, K, 3)`.
    pub k_s: Var<T>,
    /// `(n, K, 3)`.
    pub k_d: Var<T>,
    /// `(n, K+1, V)`.
    pub mask: Var<T>,
    /// `(n, 1, H', W')`.
    pub occlusion: Var<T>,
    /// `(n, V, 3)`.
    pub flow: Var<T>,
}

impl Networks {
    /// Builds the layer layout and registers freshly initialized parameters.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nets = Self {
            config: config.clone(),
            keypoints: KeypointEstimator::new(&mut store, &mut rng, config),
            appearance: AppearanceEstimator::new(&mut store, &mut rng, config),
            pose: PoseExpressionEstimator::new(&mut store, &mut rng, config),
            mask: MaskEstimator::new(&mut store, &mut rng, config),
            generator: Generator::new(&mut store, &mut rng, config),
            extractor: PerceptualExtractor::new(&mut store, &mut rng),
        };
        Ok((nets, store))
    }

    pub fn encode_source<T: Real>(&self, scope: &Scope<'_, T>, image: &Var<T>) -> SourceCode<T> {
        SourceCode {
            feature: self.appearance.forward(scope, image),
            canonical: self.keypoints.forward(scope, image).keypoints,
            pose: self.pose.forward(scope, image),
        }
    }

    pub fn encode_driving<T: Real>(&self, scope: &Scope<'_, T>, image: &Var<T>) -> PoseCode<T> {
        self.pose.forward(scope, image)
    }

    /// Poses the canonical keypoints with source and driving codes and synthesizes.
    pub fn drive<T: Real>(&self, scope: &Scope<'_, T>, source: &SourceCode<T>, driving: &PoseCode<T>) -> Synthesis<T> {
        let n = source.canonical.shape()[0];
        let broadcast = |v: &Var<T>| {
            if v.shape()[0] == n {
                v.clone()
            } else {
                let mut s = v.shape().to_vec();
                s[0] = n;
                v.broadcast_to(&s)
            }
        };
        let (rd, td, ed) = (
            broadcast(&driving.rotation),
            broadcast(&driving.translation),
            broadcast(&driving.expression),
        );
        let sp = &source.pose;
        let k_s = compose_keypoints_var(&source.canonical, &sp.rotation, &sp.translation, &sp.expression);
        let k_d = compose_keypoints_var(&source.canonical, &rd, &td, &ed);
        let jac = jacobians_var(self.config.jacobian, &sp.rotation, &rd);
        self.synthesize(scope, &source.feature, &k_s, &k_d, &jac)
    }

    /// Motion field and generator for given posed keypoints and Jacobians.
    pub fn synthesize<T: Real>(
        &self,
        scope: &Scope<'_, T>,
        feature: &Var<T>,
        k_s: &Var<T>,
        k_d: &Var<T>,
        jacobian: &Var<T>,
    ) -> Synthesis<T> {
        let grid = self.config.grid();
        let fs = feature.shape().to_vec();
        let (n, c, v) = (fs[0], fs[1], grid.len());
        let flows = candidate_flows_var(k_s, k_d, jacobian, grid);
        let k1 = flows.shape()[1];
        let warped = feature
            .trilinear_sample(&flows.reshape(&[n, k1 * v, 3]))
            .reshape(&[n, c, k1, v])
            .permute(&[0, 2, 1, 3]);
        let heat = heatmap_difference_var(k_s, k_d, grid, self.config.sigma2);
        let masks = self.mask.forward(scope, &warped, &heat);
        let flow = composite_flow_var(&flows, &masks.mask);
        let deformed = warp_volume_var(feature, &flow);
        let image = self.generator.forward(scope, &deformed, &masks.occlusion);
        Synthesis {
            image,
            k_s: k_s.clone(),
            k_d: k_d.clone(),
            mask: masks.mask,
            occlusion: masks.occlusion,
            flow,
        }
    }
}

/// Source quantities as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceFeatures {
    pub feature: FeatureVolume,
    pub canonical: KeypointSet,
    pub estimate: PoseExpressionEstimate,
}

/// One synthesized frame and the keypoints that drove it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedFrame {
    pub image: ImageTensor,
    pub k_s: KeypointSet,
    pub k_d: KeypointSet,
}

/// A model instance: configuration, parameters and layer layout.
#[derive(Debug)]
pub struct Kpbe {
    pub nets: Networks,
    pub store: ParamStore<f32>,
    pub seed: u64,
    appearance_calls: AtomicUsize,
    canonical_calls: AtomicUsize,
}

impl Clone for Kpbe {
    fn clone(&self) -> Self {
        Self::from_parts(self.nets.clone(), self.store.clone(), self.seed)
    }
}

impl Kpbe {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (nets, store) = Networks::build(&config, seed)?;
        Ok(Self::from_parts(nets, store, seed))
    }

    pub fn from_parts(nets: Networks, store: ParamStore<f32>, seed: u64) -> Self {
        Self {
            nets,
            store,
            seed,
            appearance_calls: AtomicUsize::new(0),
            canonical_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.nets.config
    }

    /// Number of images the appearance estimator has processed.
    pub fn appearance_calls(&self) -> usize {
        self.appearance_calls.load(Ordering::Relaxed)
    }

    /// Number of images the canonical keypoint estimator has processed.
    pub fn canonical_calls(&self) -> usize {
        self.canonical_calls.load(Ordering::Relaxed)
    }

    fn input(&self, image: &ImageTensor) -> Result<Var<f32>> {
        image.check_size(self.config().resolution)?;
        Ok(Var::constant(image.to_tensor::<f32>()))
    }

    pub fn canonical_heatmap(&self, image: &ImageTensor) -> Result<HeatmapVolume<f32>> {
        let x = self.input(image)?;
        self.canonical_calls.fetch_add(1, Ordering::Relaxed);
        let out = self.nets.keypoints.forward(&Scope::inference(&self.store), &x);
        let [d, h, w] = self.config().grid().shape();
        HeatmapVolume::new(out.heatmap.value().reshape(&[NUM_KEYPOINTS, d, h, w]))
    }

    pub fn estimate_canonical_keypoints(&self, image: &ImageTensor) -> Result<KeypointSet> {
        let x = self.input(image)?;
        self.canonical_calls.fetch_add(1, Ordering::Relaxed);
        let out = self.nets.keypoints.forward(&Scope::inference(&self.store), &x);
        KeypointSet::from_tensor(out.keypoints.value())
    }

    pub fn estimate_appearance(&self, image: &ImageTensor) -> Result<FeatureVolume> {
        let x = self.input(image)?;
        self.appearance_calls.fetch_add(1, Ordering::Relaxed);
        let v = self.nets.appearance.forward(&Scope::inference(&self.store), &x);
        let s = v.shape()[1..].to_vec();
        FeatureVolume::new(v.value().reshape(&s))
    }

    pub fn estimate_pose_expression(&self, image: &ImageTensor) -> Result<PoseExpressionEstimate> {
        let x = self.input(image)?;
        self.nets.pose.forward(&Scope::inference(&self.store), &x).estimate(0)
    }

    /// Appearance, canonical keypoints and source pose/expression.
    pub fn encode_source(&self, image: &ImageTensor) -> Result<SourceFeatures> {
        Ok(SourceFeatures {
            feature: self.estimate_appearance(image)?,
            canonical: self.estimate_canonical_keypoints(image)?,
            estimate: self.estimate_pose_expression(image)?,
        })
    }

    /// Synthesizes the source identity under a driving pose and expression.
    pub fn synthesize(
        &self,
        source: &SourceFeatures,
        pose: &HeadPose,
        expression: &ExpressionDeform,
    ) -> Result<SynthesizedFrame> {
        let k_s = compose_keypoints(&source.canonical, &source.estimate.pose, &source.estimate.expression);
        let k_d = compose_keypoints(&source.canonical, pose, expression);
        let jac = match self.config().jacobian {
            crate::config::JacobianMode::Rotation => {
                source.estimate.pose.rotation().compose(&pose.rotation().transpose())
            }
            crate::config::JacobianMode::Identity => RotationMatrix::IDENTITY,
        };
        let kvar = |k: &KeypointSet| Var::constant(k.to_tensor::<f32>().reshape(&[1, NUM_KEYPOINTS, 3]));
        let fs = source.feature.shape().to_vec();
        let feature = Var::constant(source.feature.tensor().reshape(&[1, fs[0], fs[1], fs[2], fs[3]]));
        let out = self.nets.synthesize(
            &Scope::inference(&self.store),
            &feature,
            &kvar(&k_s),
            &kvar(&k_d),
            &Var::constant(jac.to_tensor::<f32>().reshape(&[1, 3, 3])),
        );
        let res = self.config().resolution;
        Ok(SynthesizedFrame {
            image: ImageTensor::from_tensor(out.image.value(), res, res)?,
            k_s,
            k_d,
        })
    }

    /// Self-reconstruction style forward pass: pose and expression both
    /// estimated from `driving`.
    pub fn reconstruct(&self, source: &SourceFeatures, driving: &ImageTensor) -> Result<SynthesizedFrame> {
        let est = self.estimate_pose_expression(driving)?;
        self.synthesize(source, &est.pose, &est.expression)
    }

    /// Batched differentiable reconstruction of `driving` from `source`.
    pub fn forward_batch<'a>(&'a self, scope: &Scope<'a, f32>, source: &Tensor<f32>, driving: &Tensor<f32>) -> Synthesis<f32> {
        let src = self.nets.encode_source(scope, &Var::constant(source.clone()));
        let drv = self.nets.encode_driving(scope, &Var::constant(driving.clone()));
        self.nets.drive(scope, &src, &drv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::KpbeError;

    #[test]
    fn synthesis_has_image_shape_and_counts_source_calls() {
        let model = Kpbe::new(ModelConfig::default(), 7).unwrap();
        let img = ImageTensor::filled(64, 64, [0.4, 0.5, 0.6]);
        let src = model.encode_source(&img).unwrap();
        assert_eq!(model.appearance_calls(), 1);
        assert_eq!(model.canonical_calls(), 1);
        let out = model.reconstruct(&src, &img).unwrap();
        assert_eq!((out.image.height(), out.image.width()), (64, 64));
        assert_eq!(model.appearance_calls(), 1);
        assert!(out.k_s.mean_distance(&out.k_d) < 1e-9);
    }

    #[test]
    fn wrong_input_size_is_invalid_argument() {
        let model = Kpbe::new(ModelConfig::default(), 7).unwrap();
        let img = ImageTensor::filled(32, 32, [0.0; 3]);
        assert!(matches!(model.estimate_appearance(&img), Err(KpbeError::InvalidArgument(_))));
    }
}

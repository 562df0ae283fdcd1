//! Losses, the two training stages, loss traces and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{KpbeError, Result};
use crate::estimators::PoseCode;
use crate::frame::{FrameSequence, ImageTensor};
use crate::geometry::ExpressionDeform;
use crate::model::{Kpbe, Networks};
use crate::tensor::nn::{Conv2d, ParamStore, Scope};
use crate::tensor::optim::{Adam, AdamParams};
use crate::tensor::{Real, Tensor, Var};

/// Pyramid levels of the perceptual loss (full resolution included).
pub const PYRAMID_LEVELS: usize = 5;
/// Smallest image side the perceptual extractor accepts.
pub const MIN_PYRAMID_SIDE: usize = 4;
const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

/// Fixed random-weight convolutional features for the perceptual loss.
/// Its weights are frozen and always drawn from the same seed.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    convs: [Conv2d; 4],
}

impl PerceptualExtractor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, _rng: &mut ChaCha8Rng) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let layers = [(3, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1)];
        let convs = [0, 1, 2, 3].map(|i| {
            let (cin, cout, stride) = layers[i];
            Conv2d::new(store, &mut rng, &format!("vgg.conv{i}"), cin, cout, 3, stride, false)
        });
        Self { convs }
    }

    /// Activations of every layer for `(n, 3, H, W)` input.
    pub fn features<T: Real>(&self, scope: &Scope<'_, T>, x: &Var<T>) -> Vec<Var<T>> {
        let slope = T::from_f64_lossy(0.2);
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(scope, &h).leaky_relu(slope);
            out.push(h.clone());
        }
        out
    }
}

/// Number of pyramid levels usable for an image whose smaller side is `side`.
pub fn pyramid_levels(side: usize) -> usize {
    (0..PYRAMID_LEVELS)
        .take_while(|&i| side >> i >= MIN_PYRAMID_SIDE)
        .count()
}

/// `Σ_i mean |F(down_i G) − F(down_i s)|` over the pyramid, plus the number
/// of levels actually used.
pub fn perceptual_loss_var<T: Real>(
    extractor: &PerceptualExtractor,
    scope: &Scope<'_, T>,
    generated: &Var<T>,
    target: &Var<T>,
) -> (Var<T>, usize) {
    let s = generated.shape();
    let levels = pyramid_levels(s[2].min(s[3]));
    let mut g = generated.clone();
    let mut t = target.clone();
    let mut total = Var::constant(Tensor::scalar(T::zero()));
    for i in 0..levels {
        if i > 0 {
            g = g.avg_pool2x2();
            t = t.avg_pool2x2();
        }
        let (fg, ft) = (extractor.features(scope, &g), extractor.features(scope, &t));
        let count: usize = fg.iter().map(|f| f.value().len()).sum();
        let mut level = Var::constant(Tensor::scalar(T::zero()));
        for (a, b) in fg.iter().zip(&ft) {
            level = level.add(&a.sub(b).abs().sum());
        }
        total = total.add(&level.scale(T::from_f64_lossy(1.0 / count as f64)));
    }
    (total, levels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptualLoss {
    pub value: f64,
    pub levels: usize,
}

/// Perceptual loss between two images with the model's frozen extractor.
pub fn pyramid_perceptual_loss<T: Real>(
    extractor: &PerceptualExtractor,
    store: &ParamStore<T>,
    generated: &ImageTensor,
    target: &ImageTensor,
) -> Result<PerceptualLoss> {
    if (generated.height(), generated.width()) != (target.height(), target.width()) {
        return Err(KpbeError::shape("perceptual loss needs images of equal size"));
    }
    let scope = Scope::inference(store);
    let (v, levels) = perceptual_loss_var(
        extractor,
        &scope,
        &Var::constant(generated.to_tensor::<T>()),
        &Var::constant(target.to_tensor::<T>()),
    );
    Ok(PerceptualLoss {
        value: v.value().item().to_f64_lossy(),
        levels,
    })
}

/// `Σ_i ‖δ_d,i‖₁ + Σ_i ‖δ_s,i‖₁`.
pub fn expression_loss(exp_d: &ExpressionDeform, exp_s: &ExpressionDeform) -> f64 {
    let l1 = |e: &ExpressionDeform| e.deltas().iter().flatten().map(|v| v.abs()).sum::<f64>();
    l1(exp_d) + l1(exp_s)
}

/// Batched expression loss: per-example L1 sums averaged over the batch.
pub fn expression_loss_var<T: Real>(exp_d: &Var<T>, exp_s: &Var<T>) -> Var<T> {
    let n = exp_d.shape()[0];
    exp_d
        .abs()
        .sum()
        .add(&exp_s.abs().sum())
        .scale(T::from_f64_lossy(1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_exp: f64,
    pub lambda_pix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_exp: 0.1,
            lambda_pix: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_p, self.lambda_exp, self.lambda_pix];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(KpbeError::Config(format!("loss weights must be finite and non-negative, got {all:?}")))
        }
    }
}

/// The individual loss terms and their weighted sum.
#[derive(Clone)]
pub struct LossTerms<V> {
    pub perceptual: V,
    pub expression: V,
    pub pixel: V,
    pub total: V,
}

pub fn total_loss_var<T: Real>(
    extractor: &PerceptualExtractor,
    scope: &Scope<'_, T>,
    generated: &Var<T>,
    target: &Var<T>,
    exp_s: &Var<T>,
    exp_d: &Var<T>,
    weights: &LossWeights,
) -> LossTerms<Var<T>> {
    let (perceptual, _) = perceptual_loss_var(extractor, scope, generated, target);
    let expression = expression_loss_var(exp_d, exp_s);
    let pixel = generated.sub(target).abs().mean();
    let w = |x: f64| T::from_f64_lossy(x);
    let total = perceptual
        .scale(w(weights.lambda_p))
        .add(&expression.scale(w(weights.lambda_exp)))
        .add(&pixel.scale(w(weights.lambda_pix)));
    LossTerms {
        perceptual,
        expression,
        pixel,
        total,
    }
}

/// Weighted total loss for plain values.
pub fn total_loss<T: Real>(
    extractor: &PerceptualExtractor,
    store: &ParamStore<T>,
    generated: &ImageTensor,
    target: &ImageTensor,
    exp_s: &ExpressionDeform,
    exp_d: &ExpressionDeform,
    weights: &LossWeights,
) -> Result<LossTerms<f64>> {
    weights.validate()?;
    if (generated.height(), generated.width()) != (target.height(), target.width()) {
        return Err(KpbeError::shape("total loss needs images of equal size"));
    }
    let scope = Scope::inference(store);
    let k = exp_s.deltas().len();
    let t = total_loss_var(
        extractor,
        &scope,
        &Var::constant(generated.to_tensor::<T>()),
        &Var::constant(target.to_tensor::<T>()),
        &Var::constant(exp_s.to_tensor::<T>().reshape(&[1, k, 3])),
        &Var::constant(exp_d.to_tensor::<T>().reshape(&[1, k, 3])),
        weights,
    );
    let f = |v: &Var<T>| v.value().item().to_f64_lossy();
    Ok(LossTerms {
        perceptual: f(&t.perceptual),
        expression: f(&t.expression),
        pixel: f(&t.pixel),
        total: f(&t.total),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            learning_rate: 2e-4,
            epochs: 200,
            batch_size: 4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(KpbeError::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(KpbeError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(KpbeError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    /// Stops training after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Seed of the sample order.
    pub seed: u64,
    /// Log a progress line every this many steps (0 disables).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            max_steps: None,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Driving frame from the same clip as the source.
    SelfReconstruction = 1,
    /// Expression from backend output, pose from the pose clip.
    Backend = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub source: ImageTensor,
    /// Pose-driving frame and reconstruction target.
    pub driving: ImageTensor,
    /// Backend frame supplying the expression in stage 2.
    pub expression: Option<ImageTensor>,
    pub stage: Stage,
}

/// A clip with its per-frame backend output, for stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendClip {
    pub ground_truth: FrameSequence,
    pub backend: FrameSequence,
}

impl BackendClip {
    pub fn new(ground_truth: FrameSequence, backend: FrameSequence) -> Result<Self> {
        if backend.len() < ground_truth.len() {
            return Err(KpbeError::invalid(format!(
                "backend provides {} frames for a clip of {}",
                backend.len(),
                ground_truth.len()
            )));
        }
        Ok(Self { ground_truth, backend })
    }
}

/// Deterministic sample order: indices are shuffled per epoch from the seed,
/// sources are drawn from the same clip.
pub struct SampleOrder {
    rng: ChaCha8Rng,
    index: Vec<(usize, usize)>,
    clip_lens: Vec<usize>,
}

impl SampleOrder {
    pub fn new(clip_lens: &[usize], seed: u64) -> Self {
        let index = clip_lens
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |f| (c, f)))
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            index,
            clip_lens: clip_lens.to_vec(),
        }
    }

    /// `(clip, source frame, driving frame)` for one epoch.
    pub fn epoch(&mut self) -> Vec<(usize, usize, usize)> {
        let mut order = self.index.clone();
        order.shuffle(&mut self.rng);
        order
            .into_iter()
            .map(|(c, d)| (c, self.rng.random_range(0..self.clip_lens[c]), d))
            .collect()
    }
}

/// One CSV row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_exp")]
    pub l_exp: f64,
    #[serde(rename = "L_pix")]
    pub l_pix: f64,
    pub total: f64,
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(KpbeError::from)).collect()
}

/// A stacked mini-batch.
pub struct Batch {
    pub source: Tensor<f32>,
    pub driving: Tensor<f32>,
    pub expression: Option<Tensor<f32>>,
}

impl Batch {
    pub fn from_samples(samples: &[TrainSample]) -> Result<Self> {
        let src: Vec<&ImageTensor> = samples.iter().map(|s| &s.source).collect();
        let drv: Vec<&ImageTensor> = samples.iter().map(|s| &s.driving).collect();
        let exp: Option<Vec<&ImageTensor>> = samples.iter().map(|s| s.expression.as_ref()).collect();
        Ok(Self {
            source: ImageTensor::batch(&src)?,
            driving: ImageTensor::batch(&drv)?,
            expression: exp.map(|e| ImageTensor::batch(&e)).transpose()?,
        })
    }
}

/// Model plus optimizer state, advanced one mini-batch at a time.
pub struct Trainer {
    pub model: Kpbe,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    pub epoch: u64,
    pub trace: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model: Kpbe, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.optimizer.adam(), &model.store);
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from a checkpoint with its optimizer moments, using the
    /// hyper-parameters of `config`.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = checkpoint.optimizer;
        optimizer.params = config.optimizer.adam();
        Ok(Self {
            model: checkpoint.model,
            optimizer,
            config,
            epoch: checkpoint.epoch,
            trace: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// Forward pass, losses, backward pass and one Adam update.
    pub fn step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let step = self.optimizer.step;
        let (record, grads) = {
            let nets = &self.model.nets;
            let scope = Scope::training(&self.model.store);
            let src = nets.encode_source(&scope, &Var::constant(batch.source.clone()));
            let target = Var::constant(batch.driving.clone());
            let drv = nets.encode_driving(&scope, &target);
            let code = match &batch.expression {
                None => drv,
                Some(e) => {
                    let b = nets.encode_driving(&scope, &Var::constant(e.clone()));
                    PoseCode {
                        expression: b.expression,
                        ..drv
                    }
                }
            };
            let syn = nets.drive(&scope, &src, &code);
            let terms = total_loss_var(
                &nets.extractor,
                &scope,
                &syn.image,
                &target,
                &src.pose.expression,
                &code.expression,
                &self.config.weights,
            );
            let f = |v: &Var<f32>| f64::from(v.value().item());
            let record = LossRecord {
                step,
                l_p: f(&terms.perceptual),
                l_exp: f(&terms.expression),
                l_pix: f(&terms.pixel),
                total: f(&terms.total),
            };
            let grads = scope.collect(&terms.total.backward());
            (record, grads)
        };
        let finite = [record.l_p, record.l_exp, record.l_pix, record.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite || grads.iter().any(|g| !g.all_finite()) {
            return Err(self.diagnose(step, &record, &grads));
        }
        self.optimizer.step(&mut self.model.store, &grads);
        self.trace.push(record);
        if self.config.log_every > 0 && step % self.config.log_every == 0 {
            log::info!(
                "step {step}: total {:.5} (L_p {:.5}, L_exp {:.5}, L_pix {:.5})",
                record.total,
                record.l_p,
                record.l_exp,
                record.l_pix
            );
        }
        Ok(record)
    }

    fn diagnose(&self, step: u64, record: &LossRecord, grads: &[Tensor<f32>]) -> KpbeError {
        let mut worst: Vec<(String, f32)> = self
            .model
            .store
            .iter()
            .zip(grads)
            .map(|((_, p), g)| {
                let m = g
                    .data()
                    .iter()
                    .fold(0f32, |acc, v| if v.is_finite() { acc.max(v.abs()) } else { f32::INFINITY });
                (p.name.clone(), m)
            })
            .collect();
        worst.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = worst.iter().take(8).map(|(n, m)| format!("{n}={m:e}")).collect();
        let detail = format!(
            "lr {:e}, losses {:?}, max-abs gradients [{}]",
            self.optimizer.params.lr,
            record,
            top.join(", ")
        );
        log::error!("aborting training at step {step}: {detail}");
        KpbeError::NonFiniteLoss { step, detail }
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.optimizer.step < m)
    }

    /// Runs up to `epochs` passes over the samples produced by `make`.
    fn run(&mut self, clip_lens: &[usize], make: impl Fn(usize, usize, usize) -> TrainSample) -> Result<()> {
        let mut order = SampleOrder::new(clip_lens, self.config.seed);
        let bs = self.config.optimizer.batch_size;
        for _ in 0..self.config.optimizer.epochs {
            if !self.budget_left() {
                break;
            }
            let plan = order.epoch();
            for chunk in plan.chunks(bs) {
                if !self.budget_left() {
                    break;
                }
                let samples: Vec<TrainSample> = chunk.iter().map(|&(c, s, d)| make(c, s, d)).collect();
                self.step(&Batch::from_samples(&samples)?)?;
            }
            self.epoch += 1;
        }
        Ok(())
    }

    /// Self-reconstruction epochs over `clips`.
    pub fn run_stage1(&mut self, clips: &[FrameSequence]) -> Result<()> {
        let res = self.model.config().resolution;
        for c in clips {
            c.frames()[0].check_size(res)?;
        }
        let lens: Vec<usize> = clips.iter().map(FrameSequence::len).collect();
        self.run(&lens, |c, s, d| TrainSample {
            source: clips[c].frames()[s].clone(),
            driving: clips[c].frames()[d].clone(),
            expression: None,
            stage: Stage::SelfReconstruction,
        })
    }

    /// Fine-tuning epochs with expressions from backend frames.
    pub fn run_stage2(&mut self, clips: &[BackendClip]) -> Result<()> {
        let res = self.model.config().resolution;
        for c in clips {
            c.ground_truth.frames()[0].check_size(res)?;
            c.backend.frames()[0].check_size(res)?;
        }
        let lens: Vec<usize> = clips.iter().map(|c| c.ground_truth.len()).collect();
        self.run(&lens, |c, s, d| TrainSample {
            source: clips[c].ground_truth.frames()[s].clone(),
            driving: clips[c].ground_truth.frames()[d].clone(),
            expression: Some(clips[c].backend.frames()[d].clone()),
            stage: Stage::Backend,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

/// Stage 1: self-reconstruction on clips.
pub fn train_stage1(model: Kpbe, clips: &[FrameSequence], config: &TrainConfig) -> Result<TrainOutcome> {
    if clips.is_empty() {
        return Err(KpbeError::invalid("stage 1 needs at least one clip"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run_stage1(clips)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        trace: trainer.trace,
    })
}

/// Stage 2: fine-tuning from a stage-1 checkpoint with backend expressions.
/// The optimizer starts fresh.
pub fn train_stage2(clips: &[BackendClip], checkpoint: Checkpoint, config: &TrainConfig) -> Result<TrainOutcome> {
    if clips.is_empty() {
        return Err(KpbeError::invalid("stage 2 needs at least one clip"));
    }
    let mut trainer = Trainer::new(checkpoint.model, config.clone())?;
    trainer.epoch = checkpoint.epoch;
    trainer.run_stage2(clips)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        trace: trainer.trace,
    })
}

pub const CHECKPOINT_FORMAT: &str = "kpbe-ckpt-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlobKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: BlobKind,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    epoch: u64,
    step: u64,
    seed: u64,
    optimizer: AdamParams,
    manifest: Vec<ManifestEntry>,
}

/// Model parameters with optimizer state, epoch counter and seed.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Kpbe,
    pub optimizer: Adam<f32>,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for kind in [BlobKind::Param, BlobKind::AdamM, BlobKind::AdamV] {
            for (_, p) in self.model.store.iter() {
                out.push(ManifestEntry {
                    name: p.name.clone(),
                    kind,
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.model.config().clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            seed: self.model.seed,
            optimizer: self.optimizer.params,
            manifest: self.manifest(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        let params = self.model.store.iter().map(|(_, p)| &p.value);
        for t in params.chain(&self.optimizer.m).chain(&self.optimizer.v) {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| KpbeError::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("file too short for a header"))?;
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length overflow"))?;
        let json = bytes
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| KpbeError::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(KpbeError::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
                header.format
            )));
        }
        let (nets, store) =
            Networks::build::<f32>(&header.config, header.seed).map_err(|e| KpbeError::Checkpoint(e.to_string()))?;
        let model = Kpbe::from_parts(nets, store, header.seed);
        let mut optimizer = Adam::new(header.optimizer, &model.store);
        optimizer.step = header.step;
        let mut ckpt = Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
        };
        let expected = ckpt.manifest();
        if expected != header.manifest {
            let first = expected
                .iter()
                .zip(&header.manifest)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} entries, expected {}", header.manifest.len(), expected.len()));
            return Err(KpbeError::ShapeMismatch(format!("checkpoint manifest: {first}")));
        }
        let body = &bytes[8 + hlen..];
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != total * 4 {
            return Err(corrupt(&format!(
                "parameter data is {} bytes, manifest needs {}",
                body.len(),
                total * 4
            )));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of four")));
        let ids: Vec<_> = ckpt.model.store.ids().collect();
        for &id in &ids {
            for v in ckpt.model.store.value_mut(id).data_mut() {
                *v = floats.next().expect("length checked");
            }
        }
        for t in ckpt.optimizer.m.iter_mut().chain(ckpt.optimizer.v.iter_mut()) {
            for v in t.data_mut() {
                *v = floats.next().expect("length checked");
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| KpbeError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored shapes match `config`.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.model.config().check_compatible(config)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_stops_before_the_extractor_minimum() {
        assert_eq!(pyramid_levels(64), 5);
        assert_eq!(pyramid_levels(16), 3);
        assert_eq!(pyramid_levels(3), 0);
    }

    #[test]
    fn expression_loss_is_a_sum_of_absolute_values() {
        let mut d = vec![[0.0; 3]; 15];
        d[0] = [0.1, -0.2, 0.0];
        d[1] = [0.0, 0.0, 0.3];
        let exp_d = ExpressionDeform::new(d.clone()).unwrap();
        let zero = ExpressionDeform::zero();
        assert!((expression_loss(&exp_d, &zero) - 0.6).abs() < 1e-12);
        let doubled = ExpressionDeform::new(d.iter().map(|v| v.map(|x| 2.0 * x)).collect()).unwrap();
        assert!((expression_loss(&doubled, &zero) - 1.2).abs() < 1e-12);
        assert_eq!(expression_loss(&zero, &zero), 0.0);
    }

    #[test]
    fn sample_order_is_deterministic_and_covers_every_frame() {
        let mut a = SampleOrder::new(&[3, 5], 9);
        let mut b = SampleOrder::new(&[3, 5], 9);
        let (ea, eb) = (a.epoch(), b.epoch());
        assert_eq!(ea, eb);
        let mut driving: Vec<_> = ea.iter().map(|&(c, _, d)| (c, d)).collect();
        driving.sort();
        assert_eq!(driving.len(), 8);
        assert!(ea.iter().all(|&(c, s, _)| s < [3, 5][c]));
    }

    #[test]
    fn invalid_optimizer_settings_are_rejected() {
        let mut o = OptimizerConfig::default();
        o.beta1 = 1.0;
        assert!(o.validate().is_err());
        let mut o = OptimizerConfig::default();
        o.learning_rate = 0.0;
        assert!(o.validate().is_err());
        let w = LossWeights {
            lambda_p: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn loss_trace_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![
            LossRecord { step: 0, l_p: 1.5, l_exp: 0.25, l_pix: 0.5, total: 2.025 },
            LossRecord { step: 1, l_p: 1.0, l_exp: 0.125, l_pix: 0.25, total: 1.2625 },
        ];
        write_loss_trace(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,L_p,L_exp,L_pix,total\n"));
        assert_eq!(read_loss_trace(&path).unwrap(), rows);
    }

    #[test]
    fn corrupt_checkpoints_are_structured_errors() {
        for bytes in [&b""[..], &b"\x05\0\0\0\0\0\0\0{oops"[..], &[255u8; 16][..]] {
            assert!(matches!(Checkpoint::from_bytes(bytes), Err(KpbeError::Checkpoint(_))));
        }
    }
}

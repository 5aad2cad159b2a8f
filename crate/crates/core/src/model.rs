//! The dual-stream regression network: residual image backbone, small
//! column-density subnet, fusion head, land-cover pretraining and the
//! head-swap that turns a pretrained classifier into a regressor.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::dataset::{LccSample, NormStats, LCC_CLASSES};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::init::Initializer;
use crate::nn::layers::{Conv2d, Flatten, Linear, MaxPool2d, Relu};
use crate::nn::loss::bce_with_logits;
use crate::nn::resnet::ResNet50;
pub use crate::nn::resnet::FEATURE_DIM;
use crate::nn::{Float, Module, Param};

/// Latent width of the column-density subnet.
pub const SUBNET_LATENT: usize = 128;
/// Flattened width of the subnet's last feature map for 120-px patches.
pub const SUBNET_FLAT: usize = 1815;
/// Hidden width of the regression head.
pub const HEAD_HIDDEN: usize = 512;
/// Head input width in fusion mode.
pub const FUSION_DIM: usize = FEATURE_DIM + SUBNET_LATENT;
/// Image channel count expected by the backbone.
pub const IMAGE_CHANNELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ImageOnly,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Scratch,
    PretrainedLcc,
}

/// Column-density branch: two valid convolutions with 3-px max pooling
/// after each, then a linear projection to `SUBNET_LATENT`.
pub struct Subnet<F: Float> {
    conv1: Conv2d<F>,
    relu1: Relu<F, ndarray::Ix4>,
    pool1: MaxPool2d<F>,
    conv2: Conv2d<F>,
    relu2: Relu<F, ndarray::Ix4>,
    pool2: MaxPool2d<F>,
    flatten: Flatten<F>,
    fc: Linear<F>,
    patch_size: usize,
}

/// Spatial chain for valid convs and pool stride = kernel = 3.
pub fn subnet_flat_dim(patch_size: usize) -> usize {
    let after = |s: usize, k: usize| (s - k + 1) / 3;
    let d = after(after(patch_size, 3), 5);
    15 * d * d
}

impl<F: Float> Subnet<F> {
    pub fn new(init: &mut Initializer, patch_size: usize) -> Self {
        let flat = subnet_flat_dim(patch_size);
        Subnet {
            conv1: Conv2d::new(init, 1, 10, 3, 1, 0, true),
            relu1: Relu::default(),
            pool1: MaxPool2d::new(3, 3, 0),
            conv2: Conv2d::new(init, 10, 15, 5, 1, 0, true),
            relu2: Relu::default(),
            pool2: MaxPool2d::new(3, 3, 0),
            flatten: Flatten::default(),
            fc: Linear::new(init, flat, SUBNET_LATENT),
            patch_size,
        }
    }

    /// (n, 1, s, s) -> (n, SUBNET_LATENT)
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array2<F>> {
        let (_, c, h, w) = x.dim();
        if c != 1 || h != self.patch_size || w != self.patch_size {
            return Err(Error::Argument(format!(
                "subnet expects 1x{0}x{0} patches, got {c}x{h}x{w}",
                self.patch_size
            )));
        }
        let mut out = self.conv1.forward(x, train)?;
        out = self.relu1.forward(&out, train);
        out = self.pool1.forward(&out, train)?;
        out = self.conv2.forward(&out, train)?;
        out = self.relu2.forward(&out, train);
        out = self.pool2.forward(&out, train)?;
        let flat = self.flatten.forward(&out, train);
        self.fc.forward(&flat, train)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array4<F> {
        let d = self.fc.backward(dy);
        let d = self.flatten.backward(&d);
        let d = self.pool2.backward(&d);
        let d = self.relu2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.pool1.backward(&d);
        let d = self.relu1.backward(&d);
        self.conv1.backward(&d)
    }
}

impl<F: Float> Module<F> for Subnet<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.fc.visit_params(f);
    }
}

/// Two dense layers, rectifier after the first only; the raw output is
/// unclamped (nonnegativity is applied at the reporting boundary).
pub struct Head<F: Float> {
    fc1: Linear<F>,
    relu: Relu<F, Ix2>,
    fc2: Linear<F>,
}

impl<F: Float> Head<F> {
    pub fn new(init: &mut Initializer, in_dim: usize) -> Self {
        Head {
            fc1: Linear::new(init, in_dim, HEAD_HIDDEN),
            relu: Relu::default(),
            fc2: Linear::new(init, HEAD_HIDDEN, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_features()
    }

    /// (n, in_dim) -> (n,)
    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Result<Array1<F>> {
        let h = self.fc1.forward(x, train)?;
        let h = self.relu.forward(&h, train);
        let out = self.fc2.forward(&h, train)?;
        Ok(out.index_axis(Axis(1), 0).to_owned())
    }

    pub fn backward(&mut self, dy: &Array1<F>) -> Array2<F> {
        let dy2 = dy.view().insert_axis(Axis(1)).to_owned();
        let d = self.fc2.backward(&dy2);
        let d = self.relu.backward(&d);
        self.fc1.backward(&d)
    }
}

impl<F: Float> Module<F> for Head<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

pub struct Model<F: Float> {
    pub backbone: ResNet50<F>,
    pub subnet: Option<Subnet<F>>,
    pub head: Head<F>,
    /// Present only between `pretrain_lcc` and `swap_head`.
    pub classifier: Option<Linear<F>>,
    variant: Variant,
    provenance: Provenance,
    seed: u64,
    patch_size: usize,
}

const HEAD_SALT: u64 = 0x68_65_61_64;
const CLASSIFIER_SALT: u64 = 0x6c_63_63;

impl<F: Float> Model<F> {
    pub fn new(seed: u64, variant: Variant) -> Self {
        Self::with_patch_size(seed, variant, crate::s5p_ingest::PATCH_SIZE)
    }

    /// Smaller patch sizes are for tests; the pipeline uses 120.
    pub fn with_patch_size(seed: u64, variant: Variant, patch_size: usize) -> Self {
        let mut init = Initializer::new(seed);
        let backbone = ResNet50::new(&mut init, IMAGE_CHANNELS);
        let subnet = match variant {
            Variant::Fusion => Some(Subnet::new(&mut init, patch_size)),
            Variant::ImageOnly => None,
        };
        let head_dim = match variant {
            Variant::Fusion => FEATURE_DIM + SUBNET_LATENT,
            Variant::ImageOnly => FEATURE_DIM,
        };
        if patch_size == crate::s5p_ingest::PATCH_SIZE {
            debug_assert_eq!(subnet_flat_dim(patch_size), SUBNET_FLAT);
            debug_assert_eq!(head_dim == FUSION_DIM, variant == Variant::Fusion);
        }
        let head = Head::new(&mut Initializer::new(seed ^ HEAD_SALT), head_dim);
        Model {
            backbone,
            subnet,
            head,
            classifier: None,
            variant,
            provenance: Provenance::Scratch,
            seed,
            patch_size,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Raw (unclamped) predictions in the target's normalization.
    pub fn forward(
        &mut self,
        images: &Array4<F>,
        patches: Option<&Array4<F>>,
        train: bool,
    ) -> Result<Array1<F>> {
        let (n, c, _, _) = images.dim();
        if c != IMAGE_CHANNELS {
            return Err(Error::Argument(format!(
                "model expects {IMAGE_CHANNELS}-channel images, got {c}"
            )));
        }
        let features = self.backbone.forward(images, train)?;
        check_finite(&features, "backbone features")?;
        let head_in = match (&mut self.subnet, patches) {
            (Some(subnet), Some(p)) => {
                if p.dim().0 != n {
                    return Err(Error::Argument(format!(
                        "batch mismatch: {n} images vs {} patches",
                        p.dim().0
                    )));
                }
                let latents = subnet.forward(p, train)?;
                check_finite(&latents, "subnet latents")?;
                ndarray::concatenate(Axis(1), &[features.view(), latents.view()])
                    .expect("feature/latent rows align")
            }
            (Some(_), None) => {
                return Err(Error::Argument(
                    "fusion model needs column-density patches".into(),
                ))
            }
            (None, _) => features,
        };
        let out = self.head.forward(&head_in, train)?;
        check_finite(&out, "head output")?;
        Ok(out)
    }

    /// Backpropagate from d(loss)/d(prediction); gradients accumulate on
    /// all active branches.
    pub fn backward(&mut self, dpred: &Array1<F>) {
        let dhead_in = self.head.backward(dpred);
        match &mut self.subnet {
            Some(subnet) => {
                let dfeat = dhead_in.slice(ndarray::s![.., ..FEATURE_DIM]).to_owned();
                let dlat = dhead_in.slice(ndarray::s![.., FEATURE_DIM..]).to_owned();
                subnet.backward(&dlat);
                self.backbone.backward(&dfeat);
            }
            None => {
                self.backbone.backward(&dhead_in);
            }
        }
    }

    /// Replace the classification layer (if any) and the head with a
    /// fresh head initialized from `seed`; backbone and subnet weights
    /// are untouched. Scratch states need `allow_scratch`.
    pub fn swap_head(mut self, seed: u64, allow_scratch: bool) -> Result<Model<F>> {
        if self.provenance == Provenance::Scratch && !allow_scratch {
            return Err(Error::Provenance(
                "swap_head on a scratch model (pass the override to allow)".into(),
            ));
        }
        self.classifier = None;
        self.head = Head::new(&mut Initializer::new(seed ^ HEAD_SALT), self.head.in_dim());
        self.seed = seed;
        Ok(self)
    }
}

impl<F: Float> Module<F> for Model<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.backbone.visit_params(f);
        if let Some(s) = &mut self.subnet {
            s.visit_params(f);
        }
        self.head.visit_params(f);
        if let Some(c) = &mut self.classifier {
            c.visit_params(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<F>)) {
        self.backbone.visit_state(f);
    }
}

fn check_finite<F: Float, D: ndarray::Dimension>(
    a: &ndarray::Array<F, D>,
    layer: &str,
) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {layer}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Train the backbone on multi-label land-cover classification through a
/// temporary sigmoid classifier; returns per-epoch mean losses and tags
/// the model pretrained-LCC.
pub fn pretrain_lcc<F: Float>(
    model: &mut Model<F>,
    data: &[LccSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no land-cover samples".into()));
    }
    if data.iter().all(|s| s.labels.iter().filter(|&&v| v > 0.0).count() <= 1) {
        return Err(Error::Config(
            "land-cover pretraining needs a multi-label dataset; every sample has at most one active label".into(),
        ));
    }
    if data.iter().any(|s| s.labels.len() != LCC_CLASSES) {
        return Err(Error::Config(format!(
            "land-cover labels must have {LCC_CLASSES} classes"
        )));
    }
    if model.classifier.is_none() {
        model.classifier = Some(Linear::new(
            &mut Initializer::new(model.seed ^ CLASSIFIER_SALT),
            FEATURE_DIM,
            LCC_CLASSES,
        ));
    }

    // per-channel standardization over the pretraining corpus
    let channels = data[0].image.dim().0;
    let mut mean = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for s in data {
        count += s.image.dim().1 * s.image.dim().2;
        for (c, plane) in s.image.axis_iter(Axis(0)).enumerate() {
            for &v in plane.iter() {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let std: Vec<f64> = (0..channels)
        .map(|c| {
            mean[c] /= count as f64;
            ((sq[c] / count as f64 - mean[c] * mean[c]).max(1e-12)).sqrt()
        })
        .collect();
    let standardized = |s: &Array3<f32>| -> Array3<F> {
        let mut out = ndarray::Array3::<F>::zeros(s.raw_dim());
        for (c, (mut dst, src)) in out.axis_iter_mut(Axis(0)).zip(s.axis_iter(Axis(0))).enumerate() {
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| {
                *d = F::from_f64((v as f64 - mean[c]) / std[c]).unwrap();
            });
        }
        out
    };

    let mut opt = Adam::<F>::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let (_, s, _) = data[0].image.dim();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut images = Array4::<F>::zeros((n, channels, s, s));
            let mut labels = Array2::<F>::zeros((n, LCC_CLASSES));
            for (bi, &di) in chunk.iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), bi)
                    .assign(&standardized(&data[di].image));
                for (l, &v) in data[di].labels.iter().enumerate() {
                    labels[[bi, l]] = F::from_f32(v).unwrap();
                }
            }
            model.zero_grads();
            let features = model.backbone.forward(&images, true)?;
            let classifier = model.classifier.as_mut().unwrap();
            let logits = classifier.forward(&features, true)?;
            let (loss, dlogits) = bce_with_logits(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pretraining loss in epoch {_epoch}"
                )));
            }
            let dfeat = classifier.backward(&dlogits);
            model.backbone.backward(&dfeat);
            opt.step_module(model);
            epoch_loss += loss.to_f64().unwrap();
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    model.provenance = Provenance::PretrainedLcc;
    Ok(history)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCK";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema: u32,
    float_bits: u32,
    variant: Variant,
    provenance: Provenance,
    seed: u64,
    patch_size: usize,
    input_channels: usize,
    feature_dim: usize,
    subnet_latent: usize,
    head_hidden: usize,
    has_classifier: bool,
    n_param_blocks: usize,
    n_state_blocks: usize,
    norm: Option<NormStats>,
}

impl Model<f32> {
    /// Write weights and running state as f32 blocks in traversal order.
    pub fn save(&mut self, path: &Path, norm: Option<&NormStats>) -> Result<()> {
        let mut n_params = 0usize;
        let mut n_state = 0usize;
        self.visit_params(&mut |_| n_params += 1);
        self.visit_state(&mut |_| n_state += 1);
        let header = CheckpointHeader {
            schema: 1,
            float_bits: 32,
            variant: self.variant,
            provenance: self.provenance,
            seed: self.seed,
            patch_size: self.patch_size,
            input_channels: IMAGE_CHANNELS,
            feature_dim: FEATURE_DIM,
            subnet_latent: SUBNET_LATENT,
            head_hidden: HEAD_HIDDEN,
            has_classifier: self.classifier.is_some(),
            n_param_blocks: n_params,
            n_state_blocks: n_state,
            norm: norm.cloned(),
        };
        let mut writer = Some(ContainerWriter::create(path, CHECKPOINT_MAGIC, &header)?);
        let mut failure = None;
        self.visit_params(&mut |p| {
            if failure.is_none() {
                let flat: Vec<f32> = p.value.iter().copied().collect();
                if let Err(e) = writer.as_mut().unwrap().write_block(&flat) {
                    failure = Some(e);
                }
            }
        });
        self.visit_state(&mut |s| {
            if failure.is_none() {
                let flat: Vec<f32> = s.iter().copied().collect();
                if let Err(e) = writer.as_mut().unwrap().write_block(&flat) {
                    failure = Some(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        writer.unwrap().finish()
    }

    pub fn load(path: &Path) -> Result<(Model<f32>, Option<NormStats>)> {
        let (mut reader, header): (ContainerReader, CheckpointHeader) =
            ContainerReader::open(path, CHECKPOINT_MAGIC)?;
        if header.schema != 1 || header.float_bits != 32 {
            return Err(Error::Format(format!(
                "unsupported checkpoint schema {} / {} bits",
                header.schema, header.float_bits
            )));
        }
        if header.input_channels != IMAGE_CHANNELS
            || header.feature_dim != FEATURE_DIM
            || header.subnet_latent != SUBNET_LATENT
            || header.head_hidden != HEAD_HIDDEN
        {
            return Err(Error::Config(format!(
                "checkpoint dimensions ({}ch/{}f/{}l/{}h) do not match this build ({IMAGE_CHANNELS}ch/{FEATURE_DIM}f/{SUBNET_LATENT}l/{HEAD_HIDDEN}h)",
                header.input_channels, header.feature_dim, header.subnet_latent, header.head_hidden
            )));
        }
        let mut model = Model::<f32>::with_patch_size(header.seed, header.variant, header.patch_size);
        model.provenance = header.provenance;
        if header.has_classifier {
            model.classifier = Some(Linear::new(
                &mut Initializer::new(header.seed ^ CLASSIFIER_SALT),
                FEATURE_DIM,
                LCC_CLASSES,
            ));
        }
        let mut blocks = Vec::with_capacity(header.n_param_blocks + header.n_state_blocks);
        for _ in 0..header.n_param_blocks + header.n_state_blocks {
            blocks.push(reader.read_block()?);
        }
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_params(&mut |p| {
            if failure.is_some() {
                return;
            }
            match blocks.get(idx) {
                Some(b) if b.len() == p.value.len() => {
                    for (dst, &src) in p.value.iter_mut().zip(b.iter()) {
                        *dst = src;
                    }
                }
                Some(b) => {
                    failure = Some(Error::Format(format!(
                        "checkpoint block {idx} has {} values, expected {}",
                        b.len(),
                        p.value.len()
                    )))
                }
                None => failure = Some(Error::Format("checkpoint is short of blocks".into())),
            }
            idx += 1;
        });
        model.visit_state(&mut |s| {
            if failure.is_some() {
                return;
            }
            match blocks.get(idx) {
                Some(b) if b.len() == s.len() => {
                    for (dst, &src) in s.iter_mut().zip(b.iter()) {
                        *dst = src;
                    }
                }
                _ => failure = Some(Error::Format(format!("bad state block {idx}"))),
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, model consumed {idx}",
                blocks.len()
            )));
        }
        Ok((model, header.norm))
    }
}

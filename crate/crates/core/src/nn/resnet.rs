//! 50-layer bottleneck residual backbone producing a 2048-d feature
//! vector, with a configurable number of input channels.

use ndarray::{Array2, Array4, Ix4};

use super::init::Initializer;
use super::layers::{BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, Relu};
use super::{Float, Module, Param};
use crate::error::Result;

/// Feature dimension emitted by the backbone.
pub const FEATURE_DIM: usize = 2048;

const EXPANSION: usize = 4;

pub struct Bottleneck<F: Float> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Relu<F, Ix4>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    relu2: Relu<F, Ix4>,
    conv3: Conv2d<F>,
    bn3: BatchNorm2d<F>,
    relu3: Relu<F, Ix4>,
    downsample: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

impl<F: Float> Bottleneck<F> {
    fn new(init: &mut Initializer, in_channels: usize, mid_channels: usize, stride: usize) -> Self {
        let out_channels = mid_channels * EXPANSION;
        let downsample = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(init, in_channels, out_channels, 1, stride, 0, false),
                BatchNorm2d::new(out_channels),
            )
        });
        Bottleneck {
            conv1: Conv2d::new(init, in_channels, mid_channels, 1, 1, 0, false),
            bn1: BatchNorm2d::new(mid_channels),
            relu1: Relu::default(),
            conv2: Conv2d::new(init, mid_channels, mid_channels, 3, stride, 1, false),
            bn2: BatchNorm2d::new(mid_channels),
            relu2: Relu::default(),
            conv3: Conv2d::new(init, mid_channels, out_channels, 1, 1, 0, false),
            bn3: BatchNorm2d::new(out_channels),
            relu3: Relu::default(),
            downsample,
        }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array4<F>> {
        let mut out = self.conv1.forward(x, train)?;
        out = self.bn1.forward(&out, train)?;
        out = self.relu1.forward(&out, train);
        out = self.conv2.forward(&out, train)?;
        out = self.bn2.forward(&out, train)?;
        out = self.relu2.forward(&out, train);
        out = self.conv3.forward(&out, train)?;
        out = self.bn3.forward(&out, train)?;
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, train)?;
                bn.forward(&s, train)?
            }
            None => x.clone(),
        };
        out += &shortcut;
        Ok(self.relu3.forward(&out, train))
    }

    fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d = self.relu3.backward(dy);
        // branch
        let db = self.bn3.backward(&d);
        let db = self.conv3.backward(&db);
        let db = self.relu2.backward(&db);
        let db = self.bn2.backward(&db);
        let db = self.conv2.backward(&db);
        let db = self.relu1.backward(&db);
        let db = self.bn1.backward(&db);
        let mut dx = self.conv1.backward(&db);
        // shortcut
        match &mut self.downsample {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                dx += &conv.backward(&ds);
            }
            None => dx += &d,
        }
        dx
    }
}

impl<F: Float> Module<F> for Bottleneck<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        self.conv3.visit_params(f);
        self.bn3.visit_params(f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ndarray::ArrayD<F>)) {
        self.bn1.visit_state(f);
        self.bn2.visit_state(f);
        self.bn3.visit_state(f);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_state(f);
        }
    }
}

/// ResNet-50 feature extractor: stem, four bottleneck stages of
/// [3, 4, 6, 3] blocks, global average pooling to `FEATURE_DIM`.
pub struct ResNet50<F: Float> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu: Relu<F, Ix4>,
    maxpool: MaxPool2d<F>,
    blocks: Vec<Bottleneck<F>>,
    gap: GlobalAvgPool<F>,
    input_channels: usize,
}

impl<F: Float> ResNet50<F> {
    pub fn new(init: &mut Initializer, input_channels: usize) -> Self {
        let stage_blocks = [3usize, 4, 6, 3];
        let stage_mid = [64usize, 128, 256, 512];
        let mut blocks = Vec::new();
        let mut in_ch = 64;
        for (stage, (&n_blocks, &mid)) in stage_blocks.iter().zip(&stage_mid).enumerate() {
            for b in 0..n_blocks {
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(init, in_ch, mid, stride));
                in_ch = mid * EXPANSION;
            }
        }
        ResNet50 {
            conv1: Conv2d::new(init, input_channels, 64, 7, 2, 3, false),
            bn1: BatchNorm2d::new(64),
            relu: Relu::default(),
            maxpool: MaxPool2d::new(3, 2, 1),
            blocks,
            gap: GlobalAvgPool::default(),
            input_channels,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// (n, channels, h, w) -> (n, FEATURE_DIM)
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Array2<F>> {
        let mut out = self.conv1.forward(x, train)?;
        out = self.bn1.forward(&out, train)?;
        out = self.relu.forward(&out, train);
        out = self.maxpool.forward(&out, train)?;
        for block in &mut self.blocks {
            out = block.forward(&out, train)?;
        }
        let features = self.gap.forward(&out, train);
        debug_assert_eq!(features.ncols(), FEATURE_DIM);
        Ok(features)
    }

    pub fn backward(&mut self, dfeatures: &Array2<F>) -> Array4<F> {
        let mut d = self.gap.backward(dfeatures);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        d = self.maxpool.backward(&d);
        d = self.relu.backward(&d);
        d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }
}

impl<F: Float> Module<F> for ResNet50<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ndarray::ArrayD<F>)) {
        self.bn1.visit_state(f);
        for b in &mut self.blocks {
            b.visit_state(f);
        }
    }
}

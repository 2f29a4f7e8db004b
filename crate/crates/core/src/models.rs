//! Model builders: the sequential 6-conv classifier, a ResNet15-scale
//! residual classifier and the fully-convolutional segmenter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, Conv2d, Dense, GradCheckReport, Layer, ModelGraph, ResidualBlock, Tensor};

/// Pooling stops once the feature map is this small.
pub const MIN_POOLED_SIZE: usize = 4;

fn default_seq_widths() -> Vec<usize> {
    vec![16, 32, 32, 64, 64, 128]
}

fn default_hidden() -> usize {
    128
}

fn default_resnet_widths() -> Vec<usize> {
    vec![32, 64, 128]
}

fn default_encoder() -> Vec<usize> {
    vec![16, 32, 64, 64]
}

fn default_decoder() -> Vec<usize> {
    vec![64, 32, 16, 16]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequentialCnnSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    #[serde(default = "default_seq_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl SequentialCnnSpec {
    pub fn new(in_channels: usize, num_classes: usize, input_size: usize) -> Self {
        SequentialCnnSpec {
            in_channels,
            num_classes,
            input_size,
            widths: default_seq_widths(),
            hidden: default_hidden(),
        }
    }

    /// Spatial side after each conv stage, following the pool-skipping rule.
    pub fn feature_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.widths
            .iter()
            .map(|_| {
                if s > MIN_POOLED_SIZE {
                    s /= 2;
                }
                s
            })
            .collect()
    }

    pub fn build<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelGraph> {
        if self.input_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "sequential CNN needs input size >= 32, got {}",
                self.input_size
            )));
        }
        if self.widths.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "sequential CNN has exactly 6 conv layers, got {} widths",
                self.widths.len()
            )));
        }
        check_counts(self.in_channels, self.num_classes)?;
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        let mut s = self.input_size;
        for (i, &k) in self.widths.iter().enumerate() {
            layers.push(Layer::Conv2d(Conv2d::new(format!("conv{}", i + 1), c, k, 3, 1, 1, rng)));
            layers.push(Layer::Relu);
            if s > MIN_POOLED_SIZE {
                layers.push(Layer::MaxPool2d { window: 2 });
                s /= 2;
            }
            c = k;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(Dense::new("fc1", c * s * s, self.hidden, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Dense(Dense::new("fc2", self.hidden, self.num_classes, rng)));
        layers.push(Layer::Softmax);
        ModelGraph::new(vec![self.in_channels, self.input_size, self.input_size], layers)
    }
}

/// Stem conv and pool, then three stages of two basic residual blocks. Stages
/// after the first open with a stride-2 conv that changes the width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNet15Spec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    #[serde(default = "default_resnet_widths")]
    pub widths: Vec<usize>,
}

impl ResNet15Spec {
    pub fn new(in_channels: usize, num_classes: usize, input_size: usize) -> Self {
        ResNet15Spec {
            in_channels,
            num_classes,
            input_size,
            widths: default_resnet_widths(),
        }
    }

    pub fn build<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelGraph> {
        self.build_with_blocks(rng, true)
    }

    /// Same net without the residual blocks (the pure skip path).
    pub fn build_skip_path<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelGraph> {
        self.build_with_blocks(rng, false)
    }

    fn build_with_blocks<R: rand::Rng + ?Sized>(&self, rng: &mut R, blocks: bool) -> Result<ModelGraph> {
        check_counts(self.in_channels, self.num_classes)?;
        if self.widths.len() != 3 {
            return Err(Error::InvalidArgument("ResNet15 has 3 stage widths".into()));
        }
        if self.input_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "ResNet15 needs input size >= 8, got {}",
                self.input_size
            )));
        }
        let w = &self.widths;
        let mut layers = vec![
            Layer::Conv2d(Conv2d::new("stem", self.in_channels, w[0], 3, 1, 1, rng)),
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
        ];
        for (stage, &width) in w.iter().enumerate() {
            if stage > 0 {
                let name = format!("stage{}.down", stage + 1);
                layers.push(Layer::Conv2d(Conv2d::new(name, w[stage - 1], width, 3, 2, 1, rng)));
                layers.push(Layer::Relu);
            }
            for b in 0..2 {
                let block = ResidualBlock::new(format!("stage{}.block{}", stage + 1, b + 1), width, rng);
                if blocks {
                    layers.push(Layer::Residual(block));
                }
            }
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense(Dense::new("fc", w[2], self.num_classes, rng)));
        layers.push(Layer::Softmax);
        ModelGraph::new(vec![self.in_channels, self.input_size, self.input_size], layers)
    }
}

/// Encoder of conv + ReLU + pool stages, decoder of upsample + conv + ReLU
/// stages, then a 1x1 head to background plus `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnSegmenterSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_encoder")]
    pub encoder: Vec<usize>,
    #[serde(default = "default_decoder")]
    pub decoder: Vec<usize>,
}

impl FcnSegmenterSpec {
    pub fn new(in_channels: usize, num_classes: usize, height: usize, width: usize) -> Self {
        FcnSegmenterSpec {
            in_channels,
            num_classes,
            height,
            width,
            encoder: default_encoder(),
            decoder: default_decoder(),
        }
    }

    /// Both dimensions must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.encoder.len()
    }

    pub fn build<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelGraph> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("FCN needs channels and at least one class".into()));
        }
        if self.encoder.len() != self.decoder.len() || self.encoder.is_empty() {
            return Err(Error::InvalidArgument("encoder and decoder need equal, non-zero depth".into()));
        }
        let d = self.divisor();
        if !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "FCN input {}x{} is not divisible by {d}",
                self.width, self.height
            )));
        }
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        for (i, &k) in self.encoder.iter().enumerate() {
            layers.push(Layer::Conv2d(Conv2d::new(format!("enc{}", i + 1), c, k, 3, 1, 1, rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2d { window: 2 });
            c = k;
        }
        for (i, &k) in self.decoder.iter().enumerate() {
            layers.push(Layer::NearestUpsample { factor: 2 });
            layers.push(Layer::Conv2d(Conv2d::new(format!("dec{}", i + 1), c, k, 3, 1, 1, rng)));
            layers.push(Layer::Relu);
            c = k;
        }
        layers.push(Layer::Conv2d(Conv2d::new("head", c, self.num_classes + 1, 1, 1, 0, rng)));
        layers.push(Layer::Softmax);
        ModelGraph::new(vec![self.in_channels, self.height, self.width], layers)
    }
}

fn check_counts(in_channels: usize, num_classes: usize) -> Result<()> {
    if in_channels == 0 || num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs input channels and >= 2 classes, got {in_channels} / {num_classes}"
        )));
    }
    Ok(())
}

/// Any of the three architectures, as stored in configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    Sequential(SequentialCnnSpec),
    Resnet15(ResNet15Spec),
    Fcn(FcnSegmenterSpec),
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ModelSpec::Sequential(s) => s.build(&mut rng),
            ModelSpec::Resnet15(s) => s.build(&mut rng),
            ModelSpec::Fcn(s) => s.build(&mut rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelSpec::Sequential(s) => s.in_channels,
            ModelSpec::Resnet15(s) => s.in_channels,
            ModelSpec::Fcn(s) => s.in_channels,
        }
    }

    pub fn set_in_channels(&mut self, c: usize) {
        match self {
            ModelSpec::Sequential(s) => s.in_channels = c,
            ModelSpec::Resnet15(s) => s.in_channels = c,
            ModelSpec::Fcn(s) => s.in_channels = c,
        }
    }

    /// Name of the first conv layer, the target of input-layer surgery.
    pub fn input_layer(&self) -> &'static str {
        match self {
            ModelSpec::Sequential(_) => "conv1",
            ModelSpec::Resnet15(_) => "stem",
            ModelSpec::Fcn(_) => "enc1",
        }
    }
}

pub fn build_sequential(in_channels: usize, num_classes: usize, input_size: usize, seed: u64) -> Result<ModelGraph> {
    ModelSpec::Sequential(SequentialCnnSpec::new(in_channels, num_classes, input_size)).build(seed)
}

pub fn build_resnet15(in_channels: usize, num_classes: usize, input_size: usize, seed: u64) -> Result<ModelGraph> {
    ModelSpec::Resnet15(ResNet15Spec::new(in_channels, num_classes, input_size)).build(seed)
}

pub fn build_fcn(in_channels: usize, num_classes: usize, height: usize, width: usize, seed: u64) -> Result<ModelGraph> {
    ModelSpec::Fcn(FcnSegmenterSpec::new(in_channels, num_classes, height, width)).build(seed)
}

/// Weight initialisation. Every scheme draws uniformly around zero with
/// zero biases; they differ only in the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `sqrt(1 / fan_in)`.
    #[default]
    FanIn,
    /// `sqrt(6 / fan_in)`, which keeps activation variance roughly constant
    /// through ReLU layers.
    He,
}

/// Rescales freshly built `*.weight` tensors from the fan-in bound to
/// `scheme`'s bound.
pub fn apply_init(model: &mut ModelGraph, scheme: InitScheme) {
    let gain = match scheme {
        InitScheme::FanIn => return,
        InitScheme::He => 6f64.sqrt(),
    };
    for (name, t) in model.parameters_mut() {
        if name.ends_with(".weight") {
            t.data_mut().iter_mut().for_each(|w| *w *= gain);
        }
    }
}

/// Slim versions of the three architectures, small enough to perturb every
/// parameter at `size`x`size`.
pub fn gradcheck_specs(size: usize) -> Vec<ModelSpec> {
    vec![
        ModelSpec::Sequential(SequentialCnnSpec {
            widths: vec![2, 3, 3, 4, 4, 4],
            hidden: 8,
            ..SequentialCnnSpec::new(4, 3, size)
        }),
        ModelSpec::Resnet15(ResNet15Spec {
            widths: vec![2, 3, 4],
            ..ResNet15Spec::new(4, 3, size)
        }),
        ModelSpec::Fcn(FcnSegmenterSpec {
            encoder: vec![2, 3, 3, 4],
            decoder: vec![4, 3, 2, 2],
            ..FcnSegmenterSpec::new(4, 2, size, size)
        }),
    ]
}

/// Finite-difference check of every slim architecture on one random input.
/// Biases are randomised first: zero biases put exact ReLU kinks at dark
/// patches, where central differences are meaningless.
pub fn gradcheck_suite(size: usize, seed: u64) -> Result<Vec<(ModelSpec, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[1, 4, size, size], 1.0, &mut rng);
    let mut out = Vec::new();
    for spec in gradcheck_specs(size) {
        let mut m = spec.build(seed)?;
        for (name, t) in m.parameters_mut() {
            if name.ends_with(".bias") {
                *t = Tensor::uniform(t.shape(), 0.1, &mut rng);
            }
        }
        let rep = finite_diff_check(&mut m, &x, 1e-6, seed)?;
        out.push((spec, rep));
    }
    Ok(out)
}

//! Convolutional backbones: architecture descriptors, writer-classification
//! fine-tuning with early stopping, and feature extraction from a designated
//! intermediate layer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, invert, resize_normalize, InputSpec, Polarity, SignatureImage};
use crate::nn::{self, loss, Init, LayerSpec, NamedSpec, Optimizer, OptimizerKind, PadMode, Sequential};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Self {
        Self {
            values,
            model_id: model_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * c).collect(), self.model_id.clone())
    }
}

/// Widths of the desk-scale network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    /// One 3x3 conv + ReLU + 2x2 max-pool stage per entry.
    pub conv_channels: Vec<usize>,
    /// Width of the embedding layer used as the feature layer.
    pub embed_width: usize,
    #[serde(default)]
    pub identity_embed: bool,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16, 32],
            embed_width: 64,
            identity_embed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Arch {
    VggLike,
    ResnetLike,
    Tiny(TinyConfig),
}

impl Arch {
    pub fn default_batch_size(&self) -> usize {
        match self {
            Arch::VggLike => 64,
            Arch::ResnetLike | Arch::Tiny(_) => 32,
        }
    }

    pub fn default_input(&self) -> InputSpec {
        match self {
            Arch::VggLike | Arch::ResnetLike => InputSpec::imagenet(224, 224),
            Arch::Tiny(_) => InputSpec::grayscale(64, 64),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Arch::VggLike => "vgg_like",
            Arch::ResnetLike => "resnet_like",
            Arch::Tiny(_) => "tiny",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vgg_like" | "vgg16" => Ok(Arch::VggLike),
            "resnet_like" | "resnet50" => Ok(Arch::ResnetLike),
            "tiny" => Ok(Arch::Tiny(TinyConfig::default())),
            other => Err(Error::validation(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    #[default]
    Raw,
    Cleaned,
    Inverse,
}

impl fmt::Display for InputVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputVariant::Raw => "raw",
            InputVariant::Cleaned => "cleaned",
            InputVariant::Inverse => "inverse",
        })
    }
}

impl FromStr for InputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(InputVariant::Raw),
            "cleaned" | "clean" => Ok(InputVariant::Cleaned),
            "inverse" => Ok(InputVariant::Inverse),
            other => Err(Error::validation(format!("unknown input variant '{other}'"))),
        }
    }
}

/// Layer graph plus the names of the feature and response layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub specs: Vec<NamedSpec>,
    pub feature_layer: String,
    /// Output of the last convolution stage, used for response maps.
    pub response_layer: String,
    pub head_layer: String,
    pub input: InputSpec,
}

impl ArchDescriptor {
    fn in_shape(&self) -> nn::Shape {
        [self.input.channels, self.input.height, self.input.width]
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let [c, h, w] = nn::shape_at(&self.specs, self.in_shape(), &self.feature_layer)?;
        Ok(c * h * w)
    }

    pub fn response_filters(&self) -> Result<usize> {
        Ok(nn::shape_at(&self.specs, self.in_shape(), &self.response_layer)?[0])
    }

    pub fn param_count(&self) -> usize {
        nn::specs_param_count(&self.specs)
    }

    /// Feature layer must exist and come before the head.
    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        let out = nn::specs_output_shape(&self.specs, self.in_shape())?;
        let top = |p: &str| p.split('.').next().unwrap_or(p).to_string();
        let names: Vec<&str> = self.specs.iter().map(|s| s.name.as_str()).collect();
        let pos = |p: &str| names.iter().position(|n| *n == top(p));
        match (pos(&self.feature_layer), pos(&self.head_layer)) {
            (Some(f), Some(h)) if f < h => {}
            _ => {
                return Err(Error::validation(format!(
                    "feature layer '{}' must exist and precede head '{}'",
                    self.feature_layer, self.head_layer
                )))
            }
        }
        nn::shape_at(&self.specs, self.in_shape(), &self.feature_layer)?;
        nn::shape_at(&self.specs, self.in_shape(), &self.response_layer)?;
        if out[1] != 1 || out[2] != 1 {
            return Err(Error::validation("network output must be a class vector"));
        }
        Ok(())
    }
}

fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> NamedSpec {
    NamedSpec::new(
        name,
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
            pad_mode: PadMode::Zero,
            bias: true,
            init: Init::He,
        },
    )
}

fn linear(name: impl Into<String>, i: usize, o: usize, init: Init) -> NamedSpec {
    NamedSpec::new(
        name,
        LayerSpec::Linear {
            in_features: i,
            out_features: o,
            init,
        },
    )
}

fn relu(name: impl Into<String>) -> NamedSpec {
    NamedSpec::new(name, LayerSpec::Relu)
}

fn bn(name: impl Into<String>, c: usize) -> NamedSpec {
    NamedSpec::new(
        name,
        LayerSpec::BatchNorm {
            channels: c,
            eps: 1e-5,
            momentum: 0.1,
        },
    )
}

fn flat_dim(specs: &[NamedSpec], input: &InputSpec) -> Result<usize> {
    let [c, h, w] = nn::specs_output_shape(specs, [input.channels, input.height, input.width])?;
    Ok(c * h * w)
}

/// VGG-16 layout; the first fully-connected layer is the feature layer.
fn vgg_like(n_classes: usize, input: InputSpec) -> Result<ArchDescriptor> {
    const BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut specs = Vec::new();
    let mut cin = input.channels;
    for (b, widths) in BLOCKS.iter().enumerate() {
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("block{}_conv{}", b + 1, i + 1);
            specs.push(conv(&name, cin, w, 3, 1, 1));
            specs.push(relu(format!("{name}_act")));
            cin = w;
        }
        specs.push(NamedSpec::new(format!("block{}_pool", b + 1), LayerSpec::MaxPool { size: 2 }));
    }
    specs.push(NamedSpec::new("flatten", LayerSpec::Flatten));
    let flat = flat_dim(&specs, &input)?;
    specs.push(linear("fc1", flat, 4096, Init::He));
    specs.push(relu("fc1_act"));
    specs.push(linear("fc2", 4096, 4096, Init::He));
    specs.push(relu("fc2_act"));
    specs.push(linear("predictions", 4096, n_classes, Init::Xavier));
    Ok(ArchDescriptor {
        specs,
        feature_layer: "fc1".into(),
        response_layer: "block5_conv3_act".into(),
        head_layer: "predictions".into(),
        input,
    })
}

/// ResNet-50 layout (bottleneck blocks 3-4-6-3). The feature layer is the
/// 3x3 convolution of the final block, the second-last convolution.
fn resnet_like(n_classes: usize, input: InputSpec) -> Result<ArchDescriptor> {
    let mut specs = vec![
        conv("conv1", input.channels, 64, 7, 2, 3),
        bn("conv1_bn", 64),
        relu("conv1_act"),
        NamedSpec::new("pool1", LayerSpec::MaxPool { size: 2 }),
    ];
    let mut cin = 64;
    let stages = [(2, 3, 64), (3, 4, 128), (4, 6, 256), (5, 3, 512)];
    let mut last_block = String::new();
    for (stage, blocks, mid) in stages {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 2 { 2 } else { 1 };
            let out = mid * 4;
            let body = vec![
                conv("conv1", cin, mid, 1, 1, 0),
                bn("bn1", mid),
                relu("act1"),
                conv("conv2", mid, mid, 3, stride, 1),
                bn("bn2", mid),
                relu("act2"),
                conv("conv3", mid, out, 1, 1, 0),
                bn("bn3", out),
            ];
            let shortcut = if cin != out || stride != 1 {
                vec![conv("proj", cin, out, 1, stride, 0), bn("proj_bn", out)]
            } else {
                Vec::new()
            };
            let name = format!("conv{stage}_block{}", b + 1);
            specs.push(NamedSpec::new(&name, LayerSpec::Residual { body, shortcut }));
            specs.push(relu(format!("{name}_out")));
            last_block = name;
            cin = out;
        }
    }
    specs.push(NamedSpec::new("flatten", LayerSpec::Flatten));
    let flat = flat_dim(&specs, &input)?;
    // global average pooling is folded into a plain linear head over the
    // flattened map to keep the layer set small
    specs.push(linear("predictions", flat, n_classes, Init::Xavier));
    Ok(ArchDescriptor {
        specs,
        feature_layer: format!("{last_block}.conv2"),
        response_layer: format!("{last_block}_out"),
        head_layer: "predictions".into(),
        input,
    })
}

fn tiny(cfg: &TinyConfig, n_classes: usize, input: InputSpec) -> Result<ArchDescriptor> {
    if cfg.conv_channels.is_empty() || cfg.embed_width == 0 {
        return Err(Error::validation("tiny backbone needs at least one conv stage and a positive embed width"));
    }
    let mut specs = Vec::new();
    let mut cin = input.channels;
    let last = cfg.conv_channels.len();
    for (i, &w) in cfg.conv_channels.iter().enumerate() {
        specs.push(conv(format!("conv{}", i + 1), cin, w, 3, 1, 1));
        specs.push(relu(format!("conv{}_act", i + 1)));
        specs.push(NamedSpec::new(format!("pool{}", i + 1), LayerSpec::MaxPool { size: 2 }));
        cin = w;
    }
    specs.push(NamedSpec::new("flatten", LayerSpec::Flatten));
    let flat = flat_dim(&specs, &input)?;
    let init = if cfg.identity_embed { Init::Identity } else { Init::He };
    specs.push(linear("embed", flat, cfg.embed_width, init));
    specs.push(relu("embed_act"));
    specs.push(linear("predictions", cfg.embed_width, n_classes, Init::Xavier));
    Ok(ArchDescriptor {
        specs,
        feature_layer: "embed".into(),
        response_layer: format!("conv{last}_act"),
        head_layer: "predictions".into(),
        input,
    })
}

/// Builds the layer graph without allocating weights.
pub fn describe(arch: &Arch, n_classes: usize, input: InputSpec) -> Result<ArchDescriptor> {
    if n_classes < 2 {
        return Err(Error::validation(format!("need >= 2 classes, got {n_classes}")));
    }
    input.validate()?;
    let d = match arch {
        Arch::VggLike => vgg_like(n_classes, input)?,
        Arch::ResnetLike => resnet_like(n_classes, input)?,
        Arch::Tiny(cfg) => tiny(cfg, n_classes, input)?,
    };
    d.validate()?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub model_id: String,
    pub arch: Arch,
    pub feature_layer: String,
    pub input_variant: InputVariant,
    pub n_classes: usize,
    pub seed: u64,
    pub input: InputSpec,
    /// Training writers in class-index order.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub meta: BackboneMeta,
    pub descriptor: ArchDescriptor,
    pub net: Sequential,
}

pub fn build_backbone(
    arch: &Arch,
    n_classes: usize,
    input: InputSpec,
    variant: InputVariant,
    seed: u64,
) -> Result<BackboneModel> {
    let descriptor = describe(arch, n_classes, input.clone())?;
    let net = Sequential::from_specs(&descriptor.specs, seed)?;
    Ok(BackboneModel {
        meta: BackboneMeta {
            model_id: format!("{arch}-{variant}-s{seed}"),
            arch: arch.clone(),
            feature_layer: descriptor.feature_layer.clone(),
            input_variant: variant,
            n_classes,
            seed,
            input,
            classes: Vec::new(),
            best_epoch: None,
            history: Vec::new(),
        },
        descriptor,
        net,
    })
}

const WEIGHTS_FILE: &str = "weights.bin";
const META_FILE: &str = "backbone.json";

impl BackboneModel {
    pub fn feature_dim(&self) -> usize {
        self.descriptor.feature_dim().expect("validated at build")
    }

    /// Copies body weights from a weights file, leaving a mismatched head at
    /// its fresh initialization.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<usize> {
        let n = self.net.load_weights_prefix(path)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!(
                "{} shares no leading tensors with this architecture",
                path.display()
            )));
        }
        Ok(n)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save_weights(&dir.join(WEIGHTS_FILE))?;
        let meta = dir.join(META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BackboneMeta = serde_json::from_str(&text)?;
        let mut model = build_backbone(&meta.arch, meta.n_classes, meta.input.clone(), meta.input_variant, meta.seed)?;
        model.net.load_weights(&dir.join(WEIGHTS_FILE))?;
        model.meta = meta;
        Ok(model)
    }

    /// Polarity routing plus resize/standardize for this model.
    pub fn preprocess(&self, img: &SignatureImage) -> Array3<f64> {
        let routed = match (self.meta.input_variant, img.polarity) {
            (InputVariant::Inverse, Polarity::Original) => invert(img),
            (InputVariant::Inverse, Polarity::Inverse) => img.clone(),
            (_, Polarity::Inverse) => invert(img),
            (_, Polarity::Original) => img.clone(),
        };
        resize_normalize(&routed, &self.meta.input)
    }
}

fn check_input(model: &BackboneModel, t: &Array3<f64>) -> Result<()> {
    let want = (model.meta.input.channels, model.meta.input.height, model.meta.input.width);
    if t.dim() != want {
        return Err(Error::validation(format!(
            "input tensor {:?} does not match model input {:?}",
            t.dim(),
            want
        )));
    }
    Ok(())
}

/// Forward pass truncated at the feature layer, flattened.
pub fn extract_features(model: &BackboneModel, img_tensor: &Array3<f64>) -> Result<FeatureVector> {
    check_input(model, img_tensor)?;
    let x = img_tensor.clone().insert_axis(ndarray::Axis(0));
    let y = model.net.forward_to(&x, &model.meta.feature_layer)?;
    let values: Vec<f64> = y.iter().copied().collect();
    if values.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateEmbedding(format!(
            "all-zero output at layer '{}'",
            model.meta.feature_layer
        )));
    }
    Ok(FeatureVector::new(values, model.meta.model_id.clone()))
}

/// Preprocesses and embeds many images; output order follows input order.
pub fn extract_batch(model: &BackboneModel, images: &[SignatureImage]) -> Vec<Result<FeatureVector>> {
    images
        .par_iter()
        .map(|img| extract_features(model, &model.preprocess(img)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub filter: usize,
    /// Sum of squared activations.
    pub energy: f64,
    /// Activation map upsampled to the model input size.
    pub map: Array2<f64>,
}

/// The `k` filters of the last convolution stage with the highest activation
/// energy, strongest first (lower index first on ties).
pub fn response_maps(model: &BackboneModel, img_tensor: &Array3<f64>, k: usize) -> Result<Vec<ResponseMap>> {
    check_input(model, img_tensor)?;
    let x = img_tensor.clone().insert_axis(ndarray::Axis(0));
    let act = model.net.forward_to(&x, &model.descriptor.response_layer)?;
    let filters = act.dim().1;
    if k == 0 || k > filters {
        return Err(Error::validation(format!(
            "k must be in 1..={filters}, got {k}"
        )));
    }
    let mut ranked: Vec<(usize, f64)> = (0..filters)
        .map(|f| (f, act.slice(ndarray::s![0, f, .., ..]).iter().map(|v| v * v).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(f, energy)| ResponseMap {
            filter: f,
            energy,
            map: imaging::resample(
                &act.slice(ndarray::s![0, f, .., ..]).to_owned(),
                model.meta.input.height,
                model.meta.input.width,
            ),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub max_epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_init: 1e-3,
            momentum: 0.9,
            patience: 3,
            seed: 0,
            max_epochs: 50,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn for_arch(arch: &Arch) -> Self {
        Self {
            batch_size: arch.default_batch_size(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::validation("patience must be >= 1"));
        }
        if !(1e-4..=1e-3).contains(&self.lr_init) {
            return Err(Error::validation(format!(
                "lr_init {} outside [1e-4, 1e-3]",
                self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must be in [0, 1)"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Tracks the minimum validation loss; strict improvement only, so the
/// earliest epoch wins ties.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns `(improved, should_stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

fn to_batches(n: usize, batch: usize, order: &[usize]) -> Vec<Vec<usize>> {
    debug_assert_eq!(order.len(), n);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn mean_loss(net: &Sequential, tensors: &[Array3<f64>], labels: &[usize], batch: usize) -> f64 {
    let mut total = 0.0;
    for (chunk_t, chunk_l) in tensors.chunks(batch).zip(labels.chunks(batch)) {
        let x = nn::stack(chunk_t);
        let (l, _) = loss::softmax_cross_entropy(&net.forward(&x), chunk_l);
        total += l * chunk_t.len() as f64;
    }
    total / tensors.len().max(1) as f64
}

/// Fine-tunes on writer classification. Labels are the training images'
/// user ids; any overlap with `test_users` is a hard error. Returns the
/// best-validation weights with the full loss history in `meta`.
pub fn finetune(
    mut model: BackboneModel,
    train_images: &[SignatureImage],
    val_images: &[SignatureImage],
    test_users: &[String],
    cfg: &TrainConfig,
) -> Result<BackboneModel> {
    cfg.validate()?;
    if train_images.is_empty() || val_images.is_empty() {
        return Err(Error::validation("finetune needs non-empty train and validation sets"));
    }
    let forbidden: HashSet<&str> = test_users.iter().map(String::as_str).collect();
    let classes: Vec<String> = train_images
        .iter()
        .map(|i| i.user_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(u) = classes.iter().find(|u| forbidden.contains(u.as_str())) {
        return Err(Error::WriterIndependence(format!(
            "test user '{u}' appears in the training labels"
        )));
    }
    if classes.len() != model.meta.n_classes {
        return Err(Error::validation(format!(
            "model has {} classes but training data has {} writers",
            model.meta.n_classes,
            classes.len()
        )));
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let label_of = |img: &SignatureImage| {
        index.get(img.user_id.as_str()).copied().ok_or_else(|| {
            Error::validation(format!(
                "validation writer '{}' is not a training class",
                img.user_id
            ))
        })
    };
    let train_y: Vec<usize> = train_images.iter().map(label_of).collect::<Result<_>>()?;
    let val_y: Vec<usize> = val_images.iter().map(label_of).collect::<Result<_>>()?;
    let train_x: Vec<Array3<f64>> = train_images.par_iter().map(|i| model.preprocess(i)).collect();
    let val_x: Vec<Array3<f64>> = val_images.par_iter().map(|i| model.preprocess(i)).collect();

    let mut opt = Optimizer::new(OptimizerKind::Sgd {
        lr: cfg.lr_init,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_net = model.net.clone();
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in to_batches(train_x.len(), cfg.batch_size, &order) {
            let xs: Vec<Array3<f64>> = batch.iter().map(|&i| train_x[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            model.net.zero_grad();
            let logits = model.net.forward_train(&nn::stack(&xs));
            let (l, g) = loss::softmax_cross_entropy(&logits, &ys);
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite training loss {l}"),
                });
            }
            model.net.backward(&g);
            opt.step(model.net.params_mut());
            running += l * batch.len() as f64;
        }
        let train_loss = running / train_x.len() as f64;
        let val_loss = mean_loss(&model.net, &val_x, &val_y, cfg.batch_size);
        log::info!("backbone epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_net = model.net.clone();
            best_net.clear_cache();
        }
        if stop {
            break;
        }
    }
    model.net = best_net;
    model.meta.classes = classes;
    model.meta.best_epoch = stopper.best_epoch();
    model.meta.history = history;
    Ok(model)
}

/// Binary feature table: `SIGF`, version, model id, dim, count, then
/// row-major little-endian `f64` rows. Row paths live in a CSV index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub model_id: String,
    pub dim: usize,
    pub paths: Vec<String>,
    pub rows: Vec<f64>,
}

const CACHE_MAGIC: &[u8; 4] = b"SIGF";
const CACHE_VERSION: u32 = 1;

impl FeatureCache {
    pub fn from_features(model_id: &str, items: Vec<(String, FeatureVector)>) -> Result<Self> {
        let dim = items.first().map(|(_, f)| f.dim()).unwrap_or(0);
        let mut paths = Vec::with_capacity(items.len());
        let mut rows = Vec::with_capacity(items.len() * dim);
        for (p, f) in items {
            if f.dim() != dim {
                return Err(Error::validation(format!("feature for {p} has dim {} != {dim}", f.dim())));
            }
            paths.push(p);
            rows.extend(f.values);
        }
        Ok(Self {
            model_id: model_id.to_string(),
            dim,
            paths,
            rows,
        })
    }

    pub fn index_path(bin: &Path) -> PathBuf {
        let mut s = bin.as_os_str().to_os_string();
        s.push(".index.csv");
        PathBuf::from(s)
    }

    pub fn write(&self, bin: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.rows.len() * 8);
        let io = |e| Error::io(bin, e);
        buf.write_all(CACHE_MAGIC).map_err(io)?;
        buf.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
        buf.write_all(&(self.model_id.len() as u32).to_le_bytes()).map_err(io)?;
        buf.write_all(self.model_id.as_bytes()).map_err(io)?;
        buf.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        buf.write_all(&(self.paths.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.rows {
            buf.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        std::fs::write(bin, buf).map_err(io)?;
        let idx = Self::index_path(bin);
        let mut w = csv::Writer::from_path(&idx)?;
        w.write_record(["row", "path"])?;
        for (i, p) in self.paths.iter().enumerate() {
            w.write_record([i.to_string().as_str(), p.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(&idx, e))
    }

    pub fn read(bin: &Path) -> Result<Self> {
        let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let mut r = bytes.as_slice();
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", bin.display()));
        let mut magic = [0u8; 4];
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        r.read_exact(&mut u32b).map_err(|_| bad("truncated"))?;
        if u32::from_le_bytes(u32b) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut u32b).map_err(|_| bad("truncated"))?;
        let mut id = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut id).map_err(|_| bad("truncated"))?;
        r.read_exact(&mut u32b).map_err(|_| bad("truncated"))?;
        let dim = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u64b).map_err(|_| bad("truncated"))?;
        let count = u64::from_le_bytes(u64b) as usize;
        let mut rows = Vec::with_capacity(dim * count);
        for _ in 0..dim * count {
            r.read_exact(&mut u64b).map_err(|_| bad("truncated rows"))?;
            rows.push(f64::from_le_bytes(u64b));
        }
        let idx = Self::index_path(bin);
        let mut reader = csv::Reader::from_path(&idx)?;
        let mut indexed: BTreeMap<usize, String> = BTreeMap::new();
        for row in reader.records() {
            let row = row?;
            let i: usize = row[0].parse().map_err(|_| bad("bad index row"))?;
            indexed.insert(i, row[1].to_string());
        }
        if indexed.len() != count || indexed.keys().copied().ne(0..count) {
            return Err(bad("index does not cover every row"));
        }
        Ok(Self {
            model_id: String::from_utf8(id).map_err(|_| bad("model id is not utf-8"))?,
            dim,
            paths: indexed.into_values().collect(),
            rows,
        })
    }

    pub fn to_map(&self) -> HashMap<String, FeatureVector> {
        self.paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let v = self.rows[i * self.dim..(i + 1) * self.dim].to_vec();
                (p.clone(), FeatureVector::new(v, self.model_id.clone()))
            })
            .collect()
    }
}

//! Unpaired stamped-to-clean translation: two generators, two patch
//! discriminators, adversarial plus cycle-consistency training.
//!
//! Domain X holds stamped signatures and Y clean ones. `G: X -> Y` is the
//! cleaner used at inference, `F: Y -> X` exists for the cycle term.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ImageCleaner;
use crate::error::{Error, Result};
use crate::imaging::{invert, letterbox, unletterbox, Polarity, SignatureImage};
use crate::nn::{self, loss, Init, LayerSpec, NamedSpec, Optimizer, OptimizerKind, PadMode, Sequential, Tensor};

/// Probability clamp keeping the log terms finite.
pub const EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `mean log d_real + mean log(1 - d_fake)` over probabilities clamped to
/// `[EPS, 1 - EPS]`. The discriminator maximizes this value.
pub fn adversarial_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(adversarial_loss_grad(d_real, d_fake)?.0)
}

/// Value plus gradients with respect to each probability. Clamped entries
/// get zero gradient.
pub fn adversarial_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::validation("adversarial loss needs non-empty batches"));
    }
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let inside = |p: f64| p > EPS && p < 1.0 - EPS;
    let real = d_real.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / nr;
    let fake = d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / nf;
    let g_real = d_real
        .iter()
        .map(|&p| if inside(p) { 1.0 / (nr * p) } else { 0.0 })
        .collect();
    let g_fake = d_fake
        .iter()
        .map(|&p| if inside(p) { -1.0 / (nf * (1.0 - p)) } else { 0.0 })
        .collect();
    Ok((real + fake, g_real, g_fake))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The same quantity on discriminator logits, using
/// `log sigmoid(z) = -softplus(-z)`; no clamping needed.
pub fn adversarial_loss_logits(z_real: &Tensor, z_fake: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if z_real.is_empty() || z_fake.is_empty() {
        return Err(Error::validation("adversarial loss needs non-empty batches"));
    }
    let (nr, nf) = (z_real.len() as f64, z_fake.len() as f64);
    let value = -z_real.iter().map(|&z| softplus(-z)).sum::<f64>() / nr
        - z_fake.iter().map(|&z| softplus(z)).sum::<f64>() / nf;
    let g_real = z_real.mapv(|z| (1.0 - sigmoid(z)) / nr);
    let g_fake = z_fake.mapv(|z| -sigmoid(z) / nf);
    Ok((value, g_real, g_fake))
}

/// Per-pixel L1 of both reconstructions, each averaged over its batch.
pub fn cycle_loss(g: &Sequential, f: &Sequential, batch_x: &Tensor, batch_y: &Tensor) -> Result<f64> {
    if batch_x.is_empty() || batch_y.is_empty() {
        return Err(Error::validation("cycle loss needs non-empty batches"));
    }
    let rec_x = f.forward(&g.forward(batch_x));
    let rec_y = g.forward(&f.forward(batch_y));
    assert_eq!(rec_x.dim(), batch_x.dim(), "F(G(x)) changed shape");
    assert_eq!(rec_y.dim(), batch_y.dim(), "G(F(y)) changed shape");
    Ok(loss::l1_mean(&rec_x, batch_x).0 + loss::l1_mean(&rec_y, batch_y).0)
}

pub fn full_objective(adv_g: f64, adv_f: f64, cyc: f64, lambda_cyc: f64) -> f64 {
    adv_g + adv_f + lambda_cyc * cyc
}

/// How the generators read the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Minimize `-log D(G(x))`: same fixed point, usable gradients early on.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(G(x)))` literally.
    Minimax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerArch {
    pub gen_width: usize,
    pub gen_blocks: usize,
    pub disc_width: usize,
    #[serde(default)]
    pub instance_norm: bool,
}

impl Default for CleanerArch {
    fn default() -> Self {
        Self {
            gen_width: 16,
            gen_blocks: 3,
            disc_width: 16,
            instance_norm: false,
        }
    }
}

fn conv(name: &str, cin: usize, cout: usize, stride: usize, pad_mode: PadMode, init: Init) -> NamedSpec {
    NamedSpec::new(
        name,
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
            pad_mode,
            bias: true,
            init,
        },
    )
}

/// `x + net(x)` with the last convolution zero-initialized, so a fresh
/// generator is exactly the identity.
pub fn generator_specs(arch: &CleanerArch) -> Vec<NamedSpec> {
    let w = arch.gen_width;
    let mut body = vec![
        conv("conv_in", 1, w, 1, PadMode::Reflect, Init::He),
        NamedSpec::new("act_in", LayerSpec::Relu),
    ];
    for b in 0..arch.gen_blocks {
        let mut inner = vec![conv("conv1", w, w, 1, PadMode::Reflect, Init::He)];
        if arch.instance_norm {
            inner.push(NamedSpec::new("norm1", LayerSpec::InstanceNorm { eps: 1e-5 }));
        }
        inner.push(NamedSpec::new("act1", LayerSpec::Relu));
        inner.push(conv("conv2", w, w, 1, PadMode::Reflect, Init::Normal { std: 0.02 }));
        if arch.instance_norm {
            inner.push(NamedSpec::new("norm2", LayerSpec::InstanceNorm { eps: 1e-5 }));
        }
        body.push(NamedSpec::new(
            format!("block{}", b + 1),
            LayerSpec::Residual {
                body: inner,
                shortcut: Vec::new(),
            },
        ));
    }
    body.push(conv("conv_out", w, 1, 1, PadMode::Reflect, Init::Zero));
    vec![NamedSpec::new(
        "generator",
        LayerSpec::Residual {
            body,
            shortcut: Vec::new(),
        },
    )]
}

/// Three-convolution patch discriminator emitting a logit grid.
pub fn discriminator_specs(arch: &CleanerArch) -> Vec<NamedSpec> {
    let w = arch.disc_width;
    let mut specs = vec![
        conv("conv1", 1, w, 2, PadMode::Zero, Init::Normal { std: 0.05 }),
        NamedSpec::new("act1", LayerSpec::LeakyRelu { slope: 0.2 }),
        conv("conv2", w, 2 * w, 2, PadMode::Zero, Init::Normal { std: 0.05 }),
    ];
    if arch.instance_norm {
        specs.push(NamedSpec::new("norm2", LayerSpec::InstanceNorm { eps: 1e-5 }));
    }
    specs.push(NamedSpec::new("act2", LayerSpec::LeakyRelu { slope: 0.2 }));
    specs.push(conv("logits", 2 * w, 1, 1, PadMode::Zero, Init::Normal { std: 0.05 }));
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch from which the rate decays linearly to zero at the end;
    /// `None` keeps it constant.
    #[serde(default)]
    pub decay_from: Option<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    pub lambda_cyc: f64,
    /// Weight of the optional identity term, relative to `lambda_cyc`.
    #[serde(default)]
    pub lambda_identity: f64,
    #[serde(default)]
    pub generator_objective: GeneratorObjective,
    /// Least-squares adversarial variant.
    #[serde(default)]
    pub least_squares: bool,
    pub seed: u64,
    pub input_size: (usize, usize),
    #[serde(default)]
    pub arch: CleanerArch,
}

fn default_beta1() -> f64 {
    0.5
}

impl Default for CleanerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 2e-4,
            decay_from: None,
            beta1: 0.5,
            lambda_cyc: 10.0,
            lambda_identity: 0.0,
            generator_objective: GeneratorObjective::NonSaturating,
            least_squares: false,
            seed: 0,
            input_size: (64, 64),
            arch: CleanerArch::default(),
        }
    }
}

impl CleanerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return Err(Error::validation("lambda_cyc must be a finite value >= 0"));
        }
        if !(self.lambda_identity >= 0.0) {
            return Err(Error::validation("lambda_identity must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.input_size.0 < 8 || self.input_size.1 < 8 {
            return Err(Error::validation("input_size must be at least 8x8"));
        }
        if self.arch.gen_width == 0 || self.arch.disc_width == 0 {
            return Err(Error::validation("architecture widths must be >= 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_from {
            Some(d) if epoch >= d && self.epochs > d => {
                let span = (self.epochs - d) as f64;
                self.learning_rate * (1.0 - (epoch - d) as f64 / span)
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerEpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Adversarial term for `G` and `D_Y`, in the log form.
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub objective: f64,
    pub d_x_loss: f64,
    pub d_y_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanerMeta {
    /// Last completed epoch; `None` before training.
    pub epoch: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    pub history: Vec<CleanerEpochLog>,
}

#[derive(Debug, Clone)]
pub struct CleanerModel {
    pub g: Sequential,
    pub f: Sequential,
    pub d_x: Sequential,
    pub d_y: Sequential,
    pub config: CleanerTrainConfig,
    pub meta: CleanerMeta,
}

const META_FILE: &str = "cleaner.json";
const NETS: [&str; 4] = ["g", "f", "d_x", "d_y"];

#[derive(Serialize, Deserialize)]
struct MetaFile {
    config: CleanerTrainConfig,
    meta: CleanerMeta,
}

impl CleanerModel {
    /// Fresh model: identity generators, randomly initialized discriminators.
    pub fn new(config: CleanerTrainConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let gen = generator_specs(&config.arch);
        let disc = discriminator_specs(&config.arch);
        Ok(Self {
            g: Sequential::from_specs(&gen, s)?,
            f: Sequential::from_specs(&gen, s.wrapping_add(1))?,
            d_x: Sequential::from_specs(&disc, s.wrapping_add(2))?,
            d_y: Sequential::from_specs(&disc, s.wrapping_add(3))?,
            meta: CleanerMeta {
                epoch: None,
                seed: s,
                config_hash: config.hash(),
                history: Vec::new(),
            },
            config,
        })
    }

    pub fn lambda_cyc(&self) -> f64 {
        self.config.lambda_cyc
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    fn nets(&self) -> [&Sequential; 4] {
        [&self.g, &self.f, &self.d_x, &self.d_y]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, net) in NETS.iter().zip(self.nets()) {
            net.save_weights(&dir.join(format!("{name}.bin")))?;
        }
        let path = dir.join(META_FILE);
        let body = MetaFile {
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, rejecting it if the stored hash does not match
    /// the stored config.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let MetaFile { config, meta } = serde_json::from_str(&text)?;
        if config.hash() != meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash {} does not match recorded {}",
                dir.display(),
                config.hash(),
                meta.config_hash
            )));
        }
        let mut model = Self::new(config)?;
        for (name, net) in NETS.iter().zip([&mut model.g, &mut model.f, &mut model.d_x, &mut model.d_y]) {
            net.load_weights(&dir.join(format!("{name}.bin")))?;
        }
        model.meta = meta;
        Ok(model)
    }

    /// As `load`, additionally requiring the checkpoint to match `expected`.
    pub fn load_checked(dir: &Path, expected: &CleanerTrainConfig) -> Result<Self> {
        let model = Self::load(dir)?;
        if model.meta.config_hash != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different config",
                dir.display()
            )));
        }
        Ok(model)
    }
}

/// Letterboxes to the model input and adds the channel axis.
fn to_input(img: &SignatureImage, size: (usize, usize)) -> Array3<f64> {
    let img = match img.polarity {
        Polarity::Original => img.clone(),
        Polarity::Inverse => invert(img),
    };
    letterbox(&img, size.0, size.1).0.insert_axis(Axis(0))
}

/// `G(x)` at the input's resolution and polarity, clamped to `[0, 1]`.
pub fn clean(model: &CleanerModel, img: &SignatureImage) -> Result<SignatureImage> {
    let (h, w) = model.input_size();
    let upright = match img.polarity {
        Polarity::Original => img.clone(),
        Polarity::Inverse => invert(img),
    };
    let (canvas, lb) = letterbox(&upright, h, w);
    let x = canvas.insert_axis(Axis(0)).insert_axis(Axis(0));
    let y = model.g.forward(&x);
    let out = unletterbox(&y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(), &lb).mapv(|v| v.clamp(0.0, 1.0));
    let mut cleaned = upright.with_pixels(out)?;
    if img.polarity == Polarity::Inverse {
        cleaned = invert(&cleaned);
    }
    cleaned.cleaned = true;
    cleaned.transforms.push("clean".into());
    Ok(cleaned)
}

impl ImageCleaner for CleanerModel {
    fn cache_key(&self) -> String {
        let epoch = self.meta.epoch.map(|e| e.to_string()).unwrap_or_else(|| "init".into());
        format!("cleaner-{}-e{epoch}", &self.meta.config_hash[..12])
    }

    fn clean_image(&self, img: &SignatureImage) -> Result<SignatureImage> {
        clean(self, img)
    }
}

fn add_grads(dst: &mut Sequential, src: &Sequential) {
    for (p, q) in dst.params_mut().into_iter().zip(src.params()) {
        p.grad += &q.grad;
    }
}

/// Gradient of the generator-side adversarial loss with respect to the
/// discriminator's logits on fakes.
fn generator_adv_grad(z_fake: &Tensor, cfg: &CleanerTrainConfig) -> Tensor {
    let n = z_fake.len() as f64;
    if cfg.least_squares {
        return z_fake.mapv(|z| 2.0 * (z - 1.0) / n);
    }
    match cfg.generator_objective {
        GeneratorObjective::NonSaturating => z_fake.mapv(|z| (sigmoid(z) - 1.0) / n),
        GeneratorObjective::Minimax => z_fake.mapv(|z| -sigmoid(z) / n),
    }
}

/// Discriminator loss (minimized) and logit gradients.
fn discriminator_loss(z_real: &Tensor, z_fake: &Tensor, cfg: &CleanerTrainConfig) -> Result<(f64, Tensor, Tensor)> {
    if cfg.least_squares {
        let (lr, gr) = loss::mse(z_real, &Tensor::ones(z_real.raw_dim()));
        let (lf, gf) = loss::mse(z_fake, &Tensor::zeros(z_fake.raw_dim()));
        return Ok((0.5 * (lr + lf), gr * 0.5, gf * 0.5));
    }
    let (v, gr, gf) = adversarial_loss_logits(z_real, z_fake)?;
    Ok((-v, -gr, -gf))
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching sample shapes")
}

#[derive(Debug, Default, Clone, Copy)]
struct StepLosses {
    adv_g: f64,
    adv_f: f64,
    cyc: f64,
    d_x: f64,
    d_y: f64,
}

/// Accumulates generator gradients for one batch. With `adversarial` off
/// only the cycle (and identity) terms contribute. Returns the cycle loss
/// and the fakes `(G(x), F(y))`.
fn generator_backward(
    m: &mut CleanerModel,
    x: &Tensor,
    y: &Tensor,
    lambda_cyc: f64,
    adversarial: bool,
) -> (f64, Tensor, Tensor) {
    let cfg = m.config.clone();
    let fake_y = m.g.forward_train(x);
    let fake_x = m.f.forward_train(y);
    let mut g2 = m.g.clone();
    let mut f2 = m.f.clone();
    let rec_x = f2.forward_train(&fake_y);
    let rec_y = g2.forward_train(&fake_x);
    let (cx, grad_rec_x) = loss::l1_mean(&rec_x, x);
    let (cy, grad_rec_y) = loss::l1_mean(&rec_y, y);
    let mut grad_fake_y = f2.backward(&(grad_rec_x * lambda_cyc));
    let mut grad_fake_x = g2.backward(&(grad_rec_y * lambda_cyc));
    if adversarial {
        let zy = m.d_y.forward_train(&fake_y);
        grad_fake_y += &m.d_y.backward(&generator_adv_grad(&zy, &cfg));
        let zx = m.d_x.forward_train(&fake_x);
        grad_fake_x += &m.d_x.backward(&generator_adv_grad(&zx, &cfg));
    }
    m.g.backward(&grad_fake_y);
    m.f.backward(&grad_fake_x);
    add_grads(&mut m.g, &g2);
    add_grads(&mut m.f, &f2);

    let lambda_id = cfg.lambda_identity * lambda_cyc;
    if lambda_id > 0.0 {
        let mut g3 = m.g.clone();
        let mut f3 = m.f.clone();
        g3.zero_grad();
        f3.zero_grad();
        let (_, gy) = loss::l1_mean(&g3.forward_train(y), y);
        g3.backward(&(gy * lambda_id));
        let (_, gx) = loss::l1_mean(&f3.forward_train(x), x);
        f3.backward(&(gx * lambda_id));
        add_grads(&mut m.g, &g3);
        add_grads(&mut m.f, &f3);
    }
    (cx + cy, fake_y, fake_x)
}

/// Cycle loss with its parameter gradients accumulated into `g` and `f`.
pub fn cycle_loss_backward(g: &mut Sequential, f: &mut Sequential, batch_x: &Tensor, batch_y: &Tensor) -> Result<f64> {
    if batch_x.is_empty() || batch_y.is_empty() {
        return Err(Error::validation("cycle loss needs non-empty batches"));
    }
    let fake_y = g.forward_train(batch_x);
    let fake_x = f.forward_train(batch_y);
    let mut g2 = g.clone();
    let mut f2 = f.clone();
    g2.zero_grad();
    f2.zero_grad();
    let (cx, grx) = loss::l1_mean(&f2.forward_train(&fake_y), batch_x);
    let (cy, gry) = loss::l1_mean(&g2.forward_train(&fake_x), batch_y);
    let gfy = f2.backward(&grx);
    let gfx = g2.backward(&gry);
    g.backward(&gfy);
    f.backward(&gfx);
    add_grads(g, &g2);
    add_grads(f, &f2);
    Ok(cx + cy)
}

fn train_step(
    m: &mut CleanerModel,
    opts: &mut [Optimizer; 4],
    x: &Tensor,
    y: &Tensor,
) -> Result<StepLosses> {
    let lambda = m.config.lambda_cyc;
    for net in [&mut m.g, &mut m.f, &mut m.d_x, &mut m.d_y] {
        net.zero_grad();
    }
    let (cyc, fake_y, fake_x) = generator_backward(m, x, y, lambda, true);
    opts[0].step(m.g.params_mut());
    opts[1].step(m.f.params_mut());

    let mut out = StepLosses {
        cyc,
        ..Default::default()
    };
    let cfg = m.config.clone();
    let [_, _, opt_dx, opt_dy] = opts;
    for (d, real, fake, opt, slot, adv) in [
        (&mut m.d_y, y, &fake_y, opt_dy, &mut out.d_y, &mut out.adv_g),
        (&mut m.d_x, x, &fake_x, opt_dx, &mut out.d_x, &mut out.adv_f),
    ] {
        d.zero_grad();
        let n = real.dim().0;
        let z = d.forward_train(&concat(real, fake));
        let zr = z.slice_axis(Axis(0), (0..n).into()).to_owned();
        let zf = z.slice_axis(Axis(0), (n..z.dim().0).into()).to_owned();
        *adv = adversarial_loss_logits(&zr, &zf)?.0;
        let (l, gr, gf) = discriminator_loss(&zr, &zf, &cfg)?;
        *slot = l;
        d.backward(&concat(&gr, &gf));
        opt.step(d.params_mut());
    }
    Ok(out)
}

fn write_log(path: &Path, history: &[CleanerEpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn epoch_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}"))
}

/// Alternating updates: both generators on the full objective, then each
/// discriminator on its real/fake batch. With `out_dir`, every epoch is
/// checkpointed to `epoch_NNN/` and the final model plus `train_log.csv`
/// land in `out_dir`. A non-finite loss aborts, restoring the last
/// completed epoch's weights on disk.
pub fn train_cleaner(
    stamped: &[SignatureImage],
    clean_set: &[SignatureImage],
    cfg: &CleanerTrainConfig,
    out_dir: Option<&Path>,
) -> Result<CleanerModel> {
    train_cleaner_with(stamped, clean_set, cfg, out_dir, &mut |_| Ok(()))
}

/// As [`train_cleaner`], calling `on_epoch` with the model after each epoch.
pub fn train_cleaner_with(
    stamped: &[SignatureImage],
    clean_set: &[SignatureImage],
    cfg: &CleanerTrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&CleanerModel) -> Result<()>,
) -> Result<CleanerModel> {
    cfg.validate()?;
    if stamped.is_empty() || clean_set.is_empty() {
        return Err(Error::validation("both training domains must be non-empty"));
    }
    let mut model = CleanerModel::new(cfg.clone())?;
    let xs: Vec<Array3<f64>> = stamped.iter().map(|i| to_input(i, cfg.input_size)).collect();
    let ys: Vec<Array3<f64>> = clean_set.iter().map(|i| to_input(i, cfg.input_size)).collect();
    let adam = OptimizerKind::Adam {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opts = [0; 4].map(|_| Optimizer::new(adam));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_good = model.clone();
    let steps = xs.len().max(ys.len()).div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for o in &mut opts {
            o.set_lr(lr);
        }
        let mut ox: Vec<usize> = (0..xs.len()).collect();
        let mut oy: Vec<usize> = (0..ys.len()).collect();
        ox.shuffle(&mut rng);
        oy.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        for s in 0..steps {
            let pick = |order: &[usize], pool: &[Array3<f64>]| {
                let b: Vec<Array3<f64>> = (0..cfg.batch_size)
                    .map(|k| pool[order[(s * cfg.batch_size + k) % order.len()]].clone())
                    .collect();
                nn::stack(&b)
            };
            let l = train_step(&mut model, &mut opts, &pick(&ox, &xs), &pick(&oy, &ys))?;
            let vals = [l.adv_g, l.adv_f, l.cyc, l.d_x, l.d_y];
            if vals.iter().any(|v| !v.is_finite()) {
                if let Some(dir) = out_dir {
                    last_good.save(dir)?;
                }
                return Err(Error::Diverged {
                    epoch,
                    message: format!(
                        "non-finite loss at step {s}; last good epoch {:?}",
                        last_good.meta.epoch
                    ),
                });
            }
            sum.adv_g += l.adv_g;
            sum.adv_f += l.adv_f;
            sum.cyc += l.cyc;
            sum.d_x += l.d_x;
            sum.d_y += l.d_y;
        }
        let k = steps as f64;
        let row = CleanerEpochLog {
            epoch,
            lr,
            adv_g: sum.adv_g / k,
            adv_f: sum.adv_f / k,
            cyc: sum.cyc / k,
            objective: full_objective(sum.adv_g / k, sum.adv_f / k, sum.cyc / k, cfg.lambda_cyc),
            d_x_loss: sum.d_x / k,
            d_y_loss: sum.d_y / k,
        };
        log::info!(
            "cleaner epoch {epoch}: cyc {:.4} adv_g {:.4} adv_f {:.4} d_x {:.4} d_y {:.4}",
            row.cyc,
            row.adv_g,
            row.adv_f,
            row.d_x_loss,
            row.d_y_loss
        );
        model.meta.history.push(row);
        model.meta.epoch = Some(epoch);
        for net in [&mut model.g, &mut model.f, &mut model.d_x, &mut model.d_y] {
            net.clear_cache();
        }
        if let Some(dir) = out_dir {
            model.save(&epoch_dir(dir, epoch))?;
            write_log(&dir.join("train_log.csv"), &model.meta.history)?;
        }
        on_epoch(&model)?;
        last_good = model.clone();
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn small_cfg() -> CleanerTrainConfig {
        CleanerTrainConfig {
            epochs: 2,
            batch_size: 2,
            input_size: (16, 16),
            arch: CleanerArch {
                gen_width: 4,
                gen_blocks: 1,
                disc_width: 4,
                instance_norm: false,
            },
            ..Default::default()
        }
    }

    #[test]
    fn adversarial_examples() {
        let v = adversarial_loss(&[1.0 - EPS], &[EPS]).unwrap();
        assert!(v <= 0.0 && v > -1e-6);
        let v = adversarial_loss(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3863).abs() < 1e-4);
        assert!(adversarial_loss(&[], &[0.5]).is_err());
        assert!(adversarial_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zr = Tensor::from_shape_fn((2, 1, 3, 3), |_| rng.gen_range(-4.0..4.0));
        let zf = Tensor::from_shape_fn((2, 1, 3, 3), |_| rng.gen_range(-4.0..4.0));
        let pr: Vec<f64> = zr.iter().map(|&z| sigmoid(z)).collect();
        let pf: Vec<f64> = zf.iter().map(|&z| sigmoid(z)).collect();
        let (a, _, _) = adversarial_loss_logits(&zr, &zf).unwrap();
        assert!((a - adversarial_loss(&pr, &pf).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn full_objective_examples() {
        assert_eq!(full_objective(0.0, 0.0, 0.0, 10.0), 0.0);
        assert!((full_objective(-1.0, -0.5, 0.2, 10.0) - 0.5).abs() < 1e-12);
        assert_eq!(full_objective(-0.3, -0.4, 5.0, 0.0), -0.3 + -0.4);
    }

    #[test]
    fn cycle_loss_examples() {
        let cfg = small_cfg();
        let g = Sequential::from_specs(&generator_specs(&cfg.arch), 0).unwrap();
        let f = Sequential::from_specs(&generator_specs(&cfg.arch), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_shape_fn((2, 1, 8, 8), |_| rng.gen());
        let y = Tensor::from_shape_fn((3, 1, 8, 8), |_| rng.gen());
        assert_eq!(cycle_loss(&g, &f, &x, &y).unwrap(), 0.0);

        // F adds 0.1 through its output bias
        let mut shifted = f.clone();
        let last = shifted.params_mut().len() - 1;
        shifted.params_mut()[last].value.fill(0.1);
        let x1 = Tensor::from_elem((1, 1, 6, 6), 0.4);
        let v = cycle_loss(&g, &shifted, &x1, &Tensor::from_elem((1, 1, 6, 6), 0.4)).unwrap();
        // F(G(x)) = x + 0.1 and G(F(y)) = y + 0.1
        assert!((v - 0.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn shapes_and_probabilities() {
        let cfg = small_cfg();
        let m = CleanerModel::new(cfg).unwrap();
        let x = Tensor::from_elem((1, 1, 20, 12), 0.7);
        assert_eq!(m.g.forward(&x).dim(), x.dim());
        let z = m.d_y.forward(&x);
        assert_eq!(z.dim(), (1, 1, 5, 3));
        assert!(z.iter().all(|&v| (0.0..1.0).contains(&sigmoid(v)) && sigmoid(v) > 0.0));
    }

    #[test]
    fn clean_preserves_geometry_and_clamps() {
        let mut m = CleanerModel::new(small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (h, w) = (rng.gen_range(5..40), rng.gen_range(5..40));
            let img = SignatureImage::new(Array2::from_shape_fn((h, w), |_| rng.gen()), Polarity::Original).unwrap();
            let out = clean(&m, &img).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
            assert!(out.cleaned);
        }
        // push every output above 1
        let last = m.g.params_mut().len() - 1;
        m.g.params_mut()[last].value.fill(5.0);
        let img = SignatureImage::filled(10, 10, 0.2, Polarity::Original).unwrap();
        assert!(clean(&m, &img).unwrap().pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn train_plumbing_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<SignatureImage> = (0..4)
            .map(|_| SignatureImage::new(Array2::from_shape_fn((16, 16), |_| rng.gen()), Polarity::Original).unwrap())
            .collect();
        let cfg = small_cfg();
        let m = train_cleaner(&imgs[..2], &imgs[2..], &cfg, Some(dir.path())).unwrap();
        assert_eq!(m.meta.history.len(), 2);
        assert!(epoch_dir(dir.path(), 1).join("cleaner.json").exists());
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);

        let back = CleanerModel::load(dir.path()).unwrap();
        let probe = &imgs[0];
        assert_eq!(clean(&back, probe).unwrap().pixels(), clean(&m, probe).unwrap().pixels());
        assert!(CleanerModel::load_checked(dir.path(), &cfg).is_ok());
        let other = CleanerTrainConfig { lambda_cyc: 5.0, ..cfg.clone() };
        assert!(matches!(CleanerModel::load_checked(dir.path(), &other), Err(Error::Checkpoint(_))));

        // tamper with the stored config
        let p = dir.path().join("cleaner.json");
        let text = std::fs::read_to_string(&p).unwrap().replace("\"lambda_cyc\": 10.0", "\"lambda_cyc\": 3.0");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(CleanerModel::load(dir.path()), Err(Error::Checkpoint(_))));

        let again = train_cleaner(&imgs[..2], &imgs[2..], &cfg, None).unwrap();
        assert_eq!(again.meta.history, m.meta.history);
    }

    #[test]
    fn divergence_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<SignatureImage> = (0..2)
            .map(|_| SignatureImage::new(Array2::from_shape_fn((16, 16), |_| rng.gen()), Polarity::Original).unwrap())
            .collect();
        let cfg = CleanerTrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..small_cfg()
        };
        assert!(matches!(
            train_cleaner(&imgs[..1], &imgs[1..], &cfg, None),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn config_validation_and_schedule() {
        assert!(CleanerTrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(CleanerTrainConfig { lambda_cyc: -1.0, ..Default::default() }.validate().is_err());
        let c = CleanerTrainConfig {
            epochs: 10,
            decay_from: Some(5),
            learning_rate: 1.0,
            ..Default::default()
        };
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(5), 1.0);
        assert!((c.lr_at(9) - 0.2).abs() < 1e-12);
    }
}

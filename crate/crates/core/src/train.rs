//! The adversarial training loop: alternating discriminator/generator Adam
//! updates, run artifacts (loss log, per-epoch sample grids, checkpoints),
//! and bit-reproducible resume.
//!
//! The loop is sequential; batches are assembled from an in-memory dataset,
//! so there is nothing to prefetch. One training step is one discriminator
//! update (real batch and a detached fake batch) followed by one generator
//! update through the frozen discriminator, sharing the step's z draw.
//! Labels are real = 1, fake = 0.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{save_grid, Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::models::{
    build_discriminator, build_generator, sample_z, ModelConfig, Network, INIT_STD,
};
use crate::nn::{self, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, streams, Rng};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which generator objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Maximize log D(G(z)) (minimize BCE against the real label). The
    /// default: its gradients do not vanish when D wins early.
    #[default]
    NonSaturating,
    /// Minimize log(1 - D(G(z))), the original minimax objective.
    Minimax,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::NonSaturating => "non_saturating",
            LossVariant::Minimax => "minimax",
        }
    }

    pub fn from_str(s: &str) -> Option<LossVariant> {
        Some(match s {
            "non_saturating" => LossVariant::NonSaturating,
            "minimax" => LossVariant::Minimax,
            _ => return None,
        })
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossVariant,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Fixed-z sample grid emitted after every epoch.
    pub grid_samples: usize,
    pub grid_cols: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: 5,
            seed: 0,
            loss: LossVariant::default(),
            checkpoint_every: 1,
            grid_samples: 64,
            grid_cols: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (batch statistics need it)",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.grid_samples == 0 || self.grid_cols == 0 {
            return Err(Error::config("sample grid must be non-empty"));
        }
        Ok(())
    }

    /// Flat `section.key` snapshot, the config file format.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let a = &self.adam;
        let kv: Vec<(&str, String)> = vec![
            ("model.z_dim", m.z_dim.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.image_channels", m.image_channels.to_string()),
            ("model.base_feature_maps", m.base_feature_maps.to_string()),
            ("model.batchnorm_affine", m.batchnorm_affine.to_string()),
            (
                "model.conditional_classes",
                m.conditional_classes.unwrap_or(0).to_string(),
            ),
            ("adam.lr", a.lr.to_string()),
            ("adam.beta1", a.beta1.to_string()),
            ("adam.beta2", a.beta2.to_string()),
            ("adam.eps", a.eps.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.loss", self.loss.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.grid_samples", self.grid_samples.to_string()),
            ("train.grid_cols", self.grid_cols.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one `section.key=value` setting; unknown keys error.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("bad value {value:?} for {key}"));
        match key {
            "model.z_dim" => self.model.z_dim = value.parse().map_err(|_| bad())?,
            "model.image_size" => self.model.image_size = value.parse().map_err(|_| bad())?,
            "model.image_channels" => {
                self.model.image_channels = value.parse().map_err(|_| bad())?
            }
            "model.base_feature_maps" => {
                self.model.base_feature_maps = value.parse().map_err(|_| bad())?
            }
            "model.batchnorm_affine" => {
                self.model.batchnorm_affine = value.parse().map_err(|_| bad())?
            }
            "model.conditional_classes" => {
                let n: usize = value.parse().map_err(|_| bad())?;
                self.model.conditional_classes = if n == 0 { None } else { Some(n) };
            }
            "adam.lr" => self.adam.lr = value.parse().map_err(|_| bad())?,
            "adam.beta1" => self.adam.beta1 = value.parse().map_err(|_| bad())?,
            "adam.beta2" => self.adam.beta2 = value.parse().map_err(|_| bad())?,
            "adam.eps" => self.adam.eps = value.parse().map_err(|_| bad())?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "train.epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "train.seed" => self.seed = value.parse().map_err(|_| bad())?,
            "train.loss" => self.loss = LossVariant::from_str(value).ok_or_else(bad)?,
            "train.checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad())?
            }
            "train.grid_samples" => self.grid_samples = value.parse().map_err(|_| bad())?,
            "train.grid_cols" => self.grid_cols = value.parse().map_err(|_| bad())?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Rebuilds a config from `section.key` pairs (a config snapshot or
    /// checkpoint metadata), ignoring keys outside the config sections.
    pub fn from_kv<'a, I>(pairs: I) -> Result<TrainConfig>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            if k.starts_with("model.") || k.starts_with("adam.") || k.starts_with("train.") {
                cfg.apply_kv(k, v)?;
            }
        }
        Ok(cfg)
    }
}

/// Maps pixels from [0, max] into the tanh range [-1, 1]: 0 -> -1 and
/// max -> 1 exactly. Values outside the declared range error.
pub fn preprocess<S: Scalar>(pixels: &Tensor<S>, max: f64) -> Result<Tensor<S>> {
    if max <= 0.0 {
        return Err(Error::config("pixel range max must be positive"));
    }
    let half = max / 2.0;
    let mut out = pixels.clone();
    for v in out.data_mut() {
        let x = v.to_f64();
        if !(0.0..=max).contains(&x) {
            return Err(Error::data(format!(
                "pixel {x} outside the declared range [0, {max}]"
            )));
        }
        *v = S::from_f64(x / half - 1.0);
    }
    Ok(out)
}

/// One-hot rows, `[n, classes]`.
pub fn one_hot<S: Scalar>(labels: &[u8], classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::data(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l as usize] = S::ONE;
    }
    Ok(t)
}

/// Constant one-hot feature planes, `[n, classes, h, w]`: the plane of the
/// sample's class is all ones, the rest zero.
pub fn class_planes<S: Scalar>(
    labels: &[u8],
    classes: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), classes, h, w]);
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::data(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let start = (i * classes + l as usize) * h * w;
        data[start..start + h * w].fill(S::ONE);
    }
    Ok(t)
}

/// Generator input for one batch: z, with the one-hot class block appended
/// in conditional mode.
pub fn g_input<S: Scalar>(
    z: &Tensor<S>,
    labels: Option<&[u8]>,
    classes: usize,
) -> Result<Tensor<S>> {
    match labels {
        Some(l) => Tensor::concat_cols(z, &one_hot(l, classes)?),
        None => Ok(z.clone()),
    }
}

/// Scalar outcomes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_d: f64,
    pub loss_g: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

fn finite(x: f64, what: &str, net: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(format!(
            "non-finite {what} from the {net} update"
        )))
    }
}

pub(crate) fn adam_apply<S: Scalar>(
    net: &mut Network<S>,
    opt: &mut Adam<S>,
    grads: Vec<Tensor<S>>,
) -> Result<()> {
    let mut values: Vec<Tensor<S>> = net.params.iter().map(|p| p.value.clone()).collect();
    opt.step(&mut values, &grads)?;
    for (p, v) in net.params.iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

/// Runs the generator forward (train-mode batch statistics, parameters
/// frozen) and returns the fake image batch as a plain tensor.
pub fn generate_detached<S: Scalar>(g: &Network<S>, g_in: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let z = tape.constant(g_in.clone());
    let out = g.forward_full(&mut tape, z, Mode::Train, false, None, None)?;
    Ok(tape.value(out.output).clone())
}

/// One discriminator update: BCE toward 1 on the real batch plus BCE toward
/// 0 on a detached fake batch. Each pass keeps its own batch statistics;
/// both are folded into the running estimates. Returns
/// (loss_d, d_real_mean, d_fake_mean).
pub fn d_update<S: Scalar>(
    g: &Network<S>,
    d: &mut Network<S>,
    real: &Tensor<S>,
    g_in: &Tensor<S>,
    planes: Option<&Tensor<S>>,
    opt_d: &mut Adam<S>,
) -> Result<(f64, f64, f64)> {
    let fake = generate_detached(g, g_in)?;
    let (real_in, fake_in) = match planes {
        Some(p) => (
            Tensor::concat_channels(real, p)?,
            Tensor::concat_channels(&fake, p)?,
        ),
        None => (real.clone(), fake),
    };
    let n = real_in.shape()[0];

    let mut tape = Tape::new();
    let xr = tape.constant(real_in);
    let xf = tape.constant(fake_in);
    let fr = d.forward_full(&mut tape, xr, Mode::Train, true, None, None)?;
    let ff = d.forward_full(&mut tape, xf, Mode::Train, true, None, None)?;
    let ones = tape.constant(Tensor::full(&[n, 1], S::ONE));
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let l_real = nn::bce(&mut tape, fr.output, ones)?;
    let l_fake = nn::bce(&mut tape, ff.output, zeros)?;
    let loss = tape.add(l_real, l_fake)?;

    let loss_d = finite(tape.value(loss).data()[0].to_f64(), "loss_d", "discriminator")?;
    let d_real_mean = tape.value(fr.output).mean_all();
    let d_fake_mean = tape.value(ff.output).mean_all();

    let grads = tape.backward(loss)?;
    let summed: Vec<Tensor<S>> = d
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let a = grads.get_or_zeros(fr.param_vars[i], p.value.shape());
            let b = grads.get_or_zeros(ff.param_vars[i], p.value.shape());
            a.add(&b).expect("aligned parameter gradients")
        })
        .collect();
    adam_apply(d, opt_d, summed)?;
    d.apply_bn_updates(&fr.batch_stats);
    d.apply_bn_updates(&ff.batch_stats);
    Ok((loss_d, d_real_mean, d_fake_mean))
}

/// One generator update through the frozen discriminator. Returns loss_g.
pub fn g_update<S: Scalar>(
    g: &mut Network<S>,
    d: &Network<S>,
    g_in: &Tensor<S>,
    planes: Option<&Tensor<S>>,
    opt_g: &mut Adam<S>,
    variant: LossVariant,
) -> Result<f64> {
    let n = g_in.shape()[0];
    let mut tape = Tape::new();
    let z = tape.constant(g_in.clone());
    let gf = g.forward_full(&mut tape, z, Mode::Train, true, None, None)?;
    let d_in = match planes {
        Some(p) => {
            let pc = tape.constant(p.clone());
            tape.concat_channels(gf.output, pc)?
        }
        None => gf.output,
    };
    let df = d.forward_full(&mut tape, d_in, Mode::Train, false, None, None)?;
    let loss = match variant {
        LossVariant::NonSaturating => {
            let ones = tape.constant(Tensor::full(&[n, 1], S::ONE));
            nn::bce(&mut tape, df.output, ones)?
        }
        LossVariant::Minimax => {
            let zeros = tape.constant(Tensor::zeros(&[n, 1]));
            let b = nn::bce(&mut tape, df.output, zeros)?;
            tape.neg(b)
        }
    };
    let loss_g = finite(tape.value(loss).data()[0].to_f64(), "loss_g", "generator")?;

    let grads = tape.backward(loss)?;
    let gg: Vec<Tensor<S>> = g
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| grads.get_or_zeros(gf.param_vars[i], p.value.shape()))
        .collect();
    adam_apply(g, opt_g, gg)?;
    g.apply_bn_updates(&gf.batch_stats);
    Ok(loss_g)
}

/// One full adversarial step: D update then G update, sharing `g_in` (the
/// step's z draw, with one-hot classes appended in conditional mode) and
/// `planes` (the matching constant class planes).
pub fn gan_step<S: Scalar>(
    g: &mut Network<S>,
    d: &mut Network<S>,
    real: &Tensor<S>,
    g_in: &Tensor<S>,
    planes: Option<&Tensor<S>>,
    opt_g: &mut Adam<S>,
    opt_d: &mut Adam<S>,
    variant: LossVariant,
) -> Result<StepStats> {
    if real.shape()[0] != g_in.shape()[0] {
        return Err(Error::shape(format!(
            "real batch of {} vs z batch of {}",
            real.shape()[0],
            g_in.shape()[0]
        )));
    }
    let (loss_d, d_real_mean, d_fake_mean) = d_update(g, d, real, g_in, planes, opt_d)?;
    let loss_g = g_update(g, d, g_in, planes, opt_g, variant)?;
    Ok(StepStats {
        loss_d,
        loss_g,
        d_real_mean,
        d_fake_mean,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint packing.
// ---------------------------------------------------------------------------

fn pack_network<S: Scalar>(ck: &mut Checkpoint<S>, prefix: &str, net: &Network<S>) {
    ck.specs.push(net.spec.to_text());
    for p in &net.params {
        ck.push_tensor(format!("{prefix}.{}", p.name), p.value.clone());
    }
    for (i, bn) in net.bn_states.iter().enumerate() {
        ck.push_tensor(format!("{prefix}.bn{i}.mean"), bn.running_mean.clone());
        ck.push_tensor(format!("{prefix}.bn{i}.var"), bn.running_var.clone());
    }
}

fn unpack_network<S: Scalar>(
    ck: &Checkpoint<S>,
    prefix: &str,
    net: &mut Network<S>,
) -> Result<()> {
    for p in &mut net.params {
        let name = format!("{prefix}.{}", p.name);
        let t = ck
            .tensor(&name)
            .ok_or_else(|| Error::checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::checkpoint(format!(
                "{name}: stored shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    for (i, bn) in net.bn_states.iter_mut().enumerate() {
        for (field, slot) in [("mean", &mut bn.running_mean), ("var", &mut bn.running_var)] {
            let name = format!("{prefix}.bn{i}.{field}");
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::checkpoint(format!("{name}: wrong shape")));
            }
            *slot = t.clone();
        }
    }
    Ok(())
}

fn pack_adam<S: Scalar>(ck: &mut Checkpoint<S>, prefix: &str, opt: &Adam<S>, net: &Network<S>) {
    ck.set_meta(&format!("{prefix}.step"), opt.step);
    for (i, p) in net.params.iter().enumerate() {
        ck.push_tensor(format!("{prefix}.m.{}", p.name), opt.m[i].clone());
        ck.push_tensor(format!("{prefix}.v.{}", p.name), opt.v[i].clone());
    }
}

fn unpack_adam<S: Scalar>(
    ck: &Checkpoint<S>,
    prefix: &str,
    net: &Network<S>,
    cfg: AdamConfig,
) -> Result<Adam<S>> {
    let step: u64 = ck
        .meta_get(&format!("{prefix}.step"))
        .ok_or_else(|| Error::checkpoint(format!("missing {prefix}.step")))?
        .parse()
        .map_err(|_| Error::checkpoint(format!("bad {prefix}.step")))?;
    let mut opt = Adam::new(cfg, &net.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>());
    opt.step = step;
    for (i, p) in net.params.iter().enumerate() {
        for (field, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let name = format!("{prefix}.{field}.{}", p.name);
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::checkpoint(format!("{name}: wrong shape")));
            }
            *slot = t.clone();
        }
    }
    Ok(opt)
}

/// Everything a GAN checkpoint restores.
pub struct LoadedGan<S: Scalar> {
    pub g: Network<S>,
    pub d: Network<S>,
    pub opt_g: Adam<S>,
    pub opt_d: Adam<S>,
    pub rng_state: [u64; 4],
    pub step: u64,
    pub epoch: usize,
    pub meta: Vec<(String, String)>,
}

/// Writes a full training state: both networks (spec text + parameters +
/// batchnorm statistics), both optimizers, the training RNG state, and the
/// step/epoch counters.
pub fn save_gan_checkpoint<S: Scalar>(
    path: &Path,
    g: &Network<S>,
    d: &Network<S>,
    opt_g: &Adam<S>,
    opt_d: &Adam<S>,
    rng_state: [u64; 4],
    step: u64,
    epoch: usize,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.set_meta("step", step);
    ck.set_meta("epoch", epoch);
    ck.set_meta(
        "rng",
        format!(
            "{:016x},{:016x},{:016x},{:016x}",
            rng_state[0], rng_state[1], rng_state[2], rng_state[3]
        ),
    );
    for (k, v) in extra_meta {
        ck.set_meta(k, v);
    }
    pack_network(&mut ck, "g", g);
    pack_network(&mut ck, "d", d);
    pack_adam(&mut ck, "opt_g", opt_g, g);
    pack_adam(&mut ck, "opt_d", opt_d, d);
    ck.save(path)
}

/// Restores a [`save_gan_checkpoint`] file together with the [`TrainConfig`]
/// recorded in its metadata, so callers need nothing but the file.
pub fn load_run<S: Scalar>(path: &Path) -> Result<(LoadedGan<S>, TrainConfig)> {
    let ck = Checkpoint::<S>::load(path)?;
    let cfg = TrainConfig::from_kv(ck.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let gan = load_gan_checkpoint(path, cfg.adam)?;
    Ok((gan, cfg))
}

/// Restores a [`save_gan_checkpoint`] file. Networks are rebuilt from the
/// stored spec texts, so the checkpoint is self-describing.
pub fn load_gan_checkpoint<S: Scalar>(path: &Path, adam: AdamConfig) -> Result<LoadedGan<S>> {
    let ck = Checkpoint::<S>::load(path)?;
    if ck.specs.len() != 2 {
        return Err(Error::checkpoint(format!(
            "expected 2 network specs, found {}",
            ck.specs.len()
        )));
    }
    let gspec = crate::models::NetworkSpec::from_text(&ck.specs[0])?;
    let dspec = crate::models::NetworkSpec::from_text(&ck.specs[1])?;
    let mut g = Network::from_spec(gspec)?;
    let mut d = Network::from_spec(dspec)?;
    unpack_network(&ck, "g", &mut g)?;
    unpack_network(&ck, "d", &mut d)?;
    let opt_g = unpack_adam(&ck, "opt_g", &g, adam)?;
    let opt_d = unpack_adam(&ck, "opt_d", &d, adam)?;

    let meta_u64 = |key: &str| -> Result<u64> {
        ck.meta_get(key)
            .ok_or_else(|| Error::checkpoint(format!("missing meta {key}")))?
            .parse()
            .map_err(|_| Error::checkpoint(format!("bad meta {key}")))
    };
    let step = meta_u64("step")?;
    let epoch = meta_u64("epoch")? as usize;
    let rng_text = ck
        .meta_get("rng")
        .ok_or_else(|| Error::checkpoint("missing meta rng"))?;
    let parts: Vec<u64> = rng_text
        .split(',')
        .map(|p| u64::from_str_radix(p, 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::checkpoint("bad meta rng"))?;
    if parts.len() != 4 {
        return Err(Error::checkpoint("bad meta rng"));
    }
    Ok(LoadedGan {
        g,
        d,
        opt_g,
        opt_d,
        rng_state: [parts[0], parts[1], parts[2], parts[3]],
        step,
        epoch,
        meta: ck.meta,
    })
}

// ---------------------------------------------------------------------------
// The training driver.
// ---------------------------------------------------------------------------

/// Paths and counters produced by a completed run.
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub losses_csv: PathBuf,
    pub epoch_grids: Vec<PathBuf>,
    pub steps: u64,
    pub last: Option<StepStats>,
}

/// Copies the indexed samples into one `[b, c, h, w]` batch.
fn gather_batch<S: Scalar>(images: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let data = images.data();
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&data[i * per..(i + 1) * per]);
    }
    Tensor::from_vec(&[idx.len(), s[1], s[2], s[3]], out).expect("batch gather")
}

/// Fixed-z inputs for the per-epoch sample grid. In conditional mode the
/// classes cycle across the grid, so every class appears.
fn fixed_grid_input<S: Scalar>(cfg: &TrainConfig) -> Result<(Tensor<S>, Option<Vec<u8>>)> {
    let mut rng = stream(cfg.seed, streams::FIXED_Z);
    let z = sample_z::<S>(&mut rng, cfg.grid_samples, cfg.model.z_dim);
    match cfg.model.conditional_classes {
        Some(k) => {
            let labels: Vec<u8> = (0..cfg.grid_samples).map(|i| (i % k) as u8).collect();
            Ok((g_input(&z, Some(&labels), k)?, Some(labels)))
        }
        None => Ok((z, None)),
    }
}

/// Runs the generator in eval mode on the grid input and writes the PNG.
pub fn emit_sample_grid<S: Scalar>(
    g: &Network<S>,
    grid_in: &Tensor<S>,
    path: &Path,
    cols: usize,
) -> Result<()> {
    let mut tape = Tape::new();
    let z = tape.constant(grid_in.clone());
    let out = g.forward(&mut tape, z, Mode::Eval)?;
    save_grid(tape.value(out.output), path, cols)
}

/// Trains a GAN on an in-memory dataset, writing all artifacts under
/// `run_dir`. `resume` continues from an epoch-boundary checkpoint,
/// reproducing the unbroken run bit for bit.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset<S>,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let m = &cfg.model;
    if data.is_empty() {
        return Err(Error::data(format!("dataset {} is empty", data.source)));
    }
    if data.channels() != m.image_channels
        || data.image_size() != m.image_size
        || data.images.shape()[3] != m.image_size
    {
        return Err(Error::config(format!(
            "dataset images are {:?}, model expects [{}, {}, {}]",
            &data.images.shape()[1..],
            m.image_channels,
            m.image_size,
            m.image_size
        )));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::data(format!(
            "dataset of {} is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let classes = m.conditional_classes;
    if classes.is_some() && data.labels.is_none() {
        return Err(Error::config(
            "conditional training needs a labeled dataset",
        ));
    }

    // Build or restore the training state.
    let (mut g, mut d, mut opt_g, mut opt_d, mut rng, mut step, start_epoch);
    match resume {
        None => {
            g = Network::from_spec(build_generator(m)?)?;
            d = Network::from_spec(build_discriminator(m)?)?;
            g.init_weights(INIT_STD, &mut stream(cfg.seed, streams::INIT_G));
            d.init_weights(INIT_STD, &mut stream(cfg.seed, streams::INIT_D));
            opt_g = Adam::new(
                cfg.adam,
                &g.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
            );
            opt_d = Adam::new(
                cfg.adam,
                &d.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
            );
            rng = stream(cfg.seed, streams::TRAIN);
            step = 0;
            start_epoch = 0;
        }
        Some(path) => {
            let loaded = load_gan_checkpoint::<S>(path, cfg.adam)?;
            let want_g = build_generator(m)?;
            let want_d = build_discriminator(m)?;
            if loaded.g.spec != want_g || loaded.d.spec != want_d {
                return Err(Error::config(format!(
                    "checkpoint {} holds a different architecture than this config",
                    path.display()
                )));
            }
            g = loaded.g;
            d = loaded.d;
            opt_g = loaded.opt_g;
            opt_d = loaded.opt_d;
            rng = Rng::from_state(loaded.rng_state);
            step = loaded.step;
            start_epoch = loaded.epoch;
            if start_epoch >= cfg.epochs {
                return Err(Error::config(format!(
                    "checkpoint is already at epoch {start_epoch}, config trains {} epochs",
                    cfg.epochs
                )));
            }
        }
    }

    fs::create_dir_all(run_dir)?;
    let mut snapshot = String::new();
    for (k, v) in cfg.to_kv() {
        snapshot.push_str(&format!("{k}={v}\n"));
    }
    // Fixed constants of the recipe, recorded so a run directory documents
    // every number that shaped it.
    snapshot.push_str(&format!("init.weight_std={}\n", crate::models::INIT_STD));
    snapshot.push_str(&format!("act.leak={}\n", crate::models::LEAK_SLOPE));
    snapshot.push_str("data.pixel_range=-1..1\n");
    fs::write(run_dir.join("config.txt"), snapshot)?;

    let losses_csv = run_dir.join("losses.csv");
    let fresh_log = !losses_csv.exists();
    let mut log = std::io::BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&losses_csv)?,
    );
    if fresh_log {
        writeln!(log, "step,epoch,loss_d,loss_g,d_real_mean,d_fake_mean")?;
    }

    let (grid_in, _grid_labels) = fixed_grid_input::<S>(cfg)?;
    let samples_dir = run_dir.join("samples");
    let ckpt_dir = run_dir.join("checkpoints");
    let mut epoch_grids = Vec::new();
    let mut last = None;

    let steps_per_epoch = data.len() / cfg.batch_size;

    for epoch in start_epoch..cfg.epochs {
        // Rebuilt from identity each epoch so the batch order depends only
        // on the RNG state, which resume restores.
        let mut indices: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut indices);
        for b in 0..steps_per_epoch {
            let idx = &indices[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let real = gather_batch(&data.images, idx);
            let labels: Option<Vec<u8>> = match (classes, &data.labels) {
                (Some(_), Some(all)) => Some(idx.iter().map(|&i| all[i]).collect()),
                _ => None,
            };
            let z = sample_z::<S>(&mut rng, cfg.batch_size, m.z_dim);
            let (gi, planes) = match (classes, &labels) {
                (Some(k), Some(l)) => (
                    g_input(&z, Some(l), k)?,
                    Some(class_planes::<S>(l, k, m.image_size, m.image_size)?),
                ),
                _ => (z, None),
            };
            step += 1;
            let stats = gan_step(
                &mut g,
                &mut d,
                &real,
                &gi,
                planes.as_ref(),
                &mut opt_g,
                &mut opt_d,
                cfg.loss,
            )
            .map_err(|e| {
                Error::numeric(format!("step {step} (epoch {}): {e}", epoch + 1))
            })?;
            writeln!(
                log,
                "{step},{},{:.6},{:.6},{:.6},{:.6}",
                epoch + 1,
                stats.loss_d,
                stats.loss_g,
                stats.d_real_mean,
                stats.d_fake_mean
            )?;
            last = Some(stats);
        }
        log.flush()?;

        let grid = samples_dir.join(format!("epoch_{:03}.png", epoch + 1));
        emit_sample_grid(&g, &grid_in, &grid, cfg.grid_cols)?;
        epoch_grids.push(grid);

        let is_last = epoch + 1 == cfg.epochs;
        let cadence_hit = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if cadence_hit || is_last {
            save_gan_checkpoint(
                &ckpt_dir.join(format!("epoch_{:03}.bin", epoch + 1)),
                &g,
                &d,
                &opt_g,
                &opt_d,
                rng.state(),
                step,
                epoch + 1,
                &cfg.to_kv(),
            )?;
        }
    }

    let final_checkpoint = run_dir.join("final.bin");
    save_gan_checkpoint(
        &final_checkpoint,
        &g,
        &d,
        &opt_g,
        &opt_d,
        rng.state(),
        step,
        cfg.epochs,
        &cfg.to_kv(),
    )?;

    Ok(TrainArtifacts {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint,
        losses_csv,
        epoch_grids,
        steps: step,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PixelRange;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                z_dim: 8,
                image_size: 8,
                image_channels: 1,
                base_feature_maps: 4,
                batchnorm_affine: true,
                conditional_classes: None,
            },
            batch_size: 16,
            epochs: 1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn synthetic_dataset(n: usize, size: usize, seed: u64) -> Dataset<f32> {
        let mut images = Tensor::zeros(&[n, 1, size, size]);
        Rng::from_seed(seed).fill_uniform(images.data_mut(), -1.0, 1.0);
        Dataset {
            images,
            labels: Some((0..n).map(|i| (i % 4) as u8).collect()),
            source: "synthetic".into(),
            range: PixelRange::Unit,
        }
    }

    fn fresh_pair(cfg: &TrainConfig) -> (Network<f32>, Network<f32>, Adam<f32>, Adam<f32>) {
        let mut g = Network::from_spec(build_generator(&cfg.model).unwrap()).unwrap();
        let mut d = Network::from_spec(build_discriminator(&cfg.model).unwrap()).unwrap();
        g.init_weights(INIT_STD, &mut stream(cfg.seed, streams::INIT_G));
        d.init_weights(INIT_STD, &mut stream(cfg.seed, streams::INIT_D));
        let og = Adam::new(
            cfg.adam,
            &g.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
        );
        let od = Adam::new(
            cfg.adam,
            &d.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
        );
        (g, d, og, od)
    }

    #[test]
    fn preprocess_maps_the_declared_range_onto_tanh_range() {
        let t = Tensor::from_vec(&[4], vec![0.0f32, 127.5, 255.0, 51.0]).unwrap();
        let out = preprocess(&t, 255.0).unwrap();
        assert_eq!(out.data()[0], -1.0);
        assert_eq!(out.data()[1], 0.0);
        assert_eq!(out.data()[2], 1.0);

        let unit = Tensor::from_vec(&[2], vec![0.0f32, 1.0]).unwrap();
        let out = preprocess(&unit, 1.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let bad = Tensor::from_vec(&[1], vec![300.0f32]).unwrap();
        assert!(preprocess(&bad, 255.0).is_err());
    }

    #[test]
    fn preprocess_roundtrips_random_bytes() {
        let mut rng = Rng::from_seed(3);
        let bytes: Vec<u8> = (0..512).map(|_| rng.below(256) as u8).collect();
        let t = Tensor::from_vec(&[512], bytes.iter().map(|&b| b as f32).collect()).unwrap();
        let pre = preprocess(&t, 255.0).unwrap();
        for (i, &b) in bytes.iter().enumerate() {
            assert_eq!(crate::data::postprocess(pre.data()[i]), b);
        }
    }

    #[test]
    fn one_hot_and_planes_encode_classes() {
        let oh: Tensor<f32> = one_hot(&[2, 0], 3).unwrap();
        assert_eq!(oh.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot::<f32>(&[3], 3).is_err());

        let pl: Tensor<f32> = class_planes(&[1], 2, 2, 2).unwrap();
        assert_eq!(pl.shape(), &[1, 2, 2, 2]);
        assert_eq!(pl.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);

        let gi = g_input(&Tensor::<f32>::zeros(&[2, 4]), Some(&[1, 0]), 2).unwrap();
        assert_eq!(gi.shape(), &[2, 6]);
    }

    #[test]
    fn zeroed_discriminator_sees_maximal_confusion() {
        // A zero-parameter discriminator outputs sigmoid(0) = 0.5 for any
        // input, so loss_d must be 2 ln 2.
        let cfg = tiny_cfg();
        let (mut g, _, mut og, _) = fresh_pair(&cfg);
        let mut d = Network::from_spec(build_discriminator(&cfg.model).unwrap()).unwrap();
        let mut od = Adam::new(
            cfg.adam,
            &d.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
        );
        let data = synthetic_dataset(4, 8, 1);
        let z = sample_z::<f32>(&mut stream(0, streams::TRAIN), 4, 8);
        let stats = gan_step(
            &mut g,
            &mut d,
            &data.images,
            &z,
            None,
            &mut og,
            &mut od,
            LossVariant::NonSaturating,
        )
        .unwrap();
        assert!(
            (stats.loss_d - 2.0 * std::f64::consts::LN_2).abs() < 1e-4,
            "loss_d {}",
            stats.loss_d
        );
        assert!((stats.d_real_mean - 0.5).abs() < 1e-6);
        assert!((stats.d_fake_mean - 0.5).abs() < 1e-6);
    }

    #[test]
    fn d_update_leaves_the_generator_untouched() {
        let cfg = tiny_cfg();
        let (g, mut d, _, mut od) = fresh_pair(&cfg);
        let before: Vec<Tensor<f32>> = g.params.iter().map(|p| p.value.clone()).collect();
        let data = synthetic_dataset(8, 8, 2);
        let z = sample_z::<f32>(&mut stream(1, streams::TRAIN), 8, 8);
        d_update(&g, &mut d, &data.images, &z, None, &mut od).unwrap();
        for (p, b) in g.params.iter().zip(&before) {
            assert_eq!(p.value.data(), b.data());
        }
    }

    #[test]
    fn g_update_leaves_the_discriminator_untouched() {
        let cfg = tiny_cfg();
        let (mut g, d, mut og, _) = fresh_pair(&cfg);
        let before: Vec<Tensor<f32>> = d.params.iter().map(|p| p.value.clone()).collect();
        let bn_before: Vec<Tensor<f32>> = d
            .bn_states
            .iter()
            .map(|b| b.running_mean.clone())
            .collect();
        let z = sample_z::<f32>(&mut stream(2, streams::TRAIN), 8, 8);
        g_update(&mut g, &d, &z, None, &mut og, LossVariant::NonSaturating).unwrap();
        for (p, b) in d.params.iter().zip(&before) {
            assert_eq!(p.value.data(), b.data());
        }
        for (s, b) in d.bn_states.iter().zip(&bn_before) {
            assert_eq!(s.running_mean.data(), b.data());
        }
    }

    #[test]
    fn d_updates_descend_on_a_fixed_batch() {
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..tiny_cfg()
        };
        let (g, mut d, _, mut od) = fresh_pair(&cfg);
        let data = synthetic_dataset(16, 8, 5);
        let z = sample_z::<f32>(&mut stream(3, streams::TRAIN), 16, 8);
        let (first, _, _) = d_update(&g, &mut d, &data.images, &z, None, &mut od).unwrap();
        let mut lastv = first;
        for _ in 0..5 {
            let (l, _, _) = d_update(&g, &mut d, &data.images, &z, None, &mut od).unwrap();
            lastv = l;
        }
        assert!(lastv < first, "loss_d went {first} -> {lastv}");
    }

    #[test]
    fn both_loss_variants_step_finitely() {
        let cfg = tiny_cfg();
        let data = synthetic_dataset(16, 8, 6);
        for variant in [LossVariant::NonSaturating, LossVariant::Minimax] {
            let (mut g, mut d, mut og, mut od) = fresh_pair(&cfg);
            let z = sample_z::<f32>(&mut stream(4, streams::TRAIN), 16, 8);
            let stats = gan_step(
                &mut g, &mut d, &data.images, &z, None, &mut og, &mut od, variant,
            )
            .unwrap();
            assert!(stats.loss_d.is_finite() && stats.loss_g.is_finite());
        }
    }

    #[test]
    fn conditional_step_wires_classes_through_both_networks() {
        let mut cfg = tiny_cfg();
        cfg.model.conditional_classes = Some(4);
        let (mut g, mut d, mut og, mut od) = fresh_pair(&cfg);
        let data = synthetic_dataset(16, 8, 7);
        let labels: Vec<u8> = data.labels.clone().unwrap()[..16].to_vec();
        let z = sample_z::<f32>(&mut stream(5, streams::TRAIN), 16, 8);
        let gi = g_input(&z, Some(&labels), 4).unwrap();
        let planes = class_planes::<f32>(&labels, 4, 8, 8).unwrap();
        let stats = gan_step(
            &mut g,
            &mut d,
            &data.images,
            &gi,
            Some(&planes),
            &mut og,
            &mut od,
            LossVariant::NonSaturating,
        )
        .unwrap();
        assert!(stats.loss_d.is_finite() && stats.loss_g.is_finite());
    }

    #[test]
    fn one_epoch_on_256_images_makes_exactly_two_steps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            batch_size: 128,
            grid_samples: 16,
            grid_cols: 4,
            ..tiny_cfg()
        };
        let data = synthetic_dataset(256, 8, 8);
        let arts = train(&cfg, &data, &dir.path().join("run"), None).unwrap();
        assert_eq!(arts.steps, 2);
        let log = std::fs::read_to_string(&arts.losses_csv).unwrap();
        let rows: Vec<&str> = log.trim().lines().collect();
        assert_eq!(rows[0], "step,epoch,loss_d,loss_g,d_real_mean,d_fake_mean");
        assert_eq!(rows.len(), 3);
        assert!(rows[1].starts_with("1,1,"));
        assert!(arts.epoch_grids[0].is_file());
        assert!(arts.final_checkpoint.is_file());
        assert!(dir.path().join("run/config.txt").is_file());
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = synthetic_dataset(48, 8, 9);
        let a = train(&cfg, &data, &dir.path().join("a"), None).unwrap();
        let b = train(&cfg, &data, &dir.path().join("b"), None).unwrap();
        let ba = std::fs::read(&a.final_checkpoint).unwrap();
        let bb = std::fs::read(&b.final_checkpoint).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn resume_matches_the_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_dataset(48, 8, 10);
        let full = TrainConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let unbroken = train(&full, &data, &dir.path().join("full"), None).unwrap();

        let one = TrainConfig {
            epochs: 1,
            ..full.clone()
        };
        let first = train(&one, &data, &dir.path().join("half"), None).unwrap();
        let resumed = train(
            &full,
            &data,
            &dir.path().join("resumed"),
            Some(&first.final_checkpoint),
        )
        .unwrap();

        assert_eq!(
            std::fs::read(&unbroken.final_checkpoint).unwrap(),
            std::fs::read(&resumed.final_checkpoint).unwrap()
        );
    }

    #[test]
    fn checkpoint_restores_every_piece_of_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = synthetic_dataset(32, 8, 12);
        let arts = train(&cfg, &data, &dir.path().join("run"), None).unwrap();
        let loaded = load_gan_checkpoint::<f32>(&arts.final_checkpoint, cfg.adam).unwrap();
        assert_eq!(loaded.step, arts.steps);
        assert_eq!(loaded.epoch, 1);
        assert_eq!(loaded.g.spec.name, "generator");
        assert_eq!(loaded.opt_g.step, arts.steps);
        assert!(loaded
            .meta
            .iter()
            .any(|(k, v)| k == "train.loss" && v == "non_saturating"));

        // sampling from the loaded generator works and stays in range
        let z = sample_z::<f32>(&mut stream(0, streams::SAMPLE), 4, 8);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = loaded.g.forward(&mut tape, zv, Mode::Eval).unwrap();
        assert!(tape
            .value(out.output)
            .data()
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn config_kv_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.model.conditional_classes = Some(10);
        cfg.loss = LossVariant::Minimax;
        cfg.adam.lr = 0.0003;
        let mut rebuilt = TrainConfig::default();
        for (k, v) in cfg.to_kv() {
            rebuilt.apply_kv(&k, &v).unwrap();
        }
        assert_eq!(rebuilt, cfg);
        assert!(rebuilt.apply_kv("train.nonsense", "1").is_err());
        assert!(rebuilt.apply_kv("train.epochs", "abc").is_err());
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = synthetic_dataset(32, 8, 13);
        // wrong image size
        let mut wrong = cfg.clone();
        wrong.model.image_size = 16;
        assert!(train(&wrong, &data, dir.path(), None).is_err());
        // conditional without labels
        let mut unlabeled = data.clone();
        unlabeled.labels = None;
        let mut cond = cfg.clone();
        cond.model.conditional_classes = Some(4);
        assert!(train(&cond, &unlabeled, dir.path(), None).is_err());
    }
}

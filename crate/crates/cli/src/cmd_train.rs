//! `train`: the adversarial training loop, from dataset flags or a config
//! file to a run directory with checkpoints, loss log, and sample grids.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use dcgan_core::data::Checkpoint;
use dcgan_core::train::{train, LossVariant, TrainConfig};

use crate::util::{read_config_file, DataArgs, OutArgs};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Flat key=value config file, applied before the flags (flags win)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Square image size the model works at; inputs are padded or
    /// center-cropped to match unless --crop/--pad-to say otherwise
    #[arg(long)]
    pub size: Option<usize>,
    /// Image channels (1 grayscale, 3 RGB)
    #[arg(long)]
    pub channels: Option<usize>,
    /// Latent dimensionality
    #[arg(long)]
    pub z_dim: Option<usize>,
    /// Feature maps of the last generator stage; deeper stages double it
    #[arg(long)]
    pub base_maps: Option<usize>,
    /// Train a class-conditional model; the value is the class count, or 0
    /// to take it from the dataset labels
    #[arg(long, num_args = 0..=1, default_missing_value = "0")]
    pub conditional: Option<usize>,
    /// Keep the learned per-channel scale and shift in batchnorm
    #[arg(long)]
    pub bn_affine: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam first-moment decay
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Generator objective: non_saturating or minimax
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint every N epochs (0: only the final one)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Images in the fixed-z grid emitted after each epoch
    #[arg(long)]
    pub grid_samples: Option<usize>,
    #[arg(long)]
    pub grid_cols: Option<usize>,
    /// Continue from an existing checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(mut args: TrainArgs) -> Result<()> {
    // Precedence: checkpoint meta (on --resume), then the config file, then
    // flags. A bare --resume therefore continues with the run's own settings.
    let mut cfg = match (&args.config, &args.resume) {
        (Some(path), _) => {
            let pairs = read_config_file(path)?;
            TrainConfig::from_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?
        }
        (None, Some(path)) => {
            let ck = Checkpoint::<f32>::load(path)?;
            TrainConfig::from_kv(ck.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?
        }
        (None, None) => TrainConfig::default(),
    };

    if let Some(v) = args.size {
        cfg.model.image_size = v;
    }
    if let Some(v) = args.z_dim {
        cfg.model.z_dim = v;
    }
    if let Some(v) = args.base_maps {
        cfg.model.base_feature_maps = v;
    }
    if let Some(v) = args.bn_affine {
        cfg.model.batchnorm_affine = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = args.beta1 {
        cfg.adam.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        cfg.adam.beta2 = v;
    }
    if let Some(ref v) = args.loss {
        cfg.loss = LossVariant::from_str(v)
            .with_context(|| format!("unknown loss {v:?} (non_saturating or minimax)"))?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.grid_samples {
        cfg.grid_samples = v;
    }
    if let Some(v) = args.grid_cols {
        cfg.grid_cols = v;
    }

    // A probe load answers what the corpus looks like, then the real load
    // applies the fitted preprocessing.
    let probe = DataArgs {
        limit: Some(1),
        ..args.data.clone()
    }
    .load()?;
    args.data.fit_to(cfg.model.image_size, &probe);
    let data = args.data.load()?;
    eprintln!(
        "loaded {} images {:?} from {}",
        data.len(),
        &data.images.shape()[1..],
        args.data.data.display()
    );

    if let Some(k) = args.conditional {
        let classes = if k > 0 {
            k
        } else {
            let labels = data
                .labels
                .as_ref()
                .context("--conditional needs a labeled dataset")?;
            *labels.iter().max().context("empty label set")? as usize + 1
        };
        cfg.model.conditional_classes = Some(classes);
    }
    if let Some(v) = args.channels {
        cfg.model.image_channels = v;
    } else {
        cfg.model.image_channels = data.images.shape()[1];
    }
    cfg.validate()?;

    let out = args.out.resolve("train")?;
    let arts = train(&cfg, &data, &out, args.resume.as_deref())?;
    eprintln!(
        "trained {} steps; final checkpoint {}",
        arts.steps,
        arts.final_checkpoint.display()
    );
    println!("{}", out.display());
    Ok(())
}

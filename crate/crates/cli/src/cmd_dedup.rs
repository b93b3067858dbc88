//! `dedup`: train the denoising autoencoder, hash every image, and report
//! collision groups with an audit sample for manual review.

use std::fmt::Write as _;

use anyhow::{ensure, Result};
use clap::Args;

use dcgan_core::data::save_grid;
use dcgan_core::dedup::{dedup, flatten_crops, train_dedup_ae, DedupConfig, CROP_SIZE};
use dcgan_core::tensor::Tensor;

use crate::util::{write_report, DataArgs, OutArgs};

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Code activation threshold for hash bits
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Collision pairs sampled for the manual audit
    #[arg(long, default_value_t = 200)]
    pub audit: usize,
    /// Autoencoder training epochs
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Additive Gaussian input noise during training
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Dropout rate on the code layer during training
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// Adam learning rate for the autoencoder
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(mut args: DedupArgs) -> Result<()> {
    // the hasher works on 32x32 crops; fit the input unless told otherwise
    if args.data.crop.is_none() && args.data.pad_to.is_none() {
        let probe = DataArgs {
            limit: Some(1),
            ..args.data.clone()
        }
        .load()?;
        args.data.fit_to(CROP_SIZE, &probe);
    }
    let data = args.data.load()?;
    ensure!(data.len() >= 2, "nothing to deduplicate");
    let out = args.out.resolve("dedup")?;

    let crops = flatten_crops(&data)?;
    let mut cfg = DedupConfig {
        noise_std: args.noise,
        dropout: args.dropout,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        ..DedupConfig::default()
    };
    if let Some(lr) = args.lr {
        cfg.adam.lr = lr;
    }

    eprintln!("training the hash autoencoder ({} epochs)...", cfg.epochs);
    let (ae, epoch_mse) = train_dedup_ae(&crops, &cfg)?;
    let report = dedup(&ae, &crops, args.threshold, args.audit, args.seed)?;

    write_report(&out, "report.txt", &report.to_text())?;
    write_report(&out, "removed.txt", &report.removed_ids_text())?;

    let mut mse = String::from("epoch,mse\n");
    for (i, m) in epoch_mse.iter().enumerate() {
        let _ = writeln!(mse, "{},{m:.6e}", i + 1);
    }
    write_report(&out, "mse.csv", &mse)?;

    let mut pairs = String::from("kept,removed\n");
    for &(a, b) in &report.audit_pairs {
        let _ = writeln!(pairs, "{a},{b}");
    }
    write_report(&out, "audit_pairs.csv", &pairs)?;

    // side-by-side grid of the audit pairs for eyeballing
    if !report.audit_pairs.is_empty() {
        let s = data.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut cells = Vec::with_capacity(report.audit_pairs.len() * 2 * per);
        for &(a, b) in &report.audit_pairs {
            cells.extend_from_slice(&data.images.data()[a * per..(a + 1) * per]);
            cells.extend_from_slice(&data.images.data()[b * per..(b + 1) * per]);
        }
        let grid = Tensor::from_vec(
            &[report.audit_pairs.len() * 2, s[1], s[2], s[3]],
            cells,
        )?;
        save_grid(&grid, &out.join("audit_pairs.png"), 2)?;
    }

    eprintln!(
        "kept {} of {} images ({} collision groups)",
        report.kept.len(),
        data.len(),
        report.groups.len()
    );
    println!("{}", out.display());
    Ok(())
}

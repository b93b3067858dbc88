//! `nnc`: nearest-neighbor classification of real test images against
//! generated (or real) neighbor sets, the distribution-capture score.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;

use dcgan_core::nnc::{nnc_eval_samples, nnc_real_data, table_csv, generate_class_samples, NncReport};
use dcgan_core::rng::{stream, streams};

use crate::util::{load_checkpoint, write_report, DataArgs, OutArgs};

#[derive(Debug, Args)]
pub struct NncArgs {
    /// Conditional generator checkpoint (omit for --real only)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test split flags; --data points at the test files
    #[command(flatten)]
    pub data: DataArgs,
    /// Real training split path for the reference row
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Generated samples per class, one table row per value
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub samples_per_class: Vec<usize>,
    /// Subsample the real reference to this many per class
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Neighbors to vote over
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Generation batch size
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(args: NncArgs) -> Result<()> {
    if args.checkpoint.is_none() && args.train_data.is_none() {
        bail!("nothing to score: give --checkpoint and/or --train-data");
    }
    let test = args.data.load()?;
    ensure!(test.labels.is_some(), "test data has no labels");
    let out = args.out.resolve("nnc")?;

    let mut rows: Vec<NncReport> = Vec::new();

    if let Some(path) = &args.checkpoint {
        let (gan, cfg) = load_checkpoint(path)?;
        let classes = cfg.model.classes();
        ensure!(
            classes > 0,
            "checkpoint is not class-conditional; train with --conditional"
        );
        for &spc in &args.samples_per_class {
            eprintln!("generating {spc} samples per class...");
            let mut rng = stream(args.seed, streams::SAMPLE);
            let samples = generate_class_samples(
                &gan.g,
                classes,
                cfg.model.z_dim,
                spc,
                args.batch,
                &mut rng,
            )?;
            let row = nnc_eval_samples("dcgan_conditional", &samples, &test, args.k)?;
            eprintln!(
                "  {} neighbors -> test error {:.2}%",
                row.n_neighbors,
                row.error * 100.0
            );
            rows.push(row);
        }
    }

    if let Some(train_path) = &args.train_data {
        let train = args
            .data
            .load_path(train_path)
            .context("loading --train-data")?;
        ensure!(train.labels.is_some(), "train data has no labels");
        eprintln!("scoring the real-data reference...");
        let row = nnc_real_data(&train, &test, args.per_class, args.seed)?;
        eprintln!(
            "  {} neighbors -> test error {:.2}%",
            row.n_neighbors,
            row.error * 100.0
        );
        rows.push(row);
    }

    write_report(&out, "table.csv", &table_csv(&rows))?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&format!(
            "{}: {:.2}% test error ({} per class, {} test images)\n",
            r.model,
            r.error * 100.0,
            r.samples_per_class,
            r.n_test
        ));
    }
    write_report(&out, "report.txt", &text)?;
    println!("{}", out.display());
    Ok(())
}

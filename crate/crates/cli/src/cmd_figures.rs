//! Latent-space figure commands: `sample`, `interpolate`, `arith`, `turn`.
//! Each draws or derives latent vectors, forwards them through a generator
//! checkpoint, and writes a PNG grid plus the latents it used as a concept
//! file, so a figure can be reproduced or refined later.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{ensure, Result};
use clap::Args;

use dcgan_core::data::save_grid;
use dcgan_core::latent::{
    apply_axis, interpolate, save_concepts, stack, turn_axis, unstack, vector_arithmetic,
    ConceptSet,
};
use dcgan_core::models::sample_z;
use dcgan_core::rng::{stream, streams};
use dcgan_core::tensor::Tensor;

use crate::util::{generate, load_checkpoint, load_concept_ref, parse_sweep, write_report, OutArgs};

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Generator checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class for conditional checkpoints (default: cycle through all)
    #[arg(long)]
    pub label: Option<u8>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn sample(args: SampleArgs) -> Result<()> {
    ensure!(args.n > 0, "--n must be positive");
    let (gan, cfg) = load_checkpoint(&args.checkpoint)?;
    let out = args.out.resolve("sample")?;

    let mut rng = stream(args.seed, streams::SAMPLE);
    let z = sample_z::<f32>(&mut rng, args.n, cfg.model.z_dim);

    let classes = cfg.model.classes();
    let images = if classes > 0 && args.label.is_none() {
        // one block per class, cycling
        let labels: Vec<u8> = (0..args.n).map(|i| (i % classes) as u8).collect();
        let mut all: Option<Tensor<f32>> = None;
        for (i, &l) in labels.iter().enumerate() {
            let row = z.slice_rows(i, i + 1)?;
            let img = generate(&gan.g, &cfg, &row, Some(l))?;
            all = Some(match all {
                None => img,
                Some(acc) => Tensor::concat_rows(&[&acc, &img])?,
            });
        }
        all.expect("n > 0")
    } else {
        generate(&gan.g, &cfg, &z, args.label)?
    };

    save_grid(&images, &out.join("samples.png"), args.cols)?;
    save_concepts(
        &out.join("samples.conc"),
        &[ConceptSet::new("samples", unstack(&z)?)?],
    )?;
    eprintln!("wrote {}", out.join("samples.png").display());
    println!("{}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Random latent points to connect
    #[arg(long, default_value_t = 9)]
    pub points: usize,
    /// Images per interpolation row, endpoints included
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Leave the loop open instead of connecting the last point back to
    /// the first (one fewer row)
    #[arg(long)]
    pub open: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class for conditional checkpoints
    #[arg(long)]
    pub label: Option<u8>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn interpolate_cmd(args: InterpolateArgs) -> Result<()> {
    ensure!(args.points >= 2, "need at least 2 points");
    let (gan, cfg) = load_checkpoint(&args.checkpoint)?;
    let out = args.out.resolve("interpolate")?;

    let mut rng = stream(args.seed, streams::SAMPLE);
    let z = sample_z::<f32>(&mut rng, args.points, cfg.model.z_dim);
    let points = unstack(&z)?;

    let pairs: Vec<(usize, usize)> = if args.open {
        (0..args.points - 1).map(|i| (i, i + 1)).collect()
    } else {
        (0..args.points).map(|i| (i, (i + 1) % args.points)).collect()
    };

    let mut frames = Vec::with_capacity(pairs.len() * args.steps);
    for &(a, b) in &pairs {
        frames.extend(interpolate(&points[a], &points[b], args.steps)?);
    }
    let batch = stack(&frames)?;
    let images = generate(&gan.g, &cfg, &batch, args.label)?;

    save_grid(&images, &out.join("interpolation.png"), args.steps)?;
    save_concepts(
        &out.join("points.conc"),
        &[ConceptSet::new("points", points)?],
    )?;
    eprintln!(
        "wrote {} ({} rows of {})",
        out.join("interpolation.png").display(),
        pairs.len(),
        args.steps
    );
    println!("{}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ArithArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Concept file (path or path:label) for the base term
    #[arg(long)]
    pub a: String,
    /// Concept whose average is subtracted
    #[arg(long)]
    pub minus: String,
    /// Concept whose average is added
    #[arg(long)]
    pub plus: String,
    /// Samples in the result block; the exact result sits at the center
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    /// Uniform noise half-width around the result vector
    #[arg(long, default_value_t = 0.25)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class for conditional checkpoints
    #[arg(long)]
    pub label: Option<u8>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn arith(args: ArithArgs) -> Result<()> {
    ensure!(args.n >= 1, "--n must be positive");
    let (gan, cfg) = load_checkpoint(&args.checkpoint)?;
    let a = load_concept_ref(&args.a, cfg.model.z_dim)?;
    let minus = load_concept_ref(&args.minus, cfg.model.z_dim)?;
    let plus = load_concept_ref(&args.plus, cfg.model.z_dim)?;
    let out = args.out.resolve("arith")?;

    let mut rng = stream(args.seed, streams::EVAL);
    let (y, samples) =
        vector_arithmetic(&a, &minus, &plus, args.n, args.noise_scale, &mut rng)?;

    // samples[0] is the exact result; show it at the center of the block
    let mid = args.n / 2;
    let mut order: Vec<Tensor<f32>> = Vec::with_capacity(args.n);
    order.extend(samples[1..=mid].iter().cloned());
    order.push(samples[0].clone());
    order.extend(samples[mid + 1..].iter().cloned());

    let cols = (args.n as f64).sqrt().ceil() as usize;
    let batch = stack(&order)?;
    let images = generate(&gan.g, &cfg, &batch, args.label)?;
    save_grid(&images, &out.join("arithmetic.png"), cols)?;
    save_concepts(
        &out.join("result.conc"),
        &[
            ConceptSet::new("result", vec![y])?,
            ConceptSet::new("samples", order)?,
        ],
    )?;

    let mut report = String::new();
    let _ = writeln!(report, "a: {} ({} exemplars)", a.label, a.exemplars.len());
    let _ = writeln!(report, "minus: {} ({} exemplars)", minus.label, minus.exemplars.len());
    let _ = writeln!(report, "plus: {} ({} exemplars)", plus.label, plus.exemplars.len());
    let _ = writeln!(report, "noise_scale: {}", args.noise_scale);
    let _ = writeln!(report, "samples: {}", args.n);
    write_report(&out, "report.txt", &report)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TurnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Concept file (path or path:label) for the left-facing exemplars
    #[arg(long)]
    pub left: String,
    /// Concept file for the right-facing exemplars
    #[arg(long)]
    pub right: String,
    /// Axis sweep as start:end:count
    #[arg(long, default_value = "-1:1:9")]
    pub t: String,
    /// Random rows to sweep
    #[arg(long, default_value_t = 5)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class for conditional checkpoints
    #[arg(long)]
    pub label: Option<u8>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn turn(args: TurnArgs) -> Result<()> {
    ensure!(args.rows >= 1, "--rows must be positive");
    let (gan, cfg) = load_checkpoint(&args.checkpoint)?;
    let left = load_concept_ref(&args.left, cfg.model.z_dim)?;
    let right = load_concept_ref(&args.right, cfg.model.z_dim)?;
    let sweep = parse_sweep(&args.t)?;
    let out = args.out.resolve("turn")?;

    let axis = turn_axis(&left, &right)?;
    let mut rng = stream(args.seed, streams::SAMPLE);
    let z = sample_z::<f32>(&mut rng, args.rows, cfg.model.z_dim);
    let zs = unstack(&z)?;

    let mut frames = Vec::with_capacity(args.rows * sweep.len());
    for base in &zs {
        for &t in &sweep {
            frames.push(apply_axis(base, &axis, t)?);
        }
    }
    let batch = stack(&frames)?;
    let images = generate(&gan.g, &cfg, &batch, args.label)?;
    save_grid(&images, &out.join("turn.png"), sweep.len())?;
    save_concepts(
        &out.join("axis.conc"),
        &[ConceptSet::new("turn_axis", vec![axis.clone()])?],
    )?;

    let norm: f64 = axis.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let mut report = String::new();
    let _ = writeln!(report, "left: {} ({} exemplars)", left.label, left.exemplars.len());
    let _ = writeln!(report, "right: {} ({} exemplars)", right.label, right.exemplars.len());
    let _ = writeln!(report, "axis_l2: {norm:.6}");
    let _ = writeln!(report, "sweep: {:?}", sweep);
    write_report(&out, "report.txt", &report)?;
    println!("{}", out.display());
    Ok(())
}

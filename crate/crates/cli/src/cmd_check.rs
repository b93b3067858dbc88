//! `gradcheck`: the built-in verification suites, as a command.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use clap::Args;

use dcgan_core::checks::{adjoint_suite, gradient_suite, network_gradient_suite, report_text, CheckRow};

use crate::util::{write_report, OutArgs};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Max relative error allowed for gradient checks
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Max relative error allowed for the adjoint identity
    #[arg(long, default_value_t = 1e-10)]
    pub adjoint_tol: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(args: GradcheckArgs) -> Result<()> {
    let out = args.out.resolve("gradcheck")?;

    eprintln!("gradient checks at step {:e}...", args.step);
    let mut rows = gradient_suite(args.step)?;
    rows.extend(network_gradient_suite(args.step)?);
    let adjoint = adjoint_suite()?;

    let mut text = report_text(&rows, args.tol);
    text.push_str(&report_text(std::slice::from_ref(&adjoint), args.adjoint_tol));
    eprint!("{text}");
    write_report(&out, "report.txt", &text)?;

    let mut csv = String::new();
    let _ = writeln!(csv, "{}", CheckRow::csv_header());
    for r in rows.iter().chain(std::iter::once(&adjoint)) {
        let _ = writeln!(csv, "{}", r.csv_row());
    }
    write_report(&out, "report.csv", &csv)?;
    println!("{}", out.display());

    let failed = rows.iter().filter(|r| !r.passed(args.tol)).count()
        + usize::from(!adjoint.passed(args.adjoint_tol));
    if failed > 0 {
        bail!("{failed} checks failed");
    }
    Ok(())
}

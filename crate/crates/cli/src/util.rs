//! Shared plumbing: output directory resolution, dataset flags, checkpoint
//! loading, latent-batch generation, and small flag parsers.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};

use dcgan_core::data::{create_run_dir, load_dataset, Dataset, DatasetKind, LoadOptions};
use dcgan_core::latent::{find_concept, load_concepts, ConceptSet};
use dcgan_core::models::Network;
use dcgan_core::nn::Mode;
use dcgan_core::tape::Tape;
use dcgan_core::tensor::Tensor;
use dcgan_core::train::{g_input, load_run, LoadedGan, TrainConfig};

/// Environment variable overriding the default `runs` output root.
pub const RUN_ROOT_VAR: &str = "DCGAN_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Output destination flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct OutArgs {
    /// Write into this exact directory instead of a fresh run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name suffix under the run root (default: the command name)
    #[arg(long)]
    pub name: Option<String>,
}

impl OutArgs {
    /// `--out` wins; otherwise a fresh timestamped directory under the run root.
    pub fn resolve(&self, default: &str) -> Result<PathBuf> {
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                Ok(dir.clone())
            }
            None => Ok(create_run_dir(&run_root(), self.name.as_deref().unwrap_or(default))?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// MNIST idx files; point --data at the *images-idx3* file.
    Mnist,
    /// CIFAR-10 binary batches; point --data at the directory or one .bin.
    Cifar10,
    /// Directory of PNG images, with an optional labeled manifest.
    ImageDir,
}

impl From<DataKind> for DatasetKind {
    fn from(k: DataKind) -> DatasetKind {
        match k {
            DataKind::Mnist => DatasetKind::MnistIdx,
            DataKind::Cifar10 => DatasetKind::Cifar10Binary,
            DataKind::ImageDir => DatasetKind::ImageDir,
        }
    }
}

/// Dataset source flags shared by every command that reads images.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset format of --data
    #[arg(long, value_enum)]
    pub dataset: DataKind,
    /// Dataset path (file or directory, depending on the format)
    #[arg(long)]
    pub data: PathBuf,
    /// Min-resize so the short side matches, then center-crop square
    #[arg(long)]
    pub crop: Option<usize>,
    /// Zero-pad (background -1) up to this square size
    #[arg(long)]
    pub pad_to: Option<usize>,
    /// Keep only the first N images after decoding
    #[arg(long)]
    pub limit: Option<usize>,
}

impl DataArgs {
    pub fn options(&self) -> LoadOptions {
        LoadOptions {
            crop: self.crop,
            pad_to: self.pad_to,
            limit: self.limit,
        }
    }

    pub fn load(&self) -> Result<Dataset<f32>> {
        let ds = load_dataset(self.dataset.into(), &self.data, &self.options())
            .with_context(|| format!("loading {}", self.data.display()))?;
        Ok(ds)
    }

    /// Loads a second split (e.g. the test files) with the same format and
    /// preprocessing options but a different path.
    pub fn load_path(&self, path: &Path) -> Result<Dataset<f32>> {
        let ds = load_dataset(self.dataset.into(), path, &self.options())
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(ds)
    }

    /// Fits the dataset to the model's square size when no explicit
    /// preprocessing was requested: smaller images are padded, larger ones
    /// min-resized and center-cropped.
    pub fn fit_to(&mut self, size: usize, probe: &Dataset<f32>) {
        if self.crop.is_some() || self.pad_to.is_some() {
            return;
        }
        let have = probe.images.shape()[2].max(probe.images.shape()[3]);
        if have < size {
            self.pad_to = Some(size);
        } else if have > size {
            self.crop = Some(size);
        }
    }
}

/// Loads a training checkpoint and the config stored in its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(LoadedGan<f32>, TrainConfig)> {
    load_run::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Forwards latent rows through the generator in inference mode, chunked to
/// bound memory. `label` repeats one class over the whole batch for
/// conditional models and must be absent for unconditional ones.
pub fn generate(
    g: &Network<f32>,
    cfg: &TrainConfig,
    z: &Tensor<f32>,
    label: Option<u8>,
) -> Result<Tensor<f32>> {
    let classes = cfg.model.classes();
    ensure!(
        z.ndim() == 2 && z.shape()[1] == cfg.model.z_dim,
        "latent batch {:?} does not match the checkpoint's z dim {}",
        z.shape(),
        cfg.model.z_dim
    );
    if classes == 0 && label.is_some() {
        bail!("--label given, but the checkpoint is not class-conditional");
    }
    let n = z.shape()[0];
    let mut out: Option<Tensor<f32>> = None;
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let zs = z.slice_rows(start, end)?;
        let gin = if classes > 0 {
            let labels = vec![label.unwrap_or(0); end - start];
            g_input(&zs, Some(&labels), classes)?
        } else {
            zs
        };
        let mut tape = Tape::new();
        let input = tape.constant(gin);
        let fwd = g.forward(&mut tape, input, Mode::Eval)?;
        let imgs = tape.value(fwd.output).clone();
        out = Some(match out {
            None => imgs,
            Some(acc) => Tensor::concat_rows(&[&acc, &imgs])?,
        });
        start = end;
    }
    Ok(out.expect("n > 0"))
}

/// Resolves `path` or `path:label` against a concept file; a bare path
/// means the file's first concept.
pub fn load_concept_ref(r: &str, z_dim: usize) -> Result<ConceptSet<f32>> {
    let (path, label) = match r.rsplit_once(':') {
        // windows-style drive letters are not a concern here; a single
        // trailing :label is the only split
        Some((p, l)) if !l.is_empty() && !Path::new(r).exists() => (p, Some(l)),
        _ => (r, None),
    };
    let concepts = load_concepts::<f32>(Path::new(path))
        .with_context(|| format!("loading concepts from {path}"))?;
    ensure!(!concepts.is_empty(), "{path} defines no concepts");
    let concept = match label {
        Some(l) => find_concept(&concepts, l)?,
        None => &concepts[0],
    };
    ensure!(
        concept.dim() == z_dim,
        "concept {:?} has z dim {}, checkpoint expects {}",
        concept.label,
        concept.dim(),
        z_dim
    );
    Ok(concept.clone())
}

/// Parses `start:end:count` into `count` evenly spaced values, inclusive.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    ensure!(parts.len() == 3, "sweep must be start:end:count, got {s:?}");
    let start: f64 = parts[0].parse().context("sweep start")?;
    let end: f64 = parts[1].parse().context("sweep end")?;
    let count: usize = parts[2].parse().context("sweep count")?;
    ensure!(count >= 2, "sweep needs at least 2 points");
    Ok((0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
        .collect())
}

/// Parses `a..b` (half-open) or a comma list into channel indices.
pub fn parse_channels(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.parse().context("channel range start")?;
        let b: usize = b.parse().context("channel range end")?;
        ensure!(a < b, "empty channel range {s:?}");
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("channel {p:?}")))
        .collect()
}

/// Scales each image in a `[n,c,h,w]` batch by its own max absolute value,
/// mapping saliency maps into the displayable [-1, 1] range.
pub fn normalize_per_image(maps: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = maps.shape();
    ensure!(s.len() == 4, "expected [n,c,h,w], got {s:?}");
    let per = s[1] * s[2] * s[3];
    let mut out = maps.clone();
    let data = out.data_mut();
    for i in 0..s[0] {
        let row = &mut data[i * per..(i + 1) * per];
        let peak = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            for v in row.iter_mut() {
                *v /= peak;
            }
        }
    }
    Ok(out)
}

/// Reads a flat `key=value` config file (blank lines and # comments
/// allowed) into pairs.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), i + 1);
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Writes lines to `<dir>/<name>` and reports the path on stderr.
pub fn write_report(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

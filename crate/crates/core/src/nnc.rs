//! Distribution-capture scoring: train a class-conditional model, generate a
//! labeled sample set, and measure how well a nearest-neighbor classifier
//! built on those samples recovers the labels of held-out real images.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{sample_z, Network};
use crate::nn::Mode;
use crate::rng::{stream, streams, Rng};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{g_input, train, TrainArtifacts, TrainConfig};

/// A labeled batch of generated images with equal per-class counts.
#[derive(Debug, Clone)]
pub struct ConditionalSampleSet<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<u8>,
    pub samples_per_class: usize,
}

impl<S: Scalar> ConditionalSampleSet<S> {
    pub fn new(
        images: Tensor<S>,
        labels: Vec<u8>,
        samples_per_class: usize,
    ) -> Result<ConditionalSampleSet<S>> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "images {:?} vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        let mut classes: Vec<u8> = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::config("empty sample set"));
        }
        let k = classes.len();
        if classes != (0..k as u8).collect::<Vec<u8>>() {
            return Err(Error::config(format!(
                "class coverage incomplete: saw {classes:?}"
            )));
        }
        for cls in &classes {
            let count = labels.iter().filter(|&l| l == cls).count();
            if count != samples_per_class {
                return Err(Error::config(format!(
                    "class {cls} has {count} samples, expected {samples_per_class}"
                )));
            }
        }
        Ok(ConditionalSampleSet {
            images,
            labels,
            samples_per_class,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len() / self.samples_per_class
    }
}

/// Splits a labeled dataset into (rest, validation) with a seeded shuffle.
pub fn split_validation<S: Scalar>(
    data: &Dataset<S>,
    validation: usize,
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    if validation == 0 || validation >= data.len() {
        return Err(Error::config(format!(
            "validation split {validation} of {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    stream(seed, streams::EVAL).shuffle(&mut order);
    let (val_idx, rest_idx) = order.split_at(validation);
    Ok((subset(data, rest_idx)?, subset(data, val_idx)?))
}

fn subset<S: Scalar>(data: &Dataset<S>, idx: &[usize]) -> Result<Dataset<S>> {
    let s = data.images.shape();
    let per = s[1] * s[2] * s[3];
    let mut images = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        images.extend_from_slice(&data.images.data()[i * per..(i + 1) * per]);
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[idx.len(), s[1], s[2], s[3]], images)?,
        labels: data
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect()),
        source: data.source.clone(),
        range: data.range,
    })
}

/// Trains the class-conditional model for this protocol: holds out a seeded
/// validation split, runs the adversarial loop on the rest, and returns the
/// artifacts together with the held-out set.
pub fn train_conditional<S: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset<S>,
    validation: usize,
    run_dir: &Path,
) -> Result<(TrainArtifacts, Dataset<S>)> {
    if cfg.model.conditional_classes.is_none() {
        return Err(Error::config(
            "conditional training needs model.conditional_classes",
        ));
    }
    if data.labels.is_none() {
        return Err(Error::data(format!(
            "dataset {} has no labels",
            data.source
        )));
    }
    let (rest, val) = split_validation(data, validation, cfg.seed)?;
    let artifacts = train(cfg, &rest, run_dir, None)?;
    Ok((artifacts, val))
}

/// Generates `samples_per_class` images for every class of a conditional
/// generator, class by class, in inference mode.
pub fn generate_class_samples<S: Scalar>(
    g: &Network<S>,
    classes: usize,
    z_dim: usize,
    samples_per_class: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<ConditionalSampleSet<S>> {
    if classes == 0 || samples_per_class == 0 {
        return Err(Error::config("need classes and a per-class count"));
    }
    let batch = batch.max(1);
    let mut images: Option<Tensor<S>> = None;
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    for cls in 0..classes {
        let mut done = 0;
        while done < samples_per_class {
            let n = batch.min(samples_per_class - done);
            let z = sample_z(rng, n, z_dim);
            let batch_labels = vec![cls as u8; n];
            let gin = g_input(&z, Some(&batch_labels), classes)?;
            let mut tape = Tape::new();
            let input = tape.constant(gin);
            let out = g.forward(&mut tape, input, Mode::Eval)?;
            let imgs = tape.value(out.output).clone();
            images = Some(match images {
                None => imgs,
                Some(acc) => Tensor::concat_rows(&[&acc, &imgs])?,
            });
            labels.extend_from_slice(&batch_labels);
            done += n;
        }
    }
    ConditionalSampleSet::new(images.expect("classes > 0"), labels, samples_per_class)
}

fn flat_rows<S: Scalar>(images: &Tensor<S>) -> Result<Tensor<S>> {
    match images.ndim() {
        2 => Ok(images.clone()),
        4 => {
            let n = images.shape()[0];
            images.reshape(&[n, images.len() / n])
        }
        _ => Err(Error::shape(format!(
            "expected [n, d] or [n,c,h,w], got {:?}",
            images.shape()
        ))),
    }
}

/// k-nearest-neighbor classification under Euclidean distance in pixel
/// space. Ties are deterministic: neighbors are ordered by (distance,
/// train index), and a tied vote goes to the class holding the nearest
/// member. Cross terms run through the batched matmul; distances accumulate
/// in f64.
pub fn nn_classify<S: Scalar>(
    train_images: &Tensor<S>,
    train_labels: &[u8],
    test_images: &Tensor<S>,
    k: usize,
) -> Result<Vec<u8>> {
    let train = flat_rows(train_images)?;
    let test = flat_rows(test_images)?;
    let (n, d) = (train.shape()[0], train.shape()[1]);
    if n == 0 {
        return Err(Error::data("empty neighbor set"));
    }
    if train_labels.len() != n {
        return Err(Error::shape(format!(
            "{n} train rows vs {} labels",
            train_labels.len()
        )));
    }
    if test.shape()[1] != d {
        return Err(Error::shape(format!(
            "train dim {d} vs test dim {}",
            test.shape()[1]
        )));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("k={k} with {n} neighbors")));
    }

    let train_t = train.transpose2()?;
    let train_norms: Vec<f64> = (0..n)
        .map(|j| {
            train.data()[j * d..(j + 1) * d]
                .iter()
                .map(|v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum()
        })
        .collect();

    let m = test.shape()[0];
    let mut preds = Vec::with_capacity(m);
    let chunk = 256;
    let mut start = 0;
    while start < m {
        let end = (start + chunk).min(m);
        let q = test.slice_rows(start, end)?;
        let cross = q.matmul(&train_t)?;
        for i in 0..end - start {
            let row = &q.data()[i * d..(i + 1) * d];
            let qn: f64 = row
                .iter()
                .map(|v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum();
            let crow = &cross.data()[i * n..(i + 1) * n];
            // k smallest (distance, index), ascending
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for j in 0..n {
                let dist = qn + train_norms[j] - 2.0 * crow[j].to_f64();
                if best.len() == k && dist >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= dist);
                best.insert(pos, (dist, j));
                best.truncate(k);
            }
            preds.push(vote(&best, train_labels));
        }
        start = end;
    }
    Ok(preds)
}

fn vote(neighbors: &[(f64, usize)], labels: &[u8]) -> u8 {
    if neighbors.len() == 1 {
        return labels[neighbors[0].1];
    }
    let mut counts: Vec<(u8, usize)> = Vec::new();
    for &(_, j) in neighbors {
        let l = labels[j];
        match counts.iter_mut().find(|(c, _)| *c == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((l, 1)),
        }
    }
    let top = counts.iter().map(|&(_, n)| n).max().expect("nonempty");
    // tied classes resolve to the one seen first in neighbor order, which
    // is the class of the nearest tied member
    for &(_, j) in neighbors {
        let l = labels[j];
        let n = counts.iter().find(|(c, _)| *c == l).expect("counted").1;
        if n == top {
            return l;
        }
    }
    unreachable!("some class holds the top count")
}

/// Fraction of test labels a k-NN classifier over `(train, labels)` gets
/// wrong.
pub fn nn_error<S: Scalar>(
    train_images: &Tensor<S>,
    train_labels: &[u8],
    test: &Dataset<S>,
    k: usize,
) -> Result<f64> {
    let truth = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::data(format!("dataset {} has no labels", test.source)))?;
    let preds = nn_classify(train_images, train_labels, &test.images, k)?;
    let wrong = preds.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / truth.len().max(1) as f64)
}

/// One row of the results table.
#[derive(Debug, Clone)]
pub struct NncReport {
    pub model: String,
    pub samples_per_class: usize,
    pub n_neighbors: usize,
    pub n_test: usize,
    pub error: f64,
}

impl NncReport {
    pub fn csv_header() -> &'static str {
        "model,samples_per_class,n_neighbors,n_test,test_error"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.model, self.samples_per_class, self.n_neighbors, self.n_test, self.error
        )
    }
}

/// Renders report rows as the results-table CSV.
pub fn table_csv(rows: &[NncReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", NncReport::csv_header());
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Scores a pre-built sample set: its images become the 1-NN neighbor set,
/// the real test images are classified, and the error rate is reported.
pub fn nnc_eval_samples<S: Scalar>(
    model: &str,
    samples: &ConditionalSampleSet<S>,
    test: &Dataset<S>,
    k: usize,
) -> Result<NncReport> {
    let error = nn_error(&samples.images, &samples.labels, test, k)?;
    Ok(NncReport {
        model: model.into(),
        samples_per_class: samples.samples_per_class,
        n_neighbors: samples.labels.len(),
        n_test: test.len(),
        error,
    })
}

/// The full generated-samples protocol: draw `samples_per_class` images per
/// class from the conditional generator, then score them as the neighbor
/// set against the real test data.
pub fn nnc_eval<S: Scalar>(
    g: &Network<S>,
    classes: usize,
    z_dim: usize,
    test: &Dataset<S>,
    samples_per_class: usize,
    seed: u64,
) -> Result<NncReport> {
    let mut rng = stream(seed, streams::SAMPLE);
    let samples =
        generate_class_samples(g, classes, z_dim, samples_per_class, 256, &mut rng)?;
    nnc_eval_samples("dcgan_conditional", &samples, test, 1)
}

/// The reference row: the real training set itself as the neighbor set,
/// optionally subsampled to `per_class` examples per class.
pub fn nnc_real_data<S: Scalar>(
    train_set: &Dataset<S>,
    test: &Dataset<S>,
    per_class: Option<usize>,
    seed: u64,
) -> Result<NncReport> {
    let labels = train_set
        .labels
        .as_ref()
        .ok_or_else(|| Error::data(format!("dataset {} has no labels", train_set.source)))?;
    let (images, labels, spc) = match per_class {
        None => {
            let max_class = *labels.iter().max().expect("nonempty") as usize;
            (
                train_set.images.clone(),
                labels.clone(),
                labels.len() / (max_class + 1),
            )
        }
        Some(p) => {
            let pool: Vec<usize> = (0..labels.len()).collect();
            let mut rng = stream(seed, streams::EVAL);
            let idx = crate::analysis::per_class_sample(labels, &pool, p, &mut rng)?;
            let sub = subset(train_set, &idx)?;
            let l = sub.labels.clone().expect("labels carried");
            (sub.images, l, p)
        }
    };
    let error = nn_error(&images, &labels, test, 1)?;
    Ok(NncReport {
        model: "real_data".into(),
        samples_per_class: spc,
        n_neighbors: labels.len(),
        n_test: test.len(),
        error,
    })
}

//! Near-duplicate removal by semantic hashing: a denoising dropout
//! autoencoder compresses 32x32 center crops to a 128-unit code, the code is
//! binarized by thresholding, and images sharing a code are collapsed in one
//! linear pass.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_autoencoder, Network};
use crate::nn::{mse, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, streams};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::adam_apply;

/// Flattened 32x32x3 crop, the autoencoder's input width.
pub const AE_INPUT_DIM: usize = 3072;
/// Code units, and therefore hash bits.
pub const AE_CODE_DIM: usize = 128;
/// Crop edge the corpus is standardized to.
pub const CROP_SIZE: usize = 32;

/// A binarized code: bit i set iff code activation i exceeded the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashCode(pub u128);

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl HashCode {
    pub fn hamming(self, other: HashCode) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

/// Knobs of the denoising autoencoder fit.
#[derive(Debug, Clone)]
pub struct DedupConfig {
    /// Std of the additive Gaussian input corruption.
    pub noise_std: f64,
    /// Dropout rate on the code layer.
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            noise_std: 0.1,
            dropout: 0.5,
            epochs: 10,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config(format!("bad noise std {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("bad dropout rate {}", self.dropout)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

/// Standardizes a 32x32 dataset into flat 3072-wide crop rows, replicating
/// single-channel images across RGB.
pub fn flatten_crops<S: Scalar>(data: &Dataset<S>) -> Result<Tensor<S>> {
    if data.image_size() != CROP_SIZE {
        return Err(Error::shape(format!(
            "dedup crops must be {CROP_SIZE}x{CROP_SIZE}, got {}",
            data.image_size()
        )));
    }
    let n = data.len();
    let px = CROP_SIZE * CROP_SIZE;
    let mut out = Vec::with_capacity(n * AE_INPUT_DIM);
    match data.channels() {
        3 => out.extend_from_slice(data.images.data()),
        1 => {
            for i in 0..n {
                let gray = &data.images.data()[i * px..(i + 1) * px];
                for _ in 0..3 {
                    out.extend_from_slice(gray);
                }
            }
        }
        c => {
            return Err(Error::shape(format!(
                "dedup crops must have 1 or 3 channels, got {c}"
            )))
        }
    }
    Tensor::from_vec(&[n, AE_INPUT_DIM], out)
}

/// Fits the 3072-128-3072 denoising dropout autoencoder by mean-square
/// reconstruction of the clean input from a noise-corrupted copy. Returns
/// the network and the mean reconstruction error of each epoch.
pub fn train_dedup_ae<S: Scalar>(
    crops: &Tensor<S>,
    cfg: &DedupConfig,
) -> Result<(Network<S>, Vec<f64>)> {
    cfg.validate()?;
    if crops.ndim() != 2 || crops.shape()[1] != AE_INPUT_DIM {
        return Err(Error::shape(format!(
            "expected [n, {AE_INPUT_DIM}] crops, got {:?}",
            crops.shape()
        )));
    }
    let n = crops.shape()[0];
    if n == 0 {
        return Err(Error::data("no crops to train on"));
    }

    let mut net = Network::from_spec(build_autoencoder(AE_INPUT_DIM, AE_CODE_DIM, cfg.dropout)?)?;
    net.init_weights(crate::models::INIT_STD, &mut stream(cfg.seed, streams::INIT_AE));
    let mut opt = Adam::new(cfg.adam.clone(), &param_values(&net));
    let mut rng = stream(cfg.seed, streams::TRAIN);

    let batch = cfg.batch_size.min(n);
    let steps = n / batch;
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        let mut accum = 0.0;
        for step in 0..steps {
            let rows = &indices[step * batch..(step + 1) * batch];
            let clean = gather(crops, rows)?;
            let mut corrupted = clean.clone();
            if cfg.noise_std > 0.0 {
                let mut noise = vec![S::ZERO; corrupted.len()];
                rng.fill_normal(&mut noise, 0.0, cfg.noise_std);
                for (c, e) in corrupted.data_mut().iter_mut().zip(&noise) {
                    *c = *c + *e;
                }
            }

            let mut tape = Tape::new();
            let input = tape.constant(corrupted);
            let target = tape.constant(clean);
            let out = net.forward_full(&mut tape, input, Mode::Train, true, Some(&mut rng), None)?;
            let loss = mse(&mut tape, out.output, target)?;
            let loss_val = tape.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "autoencoder loss {loss_val} at epoch {_epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Tensor<S>> = out
                .param_vars
                .iter()
                .zip(&net.params)
                .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
                .collect();
            adam_apply(&mut net, &mut opt, grad_vec)?;
            accum += loss_val;
        }
        epoch_mse.push(accum / steps.max(1) as f64);
    }
    Ok((net, epoch_mse))
}

fn param_values<S: Scalar>(net: &Network<S>) -> Vec<Tensor<S>> {
    net.params.iter().map(|p| p.value.clone()).collect()
}

fn gather<S: Scalar>(crops: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let d = crops.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend_from_slice(&crops.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(&[rows.len(), d], data)
}

fn check_hash_inputs<S: Scalar>(ae: &Network<S>, crops: &Tensor<S>) -> Result<()> {
    let stages = ae.spec.stage_shapes()?;
    if stages.first().map(|s| s.as_slice()) != Some(&[AE_CODE_DIM][..]) {
        return Err(Error::config(format!(
            "expected a {AE_CODE_DIM}-unit code layer, stages are {stages:?}"
        )));
    }
    if crops.ndim() != 2 || crops.shape()[1] != AE_INPUT_DIM {
        return Err(Error::shape(format!(
            "expected [n, {AE_INPUT_DIM}] crops, got {:?}",
            crops.shape()
        )));
    }
    if ae.params.iter().all(|p| p.value.max_abs() == 0.0) {
        return Err(Error::config(
            "autoencoder looks untrained: every weight is zero",
        ));
    }
    Ok(())
}

/// Binarized codes for a batch of crops: bit i set iff code activation i is
/// strictly above `threshold` (0 by default, i.e. the ReLU fired). Runs in
/// inference mode, so dropout is inert and the result is a pure function of
/// (weights, image).
pub fn hash_codes<S: Scalar>(
    ae: &Network<S>,
    crops: &Tensor<S>,
    threshold: f64,
) -> Result<Vec<HashCode>> {
    check_hash_inputs(ae, crops)?;
    let n = crops.shape()[0];
    let mut codes = Vec::with_capacity(n);
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut tape = Tape::new();
        let input = tape.constant(crops.slice_rows(start, end)?);
        let out = ae.forward(&mut tape, input, Mode::Eval)?;
        let acts = tape.value(out.stage_activations[0]);
        for i in 0..end - start {
            let row = &acts.data()[i * AE_CODE_DIM..(i + 1) * AE_CODE_DIM];
            let mut bits = 0u128;
            for (b, v) in row.iter().enumerate() {
                if v.to_f64() > threshold {
                    bits |= 1u128 << b;
                }
            }
            codes.push(HashCode(bits));
        }
        start = end;
    }
    Ok(codes)
}

/// Code of a single flat crop.
pub fn hash_code<S: Scalar>(ae: &Network<S>, crop: &Tensor<S>, threshold: f64) -> Result<HashCode> {
    let row = crop.reshape(&[1, crop.len()])?;
    Ok(hash_codes(ae, &row, threshold)?[0])
}

/// The outcome of one dedup pass over a corpus.
#[derive(Debug, Clone)]
pub struct DedupReport {
    /// First occurrence of each distinct code, ascending corpus order.
    pub kept: Vec<usize>,
    /// Later occurrences of an already-seen code, ascending corpus order.
    pub removed: Vec<usize>,
    /// Every code shared by 2+ images, with member indices ascending;
    /// groups ordered by first occurrence.
    pub groups: Vec<(HashCode, Vec<usize>)>,
    /// Seeded (kept, removed) collision pairs for hand labeling.
    pub audit_pairs: Vec<(usize, usize)>,
    /// Fraction of labeled audit pairs that were not duplicates.
    pub estimated_fp: Option<f64>,
}

impl DedupReport {
    /// Records audit labels (true = the pair really is a near-duplicate)
    /// and returns the estimated false-positive rate.
    pub fn set_audit_outcome(&mut self, is_duplicate: &[bool]) -> Result<f64> {
        if is_duplicate.len() != self.audit_pairs.len() {
            return Err(Error::config(format!(
                "{} labels for {} audit pairs",
                is_duplicate.len(),
                self.audit_pairs.len()
            )));
        }
        if is_duplicate.is_empty() {
            return Err(Error::config("no audit pairs to label"));
        }
        let fp = is_duplicate.iter().filter(|&&d| !d).count() as f64
            / is_duplicate.len() as f64;
        self.estimated_fp = Some(fp);
        Ok(fp)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let total = self.kept.len() + self.removed.len();
        let _ = writeln!(s, "corpus {total}");
        let _ = writeln!(s, "kept {}", self.kept.len());
        let _ = writeln!(s, "removed {}", self.removed.len());
        let _ = writeln!(s, "collision_groups {}", self.groups.len());
        if let Some((code, members)) = self.groups.iter().max_by_key(|(_, m)| m.len()) {
            let _ = writeln!(s, "largest_group {} ({code})", members.len());
        }
        let _ = writeln!(s, "audit_pairs {}", self.audit_pairs.len());
        if let Some(fp) = self.estimated_fp {
            let _ = writeln!(s, "estimated_false_positive_rate {fp:.4}");
        }
        s
    }

    /// One removed index per line, the format downstream filtering reads.
    pub fn removed_ids_text(&self) -> String {
        let mut s = String::new();
        for i in &self.removed {
            let _ = writeln!(s, "{i}");
        }
        s
    }
}

/// Single-pass exact-collision dedup over precomputed codes: the first
/// image with each code is kept, every later holder is removed. Up to
/// `audit_size` seeded (kept, removed) pairs are sampled for labeling.
pub fn dedup_codes(codes: &[HashCode], audit_size: usize, seed: u64) -> DedupReport {
    let mut first_seen: HashMap<HashCode, usize> = HashMap::new();
    let mut members: HashMap<HashCode, Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut group_order: Vec<HashCode> = Vec::new();
    for (i, &code) in codes.iter().enumerate() {
        match first_seen.get(&code) {
            None => {
                first_seen.insert(code, i);
                kept.push(i);
            }
            Some(&head) => {
                removed.push(i);
                members
                    .entry(code)
                    .or_insert_with(|| {
                        group_order.push(code);
                        vec![head]
                    })
                    .push(i);
            }
        }
    }
    let groups: Vec<(HashCode, Vec<usize>)> = group_order
        .into_iter()
        .map(|c| {
            let m = members.remove(&c).expect("group recorded");
            (c, m)
        })
        .collect();

    // each removed image pairs with its group head; sample without bias
    let mut pairs: Vec<(usize, usize)> = removed
        .iter()
        .map(|&i| (first_seen[&codes[i]], i))
        .collect();
    let mut rng = stream(seed, streams::EVAL);
    rng.shuffle(&mut pairs);
    pairs.truncate(audit_size);
    pairs.sort_unstable();

    DedupReport {
        kept,
        removed,
        groups,
        audit_pairs: pairs,
        estimated_fp: None,
    }
}

/// Hashes a crop corpus with the trained autoencoder and runs
/// [`dedup_codes`] over the result.
pub fn dedup<S: Scalar>(
    ae: &Network<S>,
    crops: &Tensor<S>,
    threshold: f64,
    audit_size: usize,
    seed: u64,
) -> Result<DedupReport> {
    let codes = hash_codes(ae, crops, threshold)?;
    Ok(dedup_codes(&codes, audit_size, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Low-rank corpus: each crop mixes a few shared basis rows, so there
    /// is structure for a 128-unit code to learn.
    fn toy_crops(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::from_seed(seed);
        let rank = 6;
        let mut basis = vec![0.0f64; rank * AE_INPUT_DIM];
        rng.fill_uniform(&mut basis, -1.0, 1.0);
        let mut out = Tensor::zeros(&[n, AE_INPUT_DIM]);
        for i in 0..n {
            let mut coef = vec![0.0f64; rank];
            rng.fill_uniform(&mut coef, -1.0, 1.0);
            for j in 0..AE_INPUT_DIM {
                let mut v = 0.0;
                for (r, c) in coef.iter().enumerate() {
                    v += c * basis[r * AE_INPUT_DIM + j];
                }
                out.data_mut()[i * AE_INPUT_DIM + j] = (v / rank as f64).clamp(-1.0, 1.0) as f32;
            }
        }
        out
    }

    fn quick_cfg() -> DedupConfig {
        DedupConfig {
            epochs: 4,
            batch_size: 32,
            adam: AdamConfig {
                lr: 0.002,
                ..AdamConfig::default()
            },
            ..DedupConfig::default()
        }
    }

    #[test]
    fn reconstruction_error_decreases() {
        let crops = toy_crops(96, 1);
        let (_, curve) = train_dedup_ae(&crops, &quick_cfg()).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(
            curve.last().unwrap() < &curve[0],
            "no learning: {curve:?}"
        );
    }

    #[test]
    fn architecture_is_pinned_and_inputs_validated() {
        let crops = toy_crops(8, 2);
        let cfg = DedupConfig {
            epochs: 1,
            ..quick_cfg()
        };
        let (ae, _) = train_dedup_ae(&crops, &cfg).unwrap();
        assert_eq!(ae.spec.stage_shapes().unwrap(), vec![vec![AE_CODE_DIM]]);
        assert_eq!(ae.spec.output_shape().unwrap(), vec![AE_INPUT_DIM]);

        let wrong = Tensor::<f32>::zeros(&[4, 100]);
        assert!(train_dedup_ae(&wrong, &cfg).is_err());
        let mut bad = quick_cfg();
        bad.dropout = 1.0;
        assert!(train_dedup_ae(&crops, &bad).is_err());
    }

    #[test]
    fn tiny_set_memorizes_without_corruption() {
        let crops = toy_crops(5, 3);
        let cfg = DedupConfig {
            noise_std: 0.0,
            dropout: 0.0,
            epochs: 800,
            batch_size: 5,
            seed: 4,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
        };
        let (_, curve) = train_dedup_ae(&crops, &cfg).unwrap();
        let last = *curve.last().unwrap();
        assert!(
            last < curve[0] * 0.05 && last < 1e-3,
            "memorization failed: first {} last {last}",
            curve[0]
        );
    }

    fn trained_ae(seed: u64) -> (Network<f32>, Tensor<f32>) {
        let crops = toy_crops(64, seed);
        let cfg = DedupConfig {
            epochs: 2,
            seed,
            ..quick_cfg()
        };
        let (ae, _) = train_dedup_ae(&crops, &cfg).unwrap();
        (ae, crops)
    }

    #[test]
    fn hashing_is_deterministic_and_dropout_free() {
        let (ae, crops) = trained_ae(5);
        let a = hash_codes(&ae, &crops, 0.0).unwrap();
        let b = hash_codes(&ae, &crops, 0.0).unwrap();
        assert_eq!(a, b);
        let single = hash_code(&ae, &crops.slice_rows(3, 4).unwrap(), 0.0).unwrap();
        assert_eq!(single, a[3]);
        assert_eq!(single.hamming(a[3]), 0);
        // the display form is 32 hex digits
        assert_eq!(format!("{single}").len(), 32);
    }

    #[test]
    fn untrained_weights_are_rejected() {
        let ae =
            Network::<f32>::from_spec(build_autoencoder(AE_INPUT_DIM, AE_CODE_DIM, 0.5).unwrap())
                .unwrap();
        let crops = Tensor::zeros(&[2, AE_INPUT_DIM]);
        let err = hash_codes(&ae, &crops, 0.0).unwrap_err().to_string();
        assert!(err.contains("untrained"), "{err}");
    }

    #[test]
    fn duplicates_collide_and_distinct_codes_survive() {
        let (ae, crops) = trained_ae(6);
        let n = crops.shape()[0];
        // plant copies of rows 0..8 at the end
        let mut data = crops.data().to_vec();
        data.extend_from_slice(&crops.data()[..8 * AE_INPUT_DIM]);
        let planted = Tensor::from_vec(&[n + 8, AE_INPUT_DIM], data).unwrap();

        let report = dedup(&ae, &planted, 0.0, 16, 7).unwrap();
        // every planted copy must fall to its original
        for orig in 0..8usize {
            let copy = n + orig;
            assert!(
                report.removed.contains(&copy),
                "planted copy {copy} survived"
            );
            let group = report
                .groups
                .iter()
                .find(|(_, m)| m.contains(&copy))
                .expect("copy grouped");
            assert!(group.1.contains(&orig) || report.removed.contains(&orig));
        }
        // partition and the removal-count identity
        assert_eq!(report.kept.len() + report.removed.len(), n + 8);
        let sum: usize = report.groups.iter().map(|(_, m)| m.len() - 1).sum();
        assert_eq!(sum, report.removed.len());
        // audit pairs share codes by construction
        let codes = hash_codes(&ae, &planted, 0.0).unwrap();
        for &(a, b) in &report.audit_pairs {
            assert_eq!(codes[a], codes[b]);
            assert!(a < b);
        }
    }

    #[test]
    fn k_copies_leave_one() {
        let codes = vec![HashCode(42); 6];
        let report = dedup_codes(&codes, 10, 0);
        assert_eq!(report.kept, vec![0]);
        assert_eq!(report.removed, vec![1, 2, 3, 4, 5]);
        assert_eq!(report.groups.len(), 1);
        assert_eq!(report.groups[0].1, vec![0, 1, 2, 3, 4, 5]);

        let distinct: Vec<HashCode> = (0..6).map(|i| HashCode(i)).collect();
        let clean = dedup_codes(&distinct, 10, 0);
        assert!(clean.removed.is_empty());
        assert!(clean.groups.is_empty());
        assert!(clean.audit_pairs.is_empty());
    }

    #[test]
    fn dedup_is_idempotent() {
        let codes: Vec<HashCode> = [3u128, 7, 3, 9, 7, 7, 11]
            .iter()
            .map(|&v| HashCode(v))
            .collect();
        let report = dedup_codes(&codes, 4, 1);
        assert_eq!(report.removed, vec![2, 4, 5]);
        let kept_codes: Vec<HashCode> = report.kept.iter().map(|&i| codes[i]).collect();
        let second = dedup_codes(&kept_codes, 4, 1);
        assert!(second.removed.is_empty());
    }

    #[test]
    fn audit_labels_estimate_the_fp_rate() {
        let codes = vec![
            HashCode(1),
            HashCode(1),
            HashCode(2),
            HashCode(2),
            HashCode(3),
            HashCode(3),
        ];
        let mut report = dedup_codes(&codes, 3, 2);
        assert_eq!(report.audit_pairs.len(), 3);
        let fp = report.set_audit_outcome(&[true, true, false]).unwrap();
        assert!((fp - 1.0 / 3.0).abs() < 1e-12);
        assert!(report.to_text().contains("estimated_false_positive_rate"));
        assert!(report.set_audit_outcome(&[true]).is_err());

        assert_eq!(report.removed_ids_text().lines().count(), 3);
    }

    #[test]
    fn crop_flattening_replicates_grayscale() {
        let ds = Dataset {
            images: Tensor::<f32>::from_vec(
                &[1, 1, 32, 32],
                (0..1024).map(|i| i as f32 / 1024.0).collect(),
            )
            .unwrap(),
            labels: None,
            source: "test".into(),
            range: crate::data::PixelRange::Unit,
        };
        let flat = flatten_crops(&ds).unwrap();
        assert_eq!(flat.shape(), &[1, AE_INPUT_DIM]);
        assert_eq!(flat.data()[0], flat.data()[1024]);
        assert_eq!(flat.data()[1023], flat.data()[3071]);
    }
}

//! What the adversarial networks learned: saliency maps via guided
//! backpropagation, discriminator features as inputs to linear classifiers,
//! and identification/removal of generator feature maps tied to an annotated
//! object class.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Network;
use crate::nn::{maxpool_to_grid, Mode};
use crate::rng::{stream, streams, Rng};
use crate::scalar::Scalar;
use crate::tape::{BackpropMode, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Spatial grid each conv layer's representation is pooled onto before
/// flattening into a feature vector.
pub const FEATURE_GRID: usize = 4;

// ---------------------------------------------------------------------------
// Guided backpropagation
// ---------------------------------------------------------------------------

/// One recorded saliency pass: the tape, its gradients, and the vars needed
/// to audit the rectifier gates afterwards.
struct GuidedPass<S: Scalar> {
    tape: Tape<S>,
    grads: Gradients<S>,
    input: Var,
}

fn saliency_pass<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    layer: usize,
    channel: usize,
    mode: BackpropMode,
) -> Result<GuidedPass<S>> {
    let mut tape = Tape::new();
    let input = tape.leaf(images.clone(), true);
    let out = net.forward_full(&mut tape, input, Mode::Eval, false, None, None)?;
    let stage = *out.stage_activations.get(layer).ok_or_else(|| {
        Error::config(format!(
            "no stage {layer}; network has {} hidden stages",
            out.stage_activations.len()
        ))
    })?;
    let act = tape.value(stage);
    let shape = act.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "stage {layer} is not spatial: {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if channel >= c {
        return Err(Error::config(format!(
            "channel {channel} out of range; stage {layer} has {c} channels"
        )));
    }

    // Seed 1 at each image's maximal response of the target channel (first
    // occurrence in row-major order on ties).
    let mut seed = Tensor::<S>::zeros(&shape);
    for i in 0..n {
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for y in 0..h {
            for x in 0..w {
                let v = act.at4(i, channel, y, x).to_f64();
                if v > best {
                    best = v;
                    at = y * w + x;
                }
            }
        }
        seed.data_mut()[((i * c) + channel) * h * w + at] = S::ONE;
    }

    let grads = tape.backward_from(stage, seed, mode)?;
    Ok(GuidedPass { tape, grads, input })
}

/// Saliency of the strongest spatial response of one feature channel.
///
/// Runs the network in inference mode, seeds a unit gradient at the maximal
/// location of `channel` in hidden stage `layer`, and backpropagates with
/// rectifier gates closed wherever the forward pre-activation was <= 0 or
/// the incoming backward signal negative. Returns one input-shaped map per
/// image in the batch.
pub fn guided_backprop<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    layer: usize,
    channel: usize,
) -> Result<Tensor<S>> {
    let pass = saliency_pass(net, images, layer, channel, BackpropMode::Guided)?;
    Ok(pass.grads.get_or_zeros(pass.input, images.shape()))
}

/// Plain-gradient counterpart of [`guided_backprop`], for baselines.
pub fn standard_saliency<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    layer: usize,
    channel: usize,
) -> Result<Tensor<S>> {
    let pass = saliency_pass(net, images, layer, channel, BackpropMode::Standard)?;
    Ok(pass.grads.get_or_zeros(pass.input, images.shape()))
}

/// Audits the gate property on a recorded guided pass: at every rectifier,
/// the signal delivered to the pre-activation must be exactly zero wherever
/// that pre-activation was <= 0 or the incoming signal negative. Returns the
/// number of violating elements (zero for a correct implementation).
pub fn guided_gate_violations<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    layer: usize,
    channel: usize,
) -> Result<usize> {
    let pass = saliency_pass(net, images, layer, channel, BackpropMode::Guided)?;
    Ok(count_gate_violations(&pass.tape, &pass.grads))
}

fn count_gate_violations<S: Scalar>(tape: &Tape<S>, grads: &Gradients<S>) -> usize {
    let mut violations = 0;
    for (out, pre) in tape.rectifiers() {
        let Some(delivered) = grads.get(pre) else {
            continue;
        };
        let incoming = grads.get(out);
        let pre_vals = tape.value(pre);
        for (u, (&d, &p)) in delivered.data().iter().zip(pre_vals.data()).enumerate() {
            let neg_in = incoming.map_or(false, |g| g.data()[u] < S::ZERO);
            if (p <= S::ZERO || neg_in) && d != S::ZERO {
                violations += 1;
            }
        }
    }
    violations
}

/// Pearson correlation between two equal-shaped maps, flattened. Returns 0
/// when either map has no variance (an all-zero saliency map carries no
/// structure to correlate).
pub fn pearson<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "correlating {:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ma, mb) = (a.mean_all(), b.mean_all());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.to_f64() - ma, y.to_f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Where each flat feature index came from: conv stage `layer`, one of
/// `channels` maps, cell (gy, gx) of the pooled grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: usize,
    pub channels: usize,
    pub grid: usize,
}

/// Index map of a flattened feature vector: ordered (layer, channel, gy, gx).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub entries: Vec<LayoutEntry>,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.channels * e.grid * e.grid)
            .sum()
    }

    /// Flat index of (layer, channel, gy, gx).
    pub fn index(&self, layer: usize, channel: usize, gy: usize, gx: usize) -> Option<usize> {
        let mut offset = 0;
        for e in &self.entries {
            if e.layer == layer {
                if channel >= e.channels || gy >= e.grid || gx >= e.grid {
                    return None;
                }
                return Some(offset + ((channel * e.grid) + gy) * e.grid + gx);
            }
            offset += e.channels * e.grid * e.grid;
        }
        None
    }

    /// Inverse of [`FeatureLayout::index`].
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize, usize, usize)> {
        for e in &self.entries {
            let span = e.channels * e.grid * e.grid;
            if index < span {
                let channel = index / (e.grid * e.grid);
                let rem = index % (e.grid * e.grid);
                return Some((e.layer, channel, rem / e.grid, rem % e.grid));
            }
            index -= span;
        }
        None
    }
}

/// Pools every hidden conv stage of `net` onto a 4x4 grid and concatenates
/// the results in layer order: one row of Σ_layers C·16 features per image.
///
/// Runs in inference mode, `batch` images at a time.
pub fn extract_features<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    batch: usize,
) -> Result<(Tensor<S>, FeatureLayout)> {
    if images.ndim() != 4 {
        return Err(Error::shape(format!(
            "expected [n,c,h,w] images, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    let batch = batch.max(1);

    let mut layout: Option<FeatureLayout> = None;
    let mut rows: Vec<S> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let chunk = images.slice_rows(start, end)?;
        let m = end - start;

        let mut tape = Tape::new();
        let input = tape.constant(chunk);
        let out = net.forward(&mut tape, input, Mode::Eval)?;
        if out.stage_activations.is_empty() {
            return Err(Error::config(format!(
                "{} has no hidden stages to pool",
                net.spec.name
            )));
        }

        let mut pooled = Vec::with_capacity(out.stage_activations.len());
        let mut entries = Vec::new();
        for (li, &stage) in out.stage_activations.iter().enumerate() {
            let shape = tape.value(stage).shape().to_vec();
            if shape.len() != 4 {
                return Err(Error::shape(format!(
                    "stage {li} is not spatial: {shape:?}"
                )));
            }
            if shape[2] < FEATURE_GRID || shape[3] < FEATURE_GRID {
                return Err(Error::shape(format!(
                    "stage {li} extent {}x{} is below the {FEATURE_GRID}x{FEATURE_GRID} grid",
                    shape[2], shape[3]
                )));
            }
            let g = maxpool_to_grid(&mut tape, stage, FEATURE_GRID)?;
            pooled.push(g);
            entries.push(LayoutEntry {
                layer: li,
                channels: shape[1],
                grid: FEATURE_GRID,
            });
        }
        let this_layout = FeatureLayout { entries };
        match &layout {
            None => layout = Some(this_layout),
            Some(l) => debug_assert_eq!(*l, this_layout),
        }

        // per image: each stage's [C,4,4] block, row-major, in stage order
        for i in 0..m {
            for &g in &pooled {
                let v = tape.value(g);
                let per = v.len() / m;
                rows.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
            }
        }
        start = end;
    }

    let layout = layout.expect("n >= 1 chunks ran");
    let dim = layout.dim();
    Ok((Tensor::from_vec(&[n, dim], rows)?, layout))
}

/// Flattened pixels as a feature matrix, the baseline the learned features
/// are compared against.
pub fn raw_pixel_features<S: Scalar>(images: &Tensor<S>) -> Result<Tensor<S>> {
    if images.ndim() != 4 {
        return Err(Error::shape(format!(
            "expected [n,c,h,w] images, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    images.reshape(&[n, images.len() / n])
}

// ---------------------------------------------------------------------------
// Linear classifiers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// L2-regularized hinge loss.
    Svm,
    /// L2-regularized log loss.
    Logistic,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "svm",
            ClassifierKind::Logistic => "logistic",
        }
    }
}

/// A trained linear decision rule. Binary problems use one weight row and
/// the sign of its score; multiclass problems hold one row per class
/// (one-vs-rest) and predict the argmax.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub kind: ClassifierKind,
    /// Distinct labels seen at training time, ascending.
    pub classes: Vec<u8>,
    /// One row per decision: `[d]` each; a single row for binary problems.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub reg: f64,
    /// Per-row objective value after each accepted epoch, for convergence
    /// audits.
    pub objectives: Vec<Vec<f64>>,
}

impl LinearClassifier {
    pub fn feature_dim(&self) -> usize {
        self.weights[0].len()
    }

    /// Raw scores, one per weight row.
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let scores = self.decision(x);
        if self.classes.len() == 2 {
            if scores[0] > 0.0 {
                self.classes[1]
            } else {
                self.classes[0]
            }
        } else {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            self.classes[best]
        }
    }

    /// P(class = classes[1]) for a binary logistic model.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        if self.kind != ClassifierKind::Logistic || self.classes.len() != 2 {
            return Err(Error::config(
                "probabilities need a binary logistic model",
            ));
        }
        Ok(sigmoid(self.decision(x)[0]))
    }

    pub fn predict_rows<S: Scalar>(&self, features: &Tensor<S>) -> Result<Vec<u8>> {
        let rows = as_f64_rows(features, self.feature_dim())?;
        Ok(rows.iter().map(|r| self.predict(r)).collect())
    }

    pub fn accuracy<S: Scalar>(&self, features: &Tensor<S>, labels: &[u8]) -> Result<f64> {
        let preds = self.predict_rows(features)?;
        if preds.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} rows vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as_f64_rows<S: Scalar>(features: &Tensor<S>, dim: usize) -> Result<Vec<Vec<f64>>> {
    if features.ndim() != 2 || features.shape()[1] != dim {
        return Err(Error::shape(format!(
            "expected [n, {dim}] features, got {:?}",
            features.shape()
        )));
    }
    Ok(features
        .data()
        .chunks(dim)
        .map(|r| r.iter().map(|v| v.to_f64()).collect())
        .collect())
}

/// Full-batch objective and gradient of one binary subproblem.
/// `targets` are +-1.
fn binary_objective(
    kind: ClassifierKind,
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    b: f64,
    reg: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let d = w.len();
    let mut obj = 0.5 * reg * dot(w, w);
    let mut gw = w.iter().map(|v| reg * v).collect::<Vec<f64>>();
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let f = dot(w, xi) + b;
        match kind {
            ClassifierKind::Svm => {
                let margin = 1.0 - yi * f;
                if margin > 0.0 {
                    obj += margin / n;
                    for j in 0..d {
                        gw[j] -= yi * xi[j] / n;
                    }
                    gb -= yi / n;
                }
            }
            ClassifierKind::Logistic => {
                // log(1 + exp(-y f)) computed without overflow
                let m = -yi * f;
                obj += if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() } / n;
                let p = sigmoid(f);
                let t = if yi > 0.0 { 1.0 } else { 0.0 };
                for j in 0..d {
                    gw[j] += (p - t) * xi[j] / n;
                }
                gb += (p - t) / n;
            }
        }
    }
    (obj, gw, gb)
}

/// Trains one binary subproblem by full-batch (sub)gradient descent with a
/// backtracking step: a step is accepted only if the objective does not
/// increase, halving until it fits, so the per-epoch objective is
/// non-increasing by construction. Stops when an epoch improves the
/// objective by less than 1e-6, when no representable step helps, or after
/// `max_epochs`.
fn fit_binary(
    kind: ClassifierKind,
    x: &[Vec<f64>],
    y: &[f64],
    reg: f64,
    rng: &mut Rng,
    max_epochs: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let d = x[0].len();
    let mut w = vec![0.0f64; d];
    rng.fill_uniform(&mut w, -1e-3, 1e-3);
    let mut b = 0.0;
    let mut eta = 1.0;
    let mut trace = Vec::new();

    let (mut obj, mut gw, mut gb) = binary_objective(kind, x, y, &w, b, reg);
    trace.push(obj);
    for _ in 0..max_epochs {
        let mut accepted = None;
        while eta >= 1e-14 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - eta * gi).collect();
            let bt = b - eta * gb;
            let (ot, gwt, gbt) = binary_objective(kind, x, y, &wt, bt, reg);
            if ot <= obj {
                accepted = Some((wt, bt, ot, gwt, gbt));
                break;
            }
            eta *= 0.5;
        }
        let Some((wt, bt, ot, gwt, gbt)) = accepted else {
            break;
        };
        let gain = obj - ot;
        w = wt;
        b = bt;
        obj = ot;
        gw = gwt;
        gb = gbt;
        trace.push(obj);
        eta = (eta * 1.5).min(1e3);
        if gain < 1e-6 {
            break;
        }
    }
    (w, b, trace)
}

/// Fits an L2-regularized linear classifier by deterministic full-batch
/// descent. Binary label sets get a single decision row; larger sets are
/// trained one-vs-rest. `seed` only feeds the tiny symmetric-break
/// initialization, so equal seeds give identical models.
pub fn train_linear<S: Scalar>(
    features: &Tensor<S>,
    labels: &[u8],
    kind: ClassifierKind,
    reg: f64,
    seed: u64,
) -> Result<LinearClassifier> {
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "features {:?} vs {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::config("no training examples"));
    }
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(Error::config(format!("bad regularization {reg}")));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::config(format!(
            "single-class training set (all label {})",
            classes[0]
        )));
    }

    let dim = features.shape()[1];
    let x = as_f64_rows(features, dim)?;
    let mut rng = stream(seed, streams::EVAL);
    const MAX_EPOCHS: usize = 500;

    let mut weights = Vec::new();
    let mut bias = Vec::new();
    let mut objectives = Vec::new();
    if classes.len() == 2 {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == classes[1] { 1.0 } else { -1.0 })
            .collect();
        let (w, b, trace) = fit_binary(kind, &x, &y, reg, &mut rng, MAX_EPOCHS);
        weights.push(w);
        bias.push(b);
        objectives.push(trace);
    } else {
        for &cls in &classes {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == cls { 1.0 } else { -1.0 })
                .collect();
            let (w, b, trace) = fit_binary(kind, &x, &y, reg, &mut rng, MAX_EPOCHS);
            weights.push(w);
            bias.push(b);
            objectives.push(trace);
        }
    }
    Ok(LinearClassifier {
        kind,
        classes,
        weights,
        bias,
        reg,
        objectives,
    })
}

// ---------------------------------------------------------------------------
// Classification protocols
// ---------------------------------------------------------------------------

/// The log grid regularization strengths are selected from when the caller
/// does not supply one.
pub const REG_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

/// Outcome of one select-on-validation, report-on-test run.
#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub kind: ClassifierKind,
    pub feature_dim: usize,
    pub n_fit: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// (reg, validation accuracy) for every grid point tried.
    pub grid: Vec<(f64, f64)>,
    pub chosen_reg: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

impl ProtocolReport {
    pub fn test_error(&self) -> f64 {
        1.0 - self.test_accuracy
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} on {} features ({} fit / {} val / {} test)",
            self.kind.as_str(),
            self.feature_dim,
            self.n_fit,
            self.n_val,
            self.n_test
        );
        for (reg, acc) in &self.grid {
            let _ = writeln!(s, "  reg {reg:<8} val accuracy {acc:.4}");
        }
        let _ = writeln!(
            s,
            "chosen reg {} -> test accuracy {:.4} (error {:.4})",
            self.chosen_reg,
            self.test_accuracy,
            self.test_error()
        );
        s
    }

    pub fn csv_header() -> &'static str {
        "kind,feature_dim,n_fit,n_val,n_test,chosen_reg,val_accuracy,test_accuracy,test_error"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.kind.as_str(),
            self.feature_dim,
            self.n_fit,
            self.n_val,
            self.n_test,
            self.chosen_reg,
            self.val_accuracy,
            self.test_accuracy,
            self.test_error()
        )
    }
}

/// Copies the selected rows of a feature matrix.
pub fn gather_rows<S: Scalar>(features: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    if features.ndim() != 2 {
        return Err(Error::shape(format!(
            "expected [n, d], got {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= n {
            return Err(Error::shape(format!("row {i} out of {n}")));
        }
        data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(&[idx.len(), d], data)
}

fn gather_labels(labels: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Exactly `per_class` indices of each class from `pool`, in a seeded random
/// order. Errors when some class cannot fill its quota.
pub fn per_class_sample(
    labels: &[u8],
    pool: &[usize],
    per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut classes: Vec<u8> = pool.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut shuffled = pool.to_vec();
    rng.shuffle(&mut shuffled);
    let mut picked = Vec::with_capacity(classes.len() * per_class);
    for &cls in &classes {
        let of_class: Vec<usize> = shuffled
            .iter()
            .copied()
            .filter(|&i| labels[i] == cls)
            .collect();
        if of_class.len() < per_class {
            return Err(Error::data(format!(
                "class {cls} has {} examples, need {per_class}",
                of_class.len()
            )));
        }
        picked.extend_from_slice(&of_class[..per_class]);
    }
    Ok(picked)
}

fn assert_disjoint(a: &[usize], b: &[usize]) {
    let set: std::collections::HashSet<usize> = a.iter().copied().collect();
    debug_assert!(
        !b.iter().any(|i| set.contains(i)),
        "index sets must be disjoint"
    );
}

/// The core select-and-evaluate engine: trains one classifier per grid
/// point on the fit rows, keeps the best validation accuracy (lowest reg on
/// ties), then reports that model's test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn select_and_evaluate<S: Scalar>(
    kind: ClassifierKind,
    fit: (&Tensor<S>, &[u8]),
    val: (&Tensor<S>, &[u8]),
    test: (&Tensor<S>, &[u8]),
    reg_grid: &[f64],
    seed: u64,
) -> Result<ProtocolReport> {
    if reg_grid.is_empty() {
        return Err(Error::config("empty regularization grid"));
    }
    let mut grid = Vec::with_capacity(reg_grid.len());
    let mut best: Option<(f64, f64, LinearClassifier)> = None;
    for &reg in reg_grid {
        let clf = train_linear(fit.0, fit.1, kind, reg, seed)?;
        let acc = clf.accuracy(val.0, val.1)?;
        grid.push((reg, acc));
        let better = match &best {
            None => true,
            Some((_, bacc, _)) => acc > *bacc,
        };
        if better {
            best = Some((reg, acc, clf));
        }
    }
    let (chosen_reg, val_accuracy, clf) = best.expect("nonempty grid");
    let test_accuracy = clf.accuracy(test.0, test.1)?;
    Ok(ProtocolReport {
        kind,
        feature_dim: fit.0.shape()[1],
        n_fit: fit.1.len(),
        n_val: val.1.len(),
        n_test: test.1.len(),
        grid,
        chosen_reg,
        val_accuracy,
        test_accuracy,
    })
}

/// The subsampled-classification protocol over precomputed features: split
/// a seeded validation set off the training rows, optionally subsample the
/// rest to `per_class` examples per class, select the SVM regularizer on
/// validation, and report test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn classify_protocol<S: Scalar>(
    train: (&Tensor<S>, &[u8]),
    test: (&Tensor<S>, &[u8]),
    per_class: Option<usize>,
    reg_grid: &[f64],
    validation_count: usize,
    seed: u64,
) -> Result<ProtocolReport> {
    let n = train.1.len();
    if train.0.shape()[0] != n {
        return Err(Error::shape(format!(
            "features {:?} vs {} labels",
            train.0.shape(),
            n
        )));
    }
    if validation_count == 0 || validation_count >= n {
        return Err(Error::config(format!(
            "validation split {validation_count} of {n} leaves no fit rows"
        )));
    }
    let mut rng = stream(seed, streams::EVAL);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (val_idx, pool) = order.split_at(validation_count);
    let fit_idx = match per_class {
        Some(k) => per_class_sample(train.1, pool, k, &mut rng)?,
        None => pool.to_vec(),
    };
    assert_disjoint(val_idx, &fit_idx);

    let fit_x = gather_rows(train.0, &fit_idx)?;
    let fit_y = gather_labels(train.1, &fit_idx);
    let val_x = gather_rows(train.0, val_idx)?;
    let val_y = gather_labels(train.1, val_idx);
    select_and_evaluate(
        ClassifierKind::Svm,
        (&fit_x, &fit_y),
        (&val_x, &val_y),
        test,
        reg_grid,
        seed,
    )
}

/// The uniform-label-budget protocol over precomputed features: split a
/// validation set off the training rows, sample exactly `n_labels /
/// n_classes` fit examples per class, select the SVM regularizer on
/// validation, and report test error.
#[allow(clippy::too_many_arguments)]
pub fn label_budget_protocol<S: Scalar>(
    train: (&Tensor<S>, &[u8]),
    test: (&Tensor<S>, &[u8]),
    n_labels: usize,
    validation_count: usize,
    reg_grid: &[f64],
    seed: u64,
) -> Result<ProtocolReport> {
    let mut classes: Vec<u8> = train.1.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if n_labels == 0 || n_labels % classes.len() != 0 {
        return Err(Error::config(format!(
            "label budget {n_labels} does not divide into {} classes",
            classes.len()
        )));
    }
    classify_protocol(
        train,
        test,
        Some(n_labels / classes.len()),
        reg_grid,
        validation_count,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Object-tied feature maps: fit, identify, drop
// ---------------------------------------------------------------------------

/// A hand-drawn pixel-space box on one generated sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxAnnotation {
    pub image: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub label: String,
}

impl BoxAnnotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height) {
            return Err(Error::data(format!(
                "box ({},{})..({},{}) does not fit a {width}x{height} image",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// Reads `image_id x0 y0 x1 y1 label` records, one per line; `#` comments
/// and blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err =
            |msg: String| Error::data(format!("{} line {}: {msg}", path.display(), lineno + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", parts.len())));
        }
        let num = |i: usize| -> Result<usize> {
            parts[i]
                .parse::<usize>()
                .map_err(|_| err(format!("bad number {:?}", parts[i])))
        };
        let b = BoxAnnotation {
            image: num(0)?,
            x0: num(1)?,
            y0: num(2)?,
            x1: num(3)?,
            y1: num(4)?,
            label: parts[5].to_string(),
        };
        if b.x0 >= b.x1 || b.y0 >= b.y1 {
            return Err(err(format!(
                "degenerate box ({},{})..({},{})",
                b.x0, b.y0, b.x1, b.y1
            )));
        }
        out.push(b);
    }
    if out.is_empty() {
        return Err(Error::data(format!(
            "{}: no annotations found",
            path.display()
        )));
    }
    Ok(out)
}

/// Pixel-space center of the receptive field of cell (y, x) on a
/// `stage_size`-wide activation map of an `image_size` output: the cell
/// center scaled by the upsampling factor. Well defined for any stage of
/// the doubling architecture, and the documented box-membership rule.
pub fn receptive_center(y: usize, x: usize, stage_size: usize, image_size: usize) -> (f64, f64) {
    let s = image_size as f64 / stage_size as f64;
    ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
}

/// A feature-map classifier tied to annotated boxes, plus the mask of maps
/// the positive-weight drop criterion selects.
#[derive(Debug, Clone)]
pub struct WindowFilterFit {
    pub classifier: LinearClassifier,
    pub layer: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// true = this channel's weight was > 0, so it is dropped.
    pub drop_mask: Vec<bool>,
}

impl WindowFilterFit {
    pub fn dropped(&self) -> usize {
        self.drop_mask.iter().filter(|&&d| d).count()
    }
}

/// Fits a logistic regression that predicts, from the per-channel
/// activation vector at one spatial cell, whether that cell's receptive
/// field center lies inside an annotated box. Positives are every in-box
/// cell; negatives are an equal number of out-of-box cells sampled from the
/// same images. Channels with positive learned weight form the drop mask.
pub fn fit_location_classifier<S: Scalar>(
    activations: &Tensor<S>,
    annotations: &[BoxAnnotation],
    image_size: usize,
    layer: usize,
    reg: f64,
    seed: u64,
) -> Result<WindowFilterFit> {
    let shape = activations.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "expected [n,c,h,w] activations, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    for b in annotations {
        if b.image >= n {
            return Err(Error::data(format!(
                "annotation references image {} of {n}",
                b.image
            )));
        }
        b.validate(image_size, image_size)?;
    }

    let mut rng = stream(seed, streams::EVAL);
    let mut rows: Vec<S> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut n_positive = 0;
    let mut n_negative = 0;
    let push_cell = |rows: &mut Vec<S>, labels: &mut Vec<u8>, i: usize, y: usize, x: usize, pos: bool| {
        for ch in 0..c {
            rows.push(activations.at4(i, ch, y, x));
        }
        labels.push(pos as u8);
    };

    for i in 0..n {
        let boxes: Vec<&BoxAnnotation> =
            annotations.iter().filter(|b| b.image == i).collect();
        if boxes.is_empty() {
            continue;
        }
        let mut outside = Vec::new();
        let mut inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = receptive_center(y, x, h.max(w), image_size);
                if boxes.iter().any(|b| b.contains(cx, cy)) {
                    push_cell(&mut rows, &mut labels, i, y, x, true);
                    inside += 1;
                } else {
                    outside.push((y, x));
                }
            }
        }
        // balance: as many negatives from this image as it has positives
        rng.shuffle(&mut outside);
        let take = inside.min(outside.len());
        for &(y, x) in &outside[..take] {
            push_cell(&mut rows, &mut labels, i, y, x, false);
        }
        n_positive += inside;
        n_negative += take;
    }
    if n_positive == 0 {
        return Err(Error::data(
            "no activation cell falls inside any annotated box",
        ));
    }
    if n_negative == 0 {
        return Err(Error::data("annotations cover every cell; no negatives"));
    }

    let features = Tensor::from_vec(&[labels.len(), c], rows)?;
    let classifier = train_linear(&features, &labels, ClassifierKind::Logistic, reg, seed)?;
    let drop_mask: Vec<bool> = classifier.weights[0].iter().map(|&w| w > 0.0).collect();
    Ok(WindowFilterFit {
        classifier,
        layer,
        n_positive,
        n_negative,
        drop_mask,
    })
}

/// End-to-end fit on a generator: run `z` through `g`, take hidden stage
/// `layer`, and fit the location classifier against the annotations.
pub fn fit_window_filter_model<S: Scalar>(
    g: &Network<S>,
    z: &Tensor<S>,
    layer: usize,
    annotations: &[BoxAnnotation],
    reg: f64,
    seed: u64,
) -> Result<WindowFilterFit> {
    let out_shape = g.spec.output_shape()?;
    let image_size = *out_shape.last().expect("generator output has extent");
    let mut tape = Tape::new();
    let input = tape.constant(z.clone());
    let out = g.forward(&mut tape, input, Mode::Eval)?;
    let stage = *out.stage_activations.get(layer).ok_or_else(|| {
        Error::config(format!(
            "no stage {layer}; generator has {} hidden stages",
            out.stage_activations.len()
        ))
    })?;
    let acts = tape.value(stage).clone();
    fit_location_classifier(&acts, annotations, image_size, layer, reg, seed)
}

/// A validated request to zero chosen feature maps of one generator stage.
#[derive(Debug, Clone)]
pub struct FilterDrop {
    pub layer: usize,
    /// true = drop this channel.
    pub drop: Vec<bool>,
}

/// Checks the mask length against the stage's channel count.
pub fn drop_filters<S: Scalar>(
    g: &Network<S>,
    layer: usize,
    drop: Vec<bool>,
) -> Result<FilterDrop> {
    let stages = g.spec.stage_shapes()?;
    let shape = stages.get(layer).ok_or_else(|| {
        Error::config(format!("no stage {layer}; network has {} stages", stages.len()))
    })?;
    if shape.len() != 4 - 1 {
        return Err(Error::shape(format!(
            "stage {layer} is not spatial: {shape:?}"
        )));
    }
    if drop.len() != shape[0] {
        return Err(Error::shape(format!(
            "drop mask of {} entries for a {}-channel stage",
            drop.len(),
            shape[0]
        )));
    }
    Ok(FilterDrop { layer, drop })
}

impl FilterDrop {
    /// The keep-polarity mask the forward pass takes, or None when nothing
    /// is dropped (which leaves the forward untouched, bit for bit).
    fn keep_mask(&self) -> Option<Vec<bool>> {
        if self.drop.iter().any(|&d| d) {
            Some(self.drop.iter().map(|&d| !d).collect())
        } else {
            None
        }
    }
}

/// Inference forward with an optional filter drop applied.
pub fn generate_masked<S: Scalar>(
    g: &Network<S>,
    z: &Tensor<S>,
    drop: Option<&FilterDrop>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let input = tape.constant(z.clone());
    let keep = drop.and_then(|d| d.keep_mask().map(|m| (d.layer, m)));
    let out = match &keep {
        Some((layer, mask)) => {
            g.forward_full(&mut tape, input, Mode::Eval, false, None, Some((*layer, mask)))?
        }
        None => g.forward(&mut tape, input, Mode::Eval)?,
    };
    Ok(tape.value(out.output).clone())
}

/// The with/without comparison from one z batch: (plain, masked).
pub fn paired_generation<S: Scalar>(
    g: &Network<S>,
    z: &Tensor<S>,
    drop: &FilterDrop,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((generate_masked(g, z, None)?, generate_masked(g, z, Some(drop))?))
}

/// Fraction of pixel slots that differ by more than `tol` between two
/// equal-shaped image batches.
pub fn fraction_differing<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, tol: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "comparing {:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let differing = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| (x.to_f64() - y.to_f64()).abs() > tol)
        .count();
    Ok(differing as f64 / a.len().max(1) as f64)
}

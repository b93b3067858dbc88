//! Latent-space experiments: interpolation walks, exemplar-averaged vector
//! arithmetic, and pose axes.
//!
//! Everything here is pure arithmetic on z-vectors. Results deliberately
//! leave the prior's [-1, 1] box unclamped; the generator maps any finite
//! latent to a valid image, and the arithmetic demos rely on off-manifold
//! vectors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A named set of exemplar z-vectors, the unit of the arithmetic demos.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet<S: Scalar> {
    pub label: String,
    pub exemplars: Vec<Tensor<S>>,
}

impl<S: Scalar> ConceptSet<S> {
    pub fn new(label: impl Into<String>, exemplars: Vec<Tensor<S>>) -> Result<ConceptSet<S>> {
        let c = ConceptSet {
            label: label.into(),
            exemplars,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .exemplars
            .first()
            .ok_or_else(|| Error::config(format!("concept {:?} has no exemplars", self.label)))?;
        if first.shape().len() != 1 {
            return Err(Error::shape(format!(
                "concept {:?}: exemplars must be rank-1, got {:?}",
                self.label,
                first.shape()
            )));
        }
        for e in &self.exemplars {
            if e.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "concept {:?}: mixed exemplar dimensions {:?} vs {:?}",
                    self.label,
                    e.shape(),
                    first.shape()
                )));
            }
            if !e.all_finite() {
                return Err(Error::numeric(format!(
                    "concept {:?}: non-finite exemplar entry",
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.exemplars[0].shape()[0]
    }
}

fn check_same_dim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape().len() != 1 || a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "latent dimensions {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Linear interpolation from `a` to `b` inclusive. The endpoints are the
/// inputs themselves, bit for bit.
pub fn interpolate<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, steps: usize) -> Result<Vec<Tensor<S>>> {
    check_same_dim(a, b)?;
    if steps < 2 {
        return Err(Error::config("interpolation needs at least 2 steps"));
    }
    let mut out = Vec::with_capacity(steps);
    out.push(a.clone());
    for i in 1..steps - 1 {
        let t = i as f64 / (steps - 1) as f64;
        let tv = S::from_f64(t);
        let sv = S::from_f64(1.0 - t);
        out.push(a.zip(b, |x, y| sv * x + tv * y).expect("checked dims"));
    }
    out.push(b.clone());
    Ok(out)
}

/// Chains interpolations through consecutive points, dropping duplicated
/// junction frames. Open walks emit `(n-1)(steps-1) + 1` frames; closed
/// walks wrap the last point back to the first, emitting `n(steps-1)`
/// (the nine-point, ten-step closed walk of the figure protocol is 81).
pub fn walk<S: Scalar>(
    points: &[Tensor<S>],
    steps: usize,
    closed: bool,
) -> Result<Vec<Tensor<S>>> {
    if points.len() < 2 {
        return Err(Error::config("a walk needs at least 2 points"));
    }
    let mut out = Vec::new();
    for i in 0..points.len() - 1 {
        let seg = interpolate(&points[i], &points[i + 1], steps)?;
        out.extend(seg.into_iter().skip(if i == 0 { 0 } else { 1 }));
    }
    if closed {
        let seg = interpolate(&points[points.len() - 1], &points[0], steps)?;
        // drop both junctions: the segment's start (already emitted) and
        // its end (the walk's own first frame)
        out.extend(seg.into_iter().skip(1).take(steps - 2));
    }
    Ok(out)
}

/// Arithmetic mean of a concept's exemplars.
pub fn average_z<S: Scalar>(c: &ConceptSet<S>) -> Result<Tensor<S>> {
    c.validate()?;
    let dim = c.dim();
    let mut acc = vec![0.0f64; dim];
    for e in &c.exemplars {
        for (a, v) in acc.iter_mut().zip(e.data()) {
            *a += v.to_f64();
        }
    }
    let n = c.exemplars.len() as f64;
    Tensor::from_vec(&[dim], acc.into_iter().map(|a| S::from_f64(a / n)).collect())
}

/// The exemplar-averaged arithmetic: `Y = avg(a) - avg(minus) + avg(plus)`,
/// plus `n_samples` outputs where the first is Y itself and the rest add
/// i.i.d. uniform(-noise_scale, +noise_scale) perturbations.
pub fn vector_arithmetic<S: Scalar>(
    a: &ConceptSet<S>,
    minus: &ConceptSet<S>,
    plus: &ConceptSet<S>,
    n_samples: usize,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let (va, vm, vp) = (average_z(a)?, average_z(minus)?, average_z(plus)?);
    check_same_dim(&va, &vm)?;
    check_same_dim(&va, &vp)?;
    if n_samples == 0 {
        return Err(Error::config("need at least one arithmetic sample"));
    }
    let y = va
        .zip(&vm, |x, m| x - m)
        .and_then(|t| t.zip(&vp, |x, p| x + p))?;
    let dim = y.shape()[0];
    let mut samples = Vec::with_capacity(n_samples);
    samples.push(y.clone());
    for _ in 1..n_samples {
        let mut noise = Tensor::<S>::zeros(&[dim]);
        rng.fill_uniform(noise.data_mut(), -noise_scale, noise_scale);
        samples.push(y.zip(&noise, |v, e| v + e)?);
    }
    Ok((y, samples))
}

/// Pose axis from two opposing concepts: `avg(right) - avg(left)`.
pub fn turn_axis<S: Scalar>(left: &ConceptSet<S>, right: &ConceptSet<S>) -> Result<Tensor<S>> {
    let (l, r) = (average_z(left)?, average_z(right)?);
    check_same_dim(&l, &r)?;
    r.zip(&l, |a, b| a - b)
}

/// Moves a latent along an axis: `z + t * axis`.
pub fn apply_axis<S: Scalar>(z: &Tensor<S>, axis: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    check_same_dim(z, axis)?;
    let tv = S::from_f64(t);
    z.zip(axis, |a, b| a + tv * b)
}

/// Stacks rank-1 latents into the `[n, z_dim]` batch the generator takes.
pub fn stack<S: Scalar>(latents: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = latents
        .first()
        .ok_or_else(|| Error::config("cannot stack zero latents"))?;
    let dim = first.shape()[0];
    let mut data = Vec::with_capacity(latents.len() * dim);
    for l in latents {
        if l.shape() != first.shape() {
            return Err(Error::shape(format!(
                "mixed latent dimensions {:?} vs {:?}",
                l.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(l.data());
    }
    Tensor::from_vec(&[latents.len(), dim], data)
}

/// Splits a `[n, z_dim]` batch back into rank-1 latents.
pub fn unstack<S: Scalar>(batch: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let s = batch.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("expected [n, z_dim], got {s:?}")));
    }
    let (n, dim) = (s[0], s[1]);
    Ok((0..n)
        .map(|i| {
            Tensor::from_vec(&[dim], batch.data()[i * dim..(i + 1) * dim].to_vec())
                .expect("row slice")
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Concept files: a line-oriented text format mapping labels to exemplars.
//
//   concept <label>
//   z <v0> <v1> ... <v_{dim-1}>     (one line per exemplar)
//   end
//
// Values are written in shortest-roundtrip decimal, so save -> load is
// value-exact.
// ---------------------------------------------------------------------------

pub fn save_concepts<S: Scalar>(path: &Path, concepts: &[ConceptSet<S>]) -> Result<()> {
    let mut out = String::new();
    for c in concepts {
        c.validate()?;
        out.push_str(&format!("concept {}\n", c.label));
        for e in &c.exemplars {
            out.push('z');
            for v in e.data() {
                out.push(' ');
                out.push_str(&format!("{}", v.to_f64()));
            }
            out.push('\n');
        }
        out.push_str("end\n");
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_concepts<S: Scalar>(path: &Path) -> Result<Vec<ConceptSet<S>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut concepts = Vec::new();
    let mut current: Option<ConceptSet<S>> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err =
            |msg: String| Error::data(format!("{} line {}: {msg}", path.display(), lineno + 1));
        if let Some(label) = line.strip_prefix("concept ") {
            if current.is_some() {
                return Err(err("concept block not closed with end".into()));
            }
            current = Some(ConceptSet {
                label: label.trim().to_string(),
                exemplars: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("z ") {
            let c = current
                .as_mut()
                .ok_or_else(|| err("z line outside a concept block".into()))?;
            let values: Vec<S> = rest
                .split_whitespace()
                .map(|p| {
                    p.parse::<f64>()
                        .map(S::from_f64)
                        .map_err(|_| err(format!("bad value {p:?}")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(err("empty exemplar".into()));
            }
            c.exemplars.push(Tensor::from_vec(&[values.len()], values)?);
        } else if line == "end" {
            let c = current
                .take()
                .ok_or_else(|| err("end without a concept block".into()))?;
            c.validate()
                .map_err(|e| err(format!("invalid concept: {e}")))?;
            concepts.push(c);
        } else {
            return Err(err(format!("unrecognized line {line:?}")));
        }
    }
    if current.is_some() {
        return Err(Error::data(format!(
            "{}: unterminated concept block",
            path.display()
        )));
    }
    if concepts.is_empty() {
        return Err(Error::data(format!(
            "{}: no concepts found",
            path.display()
        )));
    }
    Ok(concepts)
}

/// Finds a concept by label in a loaded file.
pub fn find_concept<'a, S: Scalar>(
    concepts: &'a [ConceptSet<S>],
    label: &str,
) -> Result<&'a ConceptSet<S>> {
    concepts.iter().find(|c| c.label == label).ok_or_else(|| {
        let known: Vec<&str> = concepts.iter().map(|c| c.label.as_str()).collect();
        Error::config(format!(
            "no concept {label:?}; file defines {known:?}"
        ))
    })
}

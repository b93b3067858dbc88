//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! a backward closure that maps the node's output gradient to contributions
//! for its inputs. Node ids grow in execution order, so walking them in
//! reverse is already a topological order for backpropagation.
//!
//! Rectifier nodes (`relu`, `leaky_relu`) additionally remember which node
//! feeds them. That lets [`Tape::backward_from`] run in guided mode, where a
//! rectifier passes a backward signal only if its forward pre-activation was
//! positive *and* the signal itself is positive. Guided mode is a saliency
//! visualization rule, not a gradient: the result is no longer the derivative
//! of anything, which is why it is a separate mode instead of a flag on the
//! ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How [`Tape::backward_from`] treats rectifier nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackpropMode {
    /// True gradients.
    Standard,
    /// Saliency propagation: rectifiers gate on both the sign of their
    /// forward input and the sign of the incoming backward signal.
    Guided,
}

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<(usize, Tensor<S>)>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    /// Present on rectifier nodes: the id of the pre-activation input.
    rect_input: Option<usize>,
    /// True when a gradient-requiring leaf feeds this node (transitively).
    /// Computed at push time so ops can skip recording work for
    /// gradient-free inputs.
    needs_grad: bool,
    backward: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, or a zero tensor of the given shape when no
    /// signal reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// All rectifier nodes as (output, pre-activation input) pairs, in
    /// execution order. Used by saliency checks and kink detection.
    pub fn rectifiers(&self) -> Vec<(Var, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.rect_input.map(|i| (Var(id), Var(i))))
            .collect()
    }

    /// Whether a backward pass would deliver a gradient to this node.
    pub fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        inputs: Vec<usize>,
        rect_input: Option<usize>,
        requires_grad: bool,
        backward: Option<BackFn<S>>,
    ) -> Var {
        let needs_grad = requires_grad || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            rect_input,
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Internal entry point for ops defined outside this module (conv,
    /// pooling, and friends in [`crate::nn`]).
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<S>,
        inputs: Vec<usize>,
        backward: BackFn<S>,
    ) -> Var {
        self.push(value, inputs, None, false, Some(backward))
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad, None)
    }

    /// A leaf that never receives gradients (data, targets, masks).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            value,
            vec![ai, bi],
            Box::new(move |g| vec![(ai, g.clone()), (bi, g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            value,
            vec![ai, bi],
            Box::new(move |g| vec![(ai, g.clone()), (bi, g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.mul(&bv)?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            value,
            vec![ai, bi],
            Box::new(move |g| {
                vec![
                    (ai, g.mul(&bv).expect("shape fixed at record time")),
                    (bi, g.mul(&av).expect("shape fixed at record time")),
                ]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.div(&bv)?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            value,
            vec![ai, bi],
            Box::new(move |g| {
                let ga = g.div(&bv).expect("shape fixed at record time");
                let gb = g
                    .mul(&av)
                    .and_then(|t| t.div(&bv))
                    .and_then(|t| t.div(&bv))
                    .expect("shape fixed at record time")
                    .map(|v| -v);
                vec![(ai, ga), (bi, gb)]
            }),
        ))
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        x: Var,
        value: Tensor<S>,
        back: impl Fn(&Tensor<S>) -> Tensor<S> + 'static,
    ) -> Var {
        let xi = x.0;
        self.push_op(value, vec![xi], Box::new(move |g| vec![(xi, back(g))]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        self.unary(x, value, |g| g.map(|v| -v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        let yc = y.clone();
        self.unary(x, y, move |g| g.mul(&yc).expect("same shape"))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = xv.map(|v| v.ln());
        self.unary(x, y, move |g| {
            g.zip(&xv, |gv, x| gv / x).expect("same shape")
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let yc = y.clone();
        self.unary(x, y, move |g| {
            g.zip(&yc, |gv, yv| gv * (S::ONE - yv * yv)).expect("same shape")
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .map(|v| S::ONE / (S::ONE + (-v).exp()));
        let yc = y.clone();
        self.unary(x, y, move |g| {
            g.zip(&yc, |gv, yv| gv * yv * (S::ONE - yv)).expect("same shape")
        })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.sqrt());
        let yc = y.clone();
        let half = S::from_f64(0.5);
        self.unary(x, y, move |g| {
            g.zip(&yc, |gv, yv| gv * half / yv).expect("same shape")
        })
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| S::ONE / v);
        let yc = y.clone();
        self.unary(x, y, move |g| {
            g.zip(&yc, |gv, yv| -gv * yv * yv).expect("same shape")
        })
    }

    // ---- rectifiers ----

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = xv.map(|v| v.max(S::ZERO));
        let xi = x.0;
        let xb = xv.clone();
        self.push(
            y,
            vec![xi],
            Some(xi),
            false,
            Some(Box::new(move |g| {
                let gx = g
                    .zip(&xb, |gv, x| if x > S::ZERO { gv } else { S::ZERO })
                    .expect("same shape");
                vec![(xi, gx)]
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = S::from_f64(slope);
        let xv = self.value(x).clone();
        let y = xv.map(|v| if v > S::ZERO { v } else { v * s });
        let xi = x.0;
        let xb = xv.clone();
        self.push(
            y,
            vec![xi],
            Some(xi),
            false,
            Some(Box::new(move |g| {
                let gx = g
                    .zip(&xb, |gv, x| if x > S::ZERO { gv } else { gv * s })
                    .expect("same shape");
                vec![(xi, gx)]
            })),
        )
    }

    // ---- scalar-argument elementwise ----

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let y = self.value(x).map(|v| v + c);
        self.unary(x, y, |g| g.clone())
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let y = self.value(x).map(|v| v * c);
        self.unary(x, y, move |g| g.map(|v| v * c))
    }

    /// min(x, c). Gradient passes where x <= c, so the tie goes to the
    /// identity branch.
    pub fn min_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let xv = self.value(x).clone();
        let y = xv.map(|v| v.min(c));
        self.unary(x, y, move |g| {
            g.zip(&xv, |gv, x| if x <= c { gv } else { S::ZERO })
                .expect("same shape")
        })
    }

    /// max(x, c). Gradient passes where x >= c.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let xv = self.value(x).clone();
        let y = xv.map(|v| v.max(c));
        self.unary(x, y, move |g| {
            g.zip(&xv, |gv, x| if x >= c { gv } else { S::ZERO })
                .expect("same shape")
        })
    }

    // ---- shape and reduction ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.unary(x, y, move |g| g.reshape(&orig).expect("same element count")))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let y = Tensor::scalar(S::from_f64(self.value(x).sum_all()));
        self.unary(x, y, move |g| Tensor::full(&xs, g.data()[0]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let inv = S::from_f64(1.0 / self.value(x).len() as f64);
        let y = Tensor::scalar(S::from_f64(self.value(x).mean_all()));
        self.unary(x, y, move |g| Tensor::full(&xs, g.data()[0] * inv))
    }

    /// Mean over every axis except axis 1; [N, C, ...] -> [C].
    pub fn mean_dim1(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).mean_dim1()?;
        let xs = self.value(x).shape().to_vec();
        let inv = S::from_f64(y.len() as f64 / self.value(x).len() as f64);
        Ok(self.unary(x, y, move |g| {
            Tensor::zeros(&xs)
                .bcast_dim1(g, |_, gc| gc * inv)
                .expect("shape fixed at record time")
        }))
    }

    /// x + v with v broadcast along axis 1.
    pub fn add_dim1(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = self.value(x).bcast_dim1(self.value(v), |a, b| a + b)?;
        let (xi, vi) = (x.0, v.0);
        Ok(self.push_op(
            y,
            vec![xi, vi],
            Box::new(move |g| {
                let gv = g.sum_dim1().expect("rank checked at record time");
                vec![(xi, g.clone()), (vi, gv)]
            }),
        ))
    }

    /// x * v with v broadcast along axis 1.
    pub fn mul_dim1(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let vv = self.value(v).clone();
        let y = xv.bcast_dim1(&vv, |a, b| a * b)?;
        let (xi, vi) = (x.0, v.0);
        Ok(self.push_op(
            y,
            vec![xi, vi],
            Box::new(move |g| {
                let gx = g.bcast_dim1(&vv, |a, b| a * b).expect("same shapes");
                let gv = g
                    .mul(&xv)
                    .and_then(|t| t.sum_dim1())
                    .expect("same shapes");
                vec![(xi, gx), (vi, gv)]
            }),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let y = av.matmul(&bv)?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            y,
            vec![ai, bi],
            Box::new(move |g| {
                let bt = bv.transpose2().expect("rank checked at record time");
                let at = av.transpose2().expect("rank checked at record time");
                let ga = g.matmul(&bt).expect("shapes fixed at record time");
                let gb = at.matmul(g).expect("shapes fixed at record time");
                vec![(ai, ga), (bi, gb)]
            }),
        ))
    }

    // ---- concatenation ----

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_cols(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            y,
            vec![ai, bi],
            Box::new(move |g| {
                let rows = g.shape()[0];
                let gd = g.data();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let base = r * (ca + cb);
                    da.extend_from_slice(&gd[base..base + ca]);
                    db.extend_from_slice(&gd[base + ca..base + ca + cb]);
                }
                vec![
                    (ai, Tensor::from_vec(&[rows, ca], da).expect("sized above")),
                    (bi, Tensor::from_vec(&[rows, cb], db).expect("sized above")),
                ]
            }),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_channels(self.value(a), self.value(b))?;
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            y,
            vec![ai, bi],
            Box::new(move |g| {
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let plane = sa[2] * sa[3];
                let gd = g.data();
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for ni in 0..n {
                    let base = ni * (ca + cb) * plane;
                    da.extend_from_slice(&gd[base..base + ca * plane]);
                    db.extend_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![
                    (ai, Tensor::from_vec(&sa, da).expect("sized above")),
                    (bi, Tensor::from_vec(&sb, db).expect("sized above")),
                ]
            }),
        ))
    }

    // ---- backward ----

    /// Backpropagates from a scalar loss with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward() needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, Tensor::scalar(S::ONE), BackpropMode::Standard)
    }

    /// Backpropagates an explicit seed from any node. The seed must match
    /// the node's value shape.
    pub fn backward_from(
        &self,
        from: Var,
        seed: Tensor<S>,
        mode: BackpropMode,
    ) -> Result<Gradients<S>> {
        if seed.shape() != self.value(from).shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} vs node shape {:?}",
                seed.shape(),
                self.value(from).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[from.0] = Some(seed);

        for id in (0..=from.0).rev() {
            // A node's gradient matters only if a requires_grad leaf feeds it.
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].clone().expect("checked above");
            let node = &self.nodes[id];

            let contributions = match (mode, node.rect_input) {
                (BackpropMode::Guided, Some(input)) => {
                    // Gate on the forward pre-activation sign and clip
                    // negative backward signal, in both rectifier variants.
                    let pre = &self.nodes[input].value;
                    let gated = g
                        .zip(pre, |gv, x| {
                            if x > S::ZERO && gv > S::ZERO {
                                gv
                            } else {
                                S::ZERO
                            }
                        })
                        .expect("rectifier preserves shape");
                    vec![(input, gated)]
                }
                _ => match &node.backward {
                    Some(back) => back(&g),
                    None => Vec::new(),
                },
            };

            for (target, contrib) in contributions {
                if !self.nodes[target].needs_grad {
                    continue;
                }
                grads[target] = Some(match grads[target].take() {
                    None => contrib,
                    Some(prev) => prev.add(&contrib)?,
                });
            }
        }

        Ok(Gradients { grads })
    }
}

/// Result of a finite-difference check of one scalar-valued function.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst relative error across every input element.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst error.
    pub worst: Option<(usize, usize)>,
    /// True when some rectifier pre-activation sat within one finite
    /// difference step of its kink, which can make the numeric derivative
    /// cross the kink and disagree with the analytic one. Callers should
    /// resample inputs rather than trust a failure in that state.
    pub kink_risk: bool,
}

/// Compares analytic gradients against central finite differences in f64.
///
/// `f` rebuilds the computation from leaves each call and returns a scalar
/// loss node. Every element of every input is perturbed by `+step` and
/// `-step`, so this is only for small verification problems.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::shape("grad_check needs a scalar-valued function"));
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let kink_risk = tape.rectifiers().iter().any(|&(_, pre)| {
        tape.value(pre)
            .data()
            .iter()
            .any(|&v| v.abs() <= 2.0 * step)
    });
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (ii, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[ei] += step;
            let (tp, _, lp) = eval(&plus)?;
            let fp = tp.value(lp).data()[0];

            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[ei] -= step;
            let (tm, _, lm) = eval(&minus)?;
            let fm = tm.value(lm).data()[0];

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ii].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((ii, ei));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        kink_risk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        Rng::from_seed(seed).fill_normal(t.data_mut(), 0.0, 1.0);
        t
    }

    #[test]
    fn add_mul_chain_matches_hand_gradient() {
        // loss = mean((a + b) * a); d/da = (2a + b)/n, d/db = a/n
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), true);
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        let loss = tape.mean_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.5, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        // loss = sum(x * x); gradient 2x reaches the leaf through both uses.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(), true);
        let p = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                Ok(tape.mean_all(y))
            },
            &[randn(&[3, 4], 1), randn(&[4, 2], 2)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let e = tape.exp(vars[0]);
                let t = tape.tanh(e);
                let s = tape.sigmoid(t);
                let q = tape.sqrt(s);
                let r = tape.recip(q);
                let l = tape.ln(r);
                Ok(tape.mean_all(l))
            },
            &[randn(&[2, 3], 3)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn dim1_broadcast_ops_match_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let y = tape.mul_dim1(vars[0], vars[1])?;
                let z = tape.add_dim1(y, vars[2])?;
                let m = tape.mean_dim1(z)?;
                let m2 = tape.mul(m, m)?;
                Ok(tape.sum_all(m2))
            },
            &[randn(&[2, 3, 2, 2], 4), randn(&[3], 5), randn(&[3], 6)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn rectifier_gradients_match_finite_differences_away_from_kinks() {
        // Inputs drawn away from zero so the central difference never
        // straddles the kink.
        let mut x = Tensor::zeros(&[40]);
        let mut rng = Rng::from_seed(9);
        for v in x.data_mut() {
            let draw = rng.uniform(0.2, 1.5);
            *v = if rng.next_f64() < 0.5 { -draw } else { draw };
        }
        let report = grad_check(
            |tape, vars| {
                let r = tape.relu(vars[0]);
                // Shift before the next rectifier: relu emits exact zeros,
                // which would otherwise sit right on the leaky kink.
                let shifted = tape.add_scalar(r, 1.0);
                let l = tape.leaky_relu(shifted, 0.2);
                let l2 = tape.leaky_relu(vars[0], 0.2);
                let s = tape.add(l, l2)?;
                let s2 = tape.mul(s, s)?;
                Ok(tape.mean_all(s2))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(!report.kink_risk);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn kink_risk_is_reported() {
        let x = Tensor::from_vec(&[2], vec![1e-5, 0.5]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum_all(r))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.kink_risk);
    }

    #[test]
    fn clamp_ops_match_finite_differences() {
        let x = Tensor::from_vec(&[4], vec![-0.8, -0.1, 0.3, 0.9]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let lo = tape.max_scalar(vars[0], -0.5);
                let hi = tape.min_scalar(lo, 0.5);
                let sq = tape.mul(hi, hi)?;
                Ok(tape.sum_all(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "{report:?}");
    }

    #[test]
    fn concat_ops_match_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let c = tape.concat_cols(vars[0], vars[1])?;
                let sq = tape.mul(c, c)?;
                Ok(tape.mean_all(sq))
            },
            &[randn(&[3, 2], 7), randn(&[3, 4], 8)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");

        let report = grad_check(
            |tape, vars| {
                let c = tape.concat_channels(vars[0], vars[1])?;
                let sq = tape.mul(c, c)?;
                Ok(tape.mean_all(sq))
            },
            &[randn(&[2, 2, 3, 3], 9), randn(&[2, 1, 3, 3], 10)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn guided_mode_gates_on_both_signs() {
        // y = relu(x), seeded with a mixed-sign signal. Standard mode passes
        // the signal wherever x > 0; guided mode additionally drops negative
        // signal entries.
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[4], vec![-1.0, 2.0, 3.0, -4.0]).unwrap(),
            true,
        );
        let y = tape.relu(x);
        let seed = Tensor::from_vec(&[4], vec![5.0, -6.0, 7.0, 8.0]).unwrap();

        let std = tape
            .backward_from(y, seed.clone(), BackpropMode::Standard)
            .unwrap();
        assert_eq!(std.get(x).unwrap().data(), &[0.0, -6.0, 7.0, 0.0]);

        let guided = tape.backward_from(y, seed, BackpropMode::Guided).unwrap();
        assert_eq!(guided.get(x).unwrap().data(), &[0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[3]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_from_rejects_wrong_seed_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[3]), true);
        let y = tape.relu(x);
        let bad = Tensor::zeros(&[2]);
        assert!(tape.backward_from(y, bad, BackpropMode::Guided).is_err());
    }
}

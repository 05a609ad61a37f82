//! Reverse-mode differentiation over flat `f64` vectors.
//!
//! A [`Tape`] borrows a [`ParameterStore`] and records every forward operation.
//! [`Tape::backward`] walks the record in reverse and accumulates exact
//! gradients for every parameter and every recorded value.
//!
//! Low-level ops assert on length mismatches; callers validate shapes at the
//! model boundary.

use super::loss;
use super::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Conv1x1 {
        w: ParamId,
        b: ParamId,
        x: Var,
        cin: usize,
        cout: usize,
    },
    Nll {
        pred: Var,
        log_var: Var,
        target: Vec<f64>,
    },
    Bce {
        prob: Var,
        target: Vec<f64>,
        pos_weight: f64,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: Gradients,
    values: Vec<Vec<f64>>,
}

impl Backward {
    /// Gradient with respect to a recorded value (inputs included).
    pub fn wrt(&self, var: Var) -> &[f64] {
        &self.values[var.0]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, values: Vec<f64>) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tape input".into()));
        }
        Ok(self.push(values, Op::Input))
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Input)
    }

    /// `W x + b` with `W` stored row-major as `out x in`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wp = self.params.get(w);
        let (rows, cols) = (wp.shape[0], wp.shape[1]);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "affine `{}` input length", wp.name);
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![0.0; rows],
        };
        for (o, row) in out.iter_mut().zip(wp.data.chunks_exact(cols)) {
            *o += row.iter().zip(xv).map(|(w, x)| w * x).sum::<f64>();
        }
        self.push(out, Op::Affine { w, b, x })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise length mismatch");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push(v, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * factor).collect();
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp_m1() })
            .collect();
        self.push(v, Op::Elu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x)[start..start + len].to_vec();
        self.push(v, Op::Slice { x, start })
    }

    /// Elementwise sum of equally sized values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).to_vec();
        for &p in &parts[1..] {
            let pv = self.value(p);
            assert_eq!(pv.len(), v.len(), "sum length mismatch");
            for (a, b) in v.iter_mut().zip(pv) {
                *a += b;
            }
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Per-cell channel mixing over a channel-major `[cin][cells]` grid.
    pub fn conv1x1(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let wp = self.params.get(w);
        let (cout, cin) = (wp.shape[0], wp.shape[1]);
        let xv = self.value(x);
        assert_eq!(xv.len() % cin, 0, "conv input is not a multiple of cin");
        let cells = xv.len() / cin;
        let bias = &self.params.get(b).data;
        let mut out = vec![0.0; cout * cells];
        for co in 0..cout {
            let dst = &mut out[co * cells..(co + 1) * cells];
            dst.iter_mut().for_each(|d| *d = bias[co]);
            for ci in 0..cin {
                let wv = wp.data[co * cin + ci];
                let src = &xv[ci * cells..(ci + 1) * cells];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        self.push(out, Op::Conv1x1 { w, b, x, cin, cout })
    }

    /// Heteroscedastic negative log-likelihood; `log_var` holds one raw
    /// log-variance per joint, `pred` three coordinates per joint.
    pub fn nll(&mut self, pred: Var, log_var: Var, target: Vec<f64>) -> Var {
        let pv = self.value(pred);
        let lv = self.value(log_var);
        assert_eq!(pv.len(), target.len(), "nll target length");
        assert_eq!(pv.len(), 3 * lv.len(), "nll variance length");
        let var: Vec<f64> = lv.iter().map(|&r| loss::variance_from_raw(r)).collect();
        let value = loss::heteroscedastic_nll(pv, &target, &var);
        self.push(
            vec![value],
            Op::Nll {
                pred,
                log_var,
                target,
            },
        )
    }

    pub fn weighted_bce(&mut self, prob: Var, target: Vec<f64>, pos_weight: f64) -> Var {
        let value = loss::weighted_bce(self.value(prob), &target, pos_weight);
        self.push(
            vec![value],
            Op::Bce {
                prob,
                target,
                pos_weight,
            },
        )
    }

    /// Propagates `seed` (the gradient of the final objective with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: &[f64]) -> Result<Backward> {
        if seed.len() != self.value(output).len() {
            return Err(Error::shape(
                "backward seed",
                self.value(output).len(),
                seed.len(),
            ));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut pgrads = Gradients::zeros_like(self.params);
        grads[output.0] = seed.to_vec();

        fn acc(grads: &mut [Vec<f64>], target: Var, contrib: impl Iterator<Item = f64>, len: usize) {
            let g = &mut grads[target.0];
            if g.is_empty() {
                g.resize(len, 0.0);
            }
            for (a, c) in g.iter_mut().zip(contrib) {
                *a += c;
            }
        }

        for i in (0..=output.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let dy = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Affine { w, b, x } => {
                    let wp = self.params.get(*w);
                    let cols = wp.shape[1];
                    let xv = self.value(*x);
                    {
                        let gw = pgrads.get_mut(*w);
                        for (o, &d) in dy.iter().enumerate() {
                            if d != 0.0 {
                                let row = &mut gw[o * cols..(o + 1) * cols];
                                for (g, xi) in row.iter_mut().zip(xv) {
                                    *g += d * xi;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (g, d) in pgrads.get_mut(*b).iter_mut().zip(&dy) {
                            *g += d;
                        }
                    }
                    let mut dx = vec![0.0; cols];
                    for (row, &d) in wp.data.chunks_exact(cols).zip(&dy) {
                        if d != 0.0 {
                            for (g, w) in dx.iter_mut().zip(row) {
                                *g += d * w;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx.into_iter(), cols);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.iter().copied(), dy.len());
                    acc(&mut grads, *b, dy.iter().copied(), dy.len());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, dy.iter().copied(), dy.len());
                    acc(&mut grads, *b, dy.iter().map(|d| -d), dy.len());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, dy.iter().zip(bv).map(|(d, y)| d * y), dy.len());
                    acc(&mut grads, *b, dy.iter().zip(av).map(|(d, x)| d * x), dy.len());
                }
                Op::OneMinus(a) => acc(&mut grads, *a, dy.iter().map(|d| -d), dy.len()),
                Op::Scale(a, f) => acc(&mut grads, *a, dy.iter().map(|d| d * f), dy.len()),
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    acc(
                        &mut grads,
                        *a,
                        dy.iter().zip(s).map(|(d, s)| d * s * (1.0 - s)),
                        dy.len(),
                    );
                }
                Op::Tanh(a) => {
                    let t = &node.value;
                    acc(
                        &mut grads,
                        *a,
                        dy.iter().zip(t).map(|(d, t)| d * (1.0 - t * t)),
                        dy.len(),
                    );
                }
                Op::Elu(a) => {
                    let xv = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        dy.iter()
                            .zip(xv)
                            .map(|(d, &x)| if x > 0.0 { *d } else { d * x.exp() }),
                        dy.len(),
                    );
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        acc(&mut grads, p, dy[offset..offset + n].iter().copied(), n);
                        offset += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.value(*x).len();
                    let g = &mut grads[x.0];
                    if g.is_empty() {
                        g.resize(n, 0.0);
                    }
                    for (a, d) in g[*start..*start + dy.len()].iter_mut().zip(&dy) {
                        *a += d;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, dy.iter().copied(), dy.len());
                    }
                }
                Op::Conv1x1 { w, b, x, cin, cout } => {
                    let xv = self.value(*x);
                    let cells = xv.len() / cin;
                    let wp = self.params.get(*w);
                    let mut dx = vec![0.0; xv.len()];
                    {
                        let gb = pgrads.get_mut(*b);
                        for co in 0..*cout {
                            gb[co] += dy[co * cells..(co + 1) * cells].iter().sum::<f64>();
                        }
                    }
                    let gw = pgrads.get_mut(*w);
                    for co in 0..*cout {
                        let d = &dy[co * cells..(co + 1) * cells];
                        for ci in 0..*cin {
                            let src = &xv[ci * cells..(ci + 1) * cells];
                            gw[co * cin + ci] += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            let wv = wp.data[co * cin + ci];
                            for (g, dd) in dx[ci * cells..(ci + 1) * cells].iter_mut().zip(d) {
                                *g += wv * dd;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx.into_iter(), xv.len());
                }
                Op::Nll {
                    pred,
                    log_var,
                    target,
                } => {
                    let (dp, dl) =
                        loss::heteroscedastic_nll_grad(self.value(*pred), target, self.value(*log_var));
                    let s = dy[0];
                    let (np, nl) = (dp.len(), dl.len());
                    acc(&mut grads, *pred, dp.into_iter().map(|g| g * s), np);
                    acc(&mut grads, *log_var, dl.into_iter().map(|g| g * s), nl);
                }
                Op::Bce {
                    prob,
                    target,
                    pos_weight,
                } => {
                    let g = loss::weighted_bce_grad(self.value(*prob), target, *pos_weight);
                    let s = dy[0];
                    let n = g.len();
                    acc(&mut grads, *prob, g.into_iter().map(|v| v * s), n);
                }
            }
            grads[i] = dy;
        }

        // Unreached nodes report zero gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if g.is_empty() {
                g.resize(node.value.len(), 0.0);
            }
        }
        Ok(Backward {
            params: pgrads,
            values: grads,
        })
    }

    /// Backward from a scalar output with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> Result<Backward> {
        self.backward(loss, &[1.0])
    }
}

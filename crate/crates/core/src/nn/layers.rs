use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_glorot(&format!("{name}.w"), vec![output, input], input, output, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), vec![output])?;
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    /// Looks up an existing layer by name.
    pub fn bind(store: &ParameterStore, name: &str) -> Result<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        let b = lookup(store, &format!("{name}.b"))?;
        let shape = &store.get(w).shape;
        Ok(Self {
            w,
            b,
            input: shape[1],
            output: shape[0],
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_len("dense input", self.input, tape.value(x).len())?;
        Ok(tape.affine(self.w, Some(self.b), x))
    }
}

/// Gated recurrent cell:
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
///
/// The three gates are stacked row-wise in one input and one hidden matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add_glorot(
            &format!("{name}.w_ih"),
            vec![3 * hidden, input],
            input,
            hidden,
            rng,
        )?;
        let b_ih = store.add_zeros(&format!("{name}.b_ih"), vec![3 * hidden])?;
        let w_hh = store.add_glorot(
            &format!("{name}.w_hh"),
            vec![3 * hidden, hidden],
            hidden,
            hidden,
            rng,
        )?;
        let b_hh = store.add_zeros(&format!("{name}.b_hh"), vec![3 * hidden])?;
        Ok(Self {
            w_ih,
            b_ih,
            w_hh,
            b_hh,
            input,
            hidden,
        })
    }

    pub fn bind(store: &ParameterStore, name: &str) -> Result<Self> {
        let w_ih = lookup(store, &format!("{name}.w_ih"))?;
        let w_hh = lookup(store, &format!("{name}.w_hh"))?;
        let shape = &store.get(w_ih).shape;
        Ok(Self {
            w_ih,
            b_ih: lookup(store, &format!("{name}.b_ih"))?,
            w_hh,
            b_hh: lookup(store, &format!("{name}.b_hh"))?,
            input: shape[1],
            hidden: shape[0] / 3,
        })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        check_len("gru input", self.input, tape.value(x).len())?;
        check_len("gru hidden", self.hidden, tape.value(h).len())?;
        let hd = self.hidden;
        let gi = tape.affine(self.w_ih, Some(self.b_ih), x);
        let gh = tape.affine(self.w_hh, Some(self.b_hh), h);
        let (ir, iz, inn) = (tape.slice(gi, 0, hd), tape.slice(gi, hd, hd), tape.slice(gi, 2 * hd, hd));
        let (hr, hz, hn) = (tape.slice(gh, 0, hd), tape.slice(gh, hd, hd), tape.slice(gh, 2 * hd, hd));
        let r_pre = tape.add(ir, hr);
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(iz, hz);
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, hn);
        let n_pre = tape.add(inn, gated);
        let n = tape.tanh(n_pre);
        let keep_new = tape.one_minus(z);
        let new_part = tape.mul(keep_new, n);
        let old_part = tape.mul(z, h);
        Ok(tape.add(new_part, old_part))
    }

    /// Runs the cell over `inputs` from a zero state and returns the final hidden state.
    pub fn encode(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        let mut h = tape.constant(vec![0.0; self.hidden]);
        for &x in inputs {
            h = self.step(tape, x, h)?;
        }
        Ok(h)
    }
}

/// 1x1 convolution: per-cell channel mixing on a channel-major grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv1x1 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1 {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_glorot(&format!("{name}.w"), vec![cout, cin], cin, cout, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), vec![cout])?;
        Ok(Self { w, b, cin, cout })
    }

    pub fn bind(store: &ParameterStore, name: &str) -> Result<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        let shape = &store.get(w).shape;
        Ok(Self {
            w,
            b: lookup(store, &format!("{name}.b"))?,
            cin: shape[1],
            cout: shape[0],
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let len = tape.value(x).len();
        if len == 0 || len % self.cin != 0 {
            return Err(Error::shape(
                "conv1x1 input",
                format!("a multiple of {}", self.cin),
                len,
            ));
        }
        Ok(tape.conv1x1(self.w, self.b, x))
    }
}

fn lookup(store: &ParameterStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::MalformedCheckpoint(format!("missing parameter `{name}`")))
}

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(context, expected, actual));
    }
    Ok(())
}

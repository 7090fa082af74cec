//! LSTM cell, stacked LSTM, and the coordinate-wise LSTM shared across nodes.
//!
//! Gates act on the concatenation `[h_{t-1}, x_t]`:
//!
//! ```text
//! f = σ(W_f [h, x] + b_f)     i = σ(W_i [h, x] + b_i)
//! o = σ(W_o [h, x] + b_o)     c̄ = tanh(W_c [h, x] + b_c)
//! c' = f ⊙ c + i ⊙ c̄          h' = o ⊙ tanh(c')
//! ```
//!
//! The tape functions work on row batches: every row of `x`, `h`, `c` is an
//! independent cell evaluation sharing one set of weights. A coordinate-wise
//! LSTM is exactly that with one row per network node.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::params::ParamCursor;

/// Weights of one LSTM layer. Weight matrices are `hidden × (hidden + input)`,
/// the first `hidden` columns multiplying the previous hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, hidden + input]);
        let b = Tensor::zeros(&[hidden]);
        Self {
            w_f: w.clone(),
            w_i: w.clone(),
            w_o: w.clone(),
            w_c: w,
            b_f: b.clone(),
            b_i: b.clone(),
            b_o: b.clone(),
            b_c: b,
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        let shape = [hidden, hidden + input];
        Self {
            w_f: Tensor::uniform(&shape, bound, rng),
            w_i: Tensor::uniform(&shape, bound, rng),
            w_o: Tensor::uniform(&shape, bound, rng),
            w_c: Tensor::uniform(&shape, bound, rng),
            b_f: Tensor::full(&[hidden], FORGET_BIAS_INIT),
            b_i: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
            b_c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_f.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.cols() - self.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.hidden_dim(), self.w_f.shape());
        let weights = [&self.w_f, &self.w_i, &self.w_o, &self.w_c];
        let biases = [&self.b_f, &self.b_i, &self.b_o, &self.b_c];
        if w.len() != 2 || w[0] != h || w[1] < h {
            return shape_err(format!("lstm weight shape {w:?} for hidden size {h}"));
        }
        if weights.iter().any(|t| t.shape() != w) || biases.iter().any(|b| b.shape() != [h]) {
            return shape_err("lstm gate blocks disagree in shape");
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_f, &self.w_i, &self.w_o, &self.w_c, &self.b_f, &self.b_i, &self.b_o, &self.b_c]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_o,
            &mut self.w_c,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 8] = ["w_f", "w_i", "w_o", "w_c", "b_f", "b_i", "b_o", "b_c"];
        NAMES.iter().zip(self.tensors()).map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
    }

    pub fn bind(cursor: &mut ParamCursor) -> LstmVars {
        LstmVars {
            w_f: cursor.next(),
            w_i: cursor.next(),
            w_o: cursor.next(),
            w_c: cursor.next(),
            b_f: cursor.next(),
            b_i: cursor.next(),
            b_o: cursor.next(),
            b_c: cursor.next(),
        }
    }

    /// Records the weights as tape constants (no gradient tracking).
    pub fn constants(&self, tape: &mut Tape) -> LstmVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        Self::bind(&mut ParamCursor::from_vars(vars))
    }
}

/// Tape handles for an [`LstmParams`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_f: Var,
    pub w_i: Var,
    pub w_o: Var,
    pub w_c: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_o: Var,
    pub b_c: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: Tensor::zeros(&[hidden]), c: Tensor::zeros(&[hidden]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations {
    pub f: Tensor,
    pub i: Tensor,
    pub o: Tensor,
    pub c_bar: Tensor,
}

/// Row-batched state on a tape: `h` and `c` are `rows × hidden`.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub f: Var,
    pub i: Var,
    pub o: Var,
    pub c_bar: Var,
}

impl StateVars {
    pub fn zeros(tape: &mut Tape, rows: usize, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[rows, hidden])),
            c: tape.constant(Tensor::zeros(&[rows, hidden])),
        }
    }

    pub fn tile(&self, tape: &mut Tape, times: usize) -> Self {
        Self { h: tape.tile(self.h, times), c: tape.tile(self.c, times) }
    }

    pub fn mean_tiles(&self, tape: &mut Tape, times: usize) -> Self {
        Self { h: tape.mean_tiles(self.h, times), c: tape.mean_tiles(self.c, times) }
    }
}

/// One cell step for every row of `x` (`rows × input`).
pub fn cell_step(tape: &mut Tape, p: &LstmVars, x: Var, prev: &StateVars) -> (StateVars, GateVars) {
    let hx = tape.concat_cols(&[prev.h, x]);
    let mut gate = |w: Var, b: Var| {
        let z = tape.matmul_t(hx, w, false, true);
        tape.add_row(z, b)
    };
    let (zf, zi, zo, zc) = (gate(p.w_f, p.b_f), gate(p.w_i, p.b_i), gate(p.w_o, p.b_o), gate(p.w_c, p.b_c));
    let f = tape.sigmoid(zf);
    let i = tape.sigmoid(zi);
    let o = tape.sigmoid(zo);
    let c_bar = tape.tanh(zc);
    let keep = tape.mul(f, prev.c);
    let write = tape.mul(i, c_bar);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (StateVars { h, c }, GateVars { f, i, o, c_bar })
}

/// Feeds `x` through the stack bottom-up; returns the top hidden state and all new states.
pub fn stack_step(tape: &mut Tape, layers: &[LstmVars], x: Var, states: &[StateVars]) -> (Var, Vec<StateVars>) {
    assert_eq!(layers.len(), states.len(), "one state per stacked layer");
    let mut input = x;
    let mut next = Vec::with_capacity(layers.len());
    for (p, s) in layers.iter().zip(states) {
        let (ns, _) = cell_step(tape, p, input, s);
        input = ns.h;
        next.push(ns);
    }
    (input, next)
}

pub fn lstm_cell_step(params: &LstmParams, x: &Tensor, prev: &LstmState) -> Result<(LstmState, GateActivations)> {
    params.validate()?;
    let h = params.hidden_dim();
    if x.len() != params.input_dim() || prev.h.len() != h || prev.c.len() != h {
        return shape_err(format!(
            "cell expects input {} and state {h}, got {} and ({}, {})",
            params.input_dim(),
            x.len(),
            prev.h.len(),
            prev.c.len()
        ));
    }
    let mut tape = Tape::new();
    let p = params.constants(&mut tape);
    let xv = tape.constant(x.reshape(&[1, x.len()])?);
    let sv = StateVars {
        h: tape.constant(prev.h.reshape(&[1, h])?),
        c: tape.constant(prev.c.reshape(&[1, h])?),
    };
    let (s, g) = cell_step(&mut tape, &p, xv, &sv);
    let vec = |v: Var| Tensor::vector(tape.value(v).data().to_vec());
    Ok((LstmState { h: vec(s.h), c: vec(s.c) }, GateActivations { f: vec(g.f), i: vec(g.i), o: vec(g.o), c_bar: vec(g.c_bar) }))
}

pub fn stacked_lstm_step(layers: &[LstmParams], x: &Tensor, states: &[LstmState]) -> Result<(Tensor, Vec<LstmState>)> {
    if layers.len() != states.len() || layers.is_empty() {
        return shape_err(format!("{} layers but {} states", layers.len(), states.len()));
    }
    let mut input = x.clone();
    let mut next = Vec::with_capacity(layers.len());
    for (i, (p, s)) in layers.iter().zip(states).enumerate() {
        if input.len() != p.input_dim() {
            return shape_err(format!("layer {i} expects input {}, got {}", p.input_dim(), input.len()));
        }
        let (ns, _) = lstm_cell_step(p, &input, s)?;
        input = ns.h.clone();
        next.push(ns);
    }
    Ok((input, next))
}

/// Applies one shared cell to every node: row `j` of `z` with state `states[j]`.
pub fn coordwise_step(params: &LstmParams, z: &Tensor, states: &[LstmState]) -> Result<Vec<LstmState>> {
    params.validate()?;
    let (d, zdim) = z.dims2();
    if z.rank() != 2 || zdim != params.input_dim() {
        return shape_err(format!("node inputs {:?} for cell input width {}", z.shape(), params.input_dim()));
    }
    if states.len() != d {
        return shape_err(format!("{d} nodes but {} states", states.len()));
    }
    let h = params.hidden_dim();
    let stack_rows = |f: &dyn Fn(&LstmState) -> &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(d * h);
        for s in states {
            let t = f(s);
            if t.len() != h {
                return shape_err("node state width mismatch");
            }
            data.extend_from_slice(t.data());
        }
        Tensor::matrix(d, h, data)
    };
    let mut tape = Tape::new();
    let p = params.constants(&mut tape);
    let sv = StateVars { h: tape.constant(stack_rows(&|s| &s.h)?), c: tape.constant(stack_rows(&|s| &s.c)?) };
    let zv = tape.constant(z.clone());
    let (ns, _) = cell_step(&mut tape, &p, zv, &sv);
    let (hs, cs) = (tape.value(ns.h), tape.value(ns.c));
    Ok((0..d)
        .map(|j| LstmState { h: Tensor::vector(hs.row(j).to_vec()), c: Tensor::vector(cs.row(j).to_vec()) })
        .collect())
}

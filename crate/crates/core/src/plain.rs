//! Plain-LSTM meta-learner.
//!
//! The support set is ingested by a stacked LSTM with frozen weights, either
//! one example at a time or as a batch whose per-example states are
//! mean-pooled after every pass. Queries are answered from the ingested state
//! with a single extra step whose label slot is zero.

use rand::Rng;

use crate::cells::{stack_step, LstmParams, LstmState, LstmVars, StateVars};
use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::params::{Learner, OutputKind, ParamCursor, TaskLoss};
use crate::tasks::{check_permutation, Task};

/// What each ingested example carries besides `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Xy,
    /// Adds the readout of the state the example is stepped from.
    XyPrevPred,
    /// Adds that readout minus the example's target.
    XyPrevErr,
    XyPrevPredPrevErr,
}

impl InputFormat {
    fn slots(self) -> (bool, bool) {
        match self {
            InputFormat::Xy => (false, false),
            InputFormat::XyPrevPred => (true, false),
            InputFormat::XyPrevErr => (false, true),
            InputFormat::XyPrevPredPrevErr => (true, true),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingestion {
    Sequential,
    Batched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainLstmConfig {
    pub x_dim: usize,
    pub y_dim: usize,
    pub hidden: Vec<usize>,
    pub input_format: InputFormat,
    pub ingestion: Ingestion,
    /// Passes over the support set.
    pub unroll_t: usize,
    pub output: OutputKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainLstmModel {
    pub stack: Vec<LstmParams>,
    pub readout_w: Tensor,
    pub readout_b: Tensor,
    pub config: PlainLstmConfig,
}

/// Model weights bound to a tape.
struct Bound {
    stack: Vec<LstmVars>,
    w: Var,
    b: Var,
}

impl PlainLstmModel {
    pub fn new<R: Rng + ?Sized>(config: PlainLstmConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut input = model.cell_input_dim();
        for (layer, &h) in model.stack.iter_mut().zip(&model.config.hidden) {
            *layer = LstmParams::init(input, h, rng);
            input = h;
        }
        let top = model.top_hidden();
        model.readout_w = Tensor::uniform(&[model.config.y_dim, top], 1.0 / (top as f64).sqrt(), rng);
        Ok(model)
    }

    /// All weights zero; useful as a baseline and in tests.
    pub fn zeros(config: PlainLstmConfig) -> Result<Self> {
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Config("plain LSTM needs at least one nonzero hidden layer".into()));
        }
        if config.unroll_t == 0 || config.x_dim == 0 || config.y_dim == 0 {
            return Err(Error::Config("plain LSTM needs unroll_t, x_dim, y_dim ≥ 1".into()));
        }
        let (pred, err) = config.input_format.slots();
        let mut input = config.x_dim + config.y_dim * (1 + pred as usize + err as usize);
        let stack = config
            .hidden
            .iter()
            .map(|&h| {
                let p = LstmParams::zeros(input, h);
                input = h;
                p
            })
            .collect();
        let top = *config.hidden.last().unwrap();
        Ok(Self {
            stack,
            readout_w: Tensor::zeros(&[config.y_dim, top]),
            readout_b: Tensor::zeros(&[config.y_dim]),
            config,
        })
    }

    pub fn cell_input_dim(&self) -> usize {
        self.stack[0].input_dim()
    }

    fn top_hidden(&self) -> usize {
        self.stack.last().unwrap().hidden_dim()
    }

    fn bind_params(&self, tape: &mut Tape) -> Bound {
        let mut cursor = ParamCursor::register(tape, self.named_params().into_iter().map(|(_, t)| t));
        let stack = self.stack.iter().map(|_| LstmParams::bind(&mut cursor)).collect();
        let w = cursor.next();
        let b = cursor.next();
        cursor.finish();
        Bound { stack, w, b }
    }

    fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound {
            stack: self.stack.iter().map(|p| p.constants(tape)).collect(),
            w: tape.constant(self.readout_w.clone()),
            b: tape.constant(self.readout_b.clone()),
        }
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        if task.x_dim() != self.config.x_dim || task.y_dim() != self.config.y_dim {
            return shape_err(format!(
                "model expects x{} → y{}, task has x{} → y{}",
                self.config.x_dim,
                self.config.y_dim,
                task.x_dim(),
                task.y_dim()
            ));
        }
        Ok(())
    }

    fn readout(&self, tape: &mut Tape, b: &Bound, h: Var) -> Var {
        let z = tape.matmul_t(h, b.w, false, true);
        tape.add_row(z, b.b)
    }

    /// `[x, y, aux...]` rows, with aux slots computed from the state being stepped from.
    fn format_rows(&self, tape: &mut Tape, b: &Bound, x: Var, y: Var, states: &[StateVars]) -> Var {
        let (want_pred, want_err) = self.config.input_format.slots();
        let mut parts = vec![x, y];
        if want_pred || want_err {
            let pred = self.readout(tape, b, states.last().unwrap().h);
            if want_pred {
                parts.push(pred);
            }
            if want_err {
                parts.push(tape.sub(pred, y));
            }
        }
        tape.concat_cols(&parts)
    }

    fn ingest_on_tape(&self, tape: &mut Tape, b: &Bound, task: &Task, ingestion: Ingestion, order: Option<&[usize]>) -> Result<Vec<StateVars>> {
        self.check_task(task)?;
        let m = task.support_len();
        let mut states: Vec<StateVars> = self.stack.iter().map(|p| StateVars::zeros(tape, 1, p.hidden_dim())).collect();
        match ingestion {
            Ingestion::Batched => {
                let x = tape.constant(task.support_x.clone());
                let y = tape.constant(task.support_y.clone());
                for _ in 0..self.config.unroll_t {
                    let tiled: Vec<StateVars> = states.iter().map(|s| s.tile(tape, m)).collect();
                    let input = self.format_rows(tape, b, x, y, &tiled);
                    let (_, next) = stack_step(tape, &b.stack, input, &tiled);
                    states = next.iter().map(|s| s.mean_tiles(tape, m)).collect();
                }
            }
            Ingestion::Sequential => {
                let default: Vec<usize> = (0..m).collect();
                let order = order.unwrap_or(&default);
                check_permutation(order, m)?;
                let rows: Vec<(Var, Var)> = order
                    .iter()
                    .map(|&i| {
                        let x = Tensor::matrix(1, task.x_dim(), task.support_x.row(i).to_vec())?;
                        let y = Tensor::matrix(1, task.y_dim(), task.support_y.row(i).to_vec())?;
                        Ok((tape.constant(x), tape.constant(y)))
                    })
                    .collect::<Result<_>>()?;
                for _ in 0..self.config.unroll_t {
                    for &(x, y) in &rows {
                        let input = self.format_rows(tape, b, x, y, &states);
                        states = stack_step(tape, &b.stack, input, &states).1;
                    }
                }
            }
        }
        Ok(states)
    }

    /// Raw head outputs (`Q × y_dim`) for query rows; the ingested state is not advanced.
    fn outputs_on_tape(&self, tape: &mut Tape, b: &Bound, states: &[StateVars], qx: Var) -> Var {
        let q = tape.value(qx).rows();
        let aux = self.cell_input_dim() - self.config.x_dim;
        let zeros = tape.constant(Tensor::zeros(&[q, aux]));
        let input = tape.concat_cols(&[qx, zeros]);
        let tiled: Vec<StateVars> = states.iter().map(|s| s.tile(tape, q)).collect();
        let (top, _) = stack_step(tape, &b.stack, input, &tiled);
        self.readout(tape, b, top)
    }

    fn states_to_tape(&self, tape: &mut Tape, states: &[LstmState]) -> Result<Vec<StateVars>> {
        if states.len() != self.stack.len() {
            return shape_err(format!("{} states for {} layers", states.len(), self.stack.len()));
        }
        states
            .iter()
            .zip(&self.stack)
            .map(|(s, p)| {
                let h = p.hidden_dim();
                if s.h.len() != h || s.c.len() != h {
                    return shape_err("state width does not match layer");
                }
                Ok(StateVars { h: tape.constant(s.h.reshape(&[1, h])?), c: tape.constant(s.c.reshape(&[1, h])?) })
            })
            .collect()
    }

    fn read_states(tape: &Tape, states: &[StateVars]) -> Vec<LstmState> {
        let vec = |v: Var| Tensor::vector(tape.value(v).data().to_vec());
        states.iter().map(|s| LstmState { h: vec(s.h), c: vec(s.c) }).collect()
    }
}

/// Feeds the support examples one at a time in `order`, from zero states.
pub fn ingest_sequential(model: &PlainLstmModel, task: &Task, order: &[usize]) -> Result<Vec<LstmState>> {
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let states = model.ingest_on_tape(&mut tape, &b, task, Ingestion::Sequential, Some(order))?;
    Ok(PlainLstmModel::read_states(&tape, &states))
}

/// Steps every example from the shared state and mean-pools, `unroll_t` times.
pub fn ingest_batched(model: &PlainLstmModel, task: &Task) -> Result<Vec<LstmState>> {
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let states = model.ingest_on_tape(&mut tape, &b, task, Ingestion::Batched, None)?;
    Ok(PlainLstmModel::read_states(&tape, &states))
}

/// Predictions for each row of `x_query`: raw values for regression,
/// softmax probabilities for classification.
pub fn predict_query(model: &PlainLstmModel, states: &[LstmState], x_query: &Tensor) -> Result<Tensor> {
    if x_query.rank() != 2 || x_query.cols() != model.config.x_dim {
        return shape_err(format!("queries {:?} for input width {}", x_query.shape(), model.config.x_dim));
    }
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let sv = model.states_to_tape(&mut tape, states)?;
    let qx = tape.constant(x_query.clone());
    let out = model.outputs_on_tape(&mut tape, &b, &sv, qx);
    let pred = model.config.output.predictions(&mut tape, out);
    Ok(tape.value(pred).clone())
}

impl Learner for PlainLstmModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.stack.iter().enumerate().flat_map(|(i, p)| p.named(&format!("lstm{i}"))).collect();
        out.push(("readout.w".into(), &self.readout_w));
        out.push(("readout.b".into(), &self.readout_b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stack.iter_mut().flat_map(|p| p.tensors_mut()).collect();
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss> {
        let b = self.bind_params(tape);
        let states = self.ingest_on_tape(tape, &b, task, self.config.ingestion, None)?;
        let qx = tape.constant(task.query_x.clone());
        let qy = tape.constant(task.query_y.clone());
        let out = self.outputs_on_tape(tape, &b, &states, qx);
        let loss = self.config.output.loss(tape, out, qy);
        let predictions = self.config.output.predictions(tape, out);
        Ok(TaskLoss { loss, predictions })
    }
}

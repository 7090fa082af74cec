//! Outer-product LSTM meta-learner.
//!
//! Each base-network layer owns a 2D hidden state `H` that plays the role of
//! a weight matrix. During adaptation a coordinate-wise LSTM runs on every
//! node, reading the node's activation and a message from above (the target
//! at the output layer, `Hᵀ h` below it). Its hidden output `h` is combined
//! with the layer input into a normalized outer product, and the pooled
//! products move `H`:
//!
//! ```text
//! H ← H + γ/M Σ_i h_i a_iᵀ / (‖h_i‖ ‖a_i‖ + ε)
//! ```
//!
//! By default all products of one pass are computed against the `H` at the
//! start of the pass and applied together, which keeps adaptation invariant
//! to the order of the support set. `strict_sequential` instead applies each
//! example's product before the next example is processed.

use std::collections::BTreeMap;

use rand::Rng;

use crate::cells::{stack_step, LstmParams, LstmVars, StateVars};
use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::params::{Activation, Learner, OutputKind, ParamCursor, TaskLoss};
use crate::tasks::Task;

/// Guard added to the product of norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OpLstmArch {
    /// `d^(0) .. d^(L)`.
    pub layer_dims: Vec<usize>,
    /// One per layer `1..=L`.
    pub activations: Vec<Activation>,
    /// Widths of the coordinate-wise LSTM stack; the last must be 1.
    pub coord_hidden: Vec<usize>,
    pub unroll_t: usize,
    pub gamma_init: f64,
    pub learn_gamma: bool,
    pub strict_sequential: bool,
}

impl OpLstmArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad(format!("layer dims {:?}", self.layer_dims));
        }
        if self.activations.len() != self.layers() {
            return bad(format!("{} activations for {} layers", self.activations.len(), self.layers()));
        }
        if !matches!(self.activations.last(), Some(Activation::Softmax | Activation::Identity)) {
            return bad("the output layer must be softmax or identity".into());
        }
        if self.activations[..self.layers() - 1].contains(&Activation::Softmax) {
            return bad("softmax is only allowed on the output layer".into());
        }
        if self.coord_hidden.is_empty() || self.coord_hidden.contains(&0) || *self.coord_hidden.last().unwrap() != 1 {
            return bad(format!("coordinate-wise LSTM widths {:?} must end in 1", self.coord_hidden));
        }
        if self.unroll_t == 0 || !(self.gamma_init > 0.0) {
            return bad("unroll_t ≥ 1 and gamma > 0 are required".into());
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn output_kind(&self) -> OutputKind {
        match self.activations.last() {
            Some(Activation::Softmax) => OutputKind::Classification,
            _ => OutputKind::Regression,
        }
    }

    /// Distinct activations, each owning one coordinate-wise LSTM.
    pub fn groups(&self) -> Vec<Activation> {
        let mut g = self.activations.clone();
        g.sort();
        g.dedup();
        g
    }
}

/// Meta-parameters: initial hidden matrices, biases, LSTM groups and γ.
#[derive(Clone, Debug, PartialEq)]
pub struct OpLstmModel {
    pub arch: OpLstmArch,
    pub h0: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub lstm: BTreeMap<Activation, Vec<LstmParams>>,
    /// One-element vector.
    pub gamma: Tensor,
}

/// Per-node coordinate-wise state of one layer at one stack level; `d × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpLstmState {
    pub h: Vec<Tensor>,
    pub b: Vec<Tensor>,
    /// `node_states[layer][stack level]`.
    pub node_states: Vec<Vec<NodeState>>,
}

/// What a replacement node rule sees: `z` is `rows × 2` with rows ordered
/// example-major, node-minor.
pub struct NodeInput {
    pub layer: usize,
    pub is_top: bool,
    pub activation: Activation,
    /// Node count `d_ℓ` of the layer.
    pub width: usize,
    pub z: Var,
}

/// Node update used during adaptation: the meta-learned LSTMs, or a fixed
/// function of `z` (used to show the MAML and ProtoNet special cases).
#[derive(Clone, Copy)]
pub enum NodeRule<'a> {
    Lstm,
    Stub(&'a dyn Fn(&mut Tape, &NodeInput) -> Var),
}

/// Meta-parameters on a tape.
pub struct ModelVars {
    pub h0: Vec<Var>,
    pub b: Vec<Var>,
    pub lstm: BTreeMap<Activation, Vec<LstmVars>>,
    pub gamma: Var,
}

/// Adapted state on a tape.
pub struct AdaptedVars {
    pub h: Vec<Var>,
    pub b: Vec<Var>,
    pub states: Vec<Vec<StateVars>>,
    /// Node inputs of the last processed chunk, per layer.
    pub last_z: Vec<Var>,
}

impl OpLstmModel {
    pub fn new<R: Rng + ?Sized>(arch: OpLstmArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let h0 = arch
            .layer_dims
            .windows(2)
            .map(|w| Tensor::uniform(&[w[1], w[0]], 1.0 / (w[0] as f64).sqrt(), rng))
            .collect();
        let lstm = arch.groups().into_iter().map(|g| (g, coord_stack(&arch.coord_hidden, |i, h| LstmParams::init(i, h, rng)))).collect();
        Ok(Self::assemble(arch, h0, lstm))
    }

    /// Zero hidden matrices and zero LSTMs.
    pub fn zeros(arch: OpLstmArch) -> Result<Self> {
        arch.validate()?;
        let h0 = arch.layer_dims.windows(2).map(|w| Tensor::zeros(&[w[1], w[0]])).collect();
        let lstm = arch.groups().into_iter().map(|g| (g, coord_stack(&arch.coord_hidden, LstmParams::zeros))).collect();
        Ok(Self::assemble(arch, h0, lstm))
    }

    fn assemble(arch: OpLstmArch, h0: Vec<Tensor>, lstm: BTreeMap<Activation, Vec<LstmParams>>) -> Self {
        let b = arch.layer_dims[1..].iter().map(|&d| Tensor::zeros(&[d])).collect();
        let gamma = Tensor::vector(vec![arch.gamma_init]);
        Self { arch, h0, b, lstm, gamma }
    }

    /// The initial state: `H_0`, the fixed biases, zero node states.
    pub fn initial_state(&self) -> OpLstmState {
        let node_states = self.arch.layer_dims[1..]
            .iter()
            .map(|&d| self.arch.coord_hidden.iter().map(|&w| NodeState { h: Tensor::zeros(&[d, w]), c: Tensor::zeros(&[d, w]) }).collect())
            .collect();
        OpLstmState { h: self.h0.clone(), b: self.b.clone(), node_states }
    }

    fn bind_params(&self, tape: &mut Tape) -> ModelVars {
        let mut cursor = ParamCursor::register(tape, self.named_params().into_iter().map(|(_, t)| t));
        let h0 = self.h0.iter().map(|_| cursor.next()).collect();
        let b = self.b.iter().map(|_| cursor.next()).collect();
        let lstm = self.lstm.iter().map(|(&g, stack)| (g, stack.iter().map(|_| LstmParams::bind(&mut cursor)).collect())).collect();
        let gamma = if self.arch.learn_gamma { cursor.next() } else { tape.constant(self.gamma.clone()) };
        cursor.finish();
        ModelVars { h0, b, lstm, gamma }
    }

    fn bind_constants(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            h0: self.h0.iter().map(|t| tape.constant(t.clone())).collect(),
            b: self.b.iter().map(|t| tape.constant(t.clone())).collect(),
            lstm: self.lstm.iter().map(|(&g, s)| (g, s.iter().map(|p| p.constants(tape)).collect())).collect(),
            gamma: tape.constant(self.gamma.clone()),
        }
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        let d = &self.arch.layer_dims;
        if task.x_dim() != d[0] || task.y_dim() != *d.last().unwrap() {
            return shape_err(format!("network {d:?} for task x{} → y{}", task.x_dim(), task.y_dim()));
        }
        Ok(())
    }
}

fn coord_stack(widths: &[usize], mut make: impl FnMut(usize, usize) -> LstmParams) -> Vec<LstmParams> {
    let mut input = 2;
    widths
        .iter()
        .map(|&w| {
            let p = make(input, w);
            input = w;
            p
        })
        .collect()
}

/// Activations `a^(0..=L)` for input rows, plus the output pre-activation.
/// A softmax head's `a^(L)` holds probabilities.
pub fn forward_tape(tape: &mut Tape, arch: &OpLstmArch, h: &[Var], b: &[Var], x: Var) -> (Vec<Var>, Var) {
    let mut acts = vec![x];
    let mut z_last = x;
    for (l, act) in arch.activations.iter().enumerate() {
        let lin = tape.matmul_t(acts[l], h[l], false, true);
        let z = tape.add_row(lin, b[l]);
        acts.push(act.apply(tape, z));
        z_last = z;
    }
    (acts, z_last)
}

/// `γ/m_total Σ_i h_i a_iᵀ / (‖h_i‖ ‖a_i‖ + ε)` over the rows of `h` and `a`.
pub fn outer_update_tape(tape: &mut Tape, h: Var, a: Var, gamma: Var, m_total: usize) -> Var {
    let nh = tape.row_norms(h);
    let na = tape.row_norms(a);
    let prod = tape.mul(nh, na);
    let guarded = tape.add_scalar(prod, NORM_EPS);
    let inv = tape.recip(guarded);
    let scaled = tape.scale_rows(h, inv);
    let sum = tape.matmul_t(scaled, a, true, false);
    let step = tape.scale_by(sum, gamma);
    tape.scale(step, 1.0 / m_total as f64)
}

struct PassOut {
    delta_h: Vec<Var>,
    /// Per-example states, `m·d_l` rows per layer and stack level.
    states: Vec<Vec<StateVars>>,
    z: Vec<Var>,
}

/// One sweep over a chunk of `m` examples: forward, then top-down messages
/// interleaved with node updates and outer products against the current `H`.
#[allow(clippy::too_many_arguments)]
fn pass_tape(
    tape: &mut Tape,
    arch: &OpLstmArch,
    vars: &ModelVars,
    rule: NodeRule,
    h: &[Var],
    pooled: &[Vec<StateVars>],
    x: Var,
    y: Var,
    m_total: usize,
) -> PassOut {
    let m = tape.value(x).rows();
    let layers = arch.layers();
    let (acts, _) = forward_tape(tape, arch, h, &vars.b, x);
    let mut delta_h = vec![x; layers];
    let mut states = vec![Vec::new(); layers];
    let mut zs = vec![x; layers];
    let mut h_above: Option<Var> = None;
    for l in (0..layers).rev() {
        let d = arch.layer_dims[l + 1];
        let second = match h_above {
            None => y,
            Some(ha) => tape.matmul(ha, h[l + 1]),
        };
        let a_col = tape.reshape(acts[l + 1], &[m * d, 1]);
        let s_col = tape.reshape(second, &[m * d, 1]);
        let z = tape.concat_cols(&[a_col, s_col]);
        let prev: Vec<StateVars> = pooled[l].iter().map(|s| s.tile(tape, m)).collect();
        let act = arch.activations[l];
        let (h_col, next) = match rule {
            NodeRule::Lstm => stack_step(tape, &vars.lstm[&act], z, &prev),
            NodeRule::Stub(f) => (f(tape, &NodeInput { layer: l, is_top: l + 1 == layers, activation: act, width: d, z }), prev),
        };
        let h_rows = tape.reshape(h_col, &[m, d]);
        delta_h[l] = outer_update_tape(tape, h_rows, acts[l], vars.gamma, m_total);
        states[l] = next;
        zs[l] = z;
        h_above = Some(h_rows);
    }
    PassOut { delta_h, states, z: zs }
}

fn row_constant(tape: &mut Tape, t: &Tensor, i: usize) -> Var {
    tape.constant(Tensor::from_parts(vec![1, t.cols()], t.row(i).to_vec()))
}

/// Runs `unroll_t` adaptation passes over the support set from zero node states.
pub fn adapt_tape(tape: &mut Tape, arch: &OpLstmArch, vars: &ModelVars, rule: NodeRule, task: &Task) -> AdaptedVars {
    let m = task.support_len();
    let layers = arch.layers();
    let mut h = vars.h0.clone();
    let mut pooled: Vec<Vec<StateVars>> = arch.layer_dims[1..]
        .iter()
        .map(|&d| arch.coord_hidden.iter().map(|&w| StateVars::zeros(tape, d, w)).collect())
        .collect();
    let mut last_z = Vec::new();
    let (sx, sy) = (tape.constant(task.support_x.clone()), tape.constant(task.support_y.clone()));
    for _ in 0..arch.unroll_t {
        if arch.strict_sequential {
            let mut sums: Vec<Vec<StateVars>> = Vec::new();
            for i in 0..m {
                let xi = row_constant(tape, &task.support_x, i);
                let yi = row_constant(tape, &task.support_y, i);
                let out = pass_tape(tape, arch, vars, rule, &h, &pooled, xi, yi, m);
                for l in 0..layers {
                    h[l] = tape.add(h[l], out.delta_h[l]);
                }
                sums = if sums.is_empty() {
                    out.states
                } else {
                    sums.iter()
                        .zip(&out.states)
                        .map(|(a, b)| a.iter().zip(b).map(|(s, t)| StateVars { h: tape.add(s.h, t.h), c: tape.add(s.c, t.c) }).collect())
                        .collect()
                };
                last_z = out.z;
            }
            let inv = 1.0 / m as f64;
            pooled = sums.iter().map(|ls| ls.iter().map(|s| StateVars { h: tape.scale(s.h, inv), c: tape.scale(s.c, inv) }).collect()).collect();
        } else {
            let out = pass_tape(tape, arch, vars, rule, &h, &pooled, sx, sy, m);
            for l in 0..layers {
                h[l] = tape.add(h[l], out.delta_h[l]);
            }
            pooled = out.states.iter().map(|ls| ls.iter().map(|s| s.mean_tiles(tape, m)).collect()).collect();
            last_z = out.z;
        }
    }
    AdaptedVars { h, b: vars.b.clone(), states: pooled, last_z }
}

fn read_state(tape: &Tape, a: &AdaptedVars) -> OpLstmState {
    OpLstmState {
        h: a.h.iter().map(|&v| tape.value(v).clone()).collect(),
        b: a.b.iter().map(|&v| tape.value(v).clone()).collect(),
        node_states: a
            .states
            .iter()
            .map(|ls| ls.iter().map(|s| NodeState { h: tape.value(s.h).clone(), c: tape.value(s.c).clone() }).collect())
            .collect(),
    }
}

/// Adapts `H` to the support set with the model's own LSTMs.
pub fn adapt(model: &OpLstmModel, task: &Task) -> Result<OpLstmState> {
    adapt_with(model, task, NodeRule::Lstm)
}

pub fn adapt_with(model: &OpLstmModel, task: &Task, rule: NodeRule) -> Result<OpLstmState> {
    model.check_task(task)?;
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let adapted = adapt_tape(&mut tape, &model.arch, &vars, rule, task);
    let state = read_state(&tape, &adapted);
    for t in &state.h {
        t.ensure_finite("adapted hidden matrix")?;
    }
    Ok(state)
}

/// Node inputs `z^(ℓ)` (`d_ℓ × 2` per layer) for one example at the first
/// pass from `state`, computed top-down with the given rule.
pub fn backward_messages(model: &OpLstmModel, state: &OpLstmState, x: &Tensor, y: &Tensor, rule: NodeRule) -> Result<Vec<Tensor>> {
    let arch = &model.arch;
    if x.len() != arch.layer_dims[0] || y.len() != *arch.layer_dims.last().unwrap() {
        return shape_err("example does not match the network's input or output width");
    }
    let mut tape = Tape::new();
    let mut vars = model.bind_constants(&mut tape);
    vars.b = state.b.iter().map(|t| tape.constant(t.clone())).collect();
    let h: Vec<Var> = state.h.iter().map(|t| tape.constant(t.clone())).collect();
    let pooled: Vec<Vec<StateVars>> = state
        .node_states
        .iter()
        .map(|ls| ls.iter().map(|s| StateVars { h: tape.constant(s.h.clone()), c: tape.constant(s.c.clone()) }).collect())
        .collect();
    let xv = tape.constant(x.reshape(&[1, x.len()])?);
    let yv = tape.constant(y.reshape(&[1, y.len()])?);
    let out = pass_tape(&mut tape, arch, &vars, rule, &h, &pooled, xv, yv, 1);
    Ok(out.z.iter().map(|&z| tape.value(z).clone()).collect())
}

/// Activations `a^(0..=L)` of one input under `state`.
pub fn forward(model: &OpLstmModel, state: &OpLstmState, x: &Tensor) -> Result<Vec<Tensor>> {
    let arch = &model.arch;
    if x.len() != arch.layer_dims[0] {
        return shape_err(format!("input of length {} for width {}", x.len(), arch.layer_dims[0]));
    }
    let mut tape = Tape::new();
    let h: Vec<Var> = state.h.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<Var> = state.b.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.reshape(&[1, x.len()])?);
    let (acts, _) = forward_tape(&mut tape, arch, &h, &b, xv);
    Ok(acts.iter().map(|&a| Tensor::vector(tape.value(a).data().to_vec())).collect())
}

/// Predictions for query rows under an adapted state; softmax heads give probabilities.
pub fn predict(model: &OpLstmModel, state: &OpLstmState, x_query: &Tensor) -> Result<Tensor> {
    let arch = &model.arch;
    if x_query.rank() != 2 || x_query.cols() != arch.layer_dims[0] {
        return shape_err(format!("queries {:?} for input width {}", x_query.shape(), arch.layer_dims[0]));
    }
    let mut tape = Tape::new();
    let h: Vec<Var> = state.h.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<Var> = state.b.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x_query.clone());
    let (acts, _) = forward_tape(&mut tape, arch, &h, &b, xv);
    Ok(tape.value(*acts.last().unwrap()).clone())
}

/// Node update for one layer: the group's coordinate-wise LSTM applied to
/// each row of `z` from the given per-node states.
pub fn node_state_update(model: &OpLstmModel, layer: usize, z: &Tensor, states: &[NodeState]) -> Result<Vec<NodeState>> {
    let act = *model.arch.activations.get(layer).ok_or_else(|| Error::Contract(format!("no layer {layer}")))?;
    let stack = model.lstm.get(&act).ok_or_else(|| Error::Contract(format!("no LSTM group for {}", act.name())))?;
    if z.rank() != 2 || z.cols() != 2 || states.len() != stack.len() {
        return shape_err("node inputs must be d × 2 with one state per stack level");
    }
    let mut tape = Tape::new();
    let vars: Vec<LstmVars> = stack.iter().map(|p| p.constants(&mut tape)).collect();
    let sv: Vec<StateVars> = states.iter().map(|s| StateVars { h: tape.constant(s.h.clone()), c: tape.constant(s.c.clone()) }).collect();
    for (s, p) in states.iter().zip(stack) {
        if s.h.shape() != [z.rows(), p.hidden_dim()] || s.c.shape() != s.h.shape() {
            return shape_err("node state shape does not match the layer");
        }
    }
    let zv = tape.constant(z.clone());
    let (_, next) = stack_step(&mut tape, &vars, zv, &sv);
    Ok(next.iter().map(|s| NodeState { h: tape.value(s.h).clone(), c: tape.value(s.c).clone() }).collect())
}

/// Mean over examples of per-node states (`per_example[i][level]`).
pub fn pool_node_states(per_example: &[Vec<NodeState>]) -> Result<Vec<NodeState>> {
    let first = per_example.first().ok_or_else(|| Error::Contract("no states to pool".into()))?;
    let inv = 1.0 / per_example.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(k, s0)| {
            let mut h = vec![0.0; s0.h.len()];
            let mut c = vec![0.0; s0.c.len()];
            for ex in per_example {
                let s = ex.get(k).filter(|s| s.h.shape() == s0.h.shape()).ok_or_else(|| Error::Shape("ragged states".into()))?;
                h.iter_mut().zip(s.h.data()).for_each(|(a, b)| *a += b);
                c.iter_mut().zip(s.c.data()).for_each(|(a, b)| *a += b);
            }
            Ok(NodeState {
                h: Tensor::new(s0.h.shape().to_vec(), h.into_iter().map(|v| v * inv).collect())?,
                c: Tensor::new(s0.c.shape().to_vec(), c.into_iter().map(|v| v * inv).collect())?,
            })
        })
        .collect()
}

/// `H + γ/M Σ_i h_i a_iᵀ / (‖h_i a_iᵀ‖_F + ε)` with `h` as `M × d_ℓ` and `a` as `M × d_{ℓ−1}` rows.
pub fn hidden_matrix_update(h_matrix: &Tensor, h: &Tensor, a: &Tensor, gamma: f64) -> Result<Tensor> {
    let (dout, din) = h_matrix.dims2();
    if h.rank() != 2 || a.rank() != 2 || h.rows() != a.rows() || h.cols() != dout || a.cols() != din {
        return shape_err(format!("update {:?}·{:?}ᵀ for H {:?}", h.shape(), a.shape(), h_matrix.shape()));
    }
    let mut tape = Tape::new();
    let (hv, av) = (tape.constant(h.clone()), tape.constant(a.clone()));
    let g = tape.constant(Tensor::vector(vec![gamma]));
    let d = outer_update_tape(&mut tape, hv, av, g, h.rows());
    h_matrix.zip_map(tape.value(d), |x, y| x + y)
}

impl Learner for OpLstmModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.extend(self.h0.iter().enumerate().map(|(l, t)| (format!("h0.{}", l + 1), t)));
        out.extend(self.b.iter().enumerate().map(|(l, t)| (format!("b.{}", l + 1), t)));
        for (g, stack) in &self.lstm {
            for (k, p) in stack.iter().enumerate() {
                out.extend(p.named(&format!("lstm.{}.{k}", g.name())));
            }
        }
        if self.arch.learn_gamma {
            out.push(("gamma".into(), &self.gamma));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.h0.iter_mut().collect();
        out.extend(self.b.iter_mut());
        for stack in self.lstm.values_mut() {
            for p in stack.iter_mut() {
                out.extend(p.tensors_mut());
            }
        }
        if self.arch.learn_gamma {
            out.push(&mut self.gamma);
        }
        out
    }

    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss> {
        self.check_task(task)?;
        let vars = self.bind_params(tape);
        let adapted = adapt_tape(tape, &self.arch, &vars, NodeRule::Lstm, task);
        let qx = tape.constant(task.query_x.clone());
        let qy = tape.constant(task.query_y.clone());
        let (acts, logits) = forward_tape(tape, &self.arch, &adapted.h, &adapted.b, qx);
        let kind = self.arch.output_kind();
        let loss = kind.loss(tape, logits, qy);
        let predictions = *acts.last().unwrap();
        Ok(TaskLoss { loss, predictions })
    }
}

/// Node rule whose top layer emits `−η·∂L/∂a` of the per-example loss and
/// whose ReLU body layers gate the incoming message by `a > 0`; with it each
/// outer product is `−η δ aᵀ` of a gradient-descent step on `H`.
pub fn gradient_stub(inner_lr: f64, kind: OutputKind) -> impl Fn(&mut Tape, &NodeInput) -> Var {
    move |tape: &mut Tape, input: &NodeInput| {
        let a = tape.slice_cols(input.z, 0, 1);
        let s = tape.slice_cols(input.z, 1, 1);
        if input.is_top {
            let diff = tape.sub(a, s);
            // per-example MSE averages over the output width
            let k = match kind {
                OutputKind::Regression => 2.0 / input.width as f64,
                OutputKind::Classification => 1.0,
            };
            tape.scale(diff, -inner_lr * k)
        } else if input.activation == Activation::Relu {
            let mask = tape.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let mask = tape.constant(mask);
            tape.mul(s, mask)
        } else {
            s
        }
    }
}

/// Node rule that emits the target at the output layer and zero elsewhere.
pub fn target_stub() -> impl Fn(&mut Tape, &NodeInput) -> Var {
    |tape: &mut Tape, input: &NodeInput| {
        if input.is_top {
            tape.slice_cols(input.z, 1, 1)
        } else {
            let a = tape.slice_cols(input.z, 0, 1);
            tape.scale(a, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{mlp_deltas, MlpParams};
    use crate::cells::{lstm_cell_step, LstmState};
    use crate::ndtensor::fd::{numeric_gradient, relative_error};
    use crate::ndtensor::{cosine_similarity, frobenius_norm, outer};
    use crate::tasks::{sample_sine_task, sample_synthetic_episode, sine_task};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(dims: &[usize], head: Activation, coord: &[usize], unroll_t: usize) -> OpLstmArch {
        let mut activations = vec![Activation::Relu; dims.len() - 2];
        activations.push(head);
        OpLstmArch {
            layer_dims: dims.to_vec(),
            activations,
            coord_hidden: coord.to_vec(),
            unroll_t,
            gamma_init: 1.0,
            learn_gamma: true,
            strict_sequential: false,
        }
    }

    fn random_model(seed: u64, dims: &[usize], head: Activation, unroll_t: usize) -> OpLstmModel {
        let mut m = OpLstmModel::new(arch(dims, head, &[3, 1], unroll_t), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for b in &mut m.b {
            *b = Tensor::uniform(b.shape(), 0.3, &mut rng);
        }
        m
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_and_identity_networks() {
        let m = OpLstmModel::zeros(arch(&[2, 3, 1], Activation::Identity, &[1], 1)).unwrap();
        let a = forward(&m, &m.initial_state(), &Tensor::vector(vec![0.5, -2.0])).unwrap();
        assert_eq!(a[2].data(), &[0.0]);

        let mut id = OpLstmModel::zeros(arch(&[3, 3], Activation::Identity, &[1], 1)).unwrap();
        id.h0[0] = Tensor::eye(3);
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]);
        assert_eq!(forward(&id, &id.initial_state(), &x).unwrap()[1], x);
    }

    #[test]
    fn two_three_two_forward_by_hand() {
        let mut m = OpLstmModel::zeros(arch(&[2, 3, 2], Activation::Identity, &[1], 1)).unwrap();
        m.h0[0] = mat(&[&[1.0, 0.5], &[-1.0, 0.0], &[0.25, 0.25]]);
        m.h0[1] = mat(&[&[1.0, 1.0, 1.0], &[0.0, -2.0, 4.0]]);
        m.b[0] = Tensor::vector(vec![0.0, 0.5, -1.0]);
        m.b[1] = Tensor::vector(vec![0.1, 0.0]);
        let a = forward(&m, &m.initial_state(), &Tensor::vector(vec![2.0, -2.0])).unwrap();
        // layer 1: relu([1, -1.5, -1]) = [1, 0, 0]
        assert_eq!(a[1].data(), &[1.0, 0.0, 0.0]);
        assert_eq!(a[2].data(), &[1.1, 0.0]);
    }

    #[test]
    fn single_layer_messages_are_prediction_and_target() {
        let m = random_model(1, &[3, 2], Activation::Identity, 1);
        let x = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let y = Tensor::vector(vec![1.0, -1.0]);
        let s = m.initial_state();
        let z = backward_messages(&m, &s, &x, &y, NodeRule::Lstm).unwrap();
        let a = forward(&m, &s, &x).unwrap();
        assert_eq!(z[0], Tensor::matrix(2, 2, vec![a[1].data()[0], 1.0, a[1].data()[1], -1.0]).unwrap());
    }

    #[test]
    fn zero_lstm_sends_zero_messages_down() {
        let mut m = OpLstmModel::zeros(arch(&[2, 3, 1], Activation::Identity, &[2, 1], 1)).unwrap();
        m.h0[1] = Tensor::full(&[1, 3], 0.7);
        let z = backward_messages(&m, &m.initial_state(), &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0]), NodeRule::Lstm).unwrap();
        assert!(z[0].data().chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn messages_follow_the_transposed_hidden_matrix() {
        let m = random_model(2, &[2, 3, 2], Activation::Identity, 1);
        let stub = |tape: &mut Tape, input: &NodeInput| {
            let a = tape.slice_cols(input.z, 0, 1);
            let s = tape.slice_cols(input.z, 1, 1);
            if input.is_top {
                tape.sub(s, a)
            } else {
                tape.scale(a, 0.0)
            }
        };
        let (x, y) = (Tensor::vector(vec![0.4, -1.2]), Tensor::vector(vec![0.5, 2.0]));
        let s = m.initial_state();
        let z = backward_messages(&m, &s, &x, &y, NodeRule::Stub(&stub)).unwrap();
        let a = forward(&m, &s, &x).unwrap();
        let err = Tensor::vector(y.data().iter().zip(a[2].data()).map(|(y, a)| y - a).collect());
        let want = m.h0[1].transpose().matmul(&err.reshape(&[2, 1]).unwrap()).unwrap();
        for j in 0..3 {
            assert!((z[0].at(j, 1) - want.data()[j]).abs() < 1e-15);
            assert_eq!(z[0].at(j, 0), a[1].data()[j]);
        }
    }

    #[test]
    fn node_updates_share_one_cell() {
        let m = random_model(3, &[1, 4, 1], Activation::Identity, 1);
        let z = mat(&[&[0.3, -0.2], &[0.3, -0.2], &[1.0, 0.5], &[0.0, 0.0]]);
        let zero = |w: usize| NodeState { h: Tensor::zeros(&[4, w]), c: Tensor::zeros(&[4, w]) };
        let next = node_state_update(&m, 0, &z, &[zero(3), zero(1)]).unwrap();
        assert_eq!(next[1].h.row(0), next[1].h.row(1));

        let zm = OpLstmModel::zeros(arch(&[1, 4, 1], Activation::Identity, &[3, 1], 1)).unwrap();
        let next = node_state_update(&zm, 0, &z, &[zero(3), zero(1)]).unwrap();
        assert!(next.iter().all(|s| s.h.norm() == 0.0));

        // one node through the stack equals two direct cell steps
        let single = mat(&[&[1.0, 0.5]]);
        let s0 = |w: usize| NodeState { h: Tensor::zeros(&[1, w]), c: Tensor::zeros(&[1, w]) };
        let got = node_state_update(&m, 0, &single, &[s0(3), s0(1)]).unwrap();
        let stack = &m.lstm[&Activation::Relu];
        let (l1, _) = lstm_cell_step(&stack[0], &Tensor::vector(vec![1.0, 0.5]), &LstmState::zeros(3)).unwrap();
        let (l2, _) = lstm_cell_step(&stack[1], &l1.h, &LstmState::zeros(1)).unwrap();
        assert!((got[1].h.item() - l2.h.item()).abs() < 1e-15);
        assert!(node_state_update(&m, 5, &single, &[s0(3), s0(1)]).is_err());
    }

    #[test]
    fn pooling_cases() {
        let s = NodeState { h: mat(&[&[1.0], &[-2.0]]), c: mat(&[&[0.5], &[3.0]]) };
        let neg = NodeState { h: s.h.map(|v| -v), c: s.c.map(|v| -v) };
        assert_eq!(pool_node_states(&[vec![s.clone()]]).unwrap(), vec![s.clone()]);
        let pooled = pool_node_states(&[vec![s.clone()], vec![neg]]).unwrap();
        assert!(pooled[0].h.norm() == 0.0 && pooled[0].c.norm() == 0.0);
        assert!(pool_node_states(&[]).is_err());
    }

    #[test]
    fn hidden_matrix_update_cases() {
        let h0 = Tensor::zeros(&[2, 2]);
        let h = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let a = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let got = hidden_matrix_update(&h0, &h, &a, 1.0).unwrap();
        assert!(got.max_abs_diff(&mat(&[&[0.6, 0.8], &[0.0, 0.0]])) < 1e-12);

        let start = mat(&[&[0.1, 0.2], &[0.3, 0.4]]);
        assert_eq!(hidden_matrix_update(&start, &Tensor::zeros(&[3, 2]), &Tensor::full(&[3, 2], 1.0), 1.0).unwrap(), start);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hs = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let as_ = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let start = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let term = |i: usize| {
            let o = outer(&Tensor::vector(hs.row(i).to_vec()), &Tensor::vector(as_.row(i).to_vec())).unwrap();
            let n = frobenius_norm(&o);
            o.map(|v| v / n)
        };
        let (t0, t1) = (term(0), term(1));
        let want = start.zip_map(&t0, |s, a| s + 0.35 * a / 2.0).unwrap().zip_map(&t1, |s, b| s + 0.35 * b / 2.0).unwrap();
        assert!(hidden_matrix_update(&start, &hs, &as_, 0.35).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_lstms_do_not_learn() {
        let mut m = OpLstmModel::zeros(arch(&[1, 5, 1], Activation::Identity, &[4, 1], 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        m.h0 = m.h0.iter().map(|h| Tensor::uniform(h.shape(), 1.0, &mut rng)).collect();
        let t = sample_sine_task(&mut rng, 5, 3).unwrap();
        let s = adapt(&m, &t).unwrap();
        assert_eq!(s.h, m.h0);
        assert_eq!(s.b, m.b);
    }

    #[test]
    fn constant_head_without_hidden_matrix() {
        let mut m = OpLstmModel::zeros(arch(&[2, 3], Activation::Softmax, &[1], 1)).unwrap();
        m.b[0] = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let p = predict(&m, &m.initial_state(), &mat(&[&[1.0, 2.0], &[-5.0, 0.0]])).unwrap();
        let want = crate::ndtensor::ops::softmax(&m.b[0]).unwrap();
        assert!(p.row(0).iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn uniform_five_way_head_costs_ln5() {
        let m = OpLstmModel::zeros(arch(&[4, 6, 5], Activation::Softmax, &[2, 1], 2)).unwrap();
        let t = sample_synthetic_episode(&mut ChaCha8Rng::seed_from_u64(1), 5, 1, 3, 4, 0.2).unwrap();
        let mut tape = Tape::new();
        let l = m.task_loss(&mut tape, &t).unwrap().loss;
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let mut m = OpLstmModel::zeros(arch(&[1, 1], Activation::Identity, &[1], 1)).unwrap();
        m.b[0] = Tensor::vector(vec![0.0]);
        let t = sine_task(1.0, 0.0, &[1.0], &[0.0]).unwrap();
        let mut tape = Tape::new();
        let l = m.task_loss(&mut tape, &t).unwrap().loss;
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn biases_are_never_adapted() {
        let m = random_model(6, &[1, 8, 8, 1], Activation::Identity, 4);
        let t = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(6), 10, 2).unwrap();
        let s = adapt(&m, &t).unwrap();
        assert!(s.b.iter().zip(&m.b).all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
        assert_ne!(s.h, m.h0);
    }

    #[test]
    fn each_pass_moves_h_by_at_most_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = random_model(7, &[1, 6, 6, 1], Activation::Identity, 1);
        m.gamma = Tensor::vector(vec![0.37]);
        let t = sample_sine_task(&mut rng, 7, 1).unwrap();
        let mut prev = m.h0.clone();
        for steps in 1..=4 {
            m.arch.unroll_t = steps;
            let s = adapt(&m, &t).unwrap();
            for (a, b) in s.h.iter().zip(&prev) {
                assert!(frobenius_norm(&a.zip_map(b, |x, y| x - y).unwrap()) <= 0.37 + 1e-12);
            }
            prev = s.h;
        }
    }

    #[test]
    fn strict_sequential_mode_depends_on_order() {
        let mut m = random_model(8, &[1, 5, 1], Activation::Identity, 2);
        m.arch.strict_sequential = true;
        let t = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(8), 4, 1).unwrap();
        let a = adapt(&m, &t).unwrap();
        let b = adapt(&m, &t.with_support_order(&[3, 1, 2, 0]).unwrap()).unwrap();
        assert!(a.h[0].max_abs_diff(&b.h[0]) > 1e-9);
        // a single example is processed identically in both modes
        let one = sine_task(2.0, 0.5, &[1.2], &[0.0]).unwrap();
        let strict = adapt(&m, &one).unwrap();
        m.arch.strict_sequential = false;
        assert!(strict.h[1].max_abs_diff(&adapt(&m, &one).unwrap().h[1]) < 1e-15);
    }

    #[test]
    fn protonet_construction_yields_normalized_class_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = random_model(9, &[4, 6, 3], Activation::Softmax, 1);
        m.h0[1] = Tensor::zeros(&[3, 6]);
        let t = sample_synthetic_episode(&mut rng, 3, 2, 1, 4, 0.5).unwrap();
        let stub = target_stub();
        let s = adapt_with(&m, &t, NodeRule::Stub(&stub)).unwrap();
        let emb: Vec<Tensor> = t.support_pairs().map(|(x, _)| forward(&m, &m.initial_state(), &Tensor::vector(x.to_vec())).unwrap()[1].clone()).collect();
        for n in 0..3 {
            let mut proto = vec![0.0; 6];
            for (e, (_, y)) in emb.iter().zip(t.support_pairs()) {
                if y[n] == 1.0 {
                    proto.iter_mut().zip(e.data()).for_each(|(p, v)| *p += v / e.norm());
                }
            }
            let want = Tensor::vector(proto.iter().map(|p| p / t.support_len() as f64).collect());
            let row = Tensor::vector(s.h[1].row(n).to_vec());
            assert!(row.max_abs_diff(&want) < 1e-12);
            assert!((cosine_similarity(&row, &want) - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.h[0], m.h0[0]);
    }

    #[test]
    fn gradient_stub_reproduces_descent_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for head in [Activation::Identity, Activation::Softmax] {
            let mut m = random_model(10, &[3, 5, 4, 2], head, 1);
            // keep every ReLU active so no layer's delta vanishes
            m.b[0] = Tensor::full(&[5], 2.0);
            m.b[1] = Tensor::full(&[4], 2.0);
            let kind = m.arch.output_kind();
            let x = Tensor::uniform(&[1, 3], 1.0, &mut rng);
            let y = if head == Activation::Softmax { Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap() } else { Tensor::uniform(&[1, 2], 1.0, &mut rng) };
            let task = Task::new(x.clone(), y.clone(), x.clone(), y.clone(), crate::tasks::TaskMeta {
                kind: if head == Activation::Softmax { crate::tasks::TaskKind::Synthetic } else { crate::tasks::TaskKind::Sine },
                n_way: 2,
                k_shot: 1,
                amplitude: None,
                phase: None,
                source_classes: vec![],
                source_items: vec![],
            })
            .unwrap();
            let stub = gradient_stub(0.01, kind);
            let s = adapt_with(&m, &task, NodeRule::Stub(&stub)).unwrap();
            let mlp = MlpParams { weights: m.h0.clone(), biases: m.b.clone(), activations: m.arch.activations.clone() };
            let (a, d) = mlp_deltas(&mlp, &x, &y).unwrap();
            for l in 0..3 {
                let delta_h = s.h[l].zip_map(&m.h0[l], |p, q| p - q).unwrap();
                let descent = outer(&Tensor::vector(d[l].data().to_vec()), &Tensor::vector(a[l].data().to_vec())).unwrap().map(|v| -v);
                assert!((cosine_similarity(&delta_h, &descent) - 1.0).abs() < 1e-6, "{head:?} layer {l}");
            }
        }
    }

    fn meta_loss_fd_error(m: &OpLstmModel, t: &Task) -> f64 {
        let mut tape = Tape::new();
        let l = m.task_loss(&mut tape, t).unwrap().loss;
        let analytic: Vec<f64> = tape.backward(l).unwrap().into_params().into_iter().flat_map(Tensor::into_data).collect();
        let flat: Vec<f64> = m.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut probe = m.clone();
        let numeric = numeric_gradient(&flat, 1e-5, |x| {
            let mut off = 0;
            for p in probe.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let mut tape = Tape::new();
            let l = probe.task_loss(&mut tape, t).unwrap().loss;
            tape.value(l).item()
        });
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_model(12, &[1, 2, 1], Activation::Identity, 2);
        let t = sample_sine_task(&mut rng, 2, 3).unwrap();
        assert!(meta_loss_fd_error(&m, &t) < 1e-4);
        let mut strict = random_model(13, &[2, 3, 2], Activation::Softmax, 2);
        strict.arch.strict_sequential = true;
        let t = sample_synthetic_episode(&mut rng, 2, 1, 2, 2, 0.4).unwrap();
        assert!(meta_loss_fd_error(&strict, &t) < 1e-4);
    }

    #[test]
    fn frozen_gamma_is_not_a_parameter() {
        let mut a = arch(&[1, 2, 1], Activation::Identity, &[1], 1);
        a.learn_gamma = false;
        let m = OpLstmModel::zeros(a).unwrap();
        assert!(m.named_params().iter().all(|(n, _)| n != "gamma"));
        assert!(OpLstmModel::zeros(arch(&[1, 2, 1], Activation::Relu, &[1], 1)).is_err());
        assert!(OpLstmModel::zeros(arch(&[1, 2, 1], Activation::Identity, &[2], 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn adaptation_ignores_support_order(seed in 0u64..10_000, k in 2usize..8) {
            let m = random_model(seed, &[1, 6, 5, 1], Activation::Identity, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_sine_task(&mut rng, k, 1).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let a = adapt(&m, &t).unwrap();
            let b = adapt(&m, &t.with_support_order(&order).unwrap()).unwrap();
            for (x, y) in a.h.iter().zip(&b.h) {
                prop_assert!(x.max_abs_diff(y) < 1e-9);
            }
        }
    }
}

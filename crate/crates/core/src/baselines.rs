//! MAML and prototypical networks over a shared MLP base network.
//!
//! MAML's inner loop differentiates the support loss by explicit
//! backpropagation written as tape operations, so the outer gradient sees the
//! full second-order dependence of the adapted weights on the initialization.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::params::{Activation, Learner, OutputKind, ParamCursor, TaskLoss};
use crate::tasks::Task;

/// Fully connected network; `weights[l]` is `d_{l+1} × d_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activations: Vec<Activation>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!("{} layer dims need {} activations", dims.len(), dims.len().saturating_sub(1))));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be ≥ 1".into()));
        }
        if activations[..activations.len() - 1].contains(&Activation::Softmax) {
            return Err(Error::Config("softmax is only allowed on the output layer".into()));
        }
        Ok(Self {
            weights: dims.windows(2).map(|w| Tensor::zeros(&[w[1], w[0]])).collect(),
            biases: dims[1..].iter().map(|&d| Tensor::zeros(&[d])).collect(),
            activations: activations.to_vec(),
        })
    }

    /// Uniform `±1/√fan_in` weights and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims, activations)?;
        for (w, win) in p.weights.iter_mut().zip(dims.windows(2)) {
            *w = Tensor::uniform(&[win[1], win[0]], 1.0 / (win[0] as f64).sqrt(), rng);
        }
        Ok(p)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].cols()];
        dims.extend(self.weights.iter().map(Tensor::rows));
        dims
    }

    pub fn output_kind(&self) -> OutputKind {
        match self.activations.last() {
            Some(Activation::Softmax) => OutputKind::Classification,
            _ => OutputKind::Regression,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.w{}", l + 1), w));
            out.push((format!("{prefix}.b{}", l + 1), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn bind(&self, cursor: &mut ParamCursor) -> MlpVars {
        let (mut w, mut b) = (Vec::new(), Vec::new());
        for _ in &self.weights {
            w.push(cursor.next());
            b.push(cursor.next());
        }
        MlpVars { w, b }
    }

    pub fn constants(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w: self.weights.iter().map(|t| tape.constant(t.clone())).collect(),
            b: self.biases.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    fn read(tape: &Tape, vars: &MlpVars, activations: &[Activation]) -> MlpParams {
        MlpParams {
            weights: vars.w.iter().map(|&v| tape.value(v).clone()).collect(),
            biases: vars.b.iter().map(|&v| tape.value(v).clone()).collect(),
            activations: activations.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub w: Vec<Var>,
    pub b: Vec<Var>,
}

/// Pre-activations `z[l]` and activations `a[l]` (`a[0]` is the input; the
/// last activation of a softmax head is left as logits).
pub struct MlpTrace {
    pub z: Vec<Var>,
    pub a: Vec<Var>,
}

impl MlpTrace {
    pub fn output(&self) -> Var {
        *self.a.last().unwrap()
    }
}

pub fn mlp_forward_tape(tape: &mut Tape, activations: &[Activation], vars: &MlpVars, x: Var) -> MlpTrace {
    let mut trace = MlpTrace { z: Vec::new(), a: vec![x] };
    for ((&w, &b), act) in vars.w.iter().zip(&vars.b).zip(activations) {
        let lin = tape.matmul_t(trace.output(), w, false, true);
        let z = tape.add_row(lin, b);
        let a = act.apply_logits(tape, z);
        trace.z.push(z);
        trace.a.push(a);
    }
    trace
}

/// `dL/dz` of the mean support loss at the head, as a tape expression.
fn head_delta(tape: &mut Tape, kind: OutputKind, out: Var, y: Var) -> Var {
    match kind {
        OutputKind::Regression => {
            let n = tape.value(out).len() as f64;
            let diff = tape.sub(out, y);
            tape.scale(diff, 2.0 / n)
        }
        OutputKind::Classification => {
            let rows = tape.value(out).rows() as f64;
            let p = tape.softmax_rows(out);
            let diff = tape.sub(p, y);
            tape.scale(diff, 1.0 / rows)
        }
    }
}

/// Per-layer `δ = dL/dz` and parameter gradients, built from tape operations
/// so they can themselves be differentiated.
pub struct MlpBackward {
    pub deltas: Vec<Var>,
    pub dw: Vec<Var>,
    pub db: Vec<Var>,
}

pub fn mlp_backward_tape(tape: &mut Tape, activations: &[Activation], vars: &MlpVars, trace: &MlpTrace, y: Var) -> MlpBackward {
    let kind = if activations.last() == Some(&Activation::Softmax) { OutputKind::Classification } else { OutputKind::Regression };
    let layers = vars.w.len();
    let mut deltas = vec![head_delta(tape, kind, trace.output(), y)];
    for l in (1..layers).rev() {
        let back = tape.matmul(deltas[0], vars.w[l]);
        let d = match activations[l - 1] {
            Activation::Relu => {
                // relu' is piecewise constant, so a constant mask is exact
                let mask = tape.value(trace.z[l - 1]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = tape.constant(mask);
                tape.mul(back, mask)
            }
            _ => back,
        };
        deltas.insert(0, d);
    }
    let dw = (0..layers).map(|l| tape.matmul_t(deltas[l], trace.a[l], true, false)).collect();
    let db = deltas.iter().map(|&d| tape.sum_rows(d)).collect();
    MlpBackward { deltas, dw, db }
}

fn mlp_loss(tape: &mut Tape, kind: OutputKind, out: Var, y: Var) -> Var {
    kind.loss(tape, out, y)
}

/// Full-batch gradient descent on the support set, recorded on the tape.
/// `first_order` treats the inner gradients as constants.
pub fn maml_adapt_tape(
    tape: &mut Tape,
    activations: &[Activation],
    init: &MlpVars,
    task: &Task,
    steps: usize,
    inner_lr: f64,
    first_order: bool,
) -> MlpVars {
    let sx = tape.constant(task.support_x.clone());
    let sy = tape.constant(task.support_y.clone());
    let mut vars = init.clone();
    for _ in 0..steps {
        let trace = mlp_forward_tape(tape, activations, &vars, sx);
        let g = mlp_backward_tape(tape, activations, &vars, &trace, sy);
        let step = |tape: &mut Tape, p: Var, grad: Var| {
            let grad = if first_order { tape.constant(tape.value(grad).clone()) } else { grad };
            let s = tape.scale(grad, inner_lr);
            tape.sub(p, s)
        };
        vars.w = vars.w.iter().zip(&g.dw).map(|(&p, &d)| step(tape, p, d)).collect();
        vars.b = vars.b.iter().zip(&g.db).map(|(&p, &d)| step(tape, p, d)).collect();
    }
    vars
}

fn check_mlp_task(init: &MlpParams, task: &Task) -> Result<()> {
    let dims = init.layer_dims();
    if task.x_dim() != dims[0] || task.y_dim() != *dims.last().unwrap() {
        return shape_err(format!("network {dims:?} for task x{} → y{}", task.x_dim(), task.y_dim()));
    }
    Ok(())
}

/// Adapted parameters after `steps` of gradient descent on the support set.
pub fn maml_adapt(init: &MlpParams, task: &Task, steps: usize, inner_lr: f64) -> Result<MlpParams> {
    check_mlp_task(init, task)?;
    let mut tape = Tape::new();
    let vars = init.constants(&mut tape);
    let adapted = maml_adapt_tape(&mut tape, &init.activations, &vars, task, steps, inner_lr, false);
    let out = MlpParams::read(&tape, &adapted, &init.activations);
    for t in out.weights.iter().chain(&out.biases) {
        t.ensure_finite("maml_adapt")?;
    }
    Ok(out)
}

/// Mean query loss after adaptation; `steps = 0` gives the plain query loss of `init`.
pub fn maml_meta_loss(
    tape: &mut Tape,
    activations: &[Activation],
    init: &MlpVars,
    task: &Task,
    steps: usize,
    inner_lr: f64,
    first_order: bool,
) -> TaskLoss {
    let kind = if activations.last() == Some(&Activation::Softmax) { OutputKind::Classification } else { OutputKind::Regression };
    let adapted = maml_adapt_tape(tape, activations, init, task, steps, inner_lr, first_order);
    let qx = tape.constant(task.query_x.clone());
    let qy = tape.constant(task.query_y.clone());
    let out = mlp_forward_tape(tape, activations, &adapted, qx).output();
    let loss = mlp_loss(tape, kind, out, qy);
    let predictions = kind.predictions(tape, out);
    TaskLoss { loss, predictions }
}

/// Network outputs for input rows; softmax heads return probabilities.
pub fn mlp_predict(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    let dims = params.layer_dims();
    if x.rank() != 2 || x.cols() != dims[0] {
        return shape_err(format!("inputs {:?} for network input width {}", x.shape(), dims[0]));
    }
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp_forward_tape(&mut tape, &params.activations, &vars, xv).output();
    let p = params.output_kind().predictions(&mut tape, out);
    Ok(tape.value(p).clone())
}

/// Layer inputs `a[l]` and loss deltas `δ[l]` of the mean loss over the rows of `(x, y)`.
pub fn mlp_deltas(params: &MlpParams, x: &Tensor, y: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let trace = mlp_forward_tape(&mut tape, &params.activations, &vars, xv);
    let back = mlp_backward_tape(&mut tape, &params.activations, &vars, &trace, yv);
    let a = trace.a.iter().map(|&v| tape.value(v).clone()).collect();
    let d = back.deltas.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((a, d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MamlModel {
    pub init: MlpParams,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub first_order: bool,
}

impl Learner for MamlModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.init.named("mlp")
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.init.tensors_mut()
    }

    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss> {
        check_mlp_task(&self.init, task)?;
        let mut cursor = ParamCursor::register(tape, self.named_params().into_iter().map(|(_, t)| t));
        let vars = self.init.bind(&mut cursor);
        cursor.finish();
        Ok(maml_meta_loss(tape, &self.init.activations, &vars, task, self.inner_steps, self.inner_lr, self.first_order))
    }
}

/// Class centroids, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
}

impl PrototypeSet {
    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }
}

/// Per-class mean of the embedding rows; every class in `0..n_classes` needs an example.
pub fn proto_prototypes(embeddings: &Tensor, labels: &[usize], n_classes: usize) -> Result<PrototypeSet> {
    let (m, d) = embeddings.dims2();
    if labels.len() != m {
        return shape_err(format!("{m} embeddings but {} labels", labels.len()));
    }
    let mut sums = vec![0.0; n_classes * d];
    let mut counts = vec![0usize; n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Contract(format!("label {l} outside 0..{n_classes}")));
        }
        counts[l] += 1;
        for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("class {missing} has no support example")));
    }
    for (row, &c) in sums.chunks_mut(d).zip(&counts) {
        row.iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(PrototypeSet { prototypes: Tensor::matrix(n_classes, d, sums)? })
}

/// `softmax(−‖e − c_n‖²)` for each embedding row.
pub fn proto_predict(protos: &PrototypeSet, embeddings: &Tensor) -> Result<Tensor> {
    let (_, d) = embeddings.dims2();
    if d != protos.prototypes.cols() {
        return shape_err(format!("embedding width {d} vs prototype width {}", protos.prototypes.cols()));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.reshape(&[embeddings.len() / d, d])?);
    let c = tape.constant(protos.prototypes.clone());
    let dist = tape.sq_dists(e, c);
    let neg = tape.neg(dist);
    let p = tape.softmax_rows(neg);
    Ok(tape.value(p).clone())
}

/// Linear head `(W, b)` with `W_n = 2 c_n`, `b_n = −‖c_n‖²`: its scores differ
/// from `−‖e − c_n‖²` by `‖e‖²`, a per-query constant that softmax cancels.
pub fn proto_as_linear(protos: &PrototypeSet) -> (Tensor, Tensor) {
    let w = protos.prototypes.map(|v| 2.0 * v);
    let b = (0..protos.class_count()).map(|n| -protos.prototypes.row(n).iter().map(|v| v * v).sum::<f64>()).collect();
    (w, Tensor::vector(b))
}

pub fn one_hot_labels(y: &Tensor) -> Vec<usize> {
    (0..y.rows())
        .map(|r| y.row(r).iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

/// Prototypical network: an embedding MLP plus nearest-centroid softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNetModel {
    pub embed: MlpParams,
}

impl ProtoNetModel {
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        mlp_predict(&self.embed, x)
    }
}

impl Learner for ProtoNetModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.embed.named("embed")
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.embed.tensors_mut()
    }

    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss> {
        if !task.is_classification() {
            return Err(Error::Contract("prototypical networks need a classification task".into()));
        }
        if task.x_dim() != self.embed.layer_dims()[0] {
            return shape_err("task input width does not match the embedding network");
        }
        let n = task.y_dim();
        let labels = one_hot_labels(&task.support_y);
        let mut counts = vec![0.0; n];
        labels.iter().for_each(|&l| counts[l] += 1.0);
        if counts.contains(&0.0) {
            return Err(Error::Contract("every class needs a support example".into()));
        }
        let mut cursor = ParamCursor::register(tape, self.named_params().into_iter().map(|(_, t)| t));
        let vars = self.embed.bind(&mut cursor);
        cursor.finish();
        let sx = tape.constant(task.support_x.clone());
        let sy = tape.constant(task.support_y.clone());
        let qx = tape.constant(task.query_x.clone());
        let qy = tape.constant(task.query_y.clone());
        let es = mlp_forward_tape(tape, &self.embed.activations, &vars, sx).output();
        let eq = mlp_forward_tape(tape, &self.embed.activations, &vars, qx).output();
        let sums = tape.matmul_t(sy, es, true, false);
        let inv = tape.constant(Tensor::vector(counts.iter().map(|c| 1.0 / c).collect()));
        let protos = tape.scale_rows(sums, inv);
        let dist = tape.sq_dists(eq, protos);
        let logits = tape.neg(dist);
        let loss = tape.softmax_cross_entropy(logits, qy);
        let predictions = tape.softmax_rows(logits);
        Ok(TaskLoss { loss, predictions })
    }
}

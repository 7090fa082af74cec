//! How the OP-LSTM's output-layer update compares with gradient descent and
//! with the nearest-prototype head.

use super::metrics::{mean_ci, MetricsLog, Stat};
use crate::baselines::{one_hot_labels, proto_as_linear, proto_prototypes};
use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Tape, Tensor};
use crate::oplstm::{adapt, forward_tape, OpLstmModel};
use crate::tasks::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionTag {
    Op,
    Gd,
    Proto,
}

/// A flattened output-layer change `vec(H') − vec(H_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDirection {
    pub tag: DirectionTag,
    pub delta: Vec<f64>,
}

impl UpdateDirection {
    pub fn between(tag: DirectionTag, before: &Tensor, after: &Tensor) -> Result<Self> {
        if before.shape() != after.shape() {
            return shape_err(format!("{tag:?} head {:?} vs initial {:?}", after.shape(), before.shape()));
        }
        Ok(Self { tag, delta: after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect() })
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.delta.len() != other.delta.len() {
            return shape_err(format!("{:?} has {} entries, {:?} has {}", self.tag, self.delta.len(), other.tag, other.delta.len()));
        }
        Ok(())
    }

    /// Cosine similarity; 0 when either direction is zero.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        self.check(other)?;
        let dot: f64 = self.delta.iter().zip(&other.delta).map(|(a, b)| a * b).sum();
        let n = norm(&self.delta) * norm(&other.delta);
        Ok(if n == 0.0 { 0.0 } else { dot / n })
    }

    pub fn euclidean(&self, other: &Self) -> Result<f64> {
        self.check(other)?;
        Ok(self.delta.iter().zip(&other.delta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Output-layer inputs `a^(L−1)` of `x` under the initial hidden matrices.
pub fn initial_embeddings(model: &OpLstmModel, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h: Vec<_> = model.h0.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<_> = model.b.iter().map(|t| tape.constant(t.clone())).collect();
    if x.rank() != 2 || x.cols() != model.arch.layer_dims[0] {
        return shape_err(format!("inputs {:?} for width {}", x.shape(), model.arch.layer_dims[0]));
    }
    let xv = tape.constant(x.clone());
    let (acts, _) = forward_tape(&mut tape, &model.arch, &h, &b, xv);
    Ok(tape.value(acts[acts.len() - 2]).clone())
}

/// `steps` full-batch gradient steps on the output matrix alone, from
/// `H_0^(L)` with the bias and the body frozen, on the support loss.
pub fn gd_output_matrix(model: &OpLstmModel, task: &Task, lr: f64, steps: usize) -> Result<Tensor> {
    let emb = initial_embeddings(model, &task.support_x)?;
    let kind = model.arch.output_kind();
    let mut w = model.h0.last().unwrap().clone();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let e = tape.constant(emb.clone());
        let b = tape.constant(model.b.last().unwrap().clone());
        let y = tape.constant(task.support_y.clone());
        let z = tape.matmul_t(e, wv, false, true);
        let logits = tape.add_row(z, b);
        let loss = kind.loss(&mut tape, logits, y);
        let g = tape.backward(loss)?.wrt(wv);
        w = w.zip_map(&g, |p, d| p - lr * d)?;
    }
    w.ensure_finite("gradient-descent head")?;
    Ok(w)
}

/// `W = 2c` from class means of the initial embeddings.
pub fn proto_output_matrix(model: &OpLstmModel, task: &Task) -> Result<Tensor> {
    let emb = initial_embeddings(model, &task.support_x)?;
    let protos = proto_prototypes(&emb, &one_hot_labels(&task.support_y), task.y_dim())?;
    Ok(proto_as_linear(&protos).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDirections {
    pub cos_op_gd: f64,
    pub dist_op_gd: f64,
    /// Classification tasks only.
    pub cos_op_proto: Option<f64>,
    pub dist_op_proto: Option<f64>,
}

pub fn task_directions(model: &OpLstmModel, task: &Task, gd_lr: f64, gd_steps: usize) -> Result<TaskDirections> {
    let h0 = model.h0.last().unwrap();
    let adapted = adapt(model, task)?;
    let op = UpdateDirection::between(DirectionTag::Op, h0, adapted.h.last().unwrap())?;
    let gd = UpdateDirection::between(DirectionTag::Gd, h0, &gd_output_matrix(model, task, gd_lr, gd_steps)?)?;
    let proto = if task.is_classification() {
        Some(UpdateDirection::between(DirectionTag::Proto, h0, &proto_output_matrix(model, task)?)?)
    } else {
        None
    };
    Ok(TaskDirections {
        cos_op_gd: op.cosine(&gd)?,
        dist_op_gd: op.euclidean(&gd)?,
        cos_op_proto: proto.as_ref().map(|p| op.cosine(p)).transpose()?,
        dist_op_proto: proto.as_ref().map(|p| op.euclidean(p)).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub per_task: Vec<TaskDirections>,
    /// `(metric, mean ± ci)` for each reported quantity.
    pub summary: Vec<(String, Stat)>,
}

impl UpdateReport {
    /// Appends summary rows under split `analysis` at `iteration`.
    pub fn log_into(&self, log: &mut MetricsLog, iteration: usize, seconds: f64) -> Result<()> {
        self.summary.iter().try_for_each(|(m, st)| log.record(iteration, "analysis", m, *st, seconds))
    }
}

/// Per-task direction comparisons averaged over `tasks`.
pub fn update_direction_analysis(model: &OpLstmModel, tasks: &[Task], gd_lr: f64, gd_steps: usize) -> Result<UpdateReport> {
    if tasks.is_empty() {
        return Err(Error::Contract("analysis needs at least one task".into()));
    }
    let per_task = tasks.iter().map(|t| task_directions(model, t, gd_lr, gd_steps)).collect::<Result<Vec<_>>>()?;
    let mut summary = Vec::new();
    let mut add = |name: &str, v: Vec<f64>| -> Result<()> {
        if !v.is_empty() {
            summary.push((name.to_string(), mean_ci(&v)?));
        }
        Ok(())
    };
    add("cos_op_gd", per_task.iter().map(|d| d.cos_op_gd).collect())?;
    add("dist_op_gd", per_task.iter().map(|d| d.dist_op_gd).collect())?;
    add("cos_op_proto", per_task.iter().filter_map(|d| d.cos_op_proto).collect())?;
    add("dist_op_proto", per_task.iter().filter_map(|d| d.dist_op_proto).collect())?;
    Ok(UpdateReport { per_task, summary })
}

use crate::error::Result;
use crate::ndtensor::{Tape, Tensor, Var};
use crate::tasks::Task;

/// Sequence of parameter leaves registered on a tape, consumed in the same
/// order the owning model lists its tensors.
#[derive(Debug)]
pub struct ParamCursor {
    vars: Vec<Var>,
    pos: usize,
}

impl ParamCursor {
    pub fn register<'a>(tape: &mut Tape, tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let vars = tensors.into_iter().map(|t| tape.param(t.clone())).collect();
        Self { vars, pos: 0 }
    }

    /// Wraps leaves that are already on the tape.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars, pos: 0 }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn finish(self) {
        assert_eq!(self.pos, self.vars.len(), "parameter cursor not fully consumed");
    }
}

/// Output of one task evaluated on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    /// Mean query loss (scalar).
    pub loss: Var,
    /// Query predictions, one row per query example.
    pub predictions: Var,
}

/// A meta-learner whose meta-parameters Θ are a flat list of named tensors.
pub trait Learner: Send + Sync {
    /// Meta-parameters in a fixed order; checkpoints and Adam rely on it.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Same tensors and order as [`Learner::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Adapts to the task's support set and records the mean query loss.
    /// Meta-parameters are registered as tape parameters in `named_params` order.
    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Whether a learner's head regresses raw values or classifies with softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Regression,
    Classification,
}

impl OutputKind {
    /// Mean query loss: MSE for regression, softmax cross-entropy on logits otherwise.
    pub fn loss(self, tape: &mut Tape, outputs: Var, targets: Var) -> Var {
        match self {
            OutputKind::Regression => tape.mse(outputs, targets),
            OutputKind::Classification => tape.softmax_cross_entropy(outputs, targets),
        }
    }

    /// Predictions as reported to callers: raw values, or softmax probabilities.
    pub fn predictions(self, tape: &mut Tape, outputs: Var) -> Var {
        match self {
            OutputKind::Regression => outputs,
            OutputKind::Classification => tape.softmax_rows(outputs),
        }
    }
}

/// Per-layer nonlinearity of a base network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Relu,
    /// Output layer of a classifier; losses see the logits.
    Softmax,
    Identity,
}

impl Activation {
    /// Applies the nonlinearity; `Softmax` is left as logits.
    pub fn apply_logits(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::Softmax | Activation::Identity => z,
        }
    }

    pub fn apply(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::Softmax => tape.softmax_rows(z),
            Activation::Identity => z,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }
}

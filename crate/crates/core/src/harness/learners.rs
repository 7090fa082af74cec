//! Building learners and episode sources from a [`RunConfig`].

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LearnerKind, RunConfig, TaskSourceKind};
use crate::baselines::{MamlModel, MlpParams, ProtoNetModel};
use crate::error::{Error, Result};
use crate::ndtensor::{Tape, Tensor};
use crate::oplstm::{OpLstmArch, OpLstmModel};
use crate::params::{Activation, Learner, OutputKind, TaskLoss};
use crate::plain::{PlainLstmConfig, PlainLstmModel};
use crate::tasks::{load_image_dataset, sample_image_episode, sample_sine_task, sample_synthetic_episode, ImageDataset, Split, Task};

/// Any of the four meta-learners behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyLearner {
    PlainLstm(PlainLstmModel),
    OpLstm(OpLstmModel),
    Maml(MamlModel),
    ProtoNet(ProtoNetModel),
}

impl AnyLearner {
    fn inner(&self) -> &dyn Learner {
        match self {
            AnyLearner::PlainLstm(m) => m,
            AnyLearner::OpLstm(m) => m,
            AnyLearner::Maml(m) => m,
            AnyLearner::ProtoNet(m) => m,
        }
    }

    pub fn as_oplstm(&self) -> Option<&OpLstmModel> {
        match self {
            AnyLearner::OpLstm(m) => Some(m),
            _ => None,
        }
    }

    /// Overwrites every meta-parameter from `lookup(name)`; shapes must match.
    pub fn load_params(&mut self, mut lookup: impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let loaded = names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
        for ((name, slot), t) in names.iter().zip(self.params_mut()).zip(loaded) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

impl Learner for AnyLearner {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.inner().named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AnyLearner::PlainLstm(m) => m.params_mut(),
            AnyLearner::OpLstm(m) => m.params_mut(),
            AnyLearner::Maml(m) => m.params_mut(),
            AnyLearner::ProtoNet(m) => m.params_mut(),
        }
    }

    fn task_loss(&self, tape: &mut Tape, task: &Task) -> Result<TaskLoss> {
        self.inner().task_loss(tape, task)
    }
}

/// Initializes the configured learner for tasks with the given widths.
pub fn build_learner<R: Rng + ?Sized>(cfg: &RunConfig, x_dim: usize, y_dim: usize, rng: &mut R) -> Result<AnyLearner> {
    let output = if cfg.is_classification() { OutputKind::Classification } else { OutputKind::Regression };
    let head = match output {
        OutputKind::Classification => Activation::Softmax,
        OutputKind::Regression => Activation::Identity,
    };
    let mut dims = vec![x_dim];
    dims.extend(&cfg.hidden);
    dims.push(y_dim);
    let mut acts = vec![cfg.body_activation; cfg.hidden.len()];
    acts.push(head);
    Ok(match cfg.learner {
        LearnerKind::PlainLstm => AnyLearner::PlainLstm(PlainLstmModel::new(
            PlainLstmConfig {
                x_dim,
                y_dim,
                hidden: cfg.hidden.clone(),
                input_format: cfg.resolved_input_format(),
                ingestion: cfg.ingestion,
                unroll_t: cfg.unroll,
                output,
            },
            rng,
        )?),
        LearnerKind::OpLstm => AnyLearner::OpLstm(OpLstmModel::new(
            OpLstmArch {
                layer_dims: dims,
                activations: acts,
                coord_hidden: cfg.coord_hidden.clone(),
                unroll_t: cfg.unroll,
                gamma_init: cfg.gamma,
                learn_gamma: cfg.learn_gamma,
                strict_sequential: cfg.strict_sequential,
            },
            rng,
        )?),
        LearnerKind::Maml => AnyLearner::Maml(MamlModel {
            init: MlpParams::new(&dims, &acts, rng)?,
            inner_steps: cfg.inner_steps,
            inner_lr: cfg.inner_lr,
            first_order: cfg.first_order,
        }),
        LearnerKind::ProtoNet => {
            // the embedding is the body; its last layer stays linear
            if cfg.hidden.is_empty() {
                return Err(Error::Config("prototypical networks need at least one `hidden` width".into()));
            }
            dims.pop();
            acts.pop();
            *acts.last_mut().unwrap() = Activation::Identity;
            AnyLearner::ProtoNet(ProtoNetModel { embed: MlpParams::new(&dims, &acts, rng)? })
        }
    })
}

/// Where episodes come from; one per split.
#[derive(Clone, Debug)]
pub enum TaskSource {
    Sine { k: usize, q: usize },
    Synthetic { n_way: usize, k: usize, q: usize, dim: usize, spread: f64 },
    Images { ds: Arc<ImageDataset>, n_way: usize, k: usize, q: usize },
}

impl TaskSource {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Task> {
        match self {
            TaskSource::Sine { k, q } => sample_sine_task(rng, *k, *q),
            TaskSource::Synthetic { n_way, k, q, dim, spread } => sample_synthetic_episode(rng, *n_way, *k, *q, *dim, *spread),
            TaskSource::Images { ds, n_way, k, q } => sample_image_episode(ds, rng, *n_way, *k, *q),
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            TaskSource::Sine { .. } => 1,
            TaskSource::Synthetic { dim, .. } => *dim,
            TaskSource::Images { ds, .. } => ds.pixel_count(),
        }
    }

    pub fn y_dim(&self) -> usize {
        match self {
            TaskSource::Sine { .. } => 1,
            TaskSource::Synthetic { n_way, .. } | TaskSource::Images { n_way, .. } => *n_way,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSources {
    pub train: TaskSource,
    pub val: TaskSource,
    pub test: TaskSource,
}

/// Synthetic episodes share one generator across splits (tasks are drawn
/// fresh); image splits use `root/{train,val,test}` when present and a
/// 60/20/20 class split of `root` otherwise.
pub fn task_sources(cfg: &RunConfig) -> Result<TaskSources> {
    let (n_way, k, q) = (cfg.n_way, cfg.k_shot, cfg.query);
    let same = |s: TaskSource| TaskSources { train: s.clone(), val: s.clone(), test: s };
    Ok(match cfg.task {
        TaskSourceKind::Sine => same(TaskSource::Sine { k, q }),
        TaskSourceKind::Synthetic => same(TaskSource::Synthetic { n_way, k, q, dim: cfg.dim, spread: cfg.spread }),
        TaskSourceKind::Images => {
            let root = cfg.image_root.as_deref().ok_or_else(|| Error::Config("`image_root` is not set".into()))?;
            let (train, val, test) = load_image_splits(root)?;
            let wrap = |ds: ImageDataset| TaskSource::Images { ds: Arc::new(ds), n_way, k, q };
            TaskSources { train: wrap(train), val: wrap(val), test: wrap(test) }
        }
    })
}

fn load_image_splits(root: &Path) -> Result<(ImageDataset, ImageDataset, ImageDataset)> {
    if root.join("train").is_dir() {
        Ok((
            load_image_dataset(&root.join("train"), Split::Train)?,
            load_image_dataset(&root.join("val"), Split::Val)?,
            load_image_dataset(&root.join("test"), Split::Test)?,
        ))
    } else {
        load_image_dataset(root, Split::Train)?.split_classes(0.2, 0.2)
    }
}

/// Stream ids of the three generators derived from the run seed.
pub const TRAIN_STREAM: u64 = 0;
pub const VAL_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;

pub fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A fixed task list: the same `seed` and `stream` always give the same tasks.
pub fn fixed_tasks(source: &TaskSource, seed: u64, stream: u64, n: usize) -> Result<Vec<Task>> {
    let mut rng = split_rng(seed, stream);
    (0..n).map(|_| source.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    #[test]
    fn every_learner_runs_on_its_task() {
        let cases = [
            "learner = plain_lstm\nhidden = 4",
            "learner = op_lstm\nhidden = 4\ncoord_hidden = 2,1",
            "learner = maml\nhidden = 4",
            "learner = op_lstm\ntask = synthetic\nn_way = 3\nk_shot = 1\nquery = 2\ndim = 4\nhidden = 5",
            "learner = protonet\ntask = synthetic\nn_way = 3\nk_shot = 2\nquery = 2\ndim = 4\nhidden = 5,3",
            "learner = plain_lstm\ntask = synthetic\nn_way = 3\nk_shot = 1\nquery = 2\ndim = 4\nhidden = 3",
        ];
        for text in cases {
            let c = cfg(text);
            let src = task_sources(&c).unwrap().train;
            let mut rng = split_rng(0, 0);
            let learner = build_learner(&c, src.x_dim(), src.y_dim(), &mut rng).unwrap();
            let task = src.sample(&mut rng).unwrap();
            let mut tape = Tape::new();
            let out = learner.task_loss(&mut tape, &task).unwrap();
            assert!(tape.value(out.loss).item().is_finite(), "{text}");
            assert_eq!(tape.value(out.predictions).shape(), task.query_y.shape(), "{text}");
        }
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let c = cfg("learner = maml\nhidden = 3");
        let mut a = build_learner(&c, 1, 1, &mut split_rng(1, 0)).unwrap();
        let b = build_learner(&c, 1, 1, &mut split_rng(2, 0)).unwrap();
        assert_ne!(a, b);
        let src: Vec<(String, Tensor)> = b.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        a.load_params(|n| Ok(src.iter().find(|(m, _)| m == n).unwrap().1.clone())).unwrap();
        assert_eq!(a, b);
        assert!(a.load_params(|_| Ok(Tensor::zeros(&[7]))).is_err());
    }

    #[test]
    fn fixed_tasks_repeat_and_streams_differ() {
        let s = TaskSource::Sine { k: 3, q: 4 };
        let a = fixed_tasks(&s, 5, VAL_STREAM, 3).unwrap();
        let b = fixed_tasks(&s, 5, VAL_STREAM, 3).unwrap();
        let c = fixed_tasks(&s, 5, TEST_STREAM, 3).unwrap();
        assert_eq!(a[2].query_y, b[2].query_y);
        assert_ne!(a[0].query_y, c[0].query_y);
    }
}

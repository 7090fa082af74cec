//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Activation;
use crate::plain::{Ingestion, InputFormat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnerKind {
    PlainLstm,
    OpLstm,
    Maml,
    ProtoNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskSourceKind {
    Sine,
    Synthetic,
    Images,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub learner: LearnerKind,
    pub task: TaskSourceKind,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query examples per task (sine) or per class (classification).
    pub query: usize,
    pub dim: usize,
    pub spread: f64,
    pub image_root: Option<PathBuf>,
    pub meta_batch: usize,
    pub meta_iterations: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub outer_lr: f64,
    pub seed: u64,
    pub out: PathBuf,
    /// Zero the wall-clock column so logs are bit-reproducible.
    pub deterministic: bool,
    /// Worker threads for task-level parallelism; 0 picks the default.
    pub threads: usize,
    /// Hidden widths: LSTM layers for the plain LSTM, hidden layers of the
    /// base network otherwise.
    pub hidden: Vec<usize>,
    pub body_activation: Activation,
    /// `None` picks `xy` for classification and `xy_prevpred` for regression.
    pub input_format: Option<InputFormat>,
    pub ingestion: Ingestion,
    pub unroll: usize,
    pub coord_hidden: Vec<usize>,
    pub gamma: f64,
    pub learn_gamma: bool,
    pub strict_sequential: bool,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub first_order: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learner: LearnerKind::OpLstm,
            task: TaskSourceKind::Sine,
            n_way: 5,
            k_shot: 5,
            query: 50,
            dim: 16,
            spread: 0.1,
            image_root: None,
            meta_batch: 4,
            meta_iterations: 20_000,
            val_every: 1_000,
            val_tasks: 500,
            test_tasks: 2_000,
            outer_lr: 1e-3,
            seed: 0,
            out: PathBuf::from("runs/default"),
            deterministic: false,
            threads: 0,
            hidden: vec![40, 40],
            body_activation: Activation::Relu,
            input_format: None,
            ingestion: Ingestion::Batched,
            unroll: 1,
            coord_hidden: vec![20, 1],
            gamma: 1.0,
            learn_gamma: true,
            strict_sequential: false,
            inner_steps: 1,
            inner_lr: 0.01,
            first_order: false,
        }
    }
}

/// Keys left out of the config hash: they do not change what is learned.
const UNHASHED: [&str; 3] = ["out", "threads", "deterministic"];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for `{key}`"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl RunConfig {
    pub fn is_classification(&self) -> bool {
        self.task != TaskSourceKind::Sine
    }

    pub fn resolved_input_format(&self) -> InputFormat {
        self.input_format.unwrap_or(if self.is_classification() { InputFormat::Xy } else { InputFormat::XyPrevPred })
    }

    /// Parses a config file; unknown keys are errors, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learner" => {
                self.learner = match value {
                    "plain_lstm" => LearnerKind::PlainLstm,
                    "op_lstm" => LearnerKind::OpLstm,
                    "maml" => LearnerKind::Maml,
                    "protonet" => LearnerKind::ProtoNet,
                    _ => return Err(bad(key, value)),
                }
            }
            "task" => {
                self.task = match value {
                    "sine" => TaskSourceKind::Sine,
                    "synthetic" => TaskSourceKind::Synthetic,
                    "images" => TaskSourceKind::Images,
                    _ => return Err(bad(key, value)),
                }
            }
            "n_way" => self.n_way = parse_num(key, value)?,
            "k_shot" => self.k_shot = parse_num(key, value)?,
            "query" => self.query = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "spread" => self.spread = parse_num(key, value)?,
            "image_root" => self.image_root = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "meta_batch" => self.meta_batch = parse_num(key, value)?,
            "meta_iterations" => self.meta_iterations = parse_num(key, value)?,
            "val_every" => self.val_every = parse_num(key, value)?,
            "val_tasks" => self.val_tasks = parse_num(key, value)?,
            "test_tasks" => self.test_tasks = parse_num(key, value)?,
            "outer_lr" => self.outer_lr = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "body_activation" => {
                self.body_activation = match value {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(bad(key, value)),
                }
            }
            "input_format" => {
                self.input_format = Some(match value {
                    "xy" => InputFormat::Xy,
                    "xy_prevpred" => InputFormat::XyPrevPred,
                    "xy_preverr" => InputFormat::XyPrevErr,
                    "xy_prevpred_preverr" => InputFormat::XyPrevPredPrevErr,
                    "auto" => return Ok(self.input_format = None),
                    _ => return Err(bad(key, value)),
                })
            }
            "ingestion" => {
                self.ingestion = match value {
                    "batched" => Ingestion::Batched,
                    "sequential" => Ingestion::Sequential,
                    _ => return Err(bad(key, value)),
                }
            }
            "unroll" => self.unroll = parse_num(key, value)?,
            "coord_hidden" => self.coord_hidden = parse_list(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "learn_gamma" => self.learn_gamma = parse_bool(key, value)?,
            "strict_sequential" => self.strict_sequential = parse_bool(key, value)?,
            "inner_steps" => self.inner_steps = parse_num(key, value)?,
            "inner_lr" => self.inner_lr = parse_num(key, value)?,
            "first_order" => self.first_order = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k_shot", self.k_shot),
            ("query", self.query),
            ("meta_batch", self.meta_batch),
            ("meta_iterations", self.meta_iterations),
            ("val_every", self.val_every),
            ("val_tasks", self.val_tasks),
            ("test_tasks", self.test_tasks),
            ("unroll", self.unroll),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be ≥ 1")));
        }
        if self.val_every > self.meta_iterations {
            return Err(Error::Config("`val_every` exceeds `meta_iterations`".into()));
        }
        if self.is_classification() && self.n_way < 2 {
            return Err(Error::Config("classification needs `n_way` ≥ 2".into()));
        }
        if self.task == TaskSourceKind::Images && self.image_root.is_none() {
            return Err(Error::Config("`task = images` needs `image_root`".into()));
        }
        if self.learner == LearnerKind::ProtoNet && !self.is_classification() {
            return Err(Error::Config("prototypical networks need a classification task".into()));
        }
        if !(self.outer_lr >= 0.0) || !(self.inner_lr >= 0.0) || !(self.spread >= 0.0) {
            return Err(Error::Config("learning rates and spread must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let learner = match self.learner {
            LearnerKind::PlainLstm => "plain_lstm",
            LearnerKind::OpLstm => "op_lstm",
            LearnerKind::Maml => "maml",
            LearnerKind::ProtoNet => "protonet",
        };
        let task = match self.task {
            TaskSourceKind::Sine => "sine",
            TaskSourceKind::Synthetic => "synthetic",
            TaskSourceKind::Images => "images",
        };
        let format = match self.input_format {
            None => "auto",
            Some(InputFormat::Xy) => "xy",
            Some(InputFormat::XyPrevPred) => "xy_prevpred",
            Some(InputFormat::XyPrevErr) => "xy_preverr",
            Some(InputFormat::XyPrevPredPrevErr) => "xy_prevpred_preverr",
        };
        let ingestion = match self.ingestion {
            Ingestion::Batched => "batched",
            Ingestion::Sequential => "sequential",
        };
        vec![
            ("learner", learner.into()),
            ("task", task.into()),
            ("n_way", self.n_way.to_string()),
            ("k_shot", self.k_shot.to_string()),
            ("query", self.query.to_string()),
            ("dim", self.dim.to_string()),
            ("spread", format!("{:?}", self.spread)),
            ("image_root", self.image_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("meta_batch", self.meta_batch.to_string()),
            ("meta_iterations", self.meta_iterations.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_tasks", self.val_tasks.to_string()),
            ("test_tasks", self.test_tasks.to_string()),
            ("outer_lr", format!("{:?}", self.outer_lr)),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("threads", self.threads.to_string()),
            ("hidden", list(&self.hidden)),
            ("body_activation", self.body_activation.name().into()),
            ("input_format", format.into()),
            ("ingestion", ingestion.into()),
            ("unroll", self.unroll.to_string()),
            ("coord_hidden", list(&self.coord_hidden)),
            ("gamma", format!("{:?}", self.gamma)),
            ("learn_gamma", self.learn_gamma.to_string()),
            ("strict_sequential", self.strict_sequential.to_string()),
            ("inner_steps", self.inner_steps.to_string()),
            ("inner_lr", format!("{:?}", self.inner_lr)),
            ("first_order", self.first_order.to_string()),
        ]
    }

    /// SHA-256 over the canonical entries that affect learning.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("learner", "maml").unwrap();
        c.set("hidden", "8, 4").unwrap();
        c.set("spread", "0.25").unwrap();
        c.set("input_format", "xy_preverr").unwrap();
        c.set("image_root", "data/x").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hidden, vec![8, 4]);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let c = RunConfig::parse("# sine run\n\nlearner = plain_lstm  # trailing\nk_shot=10\n").unwrap();
        assert_eq!((c.learner, c.k_shot), (LearnerKind::PlainLstm, 10));
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("k_shot").is_err());
        assert!(RunConfig::parse("k_shot = -1").is_err());
        assert!(RunConfig::parse("val_every = 10\nmeta_iterations = 5").is_err());
        assert!(RunConfig::parse("learner = protonet").is_err());
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        b.threads = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_input_format_follows_task() {
        let mut c = RunConfig::default();
        assert_eq!(c.resolved_input_format(), InputFormat::XyPrevPred);
        c.task = TaskSourceKind::Synthetic;
        assert_eq!(c.resolved_input_format(), InputFormat::Xy);
    }
}

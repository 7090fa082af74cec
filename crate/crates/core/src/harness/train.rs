//! The outer loop: meta-training, validation, best-model selection, testing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{bytes_to_tensor, tensor_to_bytes, tensor_to_words, words_to_tensor, Checkpoint};
use super::config::RunConfig;
use super::learners::{build_learner, fixed_tasks, task_sources, AnyLearner, TEST_STREAM, TRAIN_STREAM, VAL_STREAM};
use super::metrics::{mean_ci, MetricsLog, Stat};
use crate::baselines::one_hot_labels;
use crate::error::{Error, Result};
use crate::ndtensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::params::Learner;
use crate::tasks::Task;

/// Per-task outcome of adapting and scoring on the query set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScore {
    pub loss: f64,
    /// Fraction of query rows whose argmax matches; classification only.
    pub accuracy: Option<f64>,
}

/// Name of the loss metric in logs: `mse` for regression, `loss` otherwise.
pub fn loss_metric(cfg: &RunConfig) -> &'static str {
    if cfg.is_classification() {
        "loss"
    } else {
        "mse"
    }
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn score_task(learner: &dyn Learner, task: &Task) -> Result<TaskScore> {
    let mut tape = Tape::new();
    let out = learner.task_loss(&mut tape, task)?;
    let loss = tape.value(out.loss).item();
    let accuracy = task.is_classification().then(|| {
        let pred = one_hot_labels(tape.value(out.predictions));
        let truth = one_hot_labels(&task.query_y);
        pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
    });
    Ok(TaskScore { loss, accuracy })
}

/// Scores every task; results keep the task order.
pub fn score_tasks(learner: &(dyn Learner + Sync), tasks: &[Task], pool: &rayon::ThreadPool) -> Result<Vec<TaskScore>> {
    pool.install(|| tasks.par_iter().map(|t| score_task(learner, t)).collect())
}

/// Mean and 95% half-width per metric over a task list.
pub fn evaluate(learner: &(dyn Learner + Sync), tasks: &[Task], loss_name: &str, threads: usize) -> Result<Vec<(String, Stat)>> {
    if tasks.is_empty() {
        return Err(Error::Contract("evaluation needs at least one task".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(e.to_string()))?;
    summarize(&score_tasks(learner, tasks, &pool)?, loss_name)
}

fn summarize(scores: &[TaskScore], loss_name: &str) -> Result<Vec<(String, Stat)>> {
    let losses: Vec<f64> = scores.iter().map(|s| s.loss).collect();
    let mut out = vec![(loss_name.to_string(), mean_ci(&losses)?)];
    let accs: Vec<f64> = scores.iter().filter_map(|s| s.accuracy).collect();
    if !accs.is_empty() {
        out.push(("accuracy".into(), mean_ci(&accs)?));
    }
    Ok(out)
}

/// Mean query-loss gradient over a meta-batch, summed in task order.
pub fn meta_gradient(learner: &(dyn Learner + Sync), tasks: &[Task], pool: &rayon::ThreadPool) -> Result<(f64, Vec<Tensor>)> {
    let per_task: Vec<Result<(f64, Vec<Tensor>)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let mut tape = Tape::new();
                let out = learner.task_loss(&mut tape, task)?;
                let loss = tape.value(out.loss).item();
                Ok((loss, tape.backward(out.loss)?.into_params()))
            })
            .collect()
    });
    let scale = 1.0 / tasks.len() as f64;
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for (j, r) in per_task.into_iter().enumerate() {
        let (loss, grads) = r?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite query loss or gradient on meta-batch task {j} (loss {loss})")));
        }
        total_loss += loss;
        sum = Some(match sum {
            None => grads,
            Some(acc) => acc.iter().zip(&grads).map(|(a, g)| a.zip_map(g, |x, y| x + y)).collect::<Result<_>>()?,
        });
    }
    let grads = sum.ok_or_else(|| Error::Contract("empty meta-batch".into()))?;
    Ok((total_loss * scale, grads.iter().map(|g| g.map(|v| v * scale)).collect()))
}

/// Options that do not affect what is learned.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint written under a different config.
    pub force: bool,
    /// Stop after this iteration (after its checkpoint), skipping the test phase.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The best-validated learner.
    pub learner: AnyLearner,
    pub log: MetricsLog,
    pub best_iteration: usize,
    /// Empty when the run stopped early.
    pub test: Vec<(String, Stat)>,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn test_stat(&self, metric: &str) -> Option<Stat> {
        self.test.iter().find(|(m, _)| m == metric).map(|(_, s)| *s)
    }
}

/// Everything needed to continue a run.
struct RunState {
    learner: AnyLearner,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
    best: Option<(usize, f64)>,
    log: MetricsLog,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u32> {
    let mut w: Vec<u32> = rng.get_seed().chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let stream = rng.get_stream();
    w.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    w.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    w
}

fn rng_from_words(w: &[u32]) -> Result<ChaCha8Rng> {
    if w.len() != 14 {
        return Err(Error::Format(format!("rng state has {} words, expected 14", w.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_mut(4).zip(&w[..8]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[8] as u64 | (w[9] as u64) << 32);
    rng.set_word_pos(w[10..14].iter().enumerate().fold(0u128, |acc, (i, &x)| acc | (x as u128) << (32 * i)));
    Ok(rng)
}

fn scalar(ckpt: &Checkpoint, name: &str) -> Result<f64> {
    let t = ckpt.get(name)?;
    if t.len() != 1 {
        return Err(Error::Format(format!("`{name}` is not a scalar")));
    }
    Ok(t.data()[0])
}

fn save_state(cfg: &RunConfig, s: &RunState, path: &Path) -> Result<()> {
    let mut c = Checkpoint::default();
    c.insert("config", bytes_to_tensor(cfg.to_text().as_bytes()));
    c.insert("config_hash", bytes_to_tensor(&cfg.hash()));
    c.insert("iteration", Tensor::scalar(s.iteration as f64));
    let (best_it, best_score) = s.best.unwrap_or((0, f64::NAN));
    c.insert("best_iteration", Tensor::scalar(best_it as f64));
    c.insert("best_score", Tensor::scalar(best_score));
    c.insert("rng", words_to_tensor(&rng_words(&s.rng)));
    c.insert("adam.step", Tensor::scalar(s.adam.step as f64));
    for (i, (name, t)) in s.learner.named_params().into_iter().enumerate() {
        c.insert(format!("param/{name}"), t.clone());
        c.insert(format!("adam.m/{name}"), s.adam.m[i].clone());
        c.insert(format!("adam.v/{name}"), s.adam.v[i].clone());
    }
    c.insert("metrics", bytes_to_tensor(s.log.to_csv().as_bytes()));
    c.save(path)
}

/// The config a checkpoint was written under.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let text = String::from_utf8(tensor_to_bytes(ckpt.get("config")?)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let cfg = RunConfig::parse(&text)?;
    if tensor_to_bytes(ckpt.get("config_hash")?)? != cfg.hash() {
        return Err(Error::Format("stored config does not match its hash".into()));
    }
    Ok(cfg)
}

/// Refuses a checkpoint whose config hash differs from `cfg`'s unless `force`.
pub fn check_config_hash(ckpt: &Checkpoint, cfg: &RunConfig, force: bool) -> Result<()> {
    let stored = tensor_to_bytes(ckpt.get("config_hash")?)?;
    if stored != cfg.hash() && !force {
        return Err(Error::Config("checkpoint was written under a different config (use force to override)".into()));
    }
    Ok(())
}

/// Rebuilds the learner stored in a checkpoint, plus its config and iteration.
pub fn load_learner(path: &Path) -> Result<(RunConfig, AnyLearner, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ckpt)?;
    let sources = task_sources(&cfg)?;
    let mut learner = build_learner(&cfg, sources.train.x_dim(), sources.train.y_dim(), &mut ChaCha8Rng::seed_from_u64(0))?;
    learner.load_params(|n| ckpt.get(&format!("param/{n}")).cloned())?;
    Ok((cfg, learner, ckpt))
}

fn load_state(cfg: &RunConfig, path: &Path, force: bool, fresh: AnyLearner) -> Result<RunState> {
    let ckpt = Checkpoint::load(path)?;
    check_config_hash(&ckpt, cfg, force)?;
    let mut learner = fresh;
    learner.load_params(|n| ckpt.get(&format!("param/{n}")).cloned())?;
    let names: Vec<String> = learner.named_params().into_iter().map(|(n, _)| n).collect();
    let get_all = |prefix: &str| names.iter().map(|n| ckpt.get(&format!("{prefix}/{n}")).cloned()).collect::<Result<Vec<_>>>();
    let adam = AdamState { m: get_all("adam.m")?, v: get_all("adam.v")?, step: scalar(&ckpt, "adam.step")? as u64 };
    let best_score = scalar(&ckpt, "best_score")?;
    let best = (!best_score.is_nan()).then(|| (scalar(&ckpt, "best_iteration").unwrap_or(0.0) as usize, best_score));
    let csv = String::from_utf8(tensor_to_bytes(ckpt.get("metrics")?)?).map_err(|_| Error::Format("metrics are not UTF-8".into()))?;
    Ok(RunState {
        learner,
        adam,
        rng: rng_from_words(&tensor_to_words(ckpt.get("rng")?)?)?,
        iteration: scalar(&ckpt, "iteration")? as usize,
        best,
        log: MetricsLog::parse_csv(&csv)?,
    })
}

/// Lower validation loss is better for regression, higher accuracy for classification.
fn improves(cfg: &RunConfig, score: f64, best: Option<(usize, f64)>) -> bool {
    match best {
        None => true,
        Some((_, b)) if cfg.is_classification() => score > b,
        Some((_, b)) => score < b,
    }
}

/// Meta-trains `cfg.learner`, writing `metrics.csv`, `last.ckpt`, `best.ckpt`
/// and `final.ckpt` under `cfg.out`. `final.ckpt` holds the best-validated
/// parameters with the complete log; resume from `last.ckpt`.
pub fn meta_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let pool = pool(cfg)?;
    let sources = task_sources(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let fresh = build_learner(cfg, sources.train.x_dim(), sources.train.y_dim(), &mut rng)?;
    let mut s = match &opts.resume {
        Some(path) => load_state(cfg, path, opts.force, fresh)?,
        None => {
            let adam = AdamState::for_params(&fresh.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
            RunState { learner: fresh, adam, rng, iteration: 0, best: None, log: MetricsLog::default() }
        }
    };
    let val_tasks = fixed_tasks(&sources.val, cfg.seed, VAL_STREAM, cfg.val_tasks)?;
    let adam_cfg = AdamConfig::with_lr(cfg.outer_lr);
    let loss_name = loss_metric(cfg);
    let start = Instant::now();
    let offset = s.log.rows.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let clock = |start: &Instant| if cfg.deterministic { 0.0 } else { offset + start.elapsed().as_secs_f64() };
    let last_path = cfg.out.join("last.ckpt");
    let best_path = cfg.out.join("best.ckpt");

    while s.iteration < cfg.meta_iterations {
        if opts.stop_after.is_some_and(|n| s.iteration >= n) {
            s.log.write_csv(&cfg.out.join("metrics.csv"))?;
            return Ok(TrainOutcome { learner: s.learner, log: s.log, best_iteration: s.best.map_or(0, |b| b.0), test: vec![], out_dir: cfg.out.clone() });
        }
        let it = s.iteration + 1;
        let batch = (0..cfg.meta_batch).map(|_| sources.train.sample(&mut s.rng)).collect::<Result<Vec<_>>>()?;
        let (loss, grads) = meta_gradient(&s.learner, &batch, &pool).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("iteration {it}: {m}")),
            e => e,
        })?;
        adam_step(&mut s.learner.params_mut(), &grads, &mut s.adam, &adam_cfg)?;
        s.iteration = it;
        s.log.record(it, "train", loss_name, Stat { mean: loss, ci95: 0.0, n: cfg.meta_batch }, clock(&start))?;

        if it % cfg.val_every == 0 || it == cfg.meta_iterations {
            let scores = score_tasks(&s.learner, &val_tasks, &pool)?;
            let stats = summarize(&scores, loss_name)?;
            let t = clock(&start);
            for (m, st) in &stats {
                s.log.record(it, "val", m, *st, t)?;
            }
            let key = if cfg.is_classification() { "accuracy" } else { loss_name };
            let score = stats.iter().find(|(m, _)| m == key).map(|(_, st)| st.mean).unwrap();
            if !score.is_finite() {
                return Err(Error::Numeric(format!("iteration {it}: validation {key} is {score}")));
            }
            if improves(cfg, score, s.best) {
                s.best = Some((it, score));
                save_state(cfg, &s, &best_path)?;
            }
            save_state(cfg, &s, &last_path)?;
            s.log.write_csv(&cfg.out.join("metrics.csv"))?;
        }
    }

    let best_iteration = s.best.map_or(s.iteration, |b| b.0);
    let learner = load_state(cfg, &best_path, true, s.learner)?.learner;
    let test_tasks = fixed_tasks(&sources.test, cfg.seed, TEST_STREAM, cfg.test_tasks)?;
    let scores = score_tasks(&learner, &test_tasks, &pool)?;
    let test = summarize(&scores, loss_name)?;
    let t = clock(&start);
    for (m, st) in &test {
        s.log.record(best_iteration, "test", m, *st, t)?;
    }
    for sc in &scores {
        s.log.record(best_iteration, "test_task", loss_name, Stat { mean: sc.loss, ci95: 0.0, n: 1 }, t)?;
    }
    s.log.write_csv(&cfg.out.join("metrics.csv"))?;
    s.learner = learner.clone();
    save_state(cfg, &s, &cfg.out.join("final.ckpt"))?;
    Ok(TrainOutcome { learner, log: s.log, best_iteration, test, out_dir: cfg.out.clone() })
}

//! Acceptance suite. Trains the desk-scale sine and synthetic runs, checks the
//! structural properties, and prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p oplstm --test acceptance`; extra
//! arguments select criteria by substring, e.g. `-- permutation`.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use oplstm::baselines::{maml_meta_loss, mlp_deltas, proto_as_linear, proto_predict, MlpParams, PrototypeSet};
use oplstm::harness::checkpoint::Checkpoint;
use oplstm::harness::{load_learner, meta_train, RunConfig, TrainOptions, TrainOutcome};
use oplstm::ndtensor::fd::{numeric_gradient, relative_error};
use oplstm::ndtensor::{cosine_similarity, frobenius_norm, outer};
use oplstm::oplstm::{adapt, adapt_with, forward, gradient_stub, target_stub, NodeRule, OpLstmArch, OpLstmModel};
use oplstm::plain::{ingest_batched, ingest_sequential, Ingestion, InputFormat, PlainLstmConfig, PlainLstmModel};
use oplstm::tasks::{sample_sine_task, sample_synthetic_episode, Task};
use oplstm::{Activation, Learner, OutputKind, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn out_root() -> PathBuf {
    std::env::var_os("ACCEPTANCE_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn train(name: &str, cfg_text: &str) -> TrainOutcome {
    let mut cfg = RunConfig::parse(cfg_text).unwrap_or_else(|e| panic!("{name}: {e}"));
    cfg.out = out_root().join(name);
    cfg.threads = 1;
    let start = Instant::now();
    let out = meta_train(&cfg, &TrainOptions { force: true, ..TrainOptions::default() }).unwrap_or_else(|e| panic!("{name}: {e}"));
    eprintln!("  trained {name} in {:.0}s", start.elapsed().as_secs_f64());
    out
}

fn test_mse(o: &TrainOutcome) -> f64 {
    o.test_stat("mse").expect("regression run reports mse").mean
}

fn test_accuracy(o: &TrainOutcome) -> f64 {
    o.test_stat("accuracy").expect("classification run reports accuracy").mean
}

fn sine(learner: &str, k: usize, extra: &str) -> String {
    format!(
        "learner = {learner}\ntask = sine\nk_shot = {k}\nquery = 50\nmeta_iterations = 20000\nval_every = 1000\nval_tasks = 500\ntest_tasks = 2000\n{extra}"
    )
}

const PLAIN: &str = "hidden = 40,40\nunroll = 3\nouter_lr = 0.01\nmeta_batch = 4\n";
const MAML: &str = "hidden = 40,40\ninner_steps = 5\ninner_lr = 0.01\nouter_lr = 0.003\nmeta_batch = 4\n";
const OPLSTM: &str = "hidden = 40,40\ncoord_hidden = 20,1\nunroll = 3\nouter_lr = 0.003\nmeta_batch = 4\n";

fn plain_5() -> &'static TrainOutcome {
    static R: OnceLock<TrainOutcome> = OnceLock::new();
    R.get_or_init(|| train("plain_lstm_5shot", &sine("plain_lstm", 5, PLAIN)))
}

fn maml(k: usize) -> &'static TrainOutcome {
    static R: [OnceLock<TrainOutcome>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let slot = match k {
        5 => 0,
        10 => 1,
        _ => 2,
    };
    R[slot].get_or_init(|| train(&format!("maml_{k}shot"), &sine("maml", k, MAML)))
}

fn oplstm(k: usize) -> &'static TrainOutcome {
    static R: [OnceLock<TrainOutcome>; 2] = [OnceLock::new(), OnceLock::new()];
    R[usize::from(k != 10)].get_or_init(|| train(&format!("oplstm_{k}shot"), &sine("op_lstm", k, OPLSTM)))
}

fn plain_lstm_5shot_sine() -> Verdict {
    let mse = test_mse(plain_5());
    let msg = format!("batched LSTM 5-shot test MSE {mse:.4} (need ≤ 0.08)");
    if mse <= 0.08 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn maml_5shot_sine() -> Verdict {
    let (m, l) = (test_mse(maml(5)), test_mse(plain_5()));
    let msg = format!("MAML 5-shot test MSE {m:.4} (need within [0.08, 0.35] and above LSTM {l:.4})");
    if (0.08..=0.35).contains(&m) && m > l {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn oplstm_sine() -> Verdict {
    let (o10, o20) = (test_mse(oplstm(10)), test_mse(oplstm(20)));
    let (m10, m20) = (test_mse(maml(10)), test_mse(maml(20)));
    let msg = format!("OP-LSTM 10-shot {o10:.4} (≤ 0.02, MAML {m10:.4}), 20-shot {o20:.4} (≤ 0.01, MAML {m20:.4})");
    if o10 <= 0.02 && o20 <= 0.01 && o10 < m10 && o20 < m20 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const INGESTION: &str = "hidden = 40,40\nouter_lr = 0.01\nmeta_batch = 4\nmeta_iterations = 3000\nval_every = 1000\nval_tasks = 200\ntest_tasks = 500\n";

fn batched_vs_sequential() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [5, 10, 20] {
        // the sequential LSTM reads the support sequence once; the batched one
        // makes three pooled passes, as in the 5-shot run above
        let mean = |ingestion: &str, unroll: usize| {
            let runs: Vec<f64> = (0..3)
                .map(|seed| {
                    let text = format!("learner = plain_lstm\nk_shot = {k}\ningestion = {ingestion}\nunroll = {unroll}\nseed = {seed}\n{INGESTION}");
                    test_mse(&train(&format!("ingestion_{ingestion}_{k}shot_seed{seed}"), &text))
                })
                .collect();
            runs.iter().sum::<f64>() / runs.len() as f64
        };
        let (b, s) = (mean("batched", 3), mean("sequential", 1));
        ok &= b <= s;
        parts.push(format!("k={k}: {b:.4} vs {s:.4}"));
    }
    let msg = format!("batched vs sequential mean test MSE over 3 seeds, {}", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const SYNTHETIC: &str = "task = synthetic\nn_way = 5\nk_shot = 1\nquery = 5\nmeta_batch = 4\nmeta_iterations = 3000\nval_every = 500\nval_tasks = 200\ntest_tasks = 600\n";

fn synthetic_classification() -> Verdict {
    let mean = |learner: &str, extra: &str| {
        let runs: Vec<f64> = (0..3)
            .map(|seed| {
                let text = format!("learner = {learner}\nseed = {seed}\n{SYNTHETIC}{extra}");
                test_accuracy(&train(&format!("synthetic_{learner}_seed{seed}"), &text))
            })
            .collect();
        runs.iter().sum::<f64>() / runs.len() as f64
    };
    let op = mean("op_lstm", "hidden = 40\ncoord_hidden = 10,1\nunroll = 1\nouter_lr = 0.003\n");
    let plain = mean("plain_lstm", "hidden = 40,40\nunroll = 1\nouter_lr = 0.003\n");
    let msg = format!("synthetic 5-way 1-shot accuracy OP-LSTM {:.1}% vs LSTM {:.1}% (need +5 points)", 100.0 * op, 100.0 * plain);
    if op >= plain + 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn plain_model(rng: &mut ChaCha8Rng, ingestion: Ingestion) -> PlainLstmModel {
    let config = PlainLstmConfig {
        x_dim: 1,
        y_dim: 1,
        hidden: vec![8, 6],
        input_format: InputFormat::XyPrevPred,
        ingestion,
        unroll_t: 2,
        output: OutputKind::Regression,
    };
    PlainLstmModel::new(config, rng).unwrap()
}

fn op_arch(dims: &[usize], head: Activation, unroll_t: usize) -> OpLstmArch {
    let mut activations = vec![Activation::Relu; dims.len() - 2];
    activations.push(head);
    OpLstmArch {
        layer_dims: dims.to_vec(),
        activations,
        coord_hidden: vec![4, 1],
        unroll_t,
        gamma_init: 1.0,
        learn_gamma: true,
        strict_sequential: false,
    }
}

fn op_model(rng: &mut ChaCha8Rng, dims: &[usize], head: Activation, unroll_t: usize) -> OpLstmModel {
    let mut m = OpLstmModel::new(op_arch(dims, head, unroll_t), rng).unwrap();
    for b in &mut m.b {
        *b = Tensor::uniform(b.shape(), 0.3, rng);
    }
    m
}

fn states_diff(a: &[oplstm::cells::LstmState], b: &[oplstm::cells::LstmState]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.h.max_abs_diff(&y.h).max(x.c.max_abs_diff(&y.c))).fold(0.0, f64::max)
}

fn permutation_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut batched_ok, mut op_ok, mut seq_differs) = (0, 0, 0);
    for _ in 0..100 {
        let k = rng.gen_range(3..=10);
        let task = sample_sine_task(&mut rng, k, 2).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        // a derangement guarantees the sequential order really changes
        while order.iter().enumerate().any(|(i, &o)| i == o) {
            order.shuffle(&mut rng);
        }
        let shuffled = task.with_support_order(&order).unwrap();

        let batched = plain_model(&mut rng, Ingestion::Batched);
        if states_diff(&ingest_batched(&batched, &task).unwrap(), &ingest_batched(&batched, &shuffled).unwrap()) < 1e-9 {
            batched_ok += 1;
        }
        let seq = plain_model(&mut rng, Ingestion::Sequential);
        let identity: Vec<usize> = (0..k).collect();
        if states_diff(&ingest_sequential(&seq, &task, &identity).unwrap(), &ingest_sequential(&seq, &task, &order).unwrap()) > 1e-9 {
            seq_differs += 1;
        }
        let op = op_model(&mut rng, &[1, 6, 5, 1], Activation::Identity, 2);
        let (a, b) = (adapt(&op, &task).unwrap(), adapt(&op, &shuffled).unwrap());
        if a.h.iter().zip(&b.h).all(|(x, y)| x.max_abs_diff(y) < 1e-9) {
            op_ok += 1;
        }
    }
    let msg = format!("shuffled supports: batched {batched_ok}/100 and OP-LSTM {op_ok}/100 agree, sequential differs on {seq_differs}/100");
    if batched_ok == 100 && op_ok == 100 && seq_differs >= 95 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Central differences at `h` and `h/2` combined by Richardson extrapolation.
/// The normalized outer products have large third derivatives wherever a
/// node's hidden vector is short, which plain central differences at a fixed
/// step resolve poorly; the extrapolation cancels the `h²` truncation term.
fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    const H: f64 = 1e-6;
    let coarse = numeric_gradient(x, H, &mut f);
    let fine = numeric_gradient(x, H / 2.0, &mut f);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// Relative error between the tape gradient of a learner's query loss and
/// finite differences over every meta-parameter.
fn meta_gradient_error<L: Learner + Clone>(learner: &L, task: &Task) -> f64 {
    let mut tape = Tape::new();
    let loss = learner.task_loss(&mut tape, task).unwrap().loss;
    let analytic: Vec<f64> = tape.backward(loss).unwrap().into_params().into_iter().flat_map(Tensor::into_data).collect();
    let flat: Vec<f64> = learner.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut probe = learner.clone();
    let numeric = fd_gradient(&flat, |x| {
        let mut offset = 0;
        for p in probe.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::new();
        let l = probe.task_loss(&mut tape, task).unwrap().loss;
        tape.value(l).item()
    });
    relative_error(&analytic, &numeric)
}

fn gradient_fidelity() -> Verdict {
    let (mut worst_op, mut worst_maml) = (0f64, 0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (op, task) = if seed % 2 == 0 {
            (op_model(&mut rng, &[1, 4, 3, 1], Activation::Identity, 2), sample_sine_task(&mut rng, 3, 4).unwrap())
        } else {
            (op_model(&mut rng, &[3, 4, 3], Activation::Softmax, 2), sample_synthetic_episode(&mut rng, 3, 1, 2, 3, 0.5).unwrap())
        };
        worst_op = worst_op.max(meta_gradient_error(&op, &task));

        let mut init = MlpParams::new(&[1, 5, 4, 1], &[Activation::Relu, Activation::Relu, Activation::Identity], &mut rng).unwrap();
        // zero biases can put a pre-activation exactly on the ReLU kink
        for b in &mut init.biases {
            *b = Tensor::uniform(b.shape(), 0.3, &mut rng);
        }
        let task = sample_sine_task(&mut rng, 4, 5).unwrap();
        // differentiate maml_meta_loss directly rather than through the MamlModel wrapper
        let params: Vec<Tensor> = init.weights.iter().chain(&init.biases).cloned().collect();
        let loss_of = |tape: &mut Tape, ps: &[Tensor], as_params: bool| {
            let vs: Vec<_> = ps.iter().map(|t| if as_params { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
            let n = init.weights.len();
            let v = oplstm::baselines::MlpVars { w: vs[..n].to_vec(), b: vs[n..].to_vec() };
            maml_meta_loss(tape, &init.activations, &v, &task, 1, 0.01, false).loss
        };
        let mut tape = Tape::new();
        let l = loss_of(&mut tape, &params, true);
        let analytic: Vec<f64> = tape.backward(l).unwrap().into_params().into_iter().flat_map(Tensor::into_data).collect();
        let flat: Vec<f64> = params.iter().flat_map(|t| t.data().to_vec()).collect();
        let numeric = fd_gradient(&flat, |x| {
            let mut off = 0;
            let ps: Vec<Tensor> = params
                .iter()
                .map(|t| {
                    let part = x[off..off + t.len()].to_vec();
                    off += t.len();
                    Tensor::new(t.shape().to_vec(), part).unwrap()
                })
                .collect();
            let mut tape = Tape::new();
            let l = loss_of(&mut tape, &ps, false);
            tape.value(l).item()
        });
        worst_maml = worst_maml.max(relative_error(&analytic, &numeric));
    }
    let msg = format!("worst finite-difference relative error over 20 seeds: OP-LSTM (T=2) {worst_op:.2e}, MAML (1 step) {worst_maml:.2e} (need < 1e-4)");
    if worst_op < 1e-4 && worst_maml < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn protonet_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst_pred = 0f64;
    for _ in 0..100 {
        let (n, d, q) = (rng.gen_range(2..=6), rng.gen_range(1..=8), rng.gen_range(1..=5));
        let protos = PrototypeSet { prototypes: Tensor::uniform(&[n, d], 2.0, &mut rng) };
        let emb = Tensor::uniform(&[q, d], 2.0, &mut rng);
        let got = proto_predict(&protos, &emb).unwrap();
        let (w, b) = proto_as_linear(&protos);
        for r in 0..q {
            let scores: Vec<f64> = (0..n).map(|c| emb.row(r).iter().zip(w.row(c)).map(|(e, w)| e * w).sum::<f64>() + b.data()[c]).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            for c in 0..n {
                worst_pred = worst_pred.max(((scores[c] - top).exp() / z - got.at(r, c)).abs());
            }
        }
    }

    let mut worst_cos = 0f64;
    for _ in 0..20 {
        let mut m = op_model(&mut rng, &[4, 6, 3], Activation::Softmax, 1);
        m.h0[1] = Tensor::zeros(&[3, 6]);
        let task = sample_synthetic_episode(&mut rng, 3, 2, 1, 4, 0.5).unwrap();
        let stub = target_stub();
        let s = adapt_with(&m, &task, NodeRule::Stub(&stub)).unwrap();
        for c in 0..3 {
            let mut mean = vec![0.0; 6];
            for (x, y) in task.support_pairs() {
                if y[c] == 1.0 {
                    let e = &forward(&m, &m.initial_state(), &Tensor::vector(x.to_vec())).unwrap()[1];
                    mean.iter_mut().zip(e.data()).for_each(|(p, v)| *p += v / e.norm());
                }
            }
            let row = Tensor::vector(s.h[1].row(c).to_vec());
            worst_cos = worst_cos.max((cosine_similarity(&row, &Tensor::vector(mean)) - 1.0).abs());
        }
    }
    let msg = format!("prototype softmax vs linear head max diff {worst_pred:.1e} (≤ 1e-12); stubbed OP-LSTM rows vs normalized class means |cos − 1| ≤ {worst_cos:.1e} (≤ 1e-9)");
    if worst_pred <= 1e-12 && worst_cos <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn maml_stub_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst = 0f64;
    let mut checked = 0;
    for case in 0..40 {
        let head = if case % 2 == 0 { Activation::Identity } else { Activation::Softmax };
        let mut m = op_model(&mut rng, &[3, 5, 4, 2], head, 1);
        // active ReLUs keep every layer's delta nonzero
        m.b[0] = Tensor::full(&[5], 2.0);
        m.b[1] = Tensor::full(&[4], 2.0);
        let x = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let y = match head {
            Activation::Softmax => {
                let mut v = vec![0.0; 2];
                v[rng.gen_range(0..2)] = 1.0;
                Tensor::matrix(1, 2, v).unwrap()
            }
            _ => Tensor::uniform(&[1, 2], 1.0, &mut rng),
        };
        // a one-example support makes the pooled update a single outer product
        let meta = if head == Activation::Softmax {
            sample_synthetic_episode(&mut rng, 2, 1, 1, 3, 0.5).unwrap().meta
        } else {
            sample_sine_task(&mut rng, 1, 1).unwrap().meta
        };
        let task = Task::new(x.clone(), y.clone(), x.clone(), y.clone(), meta).unwrap();
        let stub = gradient_stub(0.01, m.arch.output_kind());
        let s = adapt_with(&m, &task, NodeRule::Stub(&stub)).unwrap();
        let mlp = MlpParams { weights: m.h0.clone(), biases: m.b.clone(), activations: m.arch.activations.clone() };
        let (a, d) = mlp_deltas(&mlp, &x, &y).unwrap();
        for l in 0..3 {
            let delta_h = s.h[l].zip_map(&m.h0[l], |p, q| p - q).unwrap();
            let descent = outer(&Tensor::vector(d[l].data().to_vec()), &Tensor::vector(a[l].data().to_vec())).unwrap().map(|v| -v);
            worst = worst.max((cosine_similarity(&delta_h, &descent) - 1.0).abs());
            checked += 1;
        }
    }
    let msg = format!("gradient-stub updates vs −δaᵀ over {checked} layer updates: |cos − 1| ≤ {worst:.1e} (need ≤ 1e-6)");
    if worst <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bias_immutability() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut moved = 0;
    for _ in 0..50 {
        let m = op_model(&mut rng, &[1, 8, 8, 1], Activation::Identity, 3);
        let t = sample_sine_task(&mut rng, 10, 2).unwrap();
        let s = adapt(&m, &t).unwrap();
        let same = s.b.iter().zip(&m.b).all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same {
            moved += 1;
        }
    }
    let msg = format!("biases changed by adaptation in {moved}/50 tasks");
    if moved == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bounded_update_norm() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..30 {
        let mut m = op_model(&mut rng, &[1, 6, 6, 1], Activation::Identity, 1);
        let gamma = rng.gen_range(0.05..2.0);
        m.gamma = Tensor::vector(vec![gamma]);
        let t = sample_sine_task(&mut rng, 7, 1).unwrap();
        let mut prev = m.h0.clone();
        for steps in 1..=4 {
            m.arch.unroll_t = steps;
            let s = adapt(&m, &t).unwrap();
            for (a, b) in s.h.iter().zip(&prev) {
                worst = worst.max(frobenius_norm(&a.zip_map(b, |x, y| x - y).unwrap()) / gamma);
            }
            prev = s.h;
        }
    }
    let msg = format!("largest per-pass ‖ΔH‖_F / γ = {worst:.12}");
    if worst <= 1.0 + 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn checkpoint_round_trip() -> Verdict {
    let path = plain_5().out_dir.join("last.ckpt");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let again = ckpt.to_bytes();
    let copy = out_root().join("round_trip.ckpt");
    Checkpoint::from_bytes(&again).map_err(|e| e.to_string())?.save(&copy).map_err(|e| e.to_string())?;
    let (_, a, _) = load_learner(&path).map_err(|e| e.to_string())?;
    let (_, b, _) = load_learner(&copy).map_err(|e| e.to_string())?;
    let params_equal = a.named_params().iter().zip(b.named_params()).all(|((n, x), (m, y))| {
        n == &m && x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    let msg = format!("{} checkpoint entries, {} bytes, re-serialized identically: {}", ckpt.entries.len(), bytes.len(), again == bytes);
    if again == bytes && std::fs::read(&copy).map_err(|e| e.to_string())? == bytes && params_equal {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_determinism() -> Verdict {
    let text = "learner = op_lstm\nhidden = 8\ncoord_hidden = 4,1\nk_shot = 5\nmeta_batch = 4\nmeta_iterations = 60\nval_every = 20\nval_tasks = 20\ntest_tasks = 20\nseed = 9\ndeterministic = true\n";
    let a = train("determinism_a", text);
    let b = train("determinism_b", text);
    let same_log = a.log.to_csv() == b.log.to_csv();
    let same_params = a.learner.named_params().iter().zip(b.learner.named_params()).all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let msg = format!("two fixed-seed runs: identical metrics log {same_log}, identical parameters {same_params}");
    if same_log && same_params {
        Ok(msg)
    } else {
        Err(msg)
    }
}

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    ("permutation_invariance", permutation_invariance),
    ("gradient_fidelity", gradient_fidelity),
    ("protonet_equivalence", protonet_equivalence),
    ("maml_stub_equivalence", maml_stub_equivalence),
    ("bias_immutability", bias_immutability),
    ("bounded_update_norm", bounded_update_norm),
    ("run_determinism", run_determinism),
    ("plain_lstm_5shot_sine", plain_lstm_5shot_sine),
    ("checkpoint_round_trip", checkpoint_round_trip),
    ("maml_5shot_sine", maml_5shot_sine),
    ("oplstm_10_20shot_sine", oplstm_sine),
    ("batched_vs_sequential", batched_vs_sequential),
    ("synthetic_oplstm_vs_lstm", synthetic_classification),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA.iter().filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))).collect();
    let mut failed = Vec::new();
    for (name, check) in &selected {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let what = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", what.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(m) => println!("PASS {name}: {m} [{secs:.0}s]"),
            Err(m) => {
                println!("FAIL {name}: {m} [{secs:.0}s]");
                failed.push(*name);
            }
        }
    }
    println!("{} of {} criteria passed", selected.len() - failed.len(), selected.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

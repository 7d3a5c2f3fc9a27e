//! Meta-training loop and held-out evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmanp::{predict_and, Feedback, Model, Variant};
use crate::error::{Error, Result};
use crate::numerics::instrument::ops_count;
use crate::numerics::{backward, AdamConfig, AdamState, Tensor};
use crate::tasks::{sample_task_batch, task_rng, GpTaskConfig, Kernel, Task};

/// Stream ids for [`task_rng`]. Training streams start at `TRAIN_STREAM_BASE + step`.
pub const RBF_EVAL_STREAM: u64 = 1;
pub const MATERN_EVAL_STREAM: u64 = 2;
pub const TRAIN_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Evaluate every this many steps (and at the last step); 0 disables.
    pub eval_every: u64,
    pub eval_tasks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            eval_every: 1000,
            eval_tasks: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("train.lr, weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_nll: f64,
    pub eval_rbf: Option<f64>,
    pub eval_matern: Option<f64>,
    pub wall_ms: u64,
    pub ops: u64,
}

pub const CSV_HEADER: &str = "step,train_nll,eval_rbf,eval_matern,wall_ms,ops";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{},{}",
            self.step,
            self.train_nll,
            opt(self.eval_rbf),
            opt(self.eval_matern),
            self.wall_ms,
            self.ops
        )
    }
}

/// Mean per-task loss and averaged gradients, in parameter order.
pub fn batch_gradient(model: &Model, tasks: &[Task]) -> Result<(f64, Vec<Tensor>)> {
    let per_task: Vec<Result<(f64, Vec<Tensor>)>> = tasks
        .par_iter()
        .map(|t| {
            let leaves = model.params().leaves();
            let loss = model.loss(&leaves, &t.ctx_x, &t.ctx_y, &t.tgt_x, &t.tgt_y)?;
            let grads = backward(&loss)?;
            let g = leaves.tensors_of(|v| grads.get_or_zeros(v));
            Ok((loss.value().item()?, g))
        })
        .collect();
    let b = tasks.len() as f64;
    let mut total = 0.0;
    let mut sum: Option<Vec<Vec<f64>>> = None;
    let mut shapes = Vec::new();
    for r in per_task {
        let (loss, g) = r?;
        total += loss;
        match &mut sum {
            None => {
                shapes = g.iter().map(|t| t.shape().to_vec()).collect();
                sum = Some(g.iter().map(Tensor::to_vec).collect());
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(t.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = sum
        .unwrap_or_default()
        .into_iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::new(&s, v.into_iter().map(|x| x / b).collect()))
        .collect::<Result<_>>()?;
    Ok((total / b, grads))
}

fn clip(grads: Vec<Tensor>, max_norm: f64) -> Result<Vec<Tensor>> {
    if max_norm <= 0.0 {
        return Ok(grads);
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm {
        return Ok(grads);
    }
    grads.iter().map(|g| g.scale(max_norm / norm)).collect()
}

/// Training state that advances one optimizer step at a time.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub config: TrainConfig,
    pub tasks: GpTaskConfig,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, tasks: GpTaskConfig) -> Result<Self> {
        config.validate()?;
        tasks.validate()?;
        let params: Vec<&Tensor> = model.params().tensors().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(config.adam(), &params);
        Ok(Trainer {
            model,
            adam,
            step: 0,
            config,
            tasks,
            started: Instant::now(),
        })
    }

    /// Continues from a saved position; the task stream is keyed by step,
    /// so the remaining steps see the same batches as an uninterrupted run.
    pub fn resume(model: Model, adam: AdamState, step: u64, config: TrainConfig, tasks: GpTaskConfig) -> Result<Self> {
        let mut t = Trainer::new(model, config, tasks)?;
        t.adam = adam;
        t.adam.config = config.adam();
        t.step = step;
        Ok(t)
    }

    /// Runs one step. The model is left unchanged if the step fails.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let ops0 = ops_count();
        let step = self.step + 1;
        let mut rng = task_rng(self.config.seed, TRAIN_STREAM_BASE + step);
        let batch = sample_task_batch(&self.tasks, self.config.batch_size, &mut rng)?;
        let (loss, grads) = batch_gradient(&self.model, &batch.tasks).map_err(|e| match e {
            Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } => Error::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = clip(grads, self.config.clip_norm)?;
        let params: Vec<&Tensor> = self.model.params().tensors().into_iter().map(|(_, t)| t).collect();
        let mut adam = self.adam.clone();
        let new = adam.step(&params, &grads)?;
        let model = Model::new_unchecked(*self.model.config(), self.model.params().with_tensors(new)?);
        self.model = model;
        self.adam = adam;
        self.step = step;

        let (mut eval_rbf, mut eval_matern) = (None, None);
        let every = self.config.eval_every;
        if every > 0 && (step % every == 0 || step == self.config.steps) {
            let mode = default_eval_mode(&self.model);
            let n = self.config.eval_tasks;
            eval_rbf = Some(evaluate(&self.model, &eval_tasks(&self.tasks, Kernel::Rbf, n, self.config.seed)?, mode, 0)?.mean);
            eval_matern = Some(evaluate(&self.model, &eval_tasks(&self.tasks, Kernel::Matern52, n, self.config.seed)?, mode, 0)?.mean);
        }
        Ok(MetricRecord {
            step,
            train_nll: loss,
            eval_rbf,
            eval_matern,
            wall_ms: self.started.elapsed().as_millis() as u64,
            ops: ops_count() - ops0,
        })
    }

    /// Steps until `config.steps`, handing each record to `on_record`.
    pub fn run(&mut self, on_record: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.step()?;
            on_record(&rec)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the model with its metric log.
pub fn train(model: Model, config: TrainConfig, tasks: GpTaskConfig) -> Result<(Model, Vec<MetricRecord>)> {
    let mut t = Trainer::new(model, config, tasks)?;
    let mut log = Vec::new();
    t.run(&mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((t.model, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// Independent per-point Gaussians (marginals for the `and` variant).
    Diagonal,
    /// One joint Gaussian over all targets.
    Joint,
    /// Autoregressive blocks of `block` targets.
    And { block: usize, feedback: Feedback },
}

pub fn default_eval_mode(model: &Model) -> EvalMode {
    match model.config().variant {
        Variant::Diagonal => EvalMode::Diagonal,
        Variant::And => EvalMode::Joint,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    /// Mean over tasks of the per-target log-likelihood.
    pub mean: f64,
    /// Standard error of that mean.
    pub stderr: f64,
    pub tasks: usize,
    /// Per-task per-target log-likelihoods.
    #[serde(skip)]
    pub per_task: Vec<f64>,
}

impl EvalSummary {
    pub fn from_values(per_task: Vec<f64>) -> Self {
        let n = per_task.len() as f64;
        let mean = per_task.iter().sum::<f64>() / n;
        let var = if per_task.len() > 1 {
            per_task.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalSummary {
            mean,
            stderr: (var / n).sqrt(),
            tasks: per_task.len(),
            per_task,
        }
    }
}

/// Held-out tasks for `kernel`, drawn one at a time from a stream disjoint
/// from training.
pub fn eval_tasks(cfg: &GpTaskConfig, kernel: Kernel, n: usize, seed: u64) -> Result<Vec<Task>> {
    let stream = match kernel {
        Kernel::Rbf => RBF_EVAL_STREAM,
        Kernel::Matern52 => MATERN_EVAL_STREAM,
    };
    let cfg = cfg.with_kernel(kernel);
    let mut rng = task_rng(seed, stream);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.extend(sample_task_batch(&cfg, 1, &mut rng)?.tasks);
    }
    Ok(out)
}

/// Per-target log-likelihood of one task.
pub fn task_log_lik(model: &Model, task: &Task, mode: EvalMode, sample_seed: u64) -> Result<f64> {
    let st = model.condition(&task.ctx_x, &task.ctx_y)?;
    let m = task.tgt_x.rows() as f64;
    let total = match mode {
        EvalMode::Diagonal => model.query_diagonal(&st, &task.tgt_x)?.log_likelihood(&task.tgt_y)?,
        EvalMode::Joint => model.query_joint(&st, &task.tgt_x)?.log_likelihood(&task.tgt_y)?,
        EvalMode::And { block, feedback } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            predict_and(model, &st, &task.tgt_x, Some(&task.tgt_y), block, feedback, &mut rng)?
                .total_log_lik()
                .expect("targets given")
        }
    };
    Ok(total / m)
}

/// Mean ± standard error of the per-target log-likelihood over `tasks`.
/// Sampling in `And` mode is seeded per task from `seed`.
pub fn evaluate(model: &Model, tasks: &[Task], mode: EvalMode, seed: u64) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation over zero tasks"));
    }
    let vals = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| task_log_lik(model, t, mode, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalSummary::from_values(vals))
}

/// Log-likelihood of a single Gaussian fit to each task's context `y`,
/// with the maximum-likelihood (`unbiased = false`) or unbiased variance.
pub fn constant_baseline(tasks: &[Task], unbiased: bool) -> EvalSummary {
    let vals = tasks
        .iter()
        .map(|t| {
            let y = t.ctx_y.data();
            let n = y.len() as f64;
            let mu = y.iter().sum::<f64>() / n;
            let ss = y.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            let var = (ss / if unbiased { n - 1.0 } else { n }).max(f64::MIN_POSITIVE);
            let tgt = t.tgt_y.data();
            tgt.iter()
                .map(|v| -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (v - mu) * (v - mu) / var))
                .sum::<f64>()
                / tgt.len() as f64
        })
        .collect();
    EvalSummary::from_values(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmanp::ModelConfig;
    use crate::numerics::nn::fingerprint;

    fn tiny(variant: Variant) -> Model {
        let cfg = ModelConfig {
            k: 1,
            l_i: 4,
            l_b: 4,
            d_model: 8,
            heads: 2,
            rank: 2,
            variant,
            ..ModelConfig::default()
        };
        Model::init(cfg, 5).unwrap()
    }

    fn quick(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            eval_every: 0,
            eval_tasks: 8,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let m = tiny(Variant::Diagonal);
        let cfg = TrainConfig { lr: 0.0, ..quick(1) };
        let mut t = Trainer::new(m.clone(), cfg, GpTaskConfig::default()).unwrap();
        t.step().unwrap();
        assert_eq!(fingerprint(t.model.params()), m.fingerprint());
        assert_eq!(t.adam.step, 1);
        assert!(t.adam.m.iter().any(|x| x.data().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        for v in [Variant::Diagonal, Variant::And] {
            let cfg = TrainConfig { eval_every: 2, ..quick(3) };
            let (_, a) = train(tiny(v), cfg, GpTaskConfig::default()).unwrap();
            let (_, b) = train(tiny(v), cfg, GpTaskConfig::default()).unwrap();
            let strip = |r: &[MetricRecord]| r.iter().map(|x| (x.step, x.train_nll.to_bits(), x.eval_rbf, x.eval_matern, x.ops)).collect::<Vec<_>>();
            assert_eq!(strip(&a), strip(&b));
            assert!(a[1].eval_rbf.is_some() && a[2].eval_rbf.is_some() && a[0].eval_rbf.is_none());
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = quick(4);
        let (full, _) = train(tiny(Variant::Diagonal), cfg, GpTaskConfig::default()).unwrap();
        let mut first = Trainer::new(tiny(Variant::Diagonal), TrainConfig { steps: 2, ..cfg }, GpTaskConfig::default()).unwrap();
        first.run(&mut |_| Ok(())).unwrap();
        let mut rest = Trainer::resume(first.model, first.adam, first.step, cfg, GpTaskConfig::default()).unwrap();
        rest.run(&mut |_| Ok(())).unwrap();
        assert_eq!(fingerprint(rest.model.params()), full.fingerprint());
    }

    #[test]
    fn and_block_equal_to_m_is_joint() {
        let m = tiny(Variant::And);
        let tasks = eval_tasks(&GpTaskConfig::default(), Kernel::Rbf, 5, 0).unwrap();
        for t in &tasks {
            let joint = task_log_lik(&m, t, EvalMode::Joint, 0).unwrap();
            let and = task_log_lik(
                &m,
                t,
                EvalMode::And { block: t.tgt_x.rows(), feedback: Feedback::Sample },
                0,
            )
            .unwrap();
            assert_eq!(joint, and);
        }
    }

    #[test]
    fn eval_streams_are_disjoint() {
        let cfg = GpTaskConfig::default();
        let a = eval_tasks(&cfg, Kernel::Rbf, 2, 0).unwrap();
        let b = eval_tasks(&cfg, Kernel::Matern52, 2, 0).unwrap();
        assert_ne!(a[0].ctx_x, b[0].ctx_x);
        let tr = sample_task_batch(&cfg, 1, &mut task_rng(0, TRAIN_STREAM_BASE + 1)).unwrap();
        assert_ne!(tr.tasks[0].ctx_x, a[0].ctx_x);
    }

    #[test]
    fn csv_row_format() {
        let r = MetricRecord { step: 3, train_nll: 1.5, eval_rbf: None, eval_matern: Some(-0.25), wall_ms: 10, ops: 99 };
        assert_eq!(r.csv_row(), "3,1.500000,,-0.250000,10,99");
    }
}

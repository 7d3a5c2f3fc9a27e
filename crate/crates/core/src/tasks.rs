//! 1-D regression tasks drawn from Gaussian process priors.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmanp::Archive;
use crate::error::{Error, Result};
use crate::numerics::linalg::cholesky;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Rbf,
    Matern52,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Rbf => "rbf",
            Kernel::Matern52 => "matern52",
        }
    }
}

/// `k(x, x')` for length scale `l` and signal scale `sf`.
pub fn kernel_eval(kind: Kernel, l: f64, sf: f64, x: f64, x2: f64) -> Result<f64> {
    if !(l > 0.0 && sf > 0.0) {
        return Err(Error::Config(format!("kernel needs l > 0 and sf > 0, got l={l}, sf={sf}")));
    }
    let d = (x - x2).abs();
    Ok(match kind {
        Kernel::Rbf => sf * sf * (-d * d / (2.0 * l * l)).exp(),
        Kernel::Matern52 => {
            let a = 5f64.sqrt() * d / l;
            sf * sf * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpTaskConfig {
    pub kernel: Kernel,
    /// Half-open range for the length scale.
    pub length_scale: [f64; 2],
    /// Half-open range for the signal scale.
    pub signal_scale: [f64; 2],
    /// Half-open range for the context count N.
    pub num_context: [usize; 2],
    /// Smallest target count; M ~ U[min_target, max_points − N).
    pub min_target: usize,
    pub max_points: usize,
    /// Inputs are uniform on this interval.
    pub x_range: [f64; 2],
    /// Added to the kernel diagonal; raised ×10 once if Cholesky fails.
    pub jitter: f64,
}

impl Default for GpTaskConfig {
    fn default() -> Self {
        GpTaskConfig {
            kernel: Kernel::Rbf,
            length_scale: [0.6, 1.0],
            signal_scale: [0.1, 1.0],
            num_context: [3, 47],
            min_target: 3,
            max_points: 50,
            x_range: [-2.0, 2.0],
            jitter: 1e-6,
        }
    }
}

impl GpTaskConfig {
    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tasks: {m}")));
        let [l0, l1] = self.length_scale;
        let [s0, s1] = self.signal_scale;
        let [n0, n1] = self.num_context;
        let [x0, x1] = self.x_range;
        if !(0.0 < l0 && l0 < l1) {
            return bad("length_scale must be a non-empty positive range");
        }
        if !(0.0 < s0 && s0 < s1) {
            return bad("signal_scale must be a non-empty positive range");
        }
        if !(1 <= n0 && n0 < n1) {
            return bad("num_context must be a non-empty range starting at 1 or more");
        }
        if self.min_target == 0 || n1 - 1 + self.min_target >= self.max_points {
            return bad("max_points must leave room for min_target targets after the largest context");
        }
        if !(x0 < x1) {
            return bad("x_range must be non-empty");
        }
        if !(self.jitter > 0.0) {
            return bad("jitter must be positive");
        }
        Ok(())
    }
}

/// One regression task.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub ctx_x: Tensor,
    pub ctx_y: Tensor,
    pub tgt_x: Tensor,
    pub tgt_y: Tensor,
    pub length_scale: f64,
    pub signal_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub tasks: Vec<Task>,
}

/// Seeded generator for one of the disjoint task streams.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `k(X, X) + jitter·I`.
pub fn kernel_matrix(kind: Kernel, l: f64, sf: f64, xs: &[f64], jitter: f64) -> Result<Tensor> {
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(kind, l, sf, xs[i], xs[j])?;
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += jitter;
    }
    Tensor::new(&[n, n], k)
}

/// One draw of `f(xs)` from the GP prior.
pub fn sample_function(kind: Kernel, l: f64, sf: f64, xs: &[f64], jitter: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = xs.len();
    let l_factor = match cholesky(&kernel_matrix(kind, l, sf, xs, jitter)?) {
        Ok(f) => f,
        Err(Error::NotPositiveDefinite { .. }) => cholesky(&kernel_matrix(kind, l, sf, xs, jitter * 10.0)?)?,
        Err(e) => return Err(e),
    };
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ld = l_factor.data();
    Ok((0..n).map(|i| (0..=i).map(|k| ld[i * n + k] * z[k]).sum()).collect())
}

fn sample_task(cfg: &GpTaskConfig, n: usize, m: usize, rng: &mut impl Rng) -> Result<Task> {
    let l = rng.gen_range(cfg.length_scale[0]..cfg.length_scale[1]);
    let sf = rng.gen_range(cfg.signal_scale[0]..cfg.signal_scale[1]);
    let xs: Vec<f64> = (0..n + m).map(|_| rng.gen_range(cfg.x_range[0]..cfg.x_range[1])).collect();
    let ys = sample_function(cfg.kernel, l, sf, &xs, cfg.jitter, rng)?;
    let col = |v: &[f64]| Tensor::new(&[v.len(), 1], v.to_vec());
    Ok(Task {
        ctx_x: col(&xs[..n])?,
        ctx_y: col(&ys[..n])?,
        tgt_x: col(&xs[n..])?,
        tgt_y: col(&ys[n..])?,
        length_scale: l,
        signal_scale: sf,
    })
}

/// `b` tasks sharing one draw of `(N, M)`; kernel hyperparameters and
/// inputs are drawn per task.
pub fn sample_task_batch(cfg: &GpTaskConfig, b: usize, rng: &mut impl Rng) -> Result<TaskBatch> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.num_context[0]..cfg.num_context[1]);
    let m = rng.gen_range(cfg.min_target..cfg.max_points - n);
    let tasks = (0..b).map(|_| sample_task(cfg, n, m, rng)).collect::<Result<_>>()?;
    Ok(TaskBatch { tasks })
}

impl TaskBatch {
    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::new();
        let mut hypers = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            for (name, v) in [("ctx_x", &t.ctx_x), ("ctx_y", &t.ctx_y), ("tgt_x", &t.tgt_x), ("tgt_y", &t.tgt_y)] {
                tensors.push((format!("{i}.{name}"), v.clone()));
            }
            hypers.push([t.length_scale, t.signal_scale]);
        }
        Archive {
            meta: serde_json::json!({ "kind": "task_batch", "hypers": hypers }),
            tensors,
        }
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let hypers: Vec<[f64; 2]> = serde_json::from_value(ar.meta["hypers"].clone())?;
        let mut tasks = Vec::with_capacity(hypers.len());
        for (i, [l, sf]) in hypers.into_iter().enumerate() {
            let get = |name: &str| {
                ar.get(&format!("{i}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("task archive lacks {i}.{name}")))
            };
            tasks.push(Task {
                ctx_x: get("ctx_x")?,
                ctx_y: get("ctx_y")?,
                tgt_x: get("tgt_x")?,
                tgt_y: get("tgt_y")?,
                length_scale: l,
                signal_scale: sf,
            });
        }
        Ok(TaskBatch { tasks })
    }
}

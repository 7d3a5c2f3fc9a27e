//! Randomised property suites over small models, shared by the CLI `verify`
//! command and the test targets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{fold_slot, UpdateRule};
use crate::cmanp::{Model, ModelConfig, Variant};
use crate::error::Result;
use crate::numerics::{backward, Tensor};
use crate::tasks::task_rng;

const VERIFY_STREAM: u64 = 3;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub passed: usize,
    /// Largest error seen, in the suite's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }
}

/// Max element-wise absolute difference; infinite on shape mismatch or NaN.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if x.is_nan() || y.is_nan() { f64::INFINITY } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

/// A small random model and a context/target set for it.
pub struct Instance {
    pub model: Model,
    pub ctx_x: Tensor,
    pub ctx_y: Tensor,
    pub tgt_x: Tensor,
}

pub fn random_column(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::new(&[n, 1], (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("column shape")
}

pub fn small_config(k: usize, variant: Variant, rng: &mut impl Rng) -> ModelConfig {
    ModelConfig {
        k,
        l_i: rng.gen_range(2..6),
        l_b: rng.gen_range(2..6),
        d_model: 8,
        heads: 2,
        b_c: rng.gen_range(1..9),
        b_q: 2,
        rank: 2,
        variant,
        ..ModelConfig::default()
    }
}

pub fn random_instance(k: usize, n: usize, m: usize, variant: Variant, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = small_config(k, variant, rng);
    let model = Model::init(cfg, rng.gen())?;
    Ok(Instance {
        model,
        ctx_x: random_column(n, -2.0, 2.0, rng),
        ctx_y: random_column(n, -1.0, 1.0, rng),
        tgt_x: random_column(m, -2.0, 2.0, rng),
    })
}

struct Suite {
    report: SuiteReport,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Suite {
            report: SuiteReport {
                name,
                cases: 0,
                passed: 0,
                worst: 0.0,
                tolerance,
                first_failure: None,
            },
        }
    }

    /// Records one case; `err` is compared against the tolerance.
    fn case(&mut self, err: Result<f64>, what: impl FnOnce() -> String) {
        let r = &mut self.report;
        r.cases += 1;
        match err {
            Ok(e) if e <= r.tolerance => {
                r.passed += 1;
                r.worst = r.worst.max(e);
            }
            Ok(e) => {
                r.worst = if e.is_nan() { f64::INFINITY } else { r.worst.max(e) };
                r.first_failure.get_or_insert_with(|| format!("{}: error {e:e}", what()));
            }
            Err(e) => {
                r.worst = f64::INFINITY;
                r.first_failure.get_or_insert_with(|| format!("{}: {e}", what()));
            }
        }
    }
}

/// Absorbing `u` new pairs into a state conditioned on `N` gives the same
/// latents and predictions as conditioning on all `N + u` at once.
pub fn update_recompute(rng: &mut ChaCha8Rng, cases: usize, tol: f64) -> SuiteReport {
    let mut s = Suite::new("update_recompute", tol);
    for _ in 0..cases {
        let k = rng.gen_range(1..4);
        let n = rng.gen_range(4..65);
        let u = rng.gen_range(1..17);
        let desc = || format!("K={k} N={n} u={u}");
        let err = (|| {
            let inst = random_instance(k, n + u, 5, Variant::Diagonal, rng)?;
            let m = &inst.model;
            let (px, nx) = (inst.ctx_x.slice_rows(0, n)?, inst.ctx_x.slice_rows(n, n + u)?);
            let (py, ny) = (inst.ctx_y.slice_rows(0, n)?, inst.ctx_y.slice_rows(n, n + u)?);
            let updated = m.update(&m.condition(&px, &py)?, &nx, &ny)?;
            let full = m.condition(&inst.ctx_x, &inst.ctx_y)?;
            let mut worst: f64 = 0.0;
            for (a, b) in updated.latents(m)?.iter().zip(full.latents(m)?.iter()) {
                worst = worst.max(max_abs_diff(a, b));
            }
            let (pa, pb) = (m.query_diagonal(&updated, &inst.tgt_x)?, m.query_diagonal(&full, &inst.tgt_x)?);
            worst = worst.max(max_abs_diff(&pa.mean, &pb.mean));
            worst = worst.max(max_abs_diff(&pa.variance(), &pb.variance()));
            Ok(worst)
        })();
        s.case(err, desc);
    }
    s.report
}

/// Permuting the context leaves diagonal predictions unchanged.
pub fn context_invariance(rng: &mut ChaCha8Rng, cases: usize, tol: f64) -> SuiteReport {
    let mut s = Suite::new("context_invariance", tol);
    for _ in 0..cases {
        let n = rng.gen_range(2..40);
        let err = (|| {
            let inst = random_instance(rng.gen_range(1..3), n, 6, Variant::Diagonal, rng)?;
            let m = &inst.model;
            let base = m.query_diagonal(&m.condition(&inst.ctx_x, &inst.ctx_y)?, &inst.tgt_x)?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let (px, py) = (inst.ctx_x.select_rows(&perm)?, inst.ctx_y.select_rows(&perm)?);
            let p = m.query_diagonal(&m.condition(&px, &py)?, &inst.tgt_x)?;
            Ok(max_abs_diff(&base.mean, &p.mean).max(max_abs_diff(&base.variance(), &p.variance())))
        })();
        s.case(err, || format!("N={n}"));
    }
    s.report
}

/// Permuting the targets permutes the prediction rows, bit for bit.
pub fn target_equivariance(rng: &mut ChaCha8Rng, cases: usize) -> SuiteReport {
    let mut s = Suite::new("target_equivariance", 0.0);
    for _ in 0..cases {
        let m_count = rng.gen_range(2..20);
        let err = (|| {
            let inst = random_instance(rng.gen_range(1..3), 10, m_count, Variant::Diagonal, rng)?;
            let m = &inst.model;
            let st = m.condition(&inst.ctx_x, &inst.ctx_y)?;
            let base = m.query_diagonal(&st, &inst.tgt_x)?;
            let mut perm: Vec<usize> = (0..m_count).collect();
            perm.shuffle(rng);
            let p = m.query_diagonal(&st, &inst.tgt_x.select_rows(&perm)?)?;
            let same = p.mean == base.mean.select_rows(&perm)? && p.variance() == base.variance().select_rows(&perm)?;
            Ok(if same { 0.0 } else { 1.0 })
        })();
        s.case(err, || format!("M={m_count}"));
    }
    s.report
}

/// Conditioning with any chunk size matches the unchunked training-path
/// forward pass.
pub fn chunk_invariance(rng: &mut ChaCha8Rng, cases: usize, tol: f64) -> SuiteReport {
    let mut s = Suite::new("chunk_invariance", tol);
    for _ in 0..cases {
        let n = rng.gen_range(5..50);
        let err = (|| {
            let inst = random_instance(rng.gen_range(1..4), n, 4, Variant::Diagonal, rng)?;
            let direct = inst
                .model
                .forward(&inst.model.params().constants(), &inst.ctx_x, &inst.ctx_y, &inst.tgt_x)?;
            let mut worst: f64 = 0.0;
            for b_c in [1, 4, 16, n, rng.gen_range(2..n)] {
                let m = Model::new(ModelConfig { b_c, ..*inst.model.config() }, inst.model.params().clone())?;
                let p = m.query_diagonal(&m.condition(&inst.ctx_x, &inst.ctx_y)?, &inst.tgt_x)?;
                worst = worst.max(max_abs_diff(&p.mean, direct.mean.value()));
            }
            Ok(worst)
        })();
        s.case(err, || format!("N={n}"));
    }
    s.report
}

/// Folds random score chunks, some near ±700, and compares the running
/// attention output with a max-shifted softmax over all scores at once.
pub fn stability(rng: &mut ChaCha8Rng, cases: usize, tol: f64, rule: UpdateRule) -> SuiteReport {
    let mut s = Suite::new("stability", tol);
    for case in 0..cases {
        let n = rng.gen_range(2..40);
        let dim = 3;
        let scale = [50.0, 300.0, 700.0][case % 3];
        // A low block followed by a high block: the running normaliser has to
        // jump by more than `scale`, which overflows an unshifted exp at 700.
        let scores: Vec<f64> = (0..n)
            .map(|i| if i < n / 2 { rng.gen_range(-scale..-scale / 2.0) } else { rng.gen_range(scale / 2.0..scale) })
            .collect();
        let values: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let chunk = rng.gen_range(1..n / 2 + 1);

        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let want: Vec<f64> = (0..dim).map(|j| (0..n).map(|i| w[i] * values[i][j]).sum::<f64>() / z).collect();

        let mut emb = vec![0.0; dim];
        let mut lc = None;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let value = |i: usize| &values[start + i][..];
            let mut scratch = vec![0.0; end - start];
            lc = Some(fold_slot(&mut emb, lc, &scores[start..end], &value, &mut scratch, rule));
            start = end;
        }
        let finite = lc.is_some_and(f64::is_finite) && emb.iter().all(|v| v.is_finite());
        let err = if finite {
            emb.iter().zip(&want).map(|(a, b)| (a - b).abs() / b.abs().max(1e-3)).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        s.case(Ok(err), || format!("n={n} scale={scale} chunk={chunk}"));
    }
    s.report
}

/// Relative error, per parameter tensor, between autodiff and central
/// differences on sampled coordinates.
pub fn gradient_check(model: &Model, inst: &Instance, tgt_y: &Tensor, coords: usize, rng: &mut impl Rng) -> Result<Vec<(String, f64)>> {
    let leaves = model.params().leaves();
    let loss = model.loss(&leaves, &inst.ctx_x, &inst.ctx_y, &inst.tgt_x, tgt_y)?;
    let grads = backward(&loss)?;
    let analytic = leaves.tensors_of(|v| grads.get_or_zeros(v));
    let base: Vec<Tensor> = model.params().tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = model.params().tensors().into_iter().map(|(n, _)| n).collect();
    let eval = |values: Vec<Tensor>| -> Result<f64> {
        let m = Model::new_unchecked(*model.config(), model.params().with_tensors(values)?);
        m.loss(&m.params().constants(), &inst.ctx_x, &inst.ctx_y, &inst.tgt_x, tgt_y)?.value().item()
    };
    let h = 1e-6;
    let mut out = Vec::with_capacity(base.len());
    for (i, name) in names.into_iter().enumerate() {
        let len = base[i].len();
        let picks: Vec<usize> = if len <= coords { (0..len).collect() } else { (0..coords).map(|_| rng.gen_range(0..len)).collect() };
        let (mut diff2, mut norm_a, mut norm_f) = (0.0, 0.0, 0.0);
        for j in picks {
            let bump = |d: f64| {
                let mut v = base.clone();
                let mut data = v[i].to_vec();
                data[j] += d;
                v[i] = Tensor::new(v[i].shape(), data)?;
                eval(v)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let a = analytic[i].data()[j];
            diff2 += (a - fd) * (a - fd);
            norm_a += a * a;
            norm_f += fd * fd;
        }
        // Key biases shift every score equally and have zero gradient; there
        // the difference quotient is rounding noise (~eps/h), so the
        // denominator is floored well above it.
        let rel = diff2.sqrt() / f64::max(norm_a, norm_f).sqrt().max(1e-5);
        out.push((name, rel));
    }
    Ok(out)
}

pub fn gradients(rng: &mut ChaCha8Rng, cases: usize, tol: f64) -> SuiteReport {
    let mut s = Suite::new("gradient_check", tol);
    for _ in 0..cases {
        let variant = if rng.gen_bool(0.5) { Variant::Diagonal } else { Variant::And };
        let res = (|| {
            let inst = random_instance(1, rng.gen_range(3..12), rng.gen_range(2..6), variant, rng)?;
            let ty = random_column(inst.tgt_x.rows(), -1.0, 1.0, rng);
            let errs = gradient_check(&inst.model, &inst, &ty, 3, rng)?;
            Ok(errs.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
        })();
        s.case(res, || format!("{variant:?}"));
    }
    s.report
}

/// Every suite at the default tolerances. `inject_fault` swaps the
/// stabilised log-space update for the unstabilised one.
pub fn run_all(seed: u64, cases: usize, inject_fault: bool) -> Report {
    let mut rng = task_rng(seed, VERIFY_STREAM);
    let rule = if inject_fault { UpdateRule::NaiveSoftplus } else { UpdateRule::LogSpace };
    let suites = vec![
        update_recompute(&mut rng, cases, 1e-10),
        chunk_invariance(&mut rng, cases, 1e-10),
        context_invariance(&mut rng, cases, 1e-8),
        target_equivariance(&mut rng, cases),
        stability(&mut rng, cases.max(20), 1e-9, rule),
        gradients(&mut rng, cases.div_ceil(4), 1e-4),
    ];
    Report { seed, suites }
}

//! Counter-based benchmarks. Both run on a single worker thread.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use cmanp::cmanp::Model;
use cmanp::numerics::{measure, Tensor};
use cmanp::tasks::task_rng;
use rand::Rng;
use serde_json::json;

use crate::config::RunConfig;

const BENCH_STREAM: u64 = 7;

/// `n` context pairs with `y = sin(2x)` plus noise.
pub fn synthetic_context(n: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = task_rng(seed, BENCH_STREAM);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin() + 0.1 * rng.gen_range(-1.0..1.0)).collect();
    Ok((Tensor::new(&[n, 1], xs)?, Tensor::new(&[n, 1], ys)?))
}

fn single_worker<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(1).build()?.install(f))
}

pub fn memory(cfg: &RunConfig, model: &Model, out: &Path) -> Result<bool> {
    let sizes = &cfg.bench.sizes;
    if sizes.is_empty() {
        bail!("bench.sizes is empty");
    }
    let mut csv = String::from("n,b_c,peak_scratch_bytes,ops,wall_us\n");
    let mut peaks = Vec::new();
    for &n in sizes {
        let (x, y) = synthetic_context(n, cfg.train.seed)?;
        let b_c = if cfg.bench.chunked { model.config().b_c } else { n };
        let m = Model::new(cmanp::cmanp::ModelConfig { b_c, ..*model.config() }, model.params().clone())?;
        let t0 = Instant::now();
        let (res, meas) = single_worker(|| measure(|| m.condition(&x, &y)))?;
        let wall = t0.elapsed().as_micros();
        res?;
        writeln!(csv, "{n},{b_c},{},{},{wall}", meas.peak_scratch_bytes, meas.ops)?;
        println!("n={n:<6} b_c={b_c:<6} peak_scratch_bytes={:<10} ops={:<12} wall_us={wall}", meas.peak_scratch_bytes, meas.ops);
        peaks.push(meas.peak_scratch_bytes);
    }
    fs::write(out.join("bench_memory.csv"), csv)?;
    let pass = peaks.windows(2).all(|w| w[0] == w[1]);
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&json!({
            "bench": "memory",
            "chunked": cfg.bench.chunked,
            "sizes": sizes,
            "peak_scratch_bytes": peaks,
            "verdict": if pass { "PASS" } else { "FAIL" },
        }))? + "\n",
    )?;
    println!("verdict: {}", if pass { "PASS (peak scratch constant in N)" } else { "FAIL (peak scratch varies with N)" });
    Ok(pass)
}

pub fn update(cfg: &RunConfig, model: &Model, out: &Path) -> Result<bool> {
    let b = &cfg.bench;
    if b.prior_sizes.is_empty() || b.update_sizes.len() < 2 {
        bail!("bench needs at least one prior size and two update sizes");
    }
    let seed = cfg.train.seed;
    let mut csv = String::from("sweep,prior_n,u,ops,refresh_ops,wall_us\n");
    let mut run = |sweep: &str, prior: usize, u: usize| -> Result<u64> {
        let (x, y) = synthetic_context(prior, seed)?;
        let (nx, ny) = synthetic_context(u, seed ^ 0xA5A5)?;
        let mut st = model.condition(&x, &y)?;
        let t0 = Instant::now();
        let (res, meas) = single_worker(|| measure(|| model.absorb(&mut st, &nx, &ny)))?;
        let wall = t0.elapsed().as_micros();
        res?;
        let (res, refresh) = single_worker(|| measure(|| st.refresh(model)))?;
        res?;
        writeln!(csv, "{sweep},{prior},{u},{},{},{wall}", meas.ops, refresh.ops)?;
        println!("{sweep:<6} prior_n={prior:<6} u={u:<4} ops={:<10} refresh_ops={:<10} wall_us={wall}", meas.ops, refresh.ops);
        Ok(meas.ops)
    };
    let prior_ops: Vec<u64> = b.prior_sizes.iter().map(|&n| run("prior", n, b.update_size)).collect::<Result<_>>()?;
    let base = *b.prior_sizes.iter().min().expect("non-empty");
    let u_ops: Vec<u64> = b.update_sizes.iter().map(|&u| run("u", base, u)).collect::<Result<_>>()?;
    fs::write(out.join("bench_update.csv"), csv)?;

    let constant = prior_ops.windows(2).all(|w| w[0] == w[1]);
    let ratios: Vec<f64> = b
        .update_sizes
        .windows(2)
        .zip(u_ops.windows(2))
        .filter(|(u, _)| u[1] == 2 * u[0])
        .map(|(_, o)| o[1] as f64 / o[0] as f64)
        .collect();
    let linear = !ratios.is_empty() && ratios.iter().all(|r| (1.8..=2.2).contains(r));
    let pass = constant && linear;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&json!({
            "bench": "update",
            "prior_sizes": b.prior_sizes,
            "prior_ops": prior_ops,
            "update_sizes": b.update_sizes,
            "update_ops": u_ops,
            "doubling_ratios": ratios,
            "ops_independent_of_prior": constant,
            "linear_in_u": linear,
            "verdict": if pass { "PASS" } else { "FAIL" },
        }))? + "\n",
    )?;
    println!("doubling ratios: {ratios:?}");
    println!("verdict: {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

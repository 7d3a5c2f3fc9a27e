//! Multi-head attention blocks and the incrementally updatable
//! cross-attention state.
//!
//! Blocks are pre-norm transformer blocks: `x + MHA(LN(x), LN(kv))`
//! followed by `+ FFN(LN(·))`. Only the raw multi-head output (before the
//! output projection) depends on the key/value set, so a cross-attention
//! can be summarised by an [`AttnState`]: per head and query slot, the
//! softmax-weighted value average and the log of the softmax normaliser.
//! New key/value rows are folded into that state without revisiting old
//! rows, and the residual/feed-forward tail is replayed from the state by
//! [`state_finish`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::instrument::add_ops;
use crate::numerics::nn::{fingerprint, join, ParamTree, TensorLike};
use crate::numerics::tensor::dot;
use crate::numerics::{softplus, LayerNorm, Linear, Mlp, Tensor, Var};

/// Default chunk size for constant-memory evaluation.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttnConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "heads ({heads}) must divide d_model ({d_model})"
            )));
        }
        Ok(AttnConfig { d_model, heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Score scale `1/sqrt(d_head)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }
}

/// Weights of one attention block.
#[derive(Clone, Debug)]
pub struct AttnWeights<T = Tensor> {
    pub config: AttnConfig,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln_q: LayerNorm<T>,
    /// Separate norm for the key/value side; `None` for self-attention.
    pub ln_kv: Option<LayerNorm<T>>,
    pub ln_ff: LayerNorm<T>,
    pub ff: Mlp<T>,
}

impl AttnWeights<Tensor> {
    fn init(config: AttnConfig, ff_hidden: usize, cross: bool, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        AttnWeights {
            config,
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            ln_q: LayerNorm::init(d),
            ln_kv: cross.then(|| LayerNorm::init(d)),
            ln_ff: LayerNorm::init(d),
            ff: Mlp::init(&[d, ff_hidden, d], rng),
        }
    }

    pub fn init_self(config: AttnConfig, ff_hidden: usize, rng: &mut impl Rng) -> Self {
        Self::init(config, ff_hidden, false, rng)
    }

    pub fn init_cross(config: AttnConfig, ff_hidden: usize, rng: &mut impl Rng) -> Self {
        Self::init(config, ff_hidden, true, rng)
    }

    /// The same weights as graph constants.
    pub fn constants(&self) -> AttnWeights<Var> {
        self.map(&mut |t| Var::constant(t.clone()))
    }
}

impl<T> AttnWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttnWeights<U> {
        AttnWeights {
            config: self.config,
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            ln_q: self.ln_q.map(f),
            ln_kv: self.ln_kv.as_ref().map(|l| l.map(f)),
            ln_ff: self.ln_ff.map(f),
            ff: self.ff.map(f),
        }
    }

    fn kv_norm(&self) -> &LayerNorm<T> {
        self.ln_kv.as_ref().unwrap_or(&self.ln_q)
    }
}

impl<T> ParamTree<T> for AttnWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.ln_q.visit(&join(prefix, "ln_q"), f);
        if let Some(l) = &self.ln_kv {
            l.visit(&join(prefix, "ln_kv"), f);
        }
        self.ln_ff.visit(&join(prefix, "ln_ff"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }
}

// ---- differentiable path ---------------------------------------------------

/// Concatenated per-head `softmax(QKᵀ·scale)·V`, before the output projection.
fn multi_head(q_in: &Var, kv_in: &Var, w: &AttnWeights<Var>) -> Result<Var> {
    let cfg = w.config;
    let q = w.q.forward(q_in)?;
    let k = w.k.forward(kv_in)?;
    let v = w.v.forward(kv_in)?;
    let dh = cfg.d_head();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let scores = q.slice_cols(a, b)?.matmul_nt(&k.slice_cols(a, b)?)?.scale(cfg.scale())?;
        heads.push(scores.softmax_rows()?.matmul(&v.slice_cols(a, b)?)?);
    }
    if heads.len() == 1 {
        return Ok(heads.pop().unwrap());
    }
    Var::concat_cols(&heads.iter().collect::<Vec<_>>())
}

/// Residual and feed-forward tail applied to a raw attention output.
fn block_tail(residual: &Var, raw: &Var, w: &AttnWeights<Var>) -> Result<Var> {
    let x = residual.add(&w.o.forward(raw)?)?;
    let ff = w.ff.forward(&w.ln_ff.forward(&x)?)?;
    x.add(&ff)
}

fn check_width(x: &Tensor, cfg: AttnConfig, op: &'static str) -> Result<()> {
    if x.ndim() != 2 || x.cols() != cfg.d_model {
        return shape_err(op, format!("expected [_, {}], got {:?}", cfg.d_model, x.shape()));
    }
    Ok(())
}

/// Pre-norm self-attention block over the rows of `x`.
pub fn self_attention(x: &Var, w: &AttnWeights<Var>) -> Result<Var> {
    check_width(x.value(), w.config, "self_attention")?;
    if x.value().rows() == 0 {
        return Err(Error::Empty("self-attention over zero rows"));
    }
    let h = w.ln_q.forward(x)?;
    let raw = multi_head(&h, &h, w)?;
    block_tail(x, &raw, w)
}

/// Pre-norm cross-attention block: rows of `q` attend to rows of `kv`.
pub fn cross_attention(q: &Var, kv: &Var, w: &AttnWeights<Var>) -> Result<Var> {
    check_width(q.value(), w.config, "cross_attention")?;
    check_width(kv.value(), w.config, "cross_attention")?;
    if kv.value().rows() == 0 {
        return Err(Error::Empty("cross-attention over zero key/value rows"));
    }
    let hq = w.ln_q.forward(q)?;
    let hkv = w.kv_norm().forward(kv)?;
    let raw = multi_head(&hq, &hkv, w)?;
    block_tail(q, &raw, w)
}

// ---- inference path ----------------------------------------------------------

/// Self-attention block on plain tensors.
pub fn self_attention_block(x: &Tensor, w: &AttnWeights) -> Result<Tensor> {
    Ok(self_attention(&Var::constant(x.clone()), &w.constants())?.value().clone())
}

fn linear(l: &Linear<impl TensorLike>, x: &Tensor) -> Result<Tensor> {
    x.matmul(l.w.tensor())?.add_row(l.b.tensor())
}

fn norm(l: &LayerNorm<impl TensorLike>, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(l.gain.tensor(), l.bias.tensor())
}

/// How new rows are folded into an [`AttnState`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpdateRule {
    /// Stores `log C` and combines via `log C' = log C + softplus(T)`.
    #[default]
    LogSpace,
    /// Same recurrence with `softplus(T)` evaluated as `ln(1 + exp(T))`.
    /// Overflows once `T` exceeds about 709; kept for fault injection.
    NaiveSoftplus,
    /// Textbook linear-space rolling average on `C` itself. Overflows once
    /// `Σ exp(s_i)` leaves the `f64` range; kept as a reference.
    Linear,
}

/// Running cross-attention summary for a fixed set of queries.
///
/// For head `h` and query slot `j`, `emb[h, j]` is the softmax-weighted
/// average of the value rows absorbed so far and `log_c[h, j]` is the log
/// of the softmax normaliser `Σ_i exp(s_i)`, where `s_i` is the scaled
/// query-key score.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnState {
    /// Projected queries `[L_q, d_model]`; constant for the state's lifetime.
    q_proj: Tensor,
    emb: Tensor,
    log_c: Tensor,
    count: usize,
    config: AttnConfig,
    fingerprint: u64,
}

impl AttnState {
    /// An empty state for queries `q` under weights `w`.
    pub fn new<T: TensorLike>(q: &Tensor, w: &AttnWeights<T>) -> Result<Self> {
        let cfg = w.config;
        check_width(q, cfg, "AttnState::new")?;
        if q.rows() == 0 {
            return Err(Error::Empty("attention state with zero query rows"));
        }
        let q_proj = linear(&w.q, &norm(&w.ln_q, q)?)?;
        let lq = q.rows();
        Ok(AttnState {
            q_proj,
            emb: Tensor::zeros(&[cfg.heads, lq, cfg.d_head()]),
            log_c: Tensor::zeros(&[cfg.heads, lq]),
            count: 0,
            config: cfg,
            fingerprint: fingerprint(w),
        })
    }

    /// `[heads, L_q, d_head]` running attention outputs.
    pub fn emb(&self) -> &Tensor {
        &self.emb
    }

    /// `[heads, L_q]` running log-normalisers. Meaningless while `count == 0`.
    pub fn log_c(&self) -> &Tensor {
        &self.log_c
    }

    /// Number of key/value rows absorbed.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn query_rows(&self) -> usize {
        self.q_proj.rows()
    }

    pub fn weight_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Heads re-interleaved as `[L_q, d_model]`.
    pub fn raw_output(&self) -> Result<Tensor> {
        if self.count == 0 {
            return Err(Error::Empty("reading an attention state with no rows"));
        }
        let (heads, dh, lq) = (self.config.heads, self.config.d_head(), self.query_rows());
        let d = self.config.d_model;
        let e = self.emb.data();
        let mut out = vec![0.0; lq * d];
        for h in 0..heads {
            for j in 0..lq {
                let src = &e[(h * lq + j) * dh..(h * lq + j + 1) * dh];
                out[j * d + h * dh..j * d + (h + 1) * dh].copy_from_slice(src);
            }
        }
        Ok(Tensor::raw(vec![lq, d], out))
    }

    fn check_weights<T: TensorLike>(&self, w: &AttnWeights<T>) -> Result<()> {
        let actual = fingerprint(w);
        if actual != self.fingerprint {
            return Err(Error::StaleState {
                expected: self.fingerprint,
                actual,
            });
        }
        Ok(())
    }

    /// Folds new key/value rows into the state with the log-space rule.
    pub fn absorb<T: TensorLike>(&mut self, kv: &Tensor, w: &AttnWeights<T>) -> Result<()> {
        self.absorb_with(kv, w, UpdateRule::LogSpace)
    }

    pub fn absorb_with<T: TensorLike>(
        &mut self,
        kv: &Tensor,
        w: &AttnWeights<T>,
        rule: UpdateRule,
    ) -> Result<()> {
        self.check_weights(w)?;
        self.absorb_unchecked(kv, w, rule)
    }

    /// Work is proportional to `kv.rows() · L_q · d_model`; previously
    /// absorbed rows are never touched. On error the state is unchanged.
    fn absorb_unchecked<T: TensorLike>(
        &mut self,
        kv: &Tensor,
        w: &AttnWeights<T>,
        rule: UpdateRule,
    ) -> Result<()> {
        let cfg = self.config;
        check_width(kv, cfg, "state_update")?;
        let u = kv.rows();
        if u == 0 {
            return Ok(());
        }
        let hkv = norm(w.kv_norm(), kv)?;
        let k = linear(&w.k, &hkv)?;
        let v = linear(&w.v, &hkv)?;
        drop(hkv);

        let (heads, dh, lq, d) = (cfg.heads, cfg.d_head(), self.query_rows(), cfg.d_model);
        let scale = cfg.scale();
        let (qd, kd, vd) = (self.q_proj.data(), k.data(), v.data());
        let mut scores = vec![0.0; heads * lq * u];
        for h in 0..heads {
            for j in 0..lq {
                let qrow = &qd[j * d + h * dh..j * d + (h + 1) * dh];
                let srow = &mut scores[(h * lq + j) * u..(h * lq + j + 1) * u];
                for (i, s) in srow.iter_mut().enumerate() {
                    *s = scale * dot(qrow, &kd[i * d + h * dh..i * d + (h + 1) * dh]);
                }
            }
        }
        let scores = Tensor::raw(vec![heads * lq, u], scores);
        add_ops((heads * lq * u * dh) as u64);

        let mut emb = self.emb.to_vec();
        let mut log_c = self.log_c.to_vec();
        let first = self.count == 0;
        let mut weights = vec![0.0; u];
        for h in 0..heads {
            for j in 0..lq {
                let slot = h * lq + j;
                log_c[slot] = fold_slot(
                    &mut emb[slot * dh..(slot + 1) * dh],
                    (!first).then_some(log_c[slot]),
                    scores.row(slot),
                    &|i| &vd[i * d + h * dh..i * d + (h + 1) * dh],
                    &mut weights,
                    rule,
                );
            }
        }
        add_ops((heads * lq * u * (dh + 2)) as u64);
        let emb = Tensor::raw(self.emb.shape().to_vec(), emb).checked("state_update")?;
        let log_c = Tensor::raw(self.log_c.shape().to_vec(), log_c).checked("state_update")?;
        self.emb = emb;
        self.log_c = log_c;
        self.count += u;
        Ok(())
    }
}

/// Folds `u` scored value rows into one query slot and returns the new
/// log-normaliser. `log_c` is `None` for a slot with nothing absorbed yet.
/// `weights` is scratch of length `u`.
pub fn fold_slot<'a>(
    emb: &mut [f64],
    log_c: Option<f64>,
    scores: &[f64],
    value: &dyn Fn(usize) -> &'a [f64],
    weights: &mut [f64],
    rule: UpdateRule,
) -> f64 {
    let (decay, new_lc) = match (rule, log_c) {
        (UpdateRule::LogSpace, None) => {
            let lc = logsumexp_slice(scores);
            for (w, s) in weights.iter_mut().zip(scores) {
                *w = (s - lc).exp();
            }
            (0.0, lc)
        }
        (UpdateRule::LogSpace | UpdateRule::NaiveSoftplus, Some(lc)) => {
            let max = scores.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s - lc));
            let t = max + scores.iter().map(|s| (s - lc - max).exp()).sum::<f64>().ln();
            let lc_new = if rule == UpdateRule::LogSpace {
                lc + softplus(t)
            } else {
                lc + (1.0 + t.exp()).ln()
            };
            for (w, s) in weights.iter_mut().zip(scores) {
                *w = (s - lc_new).exp();
            }
            ((lc - lc_new).exp(), lc_new)
        }
        (UpdateRule::NaiveSoftplus, None) => {
            let c: f64 = scores.iter().map(|s| s.exp()).sum();
            for (w, s) in weights.iter_mut().zip(scores) {
                *w = s.exp() / c;
            }
            (0.0, c.ln())
        }
        (UpdateRule::Linear, _) => {
            let c_old = log_c.map_or(0.0, f64::exp);
            let mut c_new = c_old;
            for (w, s) in weights.iter_mut().zip(scores) {
                *w = s.exp();
                c_new += *w;
            }
            for w in weights.iter_mut() {
                *w /= c_new;
            }
            (c_old / c_new, c_new.ln())
        }
    };
    for x in emb.iter_mut() {
        *x *= decay;
    }
    for (i, &w) in weights.iter().enumerate() {
        for (x, v) in emb.iter_mut().zip(value(i)) {
            *x += w * v;
        }
    }
    new_lc
}

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-attention block on plain tensors, returning the block output and
/// the state of its raw attention.
pub fn cross_attention_block(q: &Tensor, kv: &Tensor, w: &AttnWeights) -> Result<(Tensor, AttnState)> {
    if kv.rows() == 0 {
        return Err(Error::Empty("cross-attention over zero key/value rows"));
    }
    let mut state = AttnState::new(q, w)?;
    state.absorb_unchecked(kv, w, UpdateRule::LogSpace)?;
    let out = state_finish(&state, q, w)?;
    Ok((out, state))
}

/// Same result as [`cross_attention_block`], folding `kv` in chunks of at
/// most `chunk` rows so scratch memory does not grow with `kv.rows()`.
pub fn chunked_cross_attention(
    q: &Tensor,
    kv: &Tensor,
    w: &AttnWeights,
    chunk: usize,
) -> Result<(Tensor, AttnState)> {
    let state = chunked_state(q, kv, w, chunk, UpdateRule::LogSpace)?;
    let out = state_finish(&state, q, w)?;
    Ok((out, state))
}

/// The raw attention state over `kv`, built chunk by chunk.
pub fn chunked_state(
    q: &Tensor,
    kv: &Tensor,
    w: &AttnWeights,
    chunk: usize,
    rule: UpdateRule,
) -> Result<AttnState> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let n = kv.rows();
    if n == 0 {
        return Err(Error::Empty("cross-attention over zero key/value rows"));
    }
    let mut state = AttnState::new(q, w)?;
    if chunk >= n {
        state.absorb_unchecked(kv, w, rule)?;
        return Ok(state);
    }
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = kv.slice_rows(start, end)?;
        state.absorb_unchecked(&part, w, rule)?;
        start = end;
    }
    Ok(state)
}

/// `state` after absorbing `new_kv`. Leaves the input untouched.
pub fn state_update(state: &AttnState, new_kv: &Tensor, w: &AttnWeights) -> Result<AttnState> {
    let mut next = state.clone();
    next.absorb(new_kv, w)?;
    Ok(next)
}

/// Block output for queries `q` from a raw attention state.
pub fn state_finish<T: TensorLike>(state: &AttnState, q: &Tensor, w: &AttnWeights<T>) -> Result<Tensor> {
    state.check_weights(w)?;
    if q.rows() != state.query_rows() {
        return shape_err(
            "state_finish",
            format!("state has {} query rows, got {}", state.query_rows(), q.rows()),
        );
    }
    let raw = state.raw_output()?;
    let x = q.add(&linear(&w.o, &raw)?)?;
    let mut h = norm(&w.ln_ff, &x)?;
    for (i, layer) in w.ff.layers.iter().enumerate() {
        h = linear(layer, &h)?;
        if i + 1 < w.ff.layers.len() {
            h = h.relu()?;
        }
    }
    x.add(&h)
}

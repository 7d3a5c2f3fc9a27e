//! Constant Memory Attentive Neural Process.
//!
//! Context pairs are embedded and folded into a stack of CMAB blocks whose
//! latents summarise the context in constant space. Targets are embedded
//! independently and cross-attend to each block's latents in turn before a
//! per-point predictor head.

mod and;
pub mod checkpoint;
mod nll;

pub use and::{predict_and, AndPrediction, Feedback};
pub use checkpoint::{load_checkpoint, save_checkpoint, Archive, Checkpoint};
pub use nll::{gaussian_nll_diag, gaussian_nll_joint, nll_diag_var, nll_joint_var, Covariance, GaussianPred};

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, AttnConfig, AttnWeights};
use crate::cmab::{cmab, cmab_absorb, cmab_refresh, CmabCache, CmabWeights};
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{fingerprint, flatten, join, ParamTree};
use crate::numerics::{Mlp, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Independent per-point Gaussians.
    Diagonal,
    /// Joint low-rank Gaussian, trained on full target sets and deployed
    /// autoregressively in blocks of `b_q`.
    And,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stacked CMAB blocks (K).
    pub k: usize,
    /// Input latents per block (L_I).
    pub l_i: usize,
    /// Block latents (L_B).
    pub l_b: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Context chunk size for conditioning (B_C).
    pub b_c: usize,
    /// Autoregressive block size (B_Q).
    pub b_q: usize,
    /// Rank of the covariance factor.
    pub rank: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    /// Lower bound on predicted standard deviations.
    pub std_floor: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 2,
            l_i: 32,
            l_b: 32,
            d_model: 64,
            heads: 4,
            b_c: 64,
            b_q: 5,
            rank: 4,
            x_dim: 1,
            y_dim: 1,
            std_floor: 0.01,
            variant: Variant::And,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("l_i", self.l_i),
            ("l_b", self.l_b),
            ("b_c", self.b_c),
            ("b_q", self.b_q),
            ("rank", self.rank),
            ("x_dim", self.x_dim),
            ("y_dim", self.y_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        AttnConfig::new(self.d_model, self.heads)?;
        if !(self.std_floor > 0.0 && self.std_floor < 1.0) {
            return Err(Error::Config("model.std_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn attn(&self) -> AttnConfig {
        AttnConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    fn ff_hidden(&self) -> usize {
        2 * self.d_model
    }

    /// Head outputs per target point.
    pub fn head_width(&self) -> usize {
        match self.variant {
            Variant::Diagonal => 2 * self.y_dim,
            Variant::And => (2 + self.rank) * self.y_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<T = Tensor> {
    /// Initial latents `[L_I, d_model]`.
    pub lemb0: T,
    pub ctx_embed: Mlp<T>,
    pub query_embed: Mlp<T>,
    pub blocks: Vec<CmabWeights<T>>,
    pub query: Vec<AttnWeights<T>>,
    pub head: Mlp<T>,
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let lemb0 = (0..cfg.l_i * d).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        Ok(ModelParams {
            lemb0: Tensor::new(&[cfg.l_i, d], lemb0)?,
            ctx_embed: Mlp::init(&[cfg.x_dim + cfg.y_dim, d, d], &mut rng),
            query_embed: Mlp::init(&[cfg.x_dim, d, d], &mut rng),
            blocks: (0..cfg.k)
                .map(|_| CmabWeights::init(cfg.attn(), cfg.l_b, cfg.ff_hidden(), &mut rng))
                .collect(),
            query: (0..cfg.k)
                .map(|_| AttnWeights::init_cross(cfg.attn(), cfg.ff_hidden(), &mut rng))
                .collect(),
            head: Mlp::init(&[d, d, cfg.head_width()], &mut rng),
        })
    }

    pub fn constants(&self) -> ModelParams<Var> {
        self.map(&mut |t| Var::constant(t.clone()))
    }

    pub fn leaves(&self) -> ModelParams<Var> {
        self.map(&mut |t| Var::leaf(t.clone()))
    }

    /// Parameters in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        flatten(self)
    }

    /// Rebuilds from tensors in [`ModelParams::tensors`] order.
    pub fn with_tensors(&self, values: Vec<Tensor>) -> Result<Self> {
        let n = self.tensors().len();
        if values.len() != n {
            return shape_err("with_tensors", format!("expected {n} tensors, got {}", values.len()));
        }
        let mut it = values.into_iter();
        let mut bad = None;
        let out = self.map(&mut |old| {
            let t = it.next().unwrap();
            if t.shape() != old.shape() && bad.is_none() {
                bad = Some(format!("{:?} vs {:?}", old.shape(), t.shape()));
            }
            t
        });
        match bad {
            Some(detail) => shape_err("with_tensors", detail),
            None => Ok(out),
        }
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every parameter in canonical order.
    pub fn tensors_of<U>(&self, mut f: impl FnMut(&T) -> U) -> Vec<U> {
        flatten(self).into_iter().map(|(_, t)| f(t)).collect()
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            lemb0: f(&self.lemb0),
            ctx_embed: self.ctx_embed.map(f),
            query_embed: self.query_embed.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            query: self.query.iter().map(|q| q.map(f)).collect(),
            head: self.head.map(f),
        }
    }
}

impl<T> ParamTree<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "lemb0"), &self.lemb0);
        self.ctx_embed.visit(&join(prefix, "ctx_embed"), f);
        self.query_embed.visit(&join(prefix, "query_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        for (i, q) in self.query.iter().enumerate() {
            q.visit(&join(prefix, &format!("query.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Head outputs on one graph.
pub struct HeadOut {
    /// `[M, y_dim]`.
    pub mean: Var,
    /// `[M, y_dim]`, bounded below by the floor.
    pub std: Var,
    /// `[M·y_dim, rank]` for the `and` variant.
    pub factor: Option<Var>,
}

/// Configuration plus weights. Thread-safe; graphs are built per call.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    fingerprint: u64,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::init(&config, 0)?;
        let want = reference.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return shape_err("Model::new", format!("expected {} tensors, got {}", want.len(), got.len()));
        }
        for ((name, a), (_, b)) in want.iter().zip(&got) {
            if a.shape() != b.shape() {
                return shape_err("Model::new", format!("{name}: {:?} vs {:?}", a.shape(), b.shape()));
            }
        }
        let fingerprint = fingerprint(&params);
        Ok(Model {
            config,
            params,
            fingerprint,
        })
    }

    /// Skips the shape check; for parameters derived from a checked model.
    pub(crate) fn new_unchecked(config: ModelConfig, params: ModelParams) -> Self {
        let fingerprint = fingerprint(&params);
        Model {
            config,
            params,
            fingerprint,
        }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check_xy(&self, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        let c = &self.config;
        if x.ndim() != 2 || x.cols() != c.x_dim {
            return shape_err("model", format!("x must be [_, {}], got {:?}", c.x_dim, x.shape()));
        }
        if let Some(y) = y {
            if y.ndim() != 2 || y.cols() != c.y_dim || y.rows() != x.rows() {
                return shape_err(
                    "model",
                    format!("y must be [{}, {}], got {:?}", x.rows(), c.y_dim, y.shape()),
                );
            }
        }
        Ok(())
    }

    /// Full differentiable forward pass on a fresh graph; no cache reuse.
    pub fn forward(
        &self,
        p: &ModelParams<Var>,
        ctx_x: &Tensor,
        ctx_y: &Tensor,
        tgt_x: &Tensor,
    ) -> Result<HeadOut> {
        self.check_xy(ctx_x, Some(ctx_y))?;
        self.check_xy(tgt_x, None)?;
        if ctx_x.rows() == 0 {
            return Err(Error::Empty("conditioning on zero context points"));
        }
        let pairs = Var::constant(Tensor::concat_cols(&[ctx_x, ctx_y])?);
        let ctx = p.ctx_embed.forward(&pairs)?;
        let mut lemb = p.lemb0.clone();
        let mut latents = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            lemb = cmab(&lemb, &ctx, b)?;
            latents.push(lemb.clone());
        }
        self.query_head(p, &latents, tgt_x)
    }

    fn query_head(&self, p: &ModelParams<Var>, latents: &[Var], xs: &Tensor) -> Result<HeadOut> {
        self.check_xy(xs, None)?;
        if xs.rows() == 0 {
            return Err(Error::Empty("query with zero target points"));
        }
        let mut q = p.query_embed.forward(&Var::constant(xs.clone()))?;
        for (w, l) in p.query.iter().zip(latents) {
            q = cross_attention(&q, l, w)?;
        }
        let out = p.head.forward(&q)?;
        let c = &self.config;
        let y = c.y_dim;
        let mean = out.slice_cols(0, y)?;
        let floor = Var::constant(Tensor::full(&[xs.rows(), y], c.std_floor));
        let std = out.slice_cols(y, 2 * y)?.softplus()?.scale(1.0 - c.std_floor)?.add(&floor)?;
        let factor = match c.variant {
            Variant::Diagonal => None,
            Variant::And => Some(
                out.slice_cols(2 * y, (2 + c.rank) * y)?
                    .reshape(&[xs.rows() * y, c.rank])?,
            ),
        };
        Ok(HeadOut { mean, std, factor })
    }

    /// Training loss for one task: mean per-target NLL under the variant's objective.
    pub fn loss(
        &self,
        p: &ModelParams<Var>,
        ctx_x: &Tensor,
        ctx_y: &Tensor,
        tgt_x: &Tensor,
        tgt_y: &Tensor,
    ) -> Result<Var> {
        self.check_xy(tgt_x, Some(tgt_y))?;
        let h = self.forward(p, ctx_x, ctx_y, tgt_x)?;
        match &h.factor {
            None => nll_diag_var(&h.mean, &h.std, tgt_y),
            Some(f) => {
                let var = h.std.mul(&h.std)?.reshape(&[tgt_y.len()])?;
                nll_joint_var(&h.mean, f, &var, tgt_y)
            }
        }
    }

    fn embed_pairs(&self, p: &ModelParams<Var>, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let pairs = Var::constant(Tensor::concat_cols(&[x, y])?);
        Ok(p.ctx_embed.forward(&pairs)?.value().clone())
    }

    /// Encodes a context set. Context rows are embedded and absorbed
    /// `b_c` at a time, so scratch memory does not depend on `N`.
    pub fn condition(&self, x: &Tensor, y: &Tensor) -> Result<ConditionedState> {
        self.check_xy(x, Some(y))?;
        let n = x.rows();
        if n == 0 {
            return Err(Error::Empty("conditioning on zero context points"));
        }
        let mut state = ConditionedState {
            caches: self
                .params
                .blocks
                .iter()
                .map(CmabCache::empty)
                .collect::<Result<_>>()?,
            count: 0,
            fingerprint: self.fingerprint,
        };
        let p = self.params.constants();
        let chunk = self.config.b_c;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let (cx, cy) = if start == 0 && end == n {
                (Cow::Borrowed(x), Cow::Borrowed(y))
            } else {
                (Cow::Owned(x.slice_rows(start, end)?), Cow::Owned(y.slice_rows(start, end)?))
            };
            self.absorb_embedded(&mut state, &self.embed_pairs(&p, &cx, &cy)?)?;
            start = end;
        }
        state.refresh(self)?;
        Ok(state)
    }

    fn absorb_embedded(&self, state: &mut ConditionedState, emb: &Tensor) -> Result<()> {
        for (cache, w) in state.caches.iter_mut().zip(&self.params.blocks) {
            cmab_absorb(cache, emb, w)?;
        }
        state.count += emb.rows();
        Ok(())
    }

    /// Folds new context pairs into `state`. Only the per-block CA1 states
    /// are touched, so the work is linear in the number of new pairs and
    /// independent of how many were absorbed before. Latents are replayed
    /// lazily by the next query or by [`ConditionedState::refresh`].
    pub fn absorb(&self, state: &mut ConditionedState, x: &Tensor, y: &Tensor) -> Result<()> {
        self.check_state(state)?;
        self.check_xy(x, Some(y))?;
        if x.rows() == 0 {
            return Err(Error::Empty("update with zero new context points"));
        }
        let emb = self.embed_pairs(&self.params.constants(), x, y)?;
        self.absorb_embedded(state, &emb)
    }

    /// `state` with `(x, y)` absorbed and latents refreshed.
    pub fn update(&self, state: &ConditionedState, x: &Tensor, y: &Tensor) -> Result<ConditionedState> {
        let mut next = state.clone();
        self.absorb(&mut next, x, y)?;
        next.refresh(self)?;
        Ok(next)
    }

    fn check_state(&self, state: &ConditionedState) -> Result<()> {
        if state.fingerprint != self.fingerprint {
            return Err(Error::StaleState {
                expected: state.fingerprint,
                actual: self.fingerprint,
            });
        }
        Ok(())
    }

    fn query_raw(&self, state: &ConditionedState, xs: &Tensor) -> Result<HeadOut> {
        self.check_state(state)?;
        let latents: Vec<Var> = state.latents(self)?.into_iter().map(Var::constant).collect();
        self.query_head(&self.params.constants(), &latents, xs)
    }

    /// Independent per-point predictions. For the `and` variant these are
    /// the marginals of the joint prediction.
    pub fn query_diagonal(&self, state: &ConditionedState, xs: &Tensor) -> Result<GaussianPred> {
        let h = self.query_raw(state, xs)?;
        let std = h.std.value();
        let mut var = std.mul(std)?;
        if let Some(f) = &h.factor {
            let f = f.value();
            let extra: Vec<f64> = (0..f.rows()).map(|i| f.row(i).iter().map(|a| a * a).sum()).collect();
            var = var.add(&Tensor::new(var.shape(), extra)?)?;
        }
        Ok(GaussianPred {
            mean: h.mean.value().clone(),
            cov: Covariance::Diagonal { var },
        })
    }

    /// Joint low-rank-plus-diagonal prediction over all of `xs`.
    pub fn query_joint(&self, state: &ConditionedState, xs: &Tensor) -> Result<GaussianPred> {
        if self.config.variant != Variant::And {
            return Err(Error::Config("joint queries need the `and` variant".into()));
        }
        let h = self.query_raw(state, xs)?;
        let std = h.std.value();
        let diag = std.mul(std)?.reshape(&[std.len()])?;
        Ok(GaussianPred {
            mean: h.mean.value().clone(),
            cov: Covariance::LowRank {
                factor: h.factor.expect("and variant has a factor").value().clone(),
                diag,
            },
        })
    }
}

/// Encoded context: one CMAB cache per block.
#[derive(Clone, Debug)]
pub struct ConditionedState {
    caches: Vec<CmabCache>,
    count: usize,
    fingerprint: u64,
}

impl ConditionedState {
    /// Number of context pairs absorbed.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn caches(&self) -> &[CmabCache] {
        &self.caches
    }

    pub fn is_fresh(&self) -> bool {
        self.caches.iter().all(CmabCache::is_fresh)
    }

    /// Replays every block from its CA1 state.
    pub fn refresh(&mut self, model: &Model) -> Result<()> {
        model.check_state(self)?;
        if self.is_fresh() {
            return Ok(());
        }
        let mut prev = model.params.lemb0.clone();
        for (cache, w) in self.caches.iter_mut().zip(&model.params.blocks) {
            prev = cmab_refresh(cache, &prev, w)?;
        }
        Ok(())
    }

    /// `LEMB_1..LEMB_K`; replayed on the fly if the state is not fresh.
    pub fn latents(&self, model: &Model) -> Result<Vec<Tensor>> {
        if self.is_fresh() {
            return Ok(self.caches.iter().map(|c| c.oemb.clone()).collect());
        }
        let mut copy = self.clone();
        copy.refresh(model)?;
        Ok(copy.caches.into_iter().map(|c| c.oemb).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::instrument::measure;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small(variant: Variant) -> Model {
        let cfg = ModelConfig {
            k: 2,
            l_i: 4,
            l_b: 4,
            d_model: 8,
            heads: 2,
            b_c: 3,
            b_q: 2,
            rank: 2,
            variant,
            ..ModelConfig::default()
        };
        Model::init(cfg, 7).unwrap()
    }

    fn data(n: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin() + rng.gen_range(-0.1..0.1)).collect();
        (Tensor::new(&[n, 1], x).unwrap(), Tensor::new(&[n, 1], y).unwrap())
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn condition_matches_graph_forward() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = data(10, &mut rng);
        let (tx, _) = data(4, &mut rng);
        let st = m.condition(&x, &y).unwrap();
        let pred = m.query_diagonal(&st, &tx).unwrap();
        let h = m.forward(&m.params().constants(), &x, &y, &tx).unwrap();
        assert!(max_diff(&pred.mean, h.mean.value()) < 1e-10);
    }

    #[test]
    fn context_permutation_invariance() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = data(9, &mut rng);
        let mut idx: Vec<usize> = (0..9).collect();
        idx.shuffle(&mut rng);
        let a = m.condition(&x, &y).unwrap();
        let b = m.condition(&x.select_rows(&idx).unwrap(), &y.select_rows(&idx).unwrap()).unwrap();
        for (la, lb) in a.latents(&m).unwrap().iter().zip(&b.latents(&m).unwrap()) {
            assert!(max_diff(la, lb) < 1e-9);
        }
    }

    #[test]
    fn single_point_and_determinism() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = data(1, &mut rng);
        let a = m.condition(&x, &y).unwrap().latents(&m).unwrap();
        let b = m.condition(&x, &y).unwrap().latents(&m).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn target_rows_are_independent() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = data(6, &mut rng);
        let (tx, _) = data(10, &mut rng);
        let st = m.condition(&x, &y).unwrap();
        let batch = m.query_diagonal(&st, &tx).unwrap();
        for i in 0..10 {
            let one = m.query_diagonal(&st, &tx.slice_rows(i, i + 1).unwrap()).unwrap();
            assert_eq!(one.mean.row(0), batch.mean.row(i));
            assert_eq!(one.variance().row(0), batch.variance().row(i));
        }
        let mut idx: Vec<usize> = (0..10).collect();
        idx.shuffle(&mut rng);
        let perm = m.query_diagonal(&st, &tx.select_rows(&idx).unwrap()).unwrap();
        assert_eq!(perm.mean, batch.mean.select_rows(&idx).unwrap());
        let twice = Tensor::concat_rows(&[&tx.slice_rows(0, 1).unwrap(), &tx.slice_rows(0, 1).unwrap()]).unwrap();
        let p2 = m.query_diagonal(&st, &twice).unwrap();
        assert_eq!(p2.mean.row(0), p2.mean.row(1));
    }

    #[test]
    fn update_matches_recondition() {
        for variant in [Variant::Diagonal, Variant::And] {
            let m = small(variant);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (x, y) = data(11, &mut rng);
            let (tx, _) = data(5, &mut rng);
            let st = m.condition(&x.slice_rows(0, 7).unwrap(), &y.slice_rows(0, 7).unwrap()).unwrap();
            let up = m.update(&st, &x.slice_rows(7, 11).unwrap(), &y.slice_rows(7, 11).unwrap()).unwrap();
            let full = m.condition(&x, &y).unwrap();
            for (a, b) in up.latents(&m).unwrap().iter().zip(&full.latents(&m).unwrap()) {
                assert!(max_diff(a, b) < 1e-10);
            }
            let (pa, pb) = (m.query_diagonal(&up, &tx).unwrap(), m.query_diagonal(&full, &tx).unwrap());
            assert!(max_diff(&pa.mean, &pb.mean) < 1e-8);
            assert!(max_diff(&pa.variance(), &pb.variance()) < 1e-8);
        }
    }

    #[test]
    fn empty_update_rejected() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = data(3, &mut rng);
        let st = m.condition(&x, &y).unwrap();
        let e = Tensor::zeros(&[0, 1]);
        assert!(matches!(m.update(&st, &e, &e), Err(Error::Empty(_))));
        assert!(matches!(m.condition(&e, &e), Err(Error::Empty(_))));
    }

    #[test]
    fn update_ops_independent_of_prior_n() {
        let m = small(Variant::Diagonal);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (nx, ny) = data(4, &mut rng);
        let mut ops = Vec::new();
        for n in [100, 10000] {
            let (x, y) = data(n, &mut rng);
            let mut st = m.condition(&x, &y).unwrap();
            let (_, meas) = measure(|| m.absorb(&mut st, &nx, &ny).unwrap());
            ops.push(meas.ops);
        }
        assert_eq!(ops[0], ops[1]);
    }

    #[test]
    fn stale_state_rejected() {
        let m = small(Variant::Diagonal);
        let other = Model::init(*m.config(), 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y) = data(3, &mut rng);
        let st = m.condition(&x, &y).unwrap();
        assert!(matches!(other.query_diagonal(&st, &x), Err(Error::StaleState { .. })));
    }

    #[test]
    fn joint_pred_is_positive_definite() {
        let m = small(Variant::And);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = data(5, &mut rng);
        let (tx, ty) = data(6, &mut rng);
        let st = m.condition(&x, &y).unwrap();
        let p = m.query_joint(&st, &tx).unwrap();
        let cov = p.dense_cov().unwrap();
        crate::numerics::linalg::cholesky(&cov).unwrap();
        assert!(gaussian_nll_joint(&p, &ty).unwrap().is_finite());
        let marg = m.query_diagonal(&st, &tx).unwrap();
        for i in 0..6 {
            assert!((marg.variance().at(i, 0) - cov.at(i, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn rebuild_from_tensors_checks_shapes() {
        let m = small(Variant::And);
        let ts: Vec<Tensor> = m.params().tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let same = m.params().with_tensors(ts.clone()).unwrap();
        assert_eq!(fingerprint(&same), m.fingerprint());
        let mut bad = ts;
        bad[0] = Tensor::zeros(&[1, 1]);
        assert!(m.params().with_tensors(bad).is_err());
    }
}

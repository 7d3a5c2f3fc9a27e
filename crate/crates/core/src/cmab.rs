//! Constant Memory Attention Block: `SA(CA(IEMB, SA(CA(BEMB, INPUT))))`.
//!
//! Only the first cross-attention sees the (unbounded) input. Its raw state
//! is cached; everything downstream of it has fixed size and is replayed
//! from the cache after new rows are absorbed.

use rand::Rng;

use crate::attention::{
    chunked_state, cross_attention, cross_attention_block, self_attention, self_attention_block,
    state_finish, AttnConfig, AttnState, AttnWeights, UpdateRule,
};
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::{fingerprint, join, ParamTree};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct CmabWeights<T = Tensor> {
    /// Learned block latents `[L_B, d_model]`.
    pub bemb: T,
    pub ca1: AttnWeights<T>,
    pub sa1: AttnWeights<T>,
    pub ca2: AttnWeights<T>,
    pub sa2: AttnWeights<T>,
}

impl CmabWeights<Tensor> {
    pub fn init(config: AttnConfig, l_b: usize, ff_hidden: usize, rng: &mut impl Rng) -> Self {
        let bemb = (0..l_b * config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CmabWeights {
            bemb: Tensor::raw(vec![l_b, config.d_model], bemb),
            ca1: AttnWeights::init_cross(config, ff_hidden, rng),
            sa1: AttnWeights::init_self(config, ff_hidden, rng),
            ca2: AttnWeights::init_cross(config, ff_hidden, rng),
            sa2: AttnWeights::init_self(config, ff_hidden, rng),
        }
    }

    pub fn constants(&self) -> CmabWeights<Var> {
        self.map(&mut |t| Var::constant(t.clone()))
    }
}

impl<T> CmabWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> CmabWeights<U> {
        CmabWeights {
            bemb: f(&self.bemb),
            ca1: self.ca1.map(f),
            sa1: self.sa1.map(f),
            ca2: self.ca2.map(f),
            sa2: self.sa2.map(f),
        }
    }
}

impl<T> ParamTree<T> for CmabWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "bemb"), &self.bemb);
        self.ca1.visit(&join(prefix, "ca1"), f);
        self.sa1.visit(&join(prefix, "sa1"), f);
        self.ca2.visit(&join(prefix, "ca2"), f);
        self.sa2.visit(&join(prefix, "sa2"), f);
    }
}

/// Differentiable block on a fresh graph. Used for training.
pub fn cmab(iemb: &Var, input: &Var, w: &CmabWeights<Var>) -> Result<Var> {
    let demb = self_attention(&cross_attention(&w.bemb, input, &w.ca1)?, &w.sa1)?;
    self_attention(&cross_attention(iemb, &demb, &w.ca2)?, &w.sa2)
}

#[derive(Clone, Debug)]
pub struct CmabCache {
    /// Raw state of `CA(BEMB, INPUT)`.
    pub ca1: AttnState,
    pub demb: Tensor,
    pub oemb: Tensor,
    fingerprint: u64,
    /// False once rows were absorbed after the last replay.
    fresh: bool,
}

impl CmabCache {
    /// A cache with nothing absorbed. Must absorb rows before it is refreshed.
    pub fn empty(w: &CmabWeights) -> Result<Self> {
        Ok(CmabCache {
            ca1: AttnState::new(&w.bemb, &w.ca1)?,
            demb: Tensor::zeros(&[0, w.ca1.config.d_model]),
            oemb: Tensor::zeros(&[0, w.ca1.config.d_model]),
            fingerprint: fingerprint(w),
            fresh: false,
        })
    }

    /// Whether `demb`/`oemb` reflect every absorbed row.
    pub fn is_fresh(&self) -> bool {
        self.fresh
    }

    pub fn weight_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check(&self, w: &CmabWeights) -> Result<()> {
        let actual = fingerprint(w);
        if actual != self.fingerprint {
            return Err(Error::StaleState {
                expected: self.fingerprint,
                actual,
            });
        }
        Ok(())
    }
}

/// Fixed-size tail: DEMB from the CA1 state, then OEMB from IEMB and DEMB.
pub fn replay(ca1: &AttnState, iemb: &Tensor, w: &CmabWeights) -> Result<(Tensor, Tensor)> {
    let demb = self_attention_block(&state_finish(ca1, &w.bemb, &w.ca1)?, &w.sa1)?;
    let (x, _) = cross_attention_block(iemb, &demb, &w.ca2)?;
    let oemb = self_attention_block(&x, &w.sa2)?;
    Ok((demb, oemb))
}

fn check_input(input: &Tensor, w: &CmabWeights) -> Result<()> {
    let d = w.ca1.config.d_model;
    if input.ndim() != 2 || input.cols() != d {
        return shape_err("cmab", format!("expected input [_, {d}], got {:?}", input.shape()));
    }
    Ok(())
}

/// Block output with CA1 folded over `chunk`-row slices of `input`.
pub fn cmab_forward(
    iemb: &Tensor,
    input: &Tensor,
    w: &CmabWeights,
    chunk: usize,
) -> Result<(Tensor, CmabCache)> {
    check_input(input, w)?;
    if input.rows() == 0 {
        return Err(Error::Empty("CMAB over zero input rows"));
    }
    if iemb.rows() == 0 {
        return Err(Error::Empty("CMAB with zero input latents"));
    }
    let ca1 = chunked_state(&w.bemb, input, &w.ca1, chunk, UpdateRule::LogSpace)?;
    let (demb, oemb) = replay(&ca1, iemb, w)?;
    let cache = CmabCache {
        ca1,
        demb,
        oemb: oemb.clone(),
        fingerprint: fingerprint(w),
        fresh: true,
    };
    Ok((oemb, cache))
}

/// Folds new rows into the CA1 state only. Work is linear in `new_input.rows()`.
/// `demb`/`oemb` are left as they were until [`cmab_refresh`].
pub fn cmab_absorb(cache: &mut CmabCache, new_input: &Tensor, w: &CmabWeights) -> Result<()> {
    cache.check(w)?;
    check_input(new_input, w)?;
    if new_input.rows() > 0 {
        cache.ca1.absorb(new_input, &w.ca1)?;
        cache.fresh = false;
    }
    Ok(())
}

/// Recomputes `demb`/`oemb` from the CA1 state.
pub fn cmab_refresh(cache: &mut CmabCache, iemb: &Tensor, w: &CmabWeights) -> Result<Tensor> {
    cache.check(w)?;
    let (demb, oemb) = replay(&cache.ca1, iemb, w)?;
    cache.demb = demb;
    cache.oemb = oemb.clone();
    cache.fresh = true;
    Ok(oemb)
}

/// Output over `input ∪ new_input` without revisiting `input`.
pub fn cmab_update(
    cache: &CmabCache,
    iemb: &Tensor,
    new_input: &Tensor,
    w: &CmabWeights,
) -> Result<(Tensor, CmabCache)> {
    if new_input.rows() == 0 {
        return Err(Error::Empty("CMAB update with zero new rows"));
    }
    let mut next = cache.clone();
    cmab_absorb(&mut next, new_input, w)?;
    let oemb = cmab_refresh(&mut next, iemb, w)?;
    Ok((oemb, next))
}

/// `LEMB_i = CMAB(LEMB_{i-1}, INPUT)` for `i = 1..=K`. Every block reads the same input.
pub fn cmab_stack_forward(
    lemb0: &Tensor,
    input: &Tensor,
    blocks: &[CmabWeights],
    chunk: usize,
) -> Result<(Vec<Tensor>, Vec<CmabCache>)> {
    if blocks.is_empty() {
        return Err(Error::Config("CMAB stack needs at least one block".into()));
    }
    let mut lemb = Vec::with_capacity(blocks.len());
    let mut caches = Vec::with_capacity(blocks.len());
    let mut prev = lemb0.clone();
    for w in blocks {
        let (out, cache) = cmab_forward(&prev, input, w, chunk)?;
        prev = out.clone();
        lemb.push(out);
        caches.push(cache);
    }
    Ok((lemb, caches))
}

/// Stack output over `input ∪ new_input`. Block `i` absorbs the new rows and
/// is replayed with the updated output of block `i−1` as its latents.
pub fn cmab_stack_update(
    lemb0: &Tensor,
    caches: &[CmabCache],
    new_input: &Tensor,
    blocks: &[CmabWeights],
) -> Result<(Vec<Tensor>, Vec<CmabCache>)> {
    if caches.len() != blocks.len() {
        return shape_err(
            "cmab_stack_update",
            format!("{} caches for {} blocks", caches.len(), blocks.len()),
        );
    }
    let mut lemb = Vec::with_capacity(blocks.len());
    let mut next = Vec::with_capacity(blocks.len());
    let mut prev = lemb0.clone();
    for (cache, w) in caches.iter().zip(blocks) {
        let (out, c) = cmab_update(cache, &prev, new_input, w)?;
        prev = out.clone();
        lemb.push(out);
        next.push(c);
    }
    Ok((lemb, next))
}

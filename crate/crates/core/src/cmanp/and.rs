use rand::Rng;

use super::{ConditionedState, GaussianPred, Model};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// What is fed back into the context after each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feedback {
    /// A draw from the block's joint Gaussian.
    Sample,
    /// The block mean.
    Mean,
    /// The true targets (requires `ys`).
    Observed,
}

#[derive(Clone, Debug)]
pub struct AndPrediction {
    /// One joint prediction per block, in target order.
    pub blocks: Vec<GaussianPred>,
    /// Per-block log-likelihood of `ys` when given.
    pub log_lik: Option<Vec<f64>>,
    /// Values absorbed after each block except the last.
    pub fed_back: Vec<Tensor>,
}

impl AndPrediction {
    pub fn total_log_lik(&self) -> Option<f64> {
        self.log_lik.as_ref().map(|v| v.iter().sum())
    }
}

/// Predicts `xs` in consecutive blocks of `block` targets. After each block
/// but the last, the block's inputs and fed-back outputs are absorbed into a
/// copy of `state`; `state` itself is left untouched.
pub fn predict_and(
    model: &Model,
    state: &ConditionedState,
    xs: &Tensor,
    ys: Option<&Tensor>,
    block: usize,
    feedback: Feedback,
    rng: &mut impl Rng,
) -> Result<AndPrediction> {
    if block == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    let m = xs.rows();
    if m == 0 {
        return Err(Error::Empty("autoregressive prediction with zero targets"));
    }
    if feedback == Feedback::Observed && ys.is_none() {
        return Err(Error::Config("observed feedback needs targets".into()));
    }
    let mut st = state.clone();
    let mut out = AndPrediction {
        blocks: Vec::with_capacity(m.div_ceil(block)),
        log_lik: ys.map(|_| Vec::new()),
        fed_back: Vec::new(),
    };
    let mut start = 0;
    while start < m {
        let end = start.saturating_add(block).min(m);
        let bx = xs.slice_rows(start, end)?;
        let pred = model.query_joint(&st, &bx)?;
        let by = ys.map(|y| y.slice_rows(start, end)).transpose()?;
        if let (Some(ll), Some(by)) = (out.log_lik.as_mut(), &by) {
            ll.push(pred.log_likelihood(by)?);
        }
        if end < m {
            let fed = match feedback {
                Feedback::Sample => pred.sample(rng)?,
                Feedback::Mean => pred.mean.clone(),
                Feedback::Observed => by.clone().expect("checked above"),
            };
            model.absorb(&mut st, &bx, &fed)?;
            st.refresh(model)?;
            out.fed_back.push(fed);
        }
        out.blocks.push(pred);
        start = end;
    }
    Ok(out)
}

use caforge_tensor::{Graph, ParamStore, Tensor, Var};

use crate::auction::AuctionConfig;
use crate::error::{Error, Result};

/// Allocation `[batch, n, k]` and payments `[batch, n]` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Outcome {
    pub allocation: Var,
    pub payments: Var,
}

/// A direct-revelation mechanism evaluated on batches of bid profiles.
pub trait Mechanism: Sync {
    fn config(&self) -> &AuctionConfig;

    fn name(&self) -> &str;

    /// Trainable parameters, if any. [`Mechanism::forward`] receives them
    /// bound on the graph in store order.
    fn params(&self) -> Option<&ParamStore> {
        None
    }

    fn forward(&self, g: &mut Graph, params: &[Var], bids: Var) -> Result<Outcome>;
}

/// Binds the mechanism's parameters as constants and runs it once.
/// Returns (allocation, payments).
pub fn run(mech: &dyn Mechanism, bids: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let params = bind_frozen(mech, &mut g);
    let b = g.constant(bids.clone());
    let out = mech.forward(&mut g, &params, b)?;
    Ok((g.value(out.allocation).clone(), g.value(out.payments).clone()))
}

pub(crate) fn bind_frozen(mech: &dyn Mechanism, g: &mut Graph) -> Vec<Var> {
    mech.params().map(|p| p.bind(g, false)).unwrap_or_default()
}

pub(crate) fn check_bids(g: &Graph, bids: Var, config: &AuctionConfig) -> Result<usize> {
    match *g.shape(bids) {
        [batch, n, k] if n == config.bidders() && k == config.bundles() => Ok(batch),
        ref other => Err(Error::config(format!(
            "bids must be [batch, {}, {}], got {other:?}",
            config.bidders(),
            config.bundles()
        ))),
    }
}

/// Payment of each bidder as a fraction of the reported value of its
/// allocation: `p_i = frac_i · Σ_S z_iS · b_iS`.
pub fn price(g: &mut Graph, fractions: Var, allocation: Var, bids: Var) -> Result<Var> {
    let rank = g.shape(allocation).len();
    let reported = g.mul(allocation, bids)?;
    let reported = g.sum_axis(reported, rank - 1, false)?;
    Ok(g.mul(fractions, reported)?)
}

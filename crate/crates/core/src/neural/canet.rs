//! Two fully connected tanh networks over the flattened bid matrix: one
//! emits the three allocation heads, the other the pricing fractions.

use caforge_tensor::nn::linear;
use caforge_tensor::{glorot_uniform, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::{Bound, Heads};
use crate::auction::AuctionConfig;
use crate::error::Result;

pub(super) fn init(config: &AuctionConfig, hidden: &[usize], rng: &mut impl Rng) -> Result<ParamStore> {
    let (n, m, k) = (config.bidders(), config.items(), config.bundles());
    let mut store = ParamStore::new();
    let mut dense = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
        store.insert(format!("{name}.weight"), glorot_uniform(&[fan_in, fan_out], rng))?;
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(())
    };
    for net in ["alloc", "price"] {
        let mut width = n * k;
        for (l, &h) in hidden.iter().enumerate() {
            dense(&mut store, &format!("{net}.{l}"), width, h)?;
            width = h;
        }
        if net == "alloc" {
            dense(&mut store, "alloc.agent", width, n * k)?;
            dense(&mut store, "alloc.bundle", width, n * k)?;
            dense(&mut store, "alloc.item", width, m * k)?;
        } else {
            dense(&mut store, "price.out", width, n)?;
        }
    }
    Ok(store)
}

fn trunk(g: &mut Graph, p: &Bound, net: &str, layers: usize, mut x: Var) -> Result<Var> {
    for l in 0..layers {
        let w = p.get(&format!("{net}.{l}.weight"));
        let b = p.get(&format!("{net}.{l}.bias"));
        let h = linear(g, x, w, Some(b))?;
        x = g.tanh(h);
    }
    Ok(x)
}

fn head(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    Ok(linear(g, x, w, Some(b))?)
}

pub(super) fn forward(
    g: &mut Graph,
    p: &Bound,
    config: &AuctionConfig,
    layers: usize,
    bids: Var,
    batch: usize,
) -> Result<Heads> {
    let (n, m, k) = (config.bidders(), config.items(), config.bundles());
    let flat = g.reshape(bids, &[batch, n * k])?;

    let h = trunk(g, p, "alloc", layers, flat)?;
    let agent = head(g, p, "alloc.agent", h)?;
    let agent = g.reshape(agent, &[batch, n, k])?;
    let bundle = head(g, p, "alloc.bundle", h)?;
    let bundle = g.reshape(bundle, &[batch, n, k])?;
    let item = head(g, p, "alloc.item", h)?;
    let item = g.reshape(item, &[batch, m, k])?;

    let h = trunk(g, p, "price", layers, flat)?;
    let out = head(g, p, "price.out", h)?;
    let fractions = g.sigmoid(out);
    Ok(Heads {
        agent,
        bundle,
        item,
        fractions,
    })
}

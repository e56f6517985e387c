#![allow(dead_code)]

use caforge_core::auction::AuctionConfig;
use caforge_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Bundle index that bundle `s` maps to when item j is renamed `perm[j]`.
pub fn relabel_bundle(config: &AuctionConfig, perm: &[usize], s: usize) -> usize {
    let mask = config.bundle_mask(s);
    let mut out = 0u32;
    for (j, &to) in perm.iter().enumerate() {
        if mask >> j & 1 == 1 {
            out |= 1 << to;
        }
    }
    config.bundle_index(out)
}

/// Applies an item relabeling to the last (bundle) axis of `[.., k]`.
pub fn relabel_columns(t: &Tensor, config: &AuctionConfig, perm: &[usize]) -> Tensor {
    let k = config.bundles();
    let mut out = t.clone();
    for (row_in, row_out) in t.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        for s in 0..k {
            row_out[relabel_bundle(config, perm, s)] = row_in[s];
        }
    }
    out
}

/// Swaps two rows along axis 1 of `[batch, rows, cols]`.
pub fn swap_rows(t: &Tensor, a: usize, b: usize) -> Tensor {
    let s = t.shape();
    let (rows, cols) = (s[1], s[2]);
    let mut out = t.clone();
    for bi in 0..s[0] {
        for c in 0..cols {
            let ia = (bi * rows + a) * cols + c;
            let ib = (bi * rows + b) * cols + c;
            out.data_mut()[ia] = t.data()[ib];
            out.data_mut()[ib] = t.data()[ia];
        }
    }
    out
}

/// Swaps two columns of `[batch, n]`.
pub fn swap_cols(t: &Tensor, a: usize, b: usize) -> Tensor {
    let n = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        row.swap(a, b);
    }
    out
}

/// Central finite-difference relative error of `d loss / d leaves`. The
/// closure rebuilds the loss from the given leaf values on a fresh graph;
/// `analytic` holds the reverse-mode gradients in the same layout.
pub fn fd_max_rel_error(leaves: &[Tensor], analytic: &[Tensor], eps: f64, loss: impl Fn(&[Tensor]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut work = leaves.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let orig = leaf.data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = loss(&work);
            work[i].data_mut()[e] = orig - eps;
            let minus = loss(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn value_of(g: &Graph, v: caforge_tensor::Var) -> Tensor {
    g.value(v).clone()
}

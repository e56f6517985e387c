//! Analytic gradients of every primitive against central finite differences.

use caforge_tensor::nn::{self, AttentionWeights};
use caforge_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(f(inputs) * weights)` for fixed random weights so that the
/// check sees a generic upstream gradient.
fn build<F>(g: &mut Graph, inputs: &[Tensor], track: bool, f: &F, seed: u64) -> Result<(Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if track {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok((vars, g.sum(prod)))
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let (_, loss) = build(&mut g, inputs, false, f, 99).unwrap();
    g.value(loss).item()
}

/// Largest relative error over all input elements; the denominator is
/// floored at 1e-5 so exact zeros (e.g. attention key biases,
/// which cancel inside the softmax) compare absolutely.
fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let (vars, loss) = build(&mut g, inputs, true, &f, 99).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.shape());
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= EPS;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * EPS);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}

fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let err = max_rel_error(inputs, f);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut r = rng();
    let a = random(&[3, 4], -3.0, 3.0, &mut r);
    let b = random(&[4], -3.0, 3.0, &mut r);
    let c = random(&[3, 1], -3.0, 3.0, &mut r);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("mul same shape", &[a.clone(), a.map(|x| x * 0.7 - 0.2)], |g, v| {
        g.mul(v[0], v[1])
    });
    check("minimum", &[a.clone(), c], |g, v| g.minimum(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let x = random(&[2, 5], -3.0, 3.0, &mut r);
    let pos = random(&[2, 5], 0.1, 3.0, &mut r);
    check("scale", &[x.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", &[x.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("exp", &[x.clone()], |g, v| Ok(g.exp(v[0])));
    check("log", &[pos], |g, v| Ok(g.log(v[0])));
    check("tanh", &[x.clone()], |g, v| Ok(g.tanh(v[0])));
    check("sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check("clamp_min", &[x.clone()], |g, v| Ok(g.clamp_min(v[0], 0.1)));
    check("clamp_max", &[x.clone()], |g, v| Ok(g.clamp_max(v[0], -0.2)));
    let mask = Tensor::new(vec![5], vec![1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    check("masked_fill", &[x], move |g, v| g.masked_fill(v[0], &mask, 7.0));
}

#[test]
fn matmul_variants() {
    let mut r = rng();
    let a = random(&[3, 4], -3.0, 3.0, &mut r);
    let b = random(&[4, 2], -3.0, 3.0, &mut r);
    check("matmul 2d", &[a, b.clone()], |g, v| g.matmul(v[0], v[1]));
    let a3 = random(&[2, 3, 4], -3.0, 3.0, &mut r);
    check("matmul shared rhs", &[a3.clone(), b], |g, v| g.matmul(v[0], v[1]));
    let b3 = random(&[2, 4, 5], -3.0, 3.0, &mut r);
    check("matmul batched", &[a3.clone(), b3], |g, v| g.matmul(v[0], v[1]));
    let b1 = random(&[1, 4, 5], -3.0, 3.0, &mut r);
    check("matmul broadcast batch", &[a3, b1], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn layout_ops() {
    let mut r = rng();
    let x = random(&[2, 3, 4], -3.0, 3.0, &mut r);
    let y = random(&[2, 1, 4], -3.0, 3.0, &mut r);
    check("permute", &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", &[x.clone()], |g, v| g.transpose(v[0], 1, 2));
    check("reshape", &[x.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check("broadcast_to", &[y.clone()], |g, v| g.broadcast_to(v[0], &[3, 2, 5, 4]));
    check("concat", &[x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1));
    check("select", &[x], |g, v| g.select(v[0], 2, &[3, 0, 3]));
}

#[test]
fn reductions() {
    let mut r = rng();
    let x = random(&[3, 4, 2], -3.0, 3.0, &mut r);
    check("sum_axis", &[x.clone()], |g, v| g.sum_axis(v[0], 1, false));
    check("mean_axis", &[x.clone()], |g, v| g.mean_axis(v[0], 2, true));
    check("sum", &[x.clone()], |g, v| Ok(g.sum(v[0])));
    check("mean", &[x.clone()], |g, v| Ok(g.mean(v[0])));
    check("min_axis", &[x], |g, v| g.min_axis(v[0], 1, false));
}

#[test]
fn softmax_with_temperature() {
    let mut r = rng();
    let x = random(&[3, 4], -3.0, 3.0, &mut r);
    check("softmax axis 1 theta 15", &[x.clone()], |g, v| g.softmax(v[0], 1, 15.0));
    check("softmax axis 0 theta 1", &[x], |g, v| g.softmax(v[0], 0, 1.0));
}

#[test]
fn multi_head_attention() {
    let mut r = rng();
    let d = 4;
    let mut inputs = vec![random(&[3, 5, d], -3.0, 3.0, &mut r)];
    for _ in 0..4 {
        inputs.push(random(&[d, d], -0.8, 0.8, &mut r));
        inputs.push(random(&[d], -0.5, 0.5, &mut r));
    }
    check("attention", &inputs, |g, v| {
        let w = AttentionWeights {
            query: v[1],
            query_bias: v[2],
            key: v[3],
            key_bias: v[4],
            value: v[5],
            value_bias: v[6],
            output: v[7],
            output_bias: v[8],
        };
        Ok(nn::multi_head_self_attention(g, v[0], &w, 2)?.output)
    });
}

#[test]
fn composite_chain() {
    // a small two-layer network with every nonlinearity in sequence
    let mut r = rng();
    let x = random(&[5, 3], -3.0, 3.0, &mut r);
    let w1 = random(&[3, 6], -1.0, 1.0, &mut r);
    let b1 = random(&[6], -1.0, 1.0, &mut r);
    let w2 = random(&[6, 4], -1.0, 1.0, &mut r);
    check("mlp", &[x, w1, b1, w2], |g, v| {
        let h = nn::linear(g, v[0], v[1], Some(v[2]))?;
        let h = g.tanh(h);
        let o = g.matmul(h, v[3])?;
        let s = g.softmax(o, 1, 2.0)?;
        let m = g.min_axis(s, 1, true)?;
        let sig = g.sigmoid(o);
        g.mul(sig, m)
    });
}

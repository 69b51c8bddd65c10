#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use encdec::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect()
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(r, n, scale)).unwrap()
}

/// Builds `f` over fresh leaves for `inputs` and returns the scalar it yields.
pub type Builder = dyn Fn(&mut Graph<'static, f64>, &[Var]) -> Var;

fn eval(inputs: &[Tensor<f64>], f: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = f(&mut g, &vars);
    g.scalar(out)
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic(inputs: &[Tensor<f64>], f: &Builder) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Central differences with step `h`.
pub fn numeric(inputs: &[Tensor<f64>], f: &Builder, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            gi.push((eval(&plus, f) - eval(&minus, f)) / (2.0 * h));
        }
        out.push(gi);
    }
    out
}

/// `|a - n| / max(|a|, |n|)` in the 2-norm over all inputs; 0 when both vanish.
pub fn rel_err(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(n.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nn += y * y;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Relative error of the analytic gradient against central differences at h = 1e-4.
pub fn grad_check(inputs: &[Tensor<f64>], f: &Builder) -> f64 {
    let a = analytic(inputs, f);
    let n = numeric(inputs, f, 1e-4);
    rel_err(&a, &n)
}

/// Contracts a non-scalar output with fixed pseudo-random weights so every
/// output element influences the scalar.
pub fn project(g: &mut Graph<'static, f64>, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let mut r = rng(seed);
    let w = rand_tensor(&mut r, &shape, 1.0);
    let w = g.constant(w).unwrap();
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_f32(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

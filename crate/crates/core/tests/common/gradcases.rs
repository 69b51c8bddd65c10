//! Finite-difference gradient cases: every primitive at a few random shapes,
//! plus three composite graphs.

use encdec::tensor::{Graph, Tensor, Var};
use rand::Rng;

use super::{project, rand_tensor, rng, Builder};

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<Builder>,
}

fn case(name: &'static str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<'static, f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        inputs: inputs.to_vec(),
        f: Box::new(f),
    }
}

/// Random `(m, k, n)` with every dimension at most (4, 8, 16).
fn shapes(seed: u64) -> Vec<(usize, usize, usize)> {
    let mut r = rng(seed);
    (0..3)
        .map(|_| (r.random_range(1..=4), r.random_range(1..=8), r.random_range(1..=16)))
        .collect()
}

pub fn matmul_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (m, k, n)) in shapes(10).into_iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let ins = [rand_tensor(&mut r, &[m, k], 1.0), rand_tensor(&mut r, &[k, n], 1.0)];
        out.push(case("matmul", &ins, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 1)
        }));
        let ins = [rand_tensor(&mut r, &[m, k], 1.0), rand_tensor(&mut r, &[n, k], 1.0)];
        out.push(case("matmul_nt", &ins, |g, v| {
            let y = g.matmul_nt(v[0], v[1]).unwrap();
            project(g, y, 2)
        }));
    }
    out
}

pub fn elementwise_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (m, k, _)) in shapes(11).into_iter().enumerate() {
        let mut r = rng(200 + i as u64);
        let ins = [rand_tensor(&mut r, &[m, k], 1.0), rand_tensor(&mut r, &[m, k], 1.0)];
        out.push(case("add", &ins, |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 3)
        }));
        out.push(case("sub", &ins, |g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            project(g, y, 3)
        }));
        out.push(case("mul", &ins, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 3)
        }));
        out.push(case("scale", &ins[..1], |g, v| {
            let y = g.scale(v[0], -1.7).unwrap();
            project(g, y, 4)
        }));
        out.push(case("gelu", &[rand_tensor(&mut r, &[m, k], 3.0)], |g, v| {
            let y = g.gelu(v[0]).unwrap();
            project(g, y, 5)
        }));
        let ins = [rand_tensor(&mut r, &[m, k], 1.0), rand_tensor(&mut r, &[k], 1.0)];
        out.push(case("add_row", &ins, |g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            project(g, y, 6)
        }));
    }
    out
}

pub fn normalization_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (m, k, _)) in shapes(12).into_iter().enumerate() {
        let k = k.max(2);
        let mut r = rng(300 + i as u64);
        let ins = [
            rand_tensor(&mut r, &[m, k], 2.0),
            rand_tensor(&mut r, &[k], 1.0),
            rand_tensor(&mut r, &[k], 1.0),
        ];
        out.push(case("layer_norm", &ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(g, y, 7)
        }));
        let x = [rand_tensor(&mut r, &[m, k], 2.0)];
        out.push(case("softmax_rows", &x, |g, v| {
            let y = g.softmax_rows(v[0], 0.7).unwrap();
            project(g, y, 8)
        }));
        let vis: Vec<bool> = (0..m * k).map(|j| j % k == 0 || j % 3 != 1).collect();
        out.push(case("masked_softmax", &x, move |g, v| {
            let y = g.masked_softmax(v[0], 1.5, &vis).unwrap();
            project(g, y, 9)
        }));
    }
    out
}

pub fn gather_and_shape_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (m, k, n)) in shapes(13).into_iter().enumerate() {
        let mut r = rng(400 + i as u64);
        let table = [rand_tensor(&mut r, &[n.max(2), k], 1.0)];
        let ids: Vec<u32> = (0..m + 2).map(|j| (j * 7 % n.max(2)) as u32).collect();
        out.push(case("embedding", &table, move |g, v| {
            let y = g.embedding(v[0], &ids).unwrap();
            project(g, y, 10)
        }));
        let heads = 2;
        let dh = 2 * k.div_ceil(2);
        let x = [rand_tensor(&mut r, &[m, heads * dh], 1.0)];
        let pos: Vec<usize> = (0..m).map(|j| 3 * j + 1).collect();
        out.push(case("rope", &x, move |g, v| {
            let y = g.rope(v[0], heads, &pos, 100.0).unwrap();
            project(g, y, 11)
        }));
        let ins = [rand_tensor(&mut r, &[m, k + 1], 1.0), rand_tensor(&mut r, &[m, 2], 1.0)];
        out.push(case("slice_cols/concat_cols", &ins, move |g, v| {
            let s = g.slice_cols(v[0], 1, k).unwrap();
            let c = g.concat_cols(&[v[1], s, v[0]]).unwrap();
            project(g, c, 12)
        }));
        let ins = [rand_tensor(&mut r, &[m + 1, k], 1.0), rand_tensor(&mut r, &[2, k], 1.0)];
        out.push(case("slice_rows/concat_rows/reshape", &ins, move |g, v| {
            let s = g.slice_rows(v[0], 1, m).unwrap();
            let c = g.concat_rows(&[s, v[1], v[0]]).unwrap();
            let rs = g.reshape(c, vec![(2 * m + 3) * k]).unwrap();
            project(g, rs, 13)
        }));
        let x = [rand_tensor(&mut r, &[m, k], 1.0)];
        out.push(case("sum", &x, |g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.sum(sq).unwrap()
        }));
        out.push(case("mean", &x, |g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.mean(sq).unwrap()
        }));
    }
    out
}

pub fn loss_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (m, _, n)) in shapes(14).into_iter().enumerate() {
        let n = n.max(2);
        let mut r = rng(500 + i as u64);
        let targets: Vec<u32> = (0..m).map(|j| (j * 5 % n) as u32).collect();
        let mask: Vec<bool> = (0..m).map(|j| j == 0 || j % 2 == 1).collect();
        let x = [rand_tensor(&mut r, &[m, n], 2.0)];
        let mk = mask.clone();
        out.push(case("cross_entropy_masked", &x, move |g, v| g.cross_entropy_masked(v[0], &targets, &mk).unwrap()));
        let ins = [rand_tensor(&mut r, &[m, n], 2.0), rand_tensor(&mut r, &[m, n], 2.0)];
        out.push(case("kl_rows", &ins, move |g, v| {
            let p = g.softmax_rows(v[0], 1.0).unwrap();
            let q = g.softmax_rows(v[1], 1.0).unwrap();
            g.kl_rows(p, q, &mask).unwrap()
        }));
    }
    out
}

/// Every differentiable primitive.
pub fn primitive_cases() -> Vec<Case> {
    let mut all = matmul_cases();
    all.extend(elementwise_cases());
    all.extend(normalization_cases());
    all.extend(gather_and_shape_cases());
    all.extend(loss_cases());
    all
}

pub fn composite_cases() -> Vec<Case> {
    let mut r = rng(600);
    let mut out = Vec::new();
    // attention-shaped: softmax(q k^T / tau) v, then layer norm and gelu
    let ins = [
        rand_tensor(&mut r, &[4, 8], 1.0),
        rand_tensor(&mut r, &[5, 8], 1.0),
        rand_tensor(&mut r, &[5, 16], 1.0),
        rand_tensor(&mut r, &[16], 1.0),
        rand_tensor(&mut r, &[16], 1.0),
    ];
    out.push(case("composite attention", &ins, |g, v| {
        let s = g.matmul_nt(v[0], v[1]).unwrap();
        let p = g.softmax_rows(s, 8f64.sqrt()).unwrap();
        let o = g.matmul(p, v[2]).unwrap();
        let n = g.layer_norm(o, v[3], v[4], 1e-5).unwrap();
        let a = g.gelu(n).unwrap();
        project(g, a, 20)
    }));
    // FFN-shaped with a residual and a CE head
    let ins = [
        rand_tensor(&mut r, &[3, 8], 1.0),
        rand_tensor(&mut r, &[8, 16], 0.5),
        rand_tensor(&mut r, &[16, 8], 0.5),
        rand_tensor(&mut r, &[8, 6], 1.0),
    ];
    out.push(case("composite ffn", &ins, |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.matmul(h, v[2]).unwrap();
        let h = g.add(h, v[0]).unwrap();
        let logits = g.matmul(h, v[3]).unwrap();
        g.cross_entropy_masked(logits, &[1, 5, 0], &[true, true, true]).unwrap()
    }));
    // two softmax branches combined with KL, sharing a weight
    let ins = [
        rand_tensor(&mut r, &[4, 8], 1.0),
        rand_tensor(&mut r, &[8, 8], 0.7),
        rand_tensor(&mut r, &[8], 1.0),
        rand_tensor(&mut r, &[8], 1.0),
    ];
    out.push(case("composite kl", &ins, |g, v| {
        let a = g.matmul(v[0], v[1]).unwrap();
        let b = g.layer_norm(a, v[2], v[3], 1e-5).unwrap();
        let b = g.matmul(b, v[1]).unwrap();
        let p = g.softmax_rows(a, 2.0).unwrap();
        let q = g.softmax_rows(b, 2.0).unwrap();
        g.kl_rows(p, q, &[true, false, true, true]).unwrap()
    }));
    out
}

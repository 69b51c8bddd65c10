//! Independent reference computations shared by the module tests and the
//! acceptance run.

use encdec::distill::{aligned_teacher_logits, build_kd_batch, kd_loss, student_logits, KDConfig};
use encdec::model::{attention, rope_apply, LogitRows, Model};
use encdec::select::token_variances;
use encdec::tensor::{Graph, Real, Tensor};
use rand::Rng;

pub fn tokens(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| r.random_range(0..256)).collect()
}

pub fn seq2seq_logits<F: Real>(m: &Model<F>, x: &[u32], xr: &[bool], d: &[u32], dr: &[bool]) -> Tensor<F> {
    let mut g = Graph::no_grad();
    let l = m.forward_seq2seq(&mut g, x, xr, d, dr, LogitRows::All).unwrap();
    g.tensor(l)
}

pub fn dec_logits<F: Real>(m: &Model<F>, ids: &[u32], real: &[bool]) -> Tensor<F> {
    let mut g = Graph::no_grad();
    let l = m.forward_decoder_only(&mut g, ids, real, LogitRows::All).unwrap();
    g.tensor(l)
}

pub fn param_index<F: Real>(m: &Model<F>, name: &str) -> usize {
    m.param_names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"))
}

pub fn rope_rows(x: &Tensor<f64>, positions: &[usize], base: f64, ntk: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::no_grad();
    let v = g.leaf(x.clone(), false).unwrap();
    let out = rope_apply(&mut g, v, positions, base, ntk).unwrap();
    g.value(out).to_vec()
}

/// Straight-line multi-head attention with per-head K/V of full width.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64], tq: usize, tk: usize, h: usize, hkv: usize, dh: usize, vis: &[bool]) -> Vec<f64> {
    let group = h / hkv;
    let mut out = vec![0.0; tq * h * dh];
    for head in 0..h {
        let kh = head / group;
        for i in 0..tq {
            let mut s: Vec<f64> = (0..tk)
                .map(|j| {
                    (0..dh).map(|c| q[i * h * dh + head * dh + c] * k[j * hkv * dh + kh * dh + c]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = (0..tk).filter(|&j| vis[i * tk + j]).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..tk {
                s[j] = if vis[i * tk + j] { (s[j] - mx).exp() } else { 0.0 };
                z += s[j];
            }
            for j in 0..tk {
                for c in 0..dh {
                    out[i * h * dh + head * dh + c] += s[j] / z * v[j * hkv * dh + kh * dh + c];
                }
            }
        }
    }
    out
}

pub fn run_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, vis: &[bool], h: usize, hkv: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::no_grad();
    let (qv, kv, vv) = (g.leaf(q.clone(), false).unwrap(), g.leaf(k.clone(), false).unwrap(), g.leaf(v.clone(), false).unwrap());
    let o = attention(&mut g, qv, kv, vv, vis, h, hkv).unwrap();
    g.value(o).to_vec()
}

pub fn cached_seq2seq(m: &Model, x: &[u32], dec: &[u32]) -> Vec<Vec<f32>> {
    let ctx = m.encode_once(x, &vec![true; x.len()]).unwrap();
    let mut cache = m.new_cache();
    dec.iter().map(|&t| m.decode_step(Some(&ctx), &mut cache, t).unwrap()).collect()
}

pub fn last_logits(t: &Model, ids: &[u32]) -> Vec<f32> {
    let mut g = Graph::no_grad();
    let l = t.forward_decoder_only(&mut g, ids, &vec![true; ids.len()], LogitRows::Last).unwrap();
    g.value(l).to_vec()
}

pub fn kd_loss_value(t: &[f64], s: &[f64], v: usize, y: &[u32], c: &KDConfig) -> f64 {
    let mut g = Graph::<f64>::new();
    let rows = y.len();
    let tv = g.constant(Tensor::new(vec![rows, v], t.to_vec()).unwrap()).unwrap();
    let sv = g.leaf(Tensor::new(vec![rows, v], s.to_vec()).unwrap(), true).unwrap();
    let l = kd_loss(&mut g, tv, sv, y, c, &vec![true; rows]).unwrap();
    g.scalar(l)
}

pub fn kd_loss_at(teacher: &Model, student: &Model, x: &[u32], y: &[u32], enc: usize, dec: usize, c: &KDConfig) -> f32 {
    let b = build_kd_batch(x, y, enc, dec, enc + dec).unwrap();
    let t = aligned_teacher_logits(teacher, &b).unwrap();
    let mut g = Graph::no_grad();
    let tv = g.constant(t).unwrap();
    let s = student_logits(&mut g, student, &b).unwrap();
    let l = kd_loss(&mut g, tv, s, &b.y, c, &b.loss_mask).unwrap();
    g.scalar(l)
}

/// KD loss for a decoder-only teacher and an encoder-decoder student. The
/// teacher reads `x ∘ BOS` with one extra left-padding slot budgeted for BOS.
pub fn kd_example_at(teacher: &Model, student: &Model, x: &[u32], y: &[u32], enc: usize, dec: usize, c: &KDConfig) -> f32 {
    let mut prompt = x.to_vec();
    prompt.push(encdec::data::vocab::BOS);
    let tb = build_kd_batch(&prompt, y, enc + 1, dec, enc + 1 + dec).unwrap();
    let sb = build_kd_batch(x, y, enc, dec, enc + dec).unwrap();
    let t = aligned_teacher_logits(teacher, &tb).unwrap();
    let mut g = Graph::no_grad();
    let tv = g.constant(t).unwrap();
    let s = student_logits(&mut g, student, &sb).unwrap();
    let l = kd_loss(&mut g, tv, s, &sb.y, c, &sb.loss_mask).unwrap();
    g.scalar(l)
}

/// Best `keep`-subset by total variance; ties prefer the lexicographically
/// smallest index set.
pub fn brute_force_select(t: &Tensor<f64>, keep: usize) -> Vec<usize> {
    let n = t.shape()[0];
    let var = token_variances(t);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != keep {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let score: f64 = set.iter().map(|&i| var[i]).sum();
        let better = match &best {
            None => true,
            Some((s, b)) => score > *s || (score == *s && set < *b),
        };
        if better {
            best = Some((score, set));
        }
    }
    best.unwrap().1
}

use encdec::data::vocab::{BOS, EOS};
use encdec::data::{TaskExample, TaskTag};
use encdec::eval::*;
use encdec::model::{build_model, LogitRows, Model, ModelConfig};
use encdec::tensor::Graph;
use encdec::train::{train, TrainConfig, TrainOptions};
use proptest::prelude::*;

fn toy_ed() -> ModelConfig {
    let mut c = ModelConfig::encoder_decoder(1, 1).with_dims(32, 4, 2);
    c.max_enc_len = 64;
    c.max_dec_len = 64;
    c
}

fn toy_dd() -> ModelConfig {
    let mut c = ModelConfig::decoder_only(2).with_dims(32, 4, 2);
    c.max_dec_len = 128;
    c
}

fn ex(x: &[u32], y: &[u32]) -> TaskExample {
    TaskExample {
        task: TaskTag::Copy,
        x: x.to_vec(),
        y: y.to_vec(),
    }
}

fn param_index(m: &Model, name: &str) -> usize {
    m.param_names().iter().position(|n| n == name).unwrap()
}

// ---- Rouge-L ---------------------------------------------------------------

#[test]
fn rouge_l_reference_values() {
    let r = [1, 2, 3, 4, 5, 6, 7];
    assert_eq!(rouge_l(&r, &r), 1.0);
    assert_eq!(rouge_l(&[8, 9], &r), 0.0);
    // one substitution: P = R = 6/7
    assert!((rouge_l(&[1, 2, 3, 0, 5, 6, 7], &r) - 6.0 / 7.0).abs() < 1e-12);
    // extra tokens lower precision only: P = 7/10, R = 1
    let long = [1, 2, 3, 4, 5, 6, 7, 8, 8, 8];
    assert!((rouge_l(&long, &r) - 2.0 * 0.7 / 1.7).abs() < 1e-12);
    assert_eq!(rouge_l(&[], &r), 0.0);
    assert_eq!(rouge_l(&r, &[]), 0.0);
}

#[test]
fn lcs_hand_cases() {
    assert_eq!(lcs_len(&[1, 3, 2, 4], &[3, 4, 1, 2]), 2);
    assert_eq!(lcs_len(&[1, 2, 3, 2, 4, 1, 2], &[2, 4, 3, 1, 2, 1]), 4);
    assert_eq!(lcs_len(&[], &[1]), 0);
}

fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    // longest subsequence of a (by subset enumeration) that is a subsequence of b
    let is_sub = |s: &[u32]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_sub(&s).then_some(s.len())
        })
        .max()
        .unwrap()
}

proptest! {
    #[test]
    fn lcs_matches_brute_force_and_is_symmetric(
        a in prop::collection::vec(0u32..4, 0..9),
        b in prop::collection::vec(0u32..4, 0..12),
    ) {
        let l = lcs_len(&a, &b);
        prop_assert_eq!(l, lcs_len(&b, &a));
        prop_assert_eq!(l, brute_lcs(&a, &b));
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, rouge_l(&b, &a));
        if !a.is_empty() {
            prop_assert_eq!(rouge_l(&a, &a), 1.0);
        }
    }
}

// ---- perplexity ------------------------------------------------------------

#[test]
fn zero_network_has_vocabulary_perplexity() {
    for c in [toy_ed(), toy_dd()] {
        let mut m: Model = build_model(&c, 1).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let data = [ex(&[5, 6, 7], &[8, 9]), ex(&[10], &[11, 12, 13, 14])];
        let ppl = perplexity(&m, &data).unwrap();
        assert!((ppl - c.vocab_size as f64).abs() < 1e-3 * c.vocab_size as f64, "{ppl}");
    }
}

fn log_softmax_at(row: &[f32], t: u32) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    row[t as usize] as f64 - mx - z.ln()
}

#[test]
fn perplexity_is_token_weighted_exp_of_hand_cross_entropy() {
    let m: Model = build_model(&toy_ed(), 2).unwrap();
    let data = [ex(&[5, 6, 7], &[8]), ex(&[20, 21], &[30, 31, 32, 33, 34])];
    let v = m.config().vocab_size;
    let (mut nll, mut n) = (0.0, 0usize);
    for e in &data {
        let mut dec = vec![BOS];
        dec.extend_from_slice(&e.y);
        let mut targets = e.y.clone();
        targets.push(EOS);
        let mut g = Graph::no_grad();
        let logits = m
            .forward_seq2seq(&mut g, &e.x, &vec![true; e.x.len()], &dec, &vec![true; dec.len()], LogitRows::All)
            .unwrap();
        let t = g.tensor(logits);
        for (i, &tg) in targets.iter().enumerate() {
            nll -= log_softmax_at(&t.data()[i * v..(i + 1) * v], tg);
            n += 1;
        }
    }
    let want = (nll / n as f64).exp();
    let got = perplexity(&m, &data).unwrap();
    assert!((got - want).abs() < 1e-4 * want, "{got} vs {want}");
    // per-example averaging would differ
    let a = perplexity(&m, &data[..1]).unwrap().ln();
    let b = perplexity(&m, &data[1..]).unwrap().ln();
    assert!((got.ln() - (2.0 * a + 6.0 * b) / 8.0).abs() < 1e-6);
    assert!((got.ln() - (a + b) / 2.0).abs() > 1e-6);
}

#[test]
fn perplexity_rejects_empty_data() {
    let m: Model = build_model(&toy_dd(), 3).unwrap();
    assert!(perplexity(&m, &[]).is_err());
    assert!(rouge_on(&m, &[]).is_err());
}

#[test]
fn memorized_string_has_unit_perplexity() {
    let data = vec![ex(&[40, 41, 42, 43], &[50, 51, 52, 53, 54, 55])];
    for c in [toy_ed(), toy_dd()] {
        let mut m: Model = build_model(&c, 4).unwrap();
        let before = perplexity(&m, &data).unwrap();
        let cfg = TrainConfig {
            peak_lr: 1e-2,
            warmup_steps: 10,
            total_steps: 300,
            batch_size: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg, None, TrainOptions::default()).unwrap();
        let after = perplexity(&m, &data).unwrap();
        assert!(after < before);
        assert!((after - 1.0).abs() < 1e-3, "{:?}: {after}", c.kind);
        let (r, fails) = rouge_on(&m, &data).unwrap();
        assert_eq!((r, fails), (1.0, 0));
    }
}

// ---- generation scoring ----------------------------------------------------

fn eos_first(cfg: &ModelConfig) -> Model {
    let mut m: Model = build_model(cfg, 5).unwrap();
    let d = cfg.d_model;
    let (gi, bi, ei) = (param_index(&m, "dec.ln_f.g"), param_index(&m, "dec.ln_f.b"), param_index(&m, "embed"));
    let p = m.params_mut();
    p[gi].data_mut().iter_mut().for_each(|x| *x = 0.0);
    p[bi].data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = if i == 0 { 1.0 } else { 0.0 });
    p[ei].data_mut()[EOS as usize * d] = 10.0;
    m
}

#[test]
fn empty_generations_and_failures_score_zero() {
    let m = eos_first(&toy_ed());
    assert_eq!(generate_answer(&m, &[5, 6], 4).unwrap(), Vec::<u32>::new());
    let long: Vec<u32> = (0..80).map(|i| 10 + i % 50).collect();
    let data = [ex(&[5, 6], &[7]), ex(&long, &[7])];
    let (score, failures) = rouge_on(&m, &data).unwrap();
    assert_eq!((score, failures), (0.0, 1));
}

// ---- grid ------------------------------------------------------------------

#[test]
fn grid_aggregates_over_seeds() {
    let models: Vec<Model> = (0..3).map(|s| build_model(&toy_ed(), 10 + s).unwrap()).collect();
    let other: Model = build_model(&toy_dd(), 20).unwrap();
    let data = vec![ex(&[5, 6, 7], &[8, 9]), ex(&[10, 11], &[12])];
    let mut cells: Vec<GridCell> = models
        .iter()
        .enumerate()
        .map(|(s, m)| GridCell {
            model_label: "encdec".into(),
            task_label: "copy".into(),
            seed: s as u64,
            model: m,
            examples: &data,
        })
        .collect();
    for label in ["deconly", "deconly_again"] {
        cells.push(GridCell {
            model_label: label.into(),
            task_label: "copy".into(),
            seed: 0,
            model: &other,
            examples: &data,
        });
    }
    let res = eval_grid(&cells, Metric::Perplexity).unwrap();
    assert_eq!(res.raw.len(), 5);
    let p: Vec<f64> = models.iter().map(|m| perplexity(m, &data).unwrap()).collect();
    let mean = p.iter().sum::<f64>() / 3.0;
    let std = (p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let row = res.row("encdec", "copy").unwrap();
    assert!((row.mean - mean).abs() < 1e-12 && (row.std - std).abs() < 1e-12);
    assert_eq!(row.n_seeds, 3);
    assert_eq!(row.metric, "perplexity");
    let a = res.row("deconly", "copy").unwrap();
    let b = res.row("deconly_again", "copy").unwrap();
    assert_eq!((a.mean, a.std, a.n_seeds), (b.mean, b.std, b.n_seeds));
    assert_eq!(a.std, 0.0);
    let order: Vec<&str> = res.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(order, ["encdec", "deconly", "deconly_again"]);

    let again = eval_grid(&cells, Metric::Perplexity).unwrap();
    assert_eq!(res.text_table(), again.text_table());
}

#[test]
fn grid_outputs() {
    let m: Model = build_model(&toy_dd(), 30).unwrap();
    let data = vec![ex(&[5, 6], &[7, 8])];
    let cells = [GridCell {
        model_label: "deconly".into(),
        task_label: "copy".into(),
        seed: 7,
        model: &m,
        examples: &data,
    }];
    let res = eval_grid(&cells, Metric::RougeL).unwrap();
    let mut buf = Vec::new();
    res.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,task,metric,mean,std,n_seeds"));
    assert!(lines.next().unwrap().starts_with("deconly,copy,rouge_l,"));
    let mut buf = Vec::new();
    res.write_raw_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("model,task,seed,score,failures\ndeconly,copy,7,"));
    let table = res.text_table();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("model") && lines[0].contains("n_seeds"));
    assert!(lines.iter().any(|l| l.starts_with("deconly") && l.contains("rouge_l")));
}

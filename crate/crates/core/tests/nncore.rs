use dualform::nncore::*;
use dualform::synthlang::TokenSequence;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn seq(text: &str) -> TokenSequence {
    TokenSequence::new(0, text.to_string()).unwrap()
}

fn toks(text: &str) -> Vec<u16> {
    seq(text).tokens
}

#[test]
fn attention_rows_are_causal_distributions() {
    let cfg = ModelConfig::default();
    let p = init_params::<f64>(&cfg, 3).unwrap();
    let f = forward(&p, &cfg, &toks("abcabcxyzz"), None).unwrap();
    for layer in &f.trace.attn {
        for head in layer {
            for (i, row) in head.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!(row.iter().skip(i + 1).all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn later_tokens_do_not_affect_earlier_positions() {
    let cfg = ModelConfig::default();
    let p = init_params::<f64>(&cfg, 4).unwrap();
    let a = toks("helloworld");
    let mut b = a.clone();
    let cut = 5;
    b[cut + 1..].reverse();
    let fa = forward(&p, &cfg, &a, None).unwrap();
    let fb = forward(&p, &cfg, &b, None).unwrap();
    for (za, zb) in fa.trace.z.iter().zip(&fb.trace.z) {
        for pos in 0..=cut {
            assert_eq!(za.row(pos), zb.row(pos));
        }
    }
}

#[test]
fn eval_is_bit_deterministic() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, 5).unwrap();
    let t = toks("deterministic");
    assert_eq!(forward(&p, &cfg, &t, None).unwrap().trace, forward(&p, &cfg, &t, None).unwrap().trace);
}

#[test]
fn zero_head_gives_uniform_loss() {
    let cfg = ModelConfig {
        zero_init_head: true,
        ..ModelConfig::default()
    };
    let p = init_params::<f64>(&cfg, 6).unwrap();
    assert!(p.head.iter().all(|&x| x == 0.0));
    let f = forward(&p, &cfg, &toks("uniform"), None).unwrap();
    for l in f.losses {
        assert!((l - 28f64.ln()).abs() < 1e-12);
    }
    assert!((28f64.ln() - 3.3322).abs() < 1e-4);
}

#[test]
fn init_variance_and_determinism() {
    let cfg = ModelConfig::default();
    let p = init_params::<f64>(&cfg, 7).unwrap();
    let mut n = 0.0;
    let mut s2 = 0.0;
    for l in &p.layers {
        for &x in l.w_q.iter() {
            s2 += x * x;
            n += 1.0;
        }
    }
    let var = s2 / n;
    assert!((var * 64.0 - 1.0).abs() < 0.2, "variance {var}");
    assert_eq!(p, init_params::<f64>(&cfg, 7).unwrap());
    assert_ne!(p, init_params::<f64>(&cfg, 8).unwrap());
}

#[test]
fn logit_gradient_is_softmax_minus_onehot() {
    let cfg = ModelConfig::default();
    let p = init_params::<f64>(&cfg, 9).unwrap();
    let f = forward(&p, &cfg, &toks("gradient"), None).unwrap();
    let g = backward(&p, &cfg, &f);
    let mut expect = f.trace.probs.clone();
    for (pos, &t) in f.targets.iter().enumerate() {
        expect[[pos, t as usize]] -= 1.0;
    }
    let dev = (&g.d_logits - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(dev <= 1e-6);
}

#[test]
fn gradients_of_a_repeated_sequence_add() {
    let cfg = small();
    let p = init_params::<f64>(&cfg, 10).unwrap();
    let f = forward(&p, &cfg, &toks("twice"), None).unwrap();
    let g = backward(&p, &cfg, &f).params;
    let mut sum = g.clone();
    for (mut a, b) in sum.tensors_mut().into_iter().zip(g.tensors()) {
        a += &b;
    }
    for (a, b) in sum.tensors().iter().zip(g.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, 2.0 * y);
        }
    }
}

fn assert_grad_check(cfg: &ModelConfig, seed: u64) {
    let r = grad_check_random::<f64>(cfg, seed, 9, 1e-5).unwrap();
    assert!(r.max_rel_err <= 1e-5, "{:#?}", r.groups);
}

#[test]
fn finite_differences_f64() {
    assert_grad_check(&small(), 11);
}

#[test]
fn finite_differences_post_norm_relu_scaled_no_final_norm() {
    let cfg = ModelConfig {
        norm_placement: NormPlacement::Post,
        activation: Activation::Relu,
        attn_scale: true,
        final_norm_before_head: false,
        ..small()
    };
    assert_grad_check(&cfg, 12);
}

#[test]
fn finite_differences_with_pinned_dropout() {
    let cfg = ModelConfig { dropout: 0.2, ..small() };
    assert_grad_check(&cfg, 13);
    let post = ModelConfig {
        norm_placement: NormPlacement::Post,
        ..cfg
    };
    assert_grad_check(&post, 14);
}

#[test]
fn finite_differences_f32() {
    let r = grad_check_random::<f32>(&small(), 15, 9, 1e-2).unwrap();
    assert!(r.max_rel_err <= 1e-2, "{:#?}", r.groups);
}

struct Capture<T> {
    rows: Vec<(f64, Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>)>,
    norms: Vec<f64>,
}

impl<T: Real> HistorySink<T> for Capture<T> {
    fn record(&mut self, s: &StepRecord<'_, T>) -> std::io::Result<()> {
        self.norms.push(s.grads.params.sq_norm().sqrt());
        self.rows.push((
            s.eta,
            s.trace.pre_head.clone(),
            s.grads.d_logits.clone(),
            s.trace.u[0].clone(),
            s.grads.d_attn_out[0].clone(),
            s.trace.ffn_hidden[1].clone(),
            s.grads.d_ffn_out[1].clone(),
            s.trace.probs.clone(),
        ));
        Ok(())
    }
}

fn outer_sum<T: Real>(g: &Array2<T>, x: &Array2<T>) -> Array2<f64> {
    let g = g.mapv(|v| v.as_f64());
    let x = x.mapv(|v| v.as_f64());
    g.t().dot(&x)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m, &v| m.max(v))
}

#[test]
fn single_sgd_step_matches_closed_form() {
    let cfg = ModelConfig {
        dropout: 0.2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 1,
        lr: 0.5,
        ..TrainConfig::sgd()
    };
    let mut st = ModelState::<f32>::new(&cfg, &tc, 21).unwrap();
    let before = st.params.clone();
    let mut cap = Capture { rows: vec![], norms: vec![] };
    train_epoch(&mut st, &[seq("closedform")], &tc, &mut cap).unwrap();
    let (eta, z, dl, u, dy, a, db, _) = &cap.rows[0];
    let f = |m: &Array2<f32>| m.mapv(|v| v as f64);

    let lh = f(&before.head) - &(outer_sum(dl, z) * *eta);
    assert!(max_abs_diff(&lh, &f(&st.params.head)) <= 1e-6);
    let wo = f(&before.layers[0].w_o) - &(outer_sum(dy, u) * *eta);
    assert!(max_abs_diff(&wo, &f(&st.params.layers[0].w_o)) <= 1e-6);
    let w2 = f(&before.layers[1].w2) - &(outer_sum(db, a) * *eta);
    assert!(max_abs_diff(&w2, &f(&st.params.layers[1].w2)) <= 1e-6);
    assert_eq!(st.step, 11);
    assert_eq!(st.epoch, 1);
}

#[test]
fn clipping_is_folded_into_eta() {
    let cfg = small();
    let tc = TrainConfig {
        max_grad_norm: 1e-3,
        lr: 0.7,
        ..TrainConfig::sgd()
    };
    let mut st = ModelState::<f64>::new(&cfg, &tc, 22).unwrap();
    let p0 = st.params.clone();
    let s = seq("clipme");
    let mut cap = Capture { rows: vec![], norms: vec![] };
    let summary = train_epoch(&mut st, &[s.clone()], &tc, &mut cap).unwrap();
    assert_eq!(summary.clipped, 1);
    let g = backward(&p0, &cfg, &forward(&p0, &cfg, &s.tokens, None).unwrap());
    let norm = g.params.sq_norm().sqrt();
    assert!((cap.rows[0].0 - 0.7 * 1e-3 / norm).abs() < 1e-6);
    // the update has exactly the clipped norm
    let mut moved = 0.0;
    for (a, b) in st.params.tensors().iter().zip(p0.tensors()) {
        moved += (a - &b).mapv(|v| v * v).sum();
    }
    assert!((moved.sqrt() - 0.7e-3).abs() < 1e-12);
}

#[test]
fn zero_lr_is_a_no_op() {
    let cfg = small();
    let data: Vec<_> = ["abc", "hello", "zzzzz"].iter().map(|t| seq(t)).collect();
    for tc in [
        TrainConfig { lr: 0.0, ..TrainConfig::sgd() },
        TrainConfig { lr: 0.0, ..TrainConfig::adamw() },
    ] {
        let mut st = ModelState::<f64>::new(&cfg, &tc, 23).unwrap();
        let p0 = st.params.clone();
        let s = train_epoch(&mut st, &data, &tc, &mut NullSink).unwrap();
        assert_eq!(st.params, p0);
        let ev = eval_loss(&st, &data).unwrap();
        assert!((s.mean_loss - ev).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = ModelConfig { dropout: 0.1, ..small() };
    let tc = TrainConfig { lr: 0.1, ..TrainConfig::sgd() };
    let data: Vec<_> = ["abab", "abababab", "ab", "ababab"].iter().map(|t| seq(t)).collect();
    let run = || {
        let mut st = ModelState::<f32>::new(&cfg, &tc, 24).unwrap();
        let mut losses = vec![];
        for _ in 0..15 {
            losses.push(train_epoch(&mut st, &data, &tc, &mut NullSink).unwrap().mean_loss);
        }
        (st, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.last().unwrap() < &(la[0] * 0.5), "{la:?}");
}

#[test]
fn optimizer_mismatch_is_rejected() {
    let cfg = small();
    let mut st = ModelState::<f64>::new(&cfg, &TrainConfig::sgd(), 1).unwrap();
    assert!(matches!(
        train_epoch(&mut st, &[seq("a")], &TrainConfig::adamw(), &mut NullSink),
        Err(NnError::Config(_))
    ));
}

struct Failing;
impl<T: Real> HistorySink<T> for Failing {
    fn record(&mut self, s: &StepRecord<'_, T>) -> std::io::Result<()> {
        if s.sequence_id == 1 {
            Err(std::io::Error::other("disk full"))
        } else {
            Ok(())
        }
    }
}

#[test]
fn sink_failure_rolls_back_the_epoch() {
    let cfg = small();
    let tc = TrainConfig::sgd();
    let mut st = ModelState::<f64>::new(&cfg, &tc, 2).unwrap();
    let before = st.clone();
    let data = vec![seq("one"), seq("two"), seq("three")];
    assert!(matches!(train_epoch(&mut st, &data, &tc, &mut Failing), Err(NnError::Sink(_))));
    assert_eq!(st, before);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let tc = TrainConfig::adamw();
    let mut st = ModelState::<f32>::new(&cfg, &tc, 30).unwrap();
    train_epoch(&mut st, &[seq("persist")], &tc, &mut NullSink).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&st, &path).unwrap();

    let back = load_checkpoint_typed::<f32>(&path).unwrap();
    assert_eq!(back, st);
    let t = toks("persist");
    assert_eq!(back.eval(&t).unwrap().trace.logits, st.eval(&t).unwrap().trace.logits);
    assert!(load_checkpoint_typed::<f64>(&path).is_err());
    assert_eq!(load_checkpoint(&path).unwrap().to_f64().params, st.params.cast::<f64>());

    let bytes = std::fs::read(&path).unwrap();
    let short = dir.path().join("short.ckpt");
    std::fs::write(&short, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&short), Err(NnError::Checkpoint(_))));
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(decode_checkpoint(&flipped).is_err());
    assert!(decode_checkpoint(b"NOPE0000000000000000").is_err());

    let other = ModelConfig { d_ff: 64, ..st.config.clone() };
    match load_checkpoint_expect(&path, &other) {
        Err(NnError::ConfigMismatch(d)) => assert!(d.iter().any(|l| l.starts_with("d_ff"))),
        r => panic!("expected mismatch, got {r:?}"),
    }
    assert!(load_checkpoint_expect(&path, &st.config).is_ok());
}

#[test]
fn non_finite_input_is_reported_with_location() {
    let cfg = small();
    let mut p = init_params::<f64>(&cfg, 31).unwrap();
    p.layers[1].w1[[0, 0]] = f64::INFINITY;
    match forward(&p, &cfg, &toks("boom"), None) {
        Err(NnError::NonFinite { layer, .. }) => assert_eq!(layer, 2),
        r => panic!("{:?}", r.map(|_| ())),
    }
    assert!(forward(&p, &cfg, &[0], None).is_err());
    assert!(forward(&p, &cfg, &[0, 99], None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_attention_rows_normalized(tokens in prop::collection::vec(0u16..28, 2..17), seed in 0u64..1000) {
        let cfg = small();
        let p = init_params::<f32>(&cfg, seed).unwrap();
        let f = forward(&p, &cfg, &tokens, None).unwrap();
        for layer in &f.trace.attn {
            for head in layer {
                for row in head.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn prop_causal(tokens in prop::collection::vec(0u16..28, 3..17), cut in 0usize..14, seed in 0u64..1000) {
        let cfg = small();
        let cut = cut % (tokens.len() - 1);
        let p = init_params::<f64>(&cfg, seed).unwrap();
        let mut other = tokens.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in other.iter_mut().skip(cut + 1) {
            *t = rand::Rng::gen_range(&mut rng, 0..28);
        }
        let fa = forward(&p, &cfg, &tokens, None).unwrap();
        let fb = forward(&p, &cfg, &other, None).unwrap();
        for (za, zb) in fa.trace.z.iter().zip(&fb.trace.z) {
            for pos in 0..=cut {
                prop_assert_eq!(za.row(pos), zb.row(pos));
            }
        }
    }
}

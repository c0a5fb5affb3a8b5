use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchformer::model::{
    attention_pool, ExpandMode, Generated, InputMode, ModelConfig, ModelInput, OutputGrads,
    Sketchformer,
};
use sketchformer::nn::{positional_encoding, sha, AttentionMask, FeedForward, MultiHeadAttention, Params};
use sketchformer::sketch::{Pen, Stroke5Row};
use sketchformer::tokenize::{EOS, PAD, SEP, SOS};
use sketchformer::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn tiny(mode: InputMode, expand: ExpandMode) -> ModelConfig {
    ModelConfig {
        mode,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 6,
        dropout: 0.1,
        n_classes: 3,
        expand,
    }
}

fn token_batch() -> Vec<ModelInput> {
    vec![
        ModelInput::Tokens(vec![SOS, 5, SEP, 7, EOS, PAD]),
        ModelInput::Tokens(vec![SOS, 4, 6, 8, 9, EOS]),
    ]
}

fn row(dx: f64, dy: f64, pen: Pen) -> Stroke5Row {
    Stroke5Row { dx, dy, pen }
}

fn row_batch() -> Vec<ModelInput> {
    vec![
        ModelInput::Rows(vec![
            row(0.3, -0.2, Pen::Draw),
            row(1.1, 0.4, Pen::Lift),
            row(-0.5, 0.9, Pen::Lift),
            Stroke5Row::END,
            Stroke5Row::END,
            Stroke5Row::END,
        ]),
        ModelInput::Rows(vec![
            row(0.0, 0.7, Pen::Draw),
            row(-1.3, 0.1, Pen::Draw),
            row(0.2, 0.2, Pen::Draw),
            row(0.6, -0.8, Pen::Draw),
            row(0.1, 0.0, Pen::Lift),
            Stroke5Row::END,
        ]),
    ]
}

#[test]
fn sha_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, k, v) = (random(4, 8, &mut rng), random(4, 8, &mut rng), random(4, 8, &mut rng));
    let alpha = 1.0 / 8f64.sqrt();
    let (out, probs) = sha(q.view(), k.view(), v.view(), alpha, |_, _| true);
    for i in 0..4 {
        let scores: Vec<f64> = (0..4).map(|j| alpha * q.row(i).dot(&k.row(j))).collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        let weights: Vec<f64> = scores.iter().map(|s| s.exp() / total).collect();
        assert!((probs.row(i).sum() - 1.0).abs() < 1e-12);
        for c in 0..8 {
            let expect: f64 = (0..4).map(|j| weights[j] * v[[j, c]]).sum();
            assert!((out[[i, c]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn one_head_with_identity_projections_is_sha() {
    let mut p = Params::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mha = MultiHeadAttention::new(&mut p, "m", 4, 1, &mut rng);
    for id in [mha.wq, mha.wk, mha.wv, mha.wo] {
        *p.get_mut(id) = Array2::eye(4);
    }
    let x = random(5, 4, &mut rng);
    let kv = random(5, 4, &mut rng);
    let (y, _) = mha.forward(&p, &x, &kv, 1, &AttentionMask::None);
    let (expect, _) = sha(x.view(), kv.view(), kv.view(), 0.5, |_, _| true);
    for (a, b) in y.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn mha_is_invariant_to_key_order() {
    let mut p = Params::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mha = MultiHeadAttention::new(&mut p, "m", 8, 2, &mut rng);
    let q = random(3, 8, &mut rng);
    let kv = random(5, 8, &mut rng);
    let mut swapped = kv.clone();
    swapped.row_mut(1).assign(&kv.row(3));
    swapped.row_mut(3).assign(&kv.row(1));
    let (a, _) = mha.forward(&p, &q, &kv, 1, &AttentionMask::None);
    let (b, _) = mha.forward(&p, &q, &swapped, 1, &AttentionMask::None);
    assert_eq!(a.dim(), (3, 8));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ffn_matches_matrix_oracle() {
    let mut p = Params::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ffn = FeedForward::new(&mut p, "f", 6, 10, &mut rng);
    let x = random(4, 6, &mut rng);
    let (y, _) = ffn.forward(&p, &x);
    let (w1, b1) = (p.get(ffn.inner.w), p.get(ffn.inner.b));
    let (w2, b2) = (p.get(ffn.outer.w), p.get(ffn.outer.b));
    for i in 0..4 {
        let mut hidden = vec![0.0; 10];
        for (j, h) in hidden.iter_mut().enumerate() {
            let pre: f64 = (0..6).map(|k| x[[i, k]] * w1[[k, j]]).sum::<f64>() + b1[[0, j]];
            *h = pre.max(0.0);
        }
        for c in 0..6 {
            let expect: f64 = (0..10).map(|j| hidden[j] * w2[[j, c]]).sum::<f64>() + b2[[0, c]];
            assert!((y[[i, c]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn pool_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = random(7, 5, &mut rng);
    let (k, b, v) = (random(5, 5, &mut rng), random(1, 5, &mut rng), random(5, 1, &mut rng));
    let valid = [true, true, false, true, true, true, false];
    let (z, s) = attention_pool(h.view(), k.view(), b.view(), v.view(), &valid).unwrap();
    let scores: Vec<f64> = (0..7)
        .map(|i| {
            (0..5)
                .map(|a| {
                    let u: f64 = (0..5).map(|c| h[[i, c]] * k[[a, c]]).sum::<f64>() + b[[0, a]];
                    u.tanh() * v[[a, 0]]
                })
                .sum()
        })
        .collect();
    let total: f64 = (0..7).filter(|&i| valid[i]).map(|i| scores[i].exp()).sum();
    let mut expect = Array1::<f64>::zeros(5);
    for i in (0..7).filter(|&i| valid[i]) {
        let w = scores[i].exp() / total;
        assert!((s[i] - w).abs() < 1e-12);
        expect.scaled_add(w, &h.row(i));
    }
    assert!((s.sum() - 1.0).abs() < 1e-12);
    for (a, e) in z.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn zero_layer_encoder_is_the_embedded_input() {
    let cfg = ModelConfig {
        n_layers: 0,
        ..tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine)
    };
    let m = Sketchformer::<f64>::new(cfg, 1).unwrap();
    let tokens = vec![SOS, 5, 6, EOS];
    let h = m.encoder_states(&[ModelInput::Tokens(tokens.clone())]).unwrap();
    let table = m.params().by_name("embed.table").unwrap();
    let pe = positional_encoding::<f64>(4, 8);
    for (i, &t) in tokens.iter().enumerate() {
        for c in 0..8 {
            let expect = table[[t as usize, c]] * 8f64.sqrt() + pe[[i, c]];
            assert!((h[[i, c]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_layer_decoder_is_the_head_over_embedded_targets() {
    let cfg = ModelConfig {
        n_layers: 0,
        ..tiny(InputMode::Continuous, ExpandMode::Affine)
    };
    let m = Sketchformer::<f64>::new(cfg, 2).unwrap();
    let memory = m.expand(&Array2::zeros((1, 8)));
    let rows = vec![Stroke5Row::START, row(0.5, -1.0, Pen::Lift)];
    let out = m.decode(&memory, &[ModelInput::Rows(rows.clone())]).unwrap();
    let p = m.params();
    let (pw, pb) = (p.by_name("embed.proj.w").unwrap(), p.by_name("embed.proj.b").unwrap());
    let (hw, hb) = (p.by_name("head.recon.w").unwrap(), p.by_name("head.recon.b").unwrap());
    let pe = positional_encoding::<f64>(2, 8);
    for (i, r) in rows.iter().enumerate() {
        let x = Array2::from_shape_vec((1, 5), r.to_array().to_vec()).unwrap();
        let e = x.dot(pw) + pb + &pe.slice(s![i..i + 1, ..]);
        let y = e.dot(hw) + hb;
        for c in 0..5 {
            assert!((out[[i, c]] - y[[0, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn output_shapes() {
    for (cfg, batch, width) in [
        (tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), token_batch(), 10),
        (tiny(InputMode::Continuous, ExpandMode::Tile), row_batch(), 5),
    ] {
        let m = Sketchformer::<f64>::new(cfg, 3).unwrap();
        let (out, _) = m.forward(&batch, None).unwrap();
        assert_eq!(out.recon.dim(), (12, width));
        assert_eq!(out.class_logits.dim(), (2, 3));
        assert_eq!(out.z.dim(), (2, 8));
        let memory = m.expand(&out.z);
        assert_eq!(memory.dim(), (12, 8));
    }
}

#[test]
fn expand_of_zero_is_positional_encoding() {
    let cfg = tiny(InputMode::Continuous, ExpandMode::Affine);
    let m = Sketchformer::<f64>::new(cfg, 4).unwrap();
    let memory = m.expand(&Array2::zeros((1, 8)));
    assert_eq!(memory, positional_encoding::<f64>(6, 8));
}

#[test]
fn too_long_input_is_rejected() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), 0).unwrap();
    let long = ModelInput::Tokens(vec![SOS, 4, 4, 4, 4, 4, EOS]);
    assert!(matches!(m.encode(&[long]), Err(Error::Truncation { .. })));
    let all_pad = ModelInput::Tokens(vec![PAD; 3]);
    assert!(m.encode(&[all_pad]).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig {
        n_layers: 2,
        ..tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine)
    };
    let m = Sketchformer::<f64>::new(cfg, 5).unwrap();
    let batch = token_batch();
    let (_, trace) = m.forward(&batch, None).unwrap();
    for layer in 0..2 {
        for (idx, probs) in trace.encoder_attention(layer).iter().enumerate() {
            let valid = batch[idx / 2].valid_mask();
            for (i, r) in probs.rows().into_iter().enumerate() {
                assert!((r.sum() - 1.0).abs() < 1e-9, "enc layer {layer} row {i}");
                for (j, &w) in r.iter().enumerate() {
                    if !valid[j] {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
        for probs in trace.decoder_self_attention(layer) {
            for (i, r) in probs.rows().into_iter().enumerate() {
                assert!((r.sum() - 1.0).abs() < 1e-9);
                assert!(r.iter().skip(i + 1).all(|&w| w == 0.0));
            }
        }
        for probs in trace.decoder_cross_attention(layer) {
            assert_eq!(probs.ncols(), 6);
            for r in probs.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn appending_pad_leaves_embedding_unchanged() {
    let cfg = ModelConfig {
        max_len: 10,
        n_layers: 2,
        ..tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine)
    };
    let m = Sketchformer::<f64>::new(cfg, 6).unwrap();
    let short = vec![SOS, 5, 6, SEP, 7, EOS];
    let mut long = short.clone();
    long.extend([PAD; 4]);
    let (za, _) = m.encode(&[ModelInput::Tokens(short.clone())]).unwrap();
    let (zb, _) = m.encode(&[ModelInput::Tokens(long.clone())]).unwrap();
    for (a, b) in za.iter().zip(&zb) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12));
    }
    let ha = m.encoder_states(&[ModelInput::Tokens(short)]).unwrap();
    let hb = m.encoder_states(&[ModelInput::Tokens(long)]).unwrap();
    for (a, b) in ha.iter().zip(hb.slice(s![..6, ..])) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_ignores_rows_after_the_terminator() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Continuous, ExpandMode::Affine), 7).unwrap();
    let original = row_batch()[0].clone();
    let ModelInput::Rows(mut rows) = original.clone() else { unreachable!() };
    rows[4] = row(9.0, -4.0, Pen::Draw);
    rows[5] = row(3.0, 3.0, Pen::Lift);
    let ha = m.encoder_states(&[original.clone()]).unwrap();
    let hb = m.encoder_states(&[ModelInput::Rows(rows.clone())]).unwrap();
    for (a, b) in ha.slice(s![..4, ..]).iter().zip(hb.slice(s![..4, ..])) {
        assert!((a - b).abs() < 1e-12);
    }
    let (za, _) = m.encode(&[original]).unwrap();
    let (zb, _) = m.encode(&[ModelInput::Rows(rows)]).unwrap();
    assert!(za.iter().zip(&zb).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn decoder_is_causal() {
    let cfg = ModelConfig {
        n_layers: 2,
        ..tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine)
    };
    let m = Sketchformer::<f64>::new(cfg, 8).unwrap();
    let (z, _) = m.encode(&token_batch()[..1]).unwrap();
    let memory = m.expand(&z);
    let base = vec![SOS, 5, 6, 7, 8, 9];
    let reference = m.decode(&memory, &[ModelInput::Tokens(base.clone())]).unwrap();
    for t in 0..6 {
        for changed in t + 1..6 {
            for v in [PAD, EOS, 4] {
                let mut alt = base.clone();
                alt[changed] = v;
                let out = m.decode(&memory, &[ModelInput::Tokens(alt)]).unwrap();
                for c in 0..10 {
                    assert_eq!(out[[t, c]], reference[[t, c]], "position {t} saw {changed}");
                }
            }
        }
    }
    // positions past the sequence end still produce outputs
    let padded = m
        .decode(&memory, &[ModelInput::Tokens(vec![SOS, 5, EOS, PAD, PAD, PAD])])
        .unwrap();
    assert!(padded.row(5).iter().any(|&v| v != 0.0));
}

#[test]
fn decoder_rejects_mismatched_memory() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), 0).unwrap();
    let memory = Array2::zeros((5, 8));
    assert!(m.decode(&memory, &[ModelInput::Tokens(vec![SOS])]).is_err());
}

#[test]
fn inference_is_deterministic() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), 9).unwrap();
    let (a, _) = m.forward(&token_batch(), None).unwrap();
    let (b, _) = m.forward(&token_batch(), None).unwrap();
    assert_eq!(a.recon, b.recon);
    assert_eq!(a.z, b.z);
}

#[test]
fn backward_requires_forward() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), 0).unwrap();
    let mut session = m.session();
    assert!(matches!(session.backward(&OutputGrads::default()), Err(Error::Usage(_))));
    session.forward(&token_batch(), None).unwrap();
    assert!(session.backward(&OutputGrads::default()).is_ok());
    assert!(matches!(session.backward(&OutputGrads::default()), Err(Error::Usage(_))));
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Continuous, ExpandMode::Affine), 1).unwrap();
    let (out, trace) = m.forward(&row_batch(), None).unwrap();
    let g = m
        .backward(
            &trace,
            &OutputGrads {
                recon: Some(Array2::zeros(out.recon.raw_dim())),
                class_logits: Some(Array2::zeros(out.class_logits.raw_dim())),
                z: None,
            },
        )
        .unwrap();
    assert_eq!(g.len(), m.params().len());
    assert_eq!(g.norm_sq(), 0.0);
}

/// Scalar probe `Σ R∘recon + Σ C∘class + Σ W∘z` with fixed random weights.
struct Probe {
    recon: Array2<f64>,
    class: Array2<f64>,
    z: Array2<f64>,
}

impl Probe {
    fn new(m: &Sketchformer<f64>, batch: &[ModelInput], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, _) = m.forward(batch, None).unwrap();
        Probe {
            recon: random(out.recon.nrows(), out.recon.ncols(), &mut rng),
            class: random(out.class_logits.nrows(), out.class_logits.ncols(), &mut rng),
            z: random(out.z.nrows(), out.z.ncols(), &mut rng),
        }
    }

    fn value(&self, m: &Sketchformer<f64>, batch: &[ModelInput]) -> f64 {
        let (out, _) = m.forward(batch, None).unwrap();
        (&out.recon * &self.recon).sum() + (&out.class_logits * &self.class).sum() + (&out.z * &self.z).sum()
    }

    fn grads(&self) -> OutputGrads<f64> {
        OutputGrads {
            recon: Some(self.recon.clone()),
            class_logits: Some(self.class.clone()),
            z: Some(self.z.clone()),
        }
    }
}

fn gradient_check(cfg: ModelConfig, batch: Vec<ModelInput>) {
    let mut m = Sketchformer::<f64>::new(cfg, 21).unwrap();
    // non-zero biases and gains so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (name, t) in m.params_mut().iter_mut() {
        if name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".g") {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
    }
    let probe = Probe::new(&m, &batch, 23);
    let (_, trace) = m.forward(&batch, None).unwrap();
    let analytic = m.backward(&trace, &probe.grads()).unwrap();
    let step = 1e-5;
    // Central differences cannot resolve gradients below their own roundoff
    // (≈ ε·|f|/h); relative error is measured against at least that scale.
    // Intermediate activations exceed |f|, so allow ten times that estimate.
    let roundoff = 10.0 * f64::EPSILON * probe.value(&m, &batch).abs() / step;
    let floor = (1e4 * roundoff).max(1e-6);
    let mut worst = (0.0f64, String::new());
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        let name = m.params().name(id).to_string();
        let n = m.params().get(id).len();
        for flat in 0..n {
            let (r, c) = {
                let cols = m.params().get(id).ncols();
                (flat / cols, flat % cols)
            };
            let orig = m.params().get(id)[[r, c]];
            m.params_mut().get_mut(id)[[r, c]] = orig + step;
            let plus = probe.value(&m, &batch);
            m.params_mut().get_mut(id)[[r, c]] = orig - step;
            let minus = probe.value(&m, &batch);
            m.params_mut().get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id)[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{r},{c}]: analytic {a} numeric {numeric}"));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "worst relative error {}: {}", worst.0, worst.1);
    let key = analytic.by_name("bottleneck.key").unwrap();
    assert!(key.iter().any(|&v| v.abs() > 1e-8), "bottleneck key gradient vanished");
}

#[test]
fn gradients_match_finite_differences_tokenized() {
    gradient_check(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), token_batch());
}

#[test]
fn gradients_match_finite_differences_continuous_tiled() {
    gradient_check(tiny(InputMode::Continuous, ExpandMode::Tile), row_batch());
}

#[test]
fn autoregress_respects_budget_and_is_deterministic() {
    let m = Sketchformer::<f64>::new(tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine), 13).unwrap();
    let (z, _) = m.encode(&token_batch()).unwrap();
    for budget in [0, 1, 3, 100] {
        let g = m.autoregress(z.row(0), budget);
        assert!(g.steps() <= budget.min(5));
        assert_eq!(g, m.autoregress(z.row(0), budget));
        let Generated::Tokens(t) = g else { panic!("expected tokens") };
        assert_eq!(t[0], SOS);
    }
    let c = Sketchformer::<f64>::new(tiny(InputMode::Continuous, ExpandMode::Affine), 13).unwrap();
    let (z, _) = c.encode(&row_batch()).unwrap();
    let g = c.autoregress(z.row(1), 4);
    assert!(g.steps() <= 4);
    assert!(matches!(g, Generated::Rows(_)));
}

#[test]
fn from_params_checks_names_and_shapes() {
    let cfg = tiny(InputMode::Tokenized { vocab_size: 10 }, ExpandMode::Affine);
    let m = Sketchformer::<f32>::new(cfg, 31).unwrap();
    let rebuilt = Sketchformer::from_params(cfg, m.params().clone()).unwrap();
    assert_eq!(rebuilt.params(), m.params());
    let other = ModelConfig {
        d_ff: 12,
        ..cfg
    };
    assert!(Sketchformer::from_params(other, m.params().clone()).is_err());
}


use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchformer::dataset::{Dataset, Split, DEFAULT_RDP_EPSILON};
use sketchformer::model::{ExpandMode, InputMode, ModelConfig, ModelInput, Sketchformer};
use sketchformer::raster::rasterize;
use sketchformer::sketch::{from_stroke3, to_stroke3, Pen, Stroke5Row};
use sketchformer::synth::{synth_corpus, SynthClass};
use sketchformer::tokenize::{fit_codebook, Tokenizer, PAD};
use sketchformer::train::{
    batch_loss, class_loss, recon_loss_continuous, recon_loss_tokens, shuffle_strokes, trim_batch,
    Checkpoint, TrainConfig, TrainItem, TrainSet, Trainer,
};
use sketchformer::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-3.0..3.0))
}

#[test]
fn token_loss_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random(6, 9, &mut rng);
    let targets = [4, 7, PAD, 2, PAD, 8];
    let r = recon_loss_tokens(&logits, &targets).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        count += 1;
    }
    assert!((r.loss - total / count as f64).abs() < 1e-10);
}

#[test]
fn continuous_loss_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = random(5, 5, &mut rng);
    let pens = [Pen::Draw, Pen::Lift, Pen::Draw, Pen::End, Pen::End];
    let targets: Vec<Stroke5Row> = pens
        .iter()
        .map(|&pen| Stroke5Row {
            dx: rng.random_range(-2.0..2.0),
            dy: rng.random_range(-2.0..2.0),
            pen,
        })
        .collect();
    let valid = [true, true, true, true, false];
    let r = recon_loss_continuous(&pred, &targets, &valid).unwrap();
    let (mut l2, mut xent) = (0.0, 0.0);
    for i in 0..4 {
        let t = &targets[i];
        l2 += (pred[[i, 0]] - t.dx).powi(2) + (pred[[i, 1]] - t.dy).powi(2);
        let lse = (2..5).map(|j| pred[[i, j]].exp()).sum::<f64>().ln();
        xent += lse - pred[[i, 2 + t.pen.index()]];
    }
    assert!((r.offset_mse - l2 / 4.0).abs() < 1e-10);
    assert!((r.loss - (l2 + xent) / 4.0).abs() < 1e-10);
    assert!(r.grad.row(4).iter().all(|&g| g == 0.0));
}

#[test]
fn class_loss_gradient_wrt_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(6, 4, &mut rng);
    let z = random(2, 6, &mut rng);
    let labels = [1, 3];
    let loss = |z: &Array2<f64>| class_loss(&z.dot(&w), &labels).unwrap().loss;
    let analytic = class_loss(&z.dot(&w), &labels).unwrap().grad.dot(&w.t());
    let h = 1e-5;
    for idx in [(0, 0), (0, 5), (1, 2), (1, 4)] {
        let mut zp = z.clone();
        zp[idx] += h;
        let mut zm = z.clone();
        zm[idx] -= h;
        let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
        let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
        assert!(rel <= 1e-4, "{idx:?}: {fd} vs {}", analytic[idx]);
    }
}

#[test]
fn pad_target_logits_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(4, 6, &mut rng);
    let targets = [4, 2, PAD, PAD];
    let a = recon_loss_tokens(&logits, &targets).unwrap();
    let mut changed = logits.clone();
    changed.row_mut(2).fill(40.0);
    changed.row_mut(3).fill(-7.0);
    let b = recon_loss_tokens(&changed, &targets).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grad, b.grad);
}

fn tiny_continuous() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        ..ModelConfig::continuous(7, 2)
    }
}

fn rows(pens: &[(f64, f64, Pen)]) -> Vec<Stroke5Row> {
    pens.iter().map(|&(dx, dy, pen)| Stroke5Row { dx, dy, pen }).collect()
}

#[test]
fn padding_rows_contribute_no_gradient() {
    let m = Sketchformer::<f64>::new(tiny_continuous(), 5).unwrap();
    let base = rows(&[
        (0.5, 0.1, Pen::Draw),
        (-0.3, 0.8, Pen::Lift),
        (0.0, 0.0, Pen::End),
        (0.0, 0.0, Pen::End),
        (0.0, 0.0, Pen::End),
    ]);
    let mut noisy = base.clone();
    noisy[3] = Stroke5Row { dx: 4.0, dy: -2.0, pen: Pen::Draw };
    noisy[4] = Stroke5Row { dx: 1.0, dy: 1.0, pen: Pen::Lift };
    let grads = |r: Vec<Stroke5Row>| {
        let inputs = vec![ModelInput::Rows(r)];
        let (out, trace) = m.forward(&inputs, None).unwrap();
        let (report, g) = batch_loss(&out, &inputs, &[1], 1.0).unwrap();
        (report.total, m.backward(&trace, &g).unwrap())
    };
    let (la, ga) = grads(base);
    let (lb, gb) = grads(noisy);
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

fn toy_dataset(per_class: usize, seed: u64) -> Dataset {
    let sketches = synth_corpus(per_class, seed);
    let names = SynthClass::ALL.iter().map(|c| c.name().to_string()).collect();
    Dataset::build(&sketches, &[], names, DEFAULT_RDP_EPSILON).unwrap()
}

fn dict_tokenizer(ds: &Dataset, k: usize) -> Tokenizer {
    let seqs: Vec<_> = ds.split(Split::Train).map(|i| i.seq.clone()).collect();
    let codebook = fit_codebook(&seqs, k, 2000, 0.2, 7, ds.meta.offset_scale).unwrap();
    Tokenizer::Dict { codebook }
}

fn small_config(tk: &Tokenizer, max_len: usize) -> ModelConfig {
    ModelConfig {
        mode: tk.input_mode(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_len,
        dropout: 0.0,
        n_classes: 5,
        expand: ExpandMode::Affine,
    }
}

fn trainer(seed: u64) -> (Trainer, TrainSet) {
    let ds = toy_dataset(4, 11);
    let tk = dict_tokenizer(&ds, 24);
    let items = TrainItem::from_dataset(ds.split(Split::Train)).unwrap();
    let set = TrainSet::new(items, &tk, 48).unwrap();
    let model = Sketchformer::new(small_config(&tk, 48), seed).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        base_lr: 3e-3,
        warmup: 20,
        seed,
        ..TrainConfig::default()
    };
    (Trainer::new(model, tk, cfg).unwrap(), set)
}

#[test]
fn overfits_a_fixed_batch() {
    let (mut t, set) = trainer(1);
    let mut batch: Vec<ModelInput> = set.inputs()[..4].to_vec();
    trim_batch(&mut batch);
    let labels: Vec<usize> = set.labels()[..4].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = t.update(&batch, &labels, &mut rng, &[0, 1, 2, 3]).unwrap().total;
    let mut last = first;
    for _ in 1..500 {
        last = t.update(&batch, &labels, &mut rng, &[0, 1, 2, 3]).unwrap().total;
    }
    assert!(last * 10.0 <= first, "loss went from {first} to {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut t, set) = trainer(2);
    t.config.base_lr = 0.0;
    let before = t.model.params().clone();
    t.train_step(&set).unwrap();
    assert_eq!(t.model.params(), &before);
}

#[test]
fn identical_seeds_give_identical_streams() {
    let run = || {
        let (mut t, set) = trainer(3);
        t.config.shuffle_strokes = true;
        t.model = Sketchformer::new(
            ModelConfig {
                dropout: 0.1,
                ..*t.model.config()
            },
            3,
        )
        .unwrap();
        (0..5).map(|_| t.train_step(&set).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.skfm");
    let (mut t, set) = trainer(4);
    for _ in 0..3 {
        t.train_step(&set).unwrap();
    }
    let names: Vec<String> = SynthClass::ALL.iter().map(|c| c.name().to_string()).collect();
    t.checkpoint(&names).save(&path).unwrap();
    let expected_next: Vec<_> = (0..2).map(|_| t.train_step(&set).unwrap()).collect();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.class_names, names);
    let mut resumed = Trainer::resume(loaded).unwrap();
    let got: Vec<_> = (0..2).map(|_| resumed.train_step(&set).unwrap()).collect();
    assert_eq!(got, expected_next);

    let reloaded = Checkpoint::load(&path).unwrap();
    let again = Checkpoint::load(&path).unwrap();
    let probe = &set.inputs()[..2];
    let (a, _) = reloaded.model.forward(probe, None).unwrap();
    let (b, _) = again.model.forward(probe, None).unwrap();
    assert_eq!(a.recon, b.recon);

    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.skfm")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let (mut t, set) = trainer(5);
    let id = t.model.params().id("head.class.b").unwrap();
    t.model.params_mut().get_mut(id).fill(f32::NAN);
    match t.train_step(&set) {
        Err(Error::NonFiniteLoss { step, batch_ids }) => {
            assert_eq!(step, 1);
            assert_eq!(batch_ids.len(), 4);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn shuffled_strokes_rasterize_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for sk in synth_corpus(3, 8) {
        let (seq, origin) = to_stroke3(&sk);
        let shuffled = shuffle_strokes(&seq, &mut rng);
        let back = from_stroke3(&shuffled, origin).unwrap();
        let a = rasterize(&sk, 64, 1).unwrap();
        let b = rasterize(&back, 64, 1).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }
}

#[test]
fn tokenizer_mode_must_match_model() {
    let (t, _) = trainer(6);
    let model = Sketchformer::new(tiny_continuous(), 0).unwrap();
    assert!(Trainer::new(model, t.tokenizer.clone(), TrainConfig::default()).is_err());
    assert_eq!(t.tokenizer.input_mode(), t.model.config().mode);
    assert!(matches!(t.model.config().mode, InputMode::Tokenized { .. }));
}

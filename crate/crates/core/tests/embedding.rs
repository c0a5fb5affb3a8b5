use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchformer::embed::{
    average_precision, classify_logits, mean_average_precision, perturb, precision_at_k, slerp,
    EmbeddingDump, EmbeddingIndex, Metric,
};

fn unit(v: Vec<f64>) -> Array1<f64> {
    let a = Array1::from(v);
    let n = a.dot(&a).sqrt();
    a / n
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn slerp_keeps_unit_norm(a in nonzero_vec(8), b in nonzero_vec(8)) {
        let (a, b) = (unit(a), unit(b));
        for i in 0..=20 {
            let z = slerp(a.view(), b.view(), i as f64 / 20.0).unwrap();
            prop_assert!((z.dot(&z).sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn slerp_endpoints_are_exact(a in nonzero_vec(5), b in nonzero_vec(5)) {
        let (a, b) = (Array1::from(a), Array1::from(b));
        prop_assert_eq!(slerp(a.view(), b.view(), 0.0).unwrap(), a.clone());
        prop_assert_eq!(slerp(a.view(), b.view(), 1.0).unwrap(), b.clone());
    }

    #[test]
    fn slerp_is_symmetric(a in nonzero_vec(6), b in nonzero_vec(6), t in 0.0f64..=1.0) {
        let (a, b) = (unit(a), unit(b));
        let x = slerp(a.view(), b.view(), t).unwrap();
        let y = slerp(b.view(), a.view(), 1.0 - t).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn class_ranking_ignores_logit_shift(logits in prop::collection::vec(-5.0f64..5.0, 2..10), c in -50.0f64..50.0) {
        let a = classify_logits(Array1::from(logits.clone()).view());
        let b = classify_logits(Array1::from(logits).mapv(|v| v + c).view());
        prop_assert_eq!(a.class, b.class);
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn knn_matches_full_sort(seed in 0u64..1000, n in 1usize..40, dim in 1usize..6, euclid in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse values make exact score ties common
        let m = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2i32..=2) as f32);
        let ids: Vec<String> = (0..n).map(|i| format!("item{:03}", (i * 17) % 1000)).collect();
        let metric = if euclid { Metric::Euclidean } else { Metric::Cosine };
        let index = EmbeddingIndex::new(ids.clone(), m.clone(), metric).unwrap();
        let q = Array1::from_shape_fn(dim, |_| rng.random_range(-2i32..=2) as f64);
        let k = rng.random_range(1..=n);
        let got = index.knn(q.view(), k).unwrap();

        let score = |i: usize| -> f64 {
            let row: Vec<f64> = m.row(i).iter().map(|&v| v as f64).collect();
            if euclid {
                -row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            } else {
                let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nq = q.dot(&q).sqrt();
                if nr == 0.0 || nq == 0.0 { 0.0 } else { row.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (nr * nq) }
            }
        };
        let mut oracle: Vec<(f64, String)> = (0..n).map(|i| (score(i), ids[i].clone())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        prop_assert_eq!(got.len(), k);
        for (r, (s, id)) in got.iter().zip(&oracle) {
            prop_assert_eq!(&r.id, id);
            prop_assert!((r.score - s).abs() <= 1e-12);
        }
        prop_assert!(got.iter().zip(got.iter().skip(1)).all(|(a, b)| a.score >= b.score));
    }
}

fn ap_oracle(flags: &[bool]) -> f64 {
    let relevant = flags.iter().filter(|&&f| f).count();
    if relevant == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let hits = flags[..=i].iter().filter(|&&f| f).count();
        sum += hits as f64 / (i + 1) as f64;
    }
    sum / relevant as f64
}

#[test]
fn ranking_metrics_match_counting_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut all = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let p = rng.random_range(0.05..0.9);
        let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        assert_eq!(average_precision(&flags), ap_oracle(&flags));
        let k = rng.random_range(1..=n);
        let counted = flags[..k].iter().filter(|&&f| f).count() as f64 / k as f64;
        assert_eq!(precision_at_k(&flags, k).unwrap(), counted);
        all.push(flags);
    }
    let mean = all.iter().map(|f| ap_oracle(f)).sum::<f64>() / all.len() as f64;
    assert_eq!(mean_average_precision(&all), mean);
}

#[test]
fn query_equal_to_an_item_ranks_it_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Array2::from_shape_fn((50, 8), |_| rng.random_range(-1.0f32..1.0));
    let ids: Vec<String> = (0..50).map(|i| i.to_string()).collect();
    for metric in [Metric::Cosine, Metric::Euclidean] {
        let index = EmbeddingIndex::new(ids.clone(), m.clone(), metric).unwrap();
        let q = m.row(17).mapv(f64::from);
        let top = index.knn(q.view(), 50).unwrap();
        assert_eq!(top.0[0].id, "17");
        assert_eq!(top.len(), 50);
    }
}

#[test]
fn noise_has_the_requested_spread() {
    let z = Array1::<f64>::zeros(100);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for sigma in [0.5, 1.0] {
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let p = perturb(z.view(), sigma, &mut rng).unwrap();
            sum_sq += p.dot(&p);
            count += p.len();
        }
        let std = (sum_sq / count as f64).sqrt();
        assert!((std - sigma).abs() <= 0.05 * sigma, "σ = {sigma}: measured {std}");
    }
}

#[test]
fn embedding_dump_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.skem");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Array2::from_shape_fn((7, 4), |_| rng.random_range(-3.0f32..3.0));
    let ids = (0..7).map(|i| format!("s{i}")).collect();
    let mut dump = EmbeddingDump::new(ids, vec![0, 1, 2, 0, 1, 2, 0], m).unwrap();
    dump.meta.insert("space".into(), "sketch".into());
    dump.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = EmbeddingDump::load(&path).unwrap();
    assert_eq!(back, dump);
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert!(EmbeddingDump::new(vec!["a".into()], vec![], Array2::zeros((1, 2))).is_err());
}

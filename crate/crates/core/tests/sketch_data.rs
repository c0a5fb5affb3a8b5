use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchformer::raster::{chamfer_distance, rasterize, CanvasFit, RasterImage};
use sketchformer::rdp::{rdp_simplify, simplify_sketch};
use sketchformer::sketch::{
    denormalize, from_stroke3, from_stroke5, normalize, parse_quickdraw, to_stroke3, to_stroke5, Pen, Point,
    Sketch, Stroke3Point, Stroke3Seq,
};
use sketchformer::synth::{synth_corpus, SynthClass};

fn int_sketch() -> impl Strategy<Value = Sketch> {
    let stroke = prop::collection::vec((0i32..256, 0i32..256), 1..12);
    prop::collection::vec(stroke, 1..6).prop_map(|strokes| {
        Sketch::new(
            strokes
                .into_iter()
                .map(|s| s.into_iter().map(|(x, y)| Point::new(x as f64, y as f64)).collect())
                .collect(),
        )
        .unwrap()
    })
}

fn float_line() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
}

/// Absolute positions by cumulative summation, written independently of
/// the library's decoder.
fn cumulative(seq: &Stroke3Seq, origin: Point) -> Vec<Vec<Point>> {
    let mut out = vec![Vec::new()];
    let (mut x, mut y) = (origin.x, origin.y);
    for p in &seq.points {
        x += p.dx;
        y += p.dy;
        out.last_mut().unwrap().push(Point::new(x, y));
        if p.lift {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stroke3_round_trip_is_exact(sk in int_sketch()) {
        let (seq, origin) = to_stroke3(&sk);
        prop_assert_eq!(seq.len(), sk.num_points());
        prop_assert_eq!(seq.num_strokes(), sk.strokes.len());
        prop_assert_eq!(&cumulative(&seq, origin), &sk.strokes);
        prop_assert_eq!(from_stroke3(&seq, origin).unwrap(), sk);
    }

    #[test]
    fn stroke5_round_trip_is_exact(sk in int_sketch(), slack in 1usize..10) {
        let (seq, _) = to_stroke3(&sk);
        let max_len = seq.len() + slack;
        let s5 = to_stroke5(&seq, max_len).unwrap();
        prop_assert_eq!(s5.rows.len(), max_len);
        // one-hot pens, a single terminator at the end of content, padding after
        for (i, r) in s5.rows.iter().enumerate() {
            let expected = if i < seq.len() {
                if seq.points[i].lift { Pen::Lift } else { Pen::Draw }
            } else {
                Pen::End
            };
            prop_assert_eq!(r.pen, expected);
            if i >= seq.len() {
                prop_assert_eq!((r.dx, r.dy), (0.0, 0.0));
            }
        }
        prop_assert_eq!(from_stroke5(&s5), seq);
    }

    #[test]
    fn rdp_properties(line in float_line(), eps in 0.0f64..20.0) {
        let simple = rdp_simplify(&line, eps);
        prop_assert!(simple.len() <= line.len());
        prop_assert_eq!(simple.first(), line.first());
        prop_assert_eq!(simple.last(), line.last());
        prop_assert_eq!(rdp_simplify(&simple, eps), simple.clone());
        // kept points are a subsequence; dropped ones lie within eps of the chain
        let mut j = 0;
        for p in &line {
            if j < simple.len() && simple[j] == *p {
                j += 1;
                continue;
            }
            let d = simple
                .windows(2)
                .map(|w| segment_distance(p, &w[0], &w[1]))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(d < eps + 1e-9, "dropped point {:?} is {} from the chain", p, d);
        }
        prop_assert_eq!(j, simple.len());
    }

    #[test]
    fn normalize_is_invertible(
        pts in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0, any::<bool>()), 1..50),
        scale in 0.01f64..100.0,
    ) {
        let seq = Stroke3Seq::new(pts.iter().map(|&(x, y, l)| Stroke3Point::new(x, y, l)).collect());
        let back = denormalize(&normalize(&seq, scale), scale);
        for (a, b) in seq.points.iter().zip(&back.points) {
            prop_assert_eq!(a.lift, b.lift);
            prop_assert!((a.dx - b.dx).abs() <= 1e-9 * a.dx.abs().max(1.0));
            prop_assert!((a.dy - b.dy).abs() <= 1e-9 * a.dy.abs().max(1.0));
        }
    }

    #[test]
    fn rasterize_is_deterministic(sk in int_sketch(), width in 1usize..4) {
        let a = rasterize(&sk, 48, width).unwrap();
        let b = rasterize(&sk.clone(), 48, width).unwrap();
        prop_assert_eq!(&a.pixels, &b.pixels);
        prop_assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len_sq = vx * vx + vy * vy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * vx + (p.y - a.y) * vy) / len_sq).clamp(0.0, 1.0)
    };
    (p.x - (a.x + t * vx)).hypot(p.y - (a.y + t * vy))
}

#[test]
fn float_stroke3_round_trip_is_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let strokes: Vec<Vec<Point>> = (0..rng.random_range(1..5))
            .map(|_| {
                (0..rng.random_range(1..20))
                    .map(|_| Point::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)))
                    .collect()
            })
            .collect();
        let sk = Sketch::new(strokes).unwrap();
        let (seq, origin) = to_stroke3(&sk);
        let back = from_stroke3(&seq, origin).unwrap();
        for (a, b) in sk.points().zip(back.points()) {
            assert!(a.distance(b) <= 1e-9, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn stroke3_examples() {
    let single = Sketch::new(vec![vec![Point::new(5.0, 6.0)]]).unwrap();
    let (seq, origin) = to_stroke3(&single);
    assert_eq!(seq.points, vec![Stroke3Point::new(0.0, 0.0, true)]);
    assert_eq!(origin, Point::new(5.0, 6.0));

    let two = Sketch::new(vec![vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0)]]).unwrap();
    assert_eq!(
        to_stroke3(&two).0.points,
        vec![Stroke3Point::new(0.0, 0.0, false), Stroke3Point::new(3.0, 4.0, true)]
    );

    let seq = Stroke3Seq::new(vec![Stroke3Point::new(1.0, 0.0, false), Stroke3Point::new(1.0, 0.0, true)]);
    let rows: Vec<[f64; 5]> = to_stroke5(&seq, 5).unwrap().rows.iter().map(|r| r.to_array()).collect();
    assert_eq!(
        rows,
        vec![
            [1.0, 0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ]
    );
    match to_stroke5(&seq, 2) {
        Err(sketchformer::Error::Truncation { required, max_len }) => assert_eq!((required, max_len), (3, 2)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn normalize_examples() {
    let seq = Stroke3Seq::new(vec![Stroke3Point::new(2.0, 0.0, false); 3]);
    assert!(normalize(&seq, 2.0).points.iter().all(|p| (p.dx, p.dy) == (1.0, 0.0)));
    assert_eq!(normalize(&seq, 1.0), seq);
}

#[test]
fn quickdraw_examples() {
    let r = parse_quickdraw(r#"{"word":"cat","drawing":[[[0,255],[0,0]]]}"#).unwrap();
    assert_eq!(r.word.as_deref(), Some("cat"));
    assert_eq!(r.sketch.strokes, vec![vec![Point::new(0.0, 0.0), Point::new(255.0, 0.0)]]);
    let r = parse_quickdraw("[[[1,2,3],[4,5,6]],[[7,8],[9,10]]]").unwrap();
    assert_eq!((r.sketch.strokes.len(), r.sketch.num_points()), (2, 5));
    assert!(parse_quickdraw("[]").is_err());
    match parse_quickdraw("[[[1,2],[3,4]],[[5,6],[7]]]") {
        Err(sketchformer::Error::MalformedStroke { index, .. }) => assert_eq!(index, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn rdp_examples() {
    let p = |x, y| Point::new(x, y);
    assert_eq!(rdp_simplify(&[p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0)], 0.1), vec![p(0.0, 0.0), p(2.0, 0.0)]);
    let elbow = [p(0.0, 0.0), p(5.0, 0.0), p(5.0, 5.0)];
    assert_eq!(rdp_simplify(&elbow, 1.0), elbow.to_vec());
    let wiggly: Vec<Point> = (0..30).map(|i| p(i as f64, ((i * 7) % 5) as f64)).collect();
    assert_eq!(rdp_simplify(&wiggly, 0.0), wiggly);
}

/// Pixels visited when stepping along the major axis and rounding the minor
/// coordinate: an independent count for straight lines.
fn walk_count(a: (f64, f64), b: (f64, f64)) -> usize {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let steps = dx.abs().max(dy.abs()).round() as usize;
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..=steps {
        let t = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
        seen.insert(((a.0 + t * dx).round() as i64, (a.1 + t * dy).round() as i64));
    }
    seen.len()
}

#[test]
fn diagonal_ink_matches_line_walk() {
    for (len, side) in [(40.0, 64), (100.0, 64), (255.0, 128), (10.0, 32)] {
        let sk = Sketch::new(vec![vec![Point::new(0.0, 0.0), Point::new(len, len)]]).unwrap();
        let img = rasterize(&sk, side, 1).unwrap();
        let fit = CanvasFit::new(&sk, side);
        let (a, b) = (fit.to_pixel(&sk.strokes[0][0]), fit.to_pixel(&sk.strokes[0][1]));
        let oracle = walk_count((a.0 as f64, a.1 as f64), (b.0 as f64, b.1 as f64));
        assert_eq!(img.ink_count(), oracle);
        // a diagonal of Euclidean length L covers about L/√2 pixels
        let l_px = (len * std::f64::consts::SQRT_2) * fit.scale();
        let expected = l_px / std::f64::consts::SQRT_2;
        let ratio = img.ink_count() as f64 / expected;
        assert!((0.8..=1.2).contains(&ratio), "L={len} side={side}: {} pixels vs {expected}", img.ink_count());
    }
}

#[test]
fn horizontal_line_inks_one_row_and_point_sketch_inks_center() {
    let sk = Sketch::new(vec![vec![Point::new(10.0, 50.0), Point::new(200.0, 50.0)]]).unwrap();
    let img = rasterize(&sk, 64, 1).unwrap();
    let rows: std::collections::BTreeSet<usize> = img.ink_pixels().iter().map(|p| p.1).collect();
    assert_eq!(rows.len(), 1);
    let dot = rasterize(&Sketch::new(vec![vec![Point::new(3.0, 3.0)]]).unwrap(), 64, 1).unwrap();
    assert_eq!(dot.ink_pixels(), vec![(32, 32)]);
}

fn brute_chamfer(a: &RasterImage, b: &RasterImage) -> f64 {
    let one_way = |from: &RasterImage, to: &RasterImage| {
        let targets = to.ink_pixels();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..from.height {
            for x in 0..from.width {
                if !from.is_ink(x, y) {
                    continue;
                }
                let best = targets
                    .iter()
                    .map(|&(tx, ty)| {
                        let (dx, dy) = (tx as f64 - x as f64, ty as f64 - y as f64);
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min);
                sum += best.sqrt();
                n += 1;
            }
        }
        sum / n as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

#[test]
fn chamfer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(4..30), rng.random_range(4..30));
        let density = rng.random_range(0.02..0.5);
        let mut make = || {
            let mut img = RasterImage::blank(w, h);
            for v in img.pixels.iter_mut() {
                if rng.random_bool(density) {
                    *v = 1.0;
                }
            }
            if img.ink_count() == 0 {
                img.pixels[0] = 1.0;
            }
            img
        };
        let (a, b) = (make(), make());
        assert_eq!(chamfer_distance(&a, &b).unwrap(), brute_chamfer(&a, &b));
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }
    let mut a = RasterImage::blank(10, 10);
    let mut b = RasterImage::blank(10, 10);
    a.pixels[2 * 10 + 2] = 1.0;
    b.pixels[2 * 10 + 5] = 1.0;
    assert_eq!(chamfer_distance(&a, &b).unwrap(), 3.0);
    assert_eq!(chamfer_distance(&a, &RasterImage::blank(10, 10)).unwrap(), a.diagonal());
}

#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let side = 32;
    let render = |s: &Sketch| rasterize(s, side, 1).unwrap().pixels;
    let train = synth_corpus(20, 1);
    let test = synth_corpus(20, 2);
    let mut means = vec![vec![0f64; side * side]; SynthClass::ALL.len()];
    for s in &train {
        for (m, &v) in means[s.label.unwrap()].iter_mut().zip(&render(s)) {
            *m += v as f64 / 20.0;
        }
    }
    let correct = test
        .iter()
        .filter(|s| {
            let px = render(s);
            let best = (0..means.len())
                .min_by(|&a, &b| {
                    let d = |m: &Vec<f64>| m.iter().zip(&px).map(|(m, &p)| (m - p as f64).powi(2)).sum::<f64>();
                    d(&means[a]).partial_cmp(&d(&means[b])).unwrap()
                })
                .unwrap();
            best == s.label.unwrap()
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn dataset_simplification_keeps_endpoints() {
    let sk = &synth_corpus(1, 3)[0];
    let simple = simplify_sketch(sk, 2.0);
    for (a, b) in sk.strokes.iter().zip(&simple.strokes) {
        assert_eq!(a.first(), b.first());
        assert_eq!(a.last(), b.last());
    }
}

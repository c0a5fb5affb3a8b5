//! Ramer–Douglas–Peucker polyline simplification.

use crate::sketch::{Point, Sketch};

/// Distance from `p` to the segment `a`–`b`.
pub fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len_sq = vx * vx + vy * vy;
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p.x - a.x) * vx + (p.y - a.y) * vy) / len_sq;
    if t <= 0.0 {
        p.distance(a)
    } else if t >= 1.0 {
        p.distance(b)
    } else {
        let proj = Point::new(a.x + t * vx, a.y + t * vy);
        p.distance(&proj)
    }
}

/// Indices of the points kept by RDP with tolerance `epsilon`.
///
/// A span is collapsed to its chord only when every interior point deviates
/// strictly less than `epsilon`, so `epsilon == 0` keeps everything.
pub fn rdp_keep(line: &[Point], epsilon: f64) -> Vec<usize> {
    let n = line.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((first, last)) = stack.pop() {
        if last <= first + 1 {
            continue;
        }
        let (a, b) = (&line[first], &line[last]);
        let mut worst = (first, f64::NEG_INFINITY);
        for (i, p) in line.iter().enumerate().take(last).skip(first + 1) {
            let d = segment_distance(p, a, b);
            if d > worst.1 {
                worst = (i, d);
            }
        }
        if worst.1 >= epsilon {
            keep[worst.0] = true;
            stack.push((worst.0, last));
            stack.push((first, worst.0));
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

pub fn rdp_simplify(line: &[Point], epsilon: f64) -> Vec<Point> {
    rdp_keep(line, epsilon).into_iter().map(|i| line[i]).collect()
}

/// Simplifies every stroke of a sketch independently.
pub fn simplify_sketch(sketch: &Sketch, epsilon: f64) -> Sketch {
    Sketch {
        strokes: sketch
            .strokes
            .iter()
            .map(|s| rdp_simplify(s, epsilon))
            .collect(),
        label: sketch.label,
        source_id: sketch.source_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn collinear_collapses_to_endpoints() {
        let line = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(rdp_simplify(&line, 0.1), pts(&[(0.0, 0.0), (2.0, 2.0)]));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let line = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 1.0)]);
        assert_eq!(rdp_simplify(&line, 0.0), line);
    }

    #[test]
    fn elbow_is_kept() {
        let line = pts(&[(0.0, 0.0), (5.0, 0.0), (5.0, 5.0)]);
        let d = segment_distance(&line[1], &line[0], &line[2]);
        assert!((d - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(rdp_simplify(&line, 1.0), line);
    }

    #[test]
    fn degenerate_inputs_pass_through() {
        let one = pts(&[(3.0, 3.0)]);
        assert_eq!(rdp_simplify(&one, 2.0), one);
        let two = pts(&[(3.0, 3.0), (3.0, 3.0)]);
        assert_eq!(rdp_simplify(&two, 2.0), two);
    }

    #[test]
    fn closed_loop_keeps_far_point() {
        let line = pts(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 0.0)]);
        let out = rdp_simplify(&line, 1.0);
        assert!(out.contains(&Point::new(10.0, 10.0)));
        assert_eq!(out.first(), line.first());
        assert_eq!(out.last(), line.last());
    }
}

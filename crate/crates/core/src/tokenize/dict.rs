use super::{frame, Codebook, Scheme, TokenSequence, EOS, FIRST_CONTENT, PAD, SEP, SOS};
use crate::error::{Error, Result};
use crate::sketch::{Stroke3Point, Stroke3Seq};

/// Index of the closest codeword; ties go to the lowest index.
pub fn nearest_centroid(cb: &Codebook, dx: f64, dy: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..cb.k() {
        let [cx, cy] = cb.centroid(i);
        let d = (dx - cx) * (dx - cx) + (dy - cy) * (dy - cy);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Replaces every offset with its nearest codeword token, inserting SEP
/// between strokes.
pub fn dict_encode(seq: &Stroke3Seq, cb: &Codebook, max_len: usize) -> Result<TokenSequence> {
    let mut content = Vec::with_capacity(seq.len() * 2);
    let last = seq.len().saturating_sub(1);
    for (i, p) in seq.points.iter().enumerate() {
        content.push(nearest_centroid(cb, p.dx, p.dy) as u32 + FIRST_CONTENT);
        if p.lift && i != last {
            content.push(SEP);
        }
    }
    frame(content, cb.vocab_size(), Scheme::Dict, max_len)
}

/// Maps tokens back to codeword offsets; SEP marks a lift on the preceding
/// point and EOS ends the sketch (lifting the final point).
pub fn dict_decode(seq: &TokenSequence, cb: &Codebook) -> Result<Stroke3Seq> {
    if seq.scheme != Scheme::Dict {
        return Err(Error::Decode("not a dictionary token sequence".into()));
    }
    let vocab = cb.vocab_size();
    let mut points: Vec<Stroke3Point> = Vec::new();
    let mut tokens = seq.tokens.iter().copied();
    if tokens.next() != Some(SOS) {
        return Err(Error::Decode("sequence must start with SOS".into()));
    }
    for t in tokens {
        match t {
            EOS => {
                return match points.last_mut() {
                    Some(last) => {
                        last.lift = true;
                        Ok(Stroke3Seq::new(points))
                    }
                    None => Err(Error::Decode("no content before EOS".into())),
                };
            }
            SEP => match points.last_mut() {
                Some(prev) => prev.lift = true,
                None => return Err(Error::Decode("SEP before any point".into())),
            },
            PAD | SOS => return Err(Error::Decode(format!("unexpected special token {t}"))),
            t if t as usize >= vocab => {
                return Err(Error::Decode(format!("token {t} outside vocabulary of {vocab}")))
            }
            t => {
                let [dx, dy] = cb.centroid((t - FIRST_CONTENT) as usize);
                points.push(Stroke3Point::new(dx, dy, false));
            }
        }
    }
    Err(Error::Decode("sequence has no EOS".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book() -> Codebook {
        Codebook::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.2, 0, 1.0).unwrap()
    }

    #[test]
    fn nearest_codeword_token() {
        let seq = Stroke3Seq::new(vec![Stroke3Point::new(0.9, -0.1, true)]);
        let t = dict_encode(&seq, &book(), 4).unwrap();
        assert_eq!(t.tokens, vec![SOS, 5, EOS, PAD]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(nearest_centroid(&book(), 0.5, 0.5), 0);
        assert_eq!(nearest_centroid(&book(), 1.0, 1.0), 1);
        assert_eq!(nearest_centroid(&book(), 0.5, 0.0), 0);
    }

    #[test]
    fn separators_between_strokes_only() {
        let seq = Stroke3Seq::new(vec![
            Stroke3Point::new(0.0, 0.0, false),
            Stroke3Point::new(1.0, 0.0, true),
            Stroke3Point::new(0.0, 1.0, true),
        ]);
        let t = dict_encode(&seq, &book(), 8).unwrap();
        assert_eq!(t.tokens, vec![SOS, 4, 5, SEP, 6, EOS, PAD, PAD]);
        t.validate().unwrap();
        assert_eq!(dict_decode(&t, &book()).unwrap(), seq);
    }

    #[test]
    fn malformed_sequences() {
        let cb = book();
        let mk = |tokens: Vec<u32>| TokenSequence {
            tokens,
            vocab_size: cb.vocab_size(),
            scheme: Scheme::Dict,
        };
        assert!(dict_decode(&mk(vec![SOS, 4, 5]), &cb).is_err());
        assert!(dict_decode(&mk(vec![SOS, 4, 9, EOS]), &cb).is_err());
        assert!(dict_decode(&mk(vec![SOS, SEP, 4, EOS]), &cb).is_err());
        assert!(dict_decode(&mk(vec![SOS, EOS]), &cb).is_err());
        assert!(dict_encode(
            &Stroke3Seq::new(vec![Stroke3Point::new(0.0, 0.0, true); 3]),
            &cb,
            4
        )
        .is_err());
    }
}

use std::collections::BTreeMap;

use super::{
    dict_decode, dict_encode, frame, grid_decode, grid_encode, Codebook, GridSpec, Scheme,
    TokenSequence, EOS, PAD, SEP, SOS,
};
use crate::error::{Error, Result};
use crate::model::{Generated, InputMode, ModelInput};
use crate::sketch::{
    denormalize, from_stroke3, from_stroke5, normalize, to_stroke3, to_stroke5, Pen, Point, Sketch,
    Stroke3Seq, Stroke5Seq,
};

/// The input scheme a model was trained with, including everything needed
/// to map sketches in and out of it.
#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    /// Stroke-5 rows with offsets divided by `offset_scale`.
    Continuous { offset_scale: f64 },
    Dict { codebook: Codebook },
    Grid { grid: GridSpec },
}

impl Tokenizer {
    pub fn name(&self) -> &'static str {
        match self {
            Tokenizer::Continuous { .. } => "continuous",
            Tokenizer::Dict { .. } => "dict",
            Tokenizer::Grid { .. } => "grid",
        }
    }

    pub fn input_mode(&self) -> InputMode {
        match self {
            Tokenizer::Continuous { .. } => InputMode::Continuous,
            Tokenizer::Dict { codebook } => InputMode::Tokenized {
                vocab_size: codebook.vocab_size(),
            },
            Tokenizer::Grid { grid } => InputMode::Tokenized {
                vocab_size: grid.vocab_size(),
            },
        }
    }

    fn scheme(&self) -> Option<(Scheme, usize)> {
        match self {
            Tokenizer::Continuous { .. } => None,
            Tokenizer::Dict { codebook } => Some((Scheme::Dict, codebook.vocab_size())),
            Tokenizer::Grid { grid } => Some((Scheme::Grid, grid.vocab_size())),
        }
    }

    /// Encodes a stroke-3 sequence in absolute canvas units.
    pub fn encode_seq(&self, seq: &Stroke3Seq, origin: Point, max_len: usize) -> Result<ModelInput> {
        match self {
            Tokenizer::Continuous { offset_scale } => {
                let packed = to_stroke5(&normalize(seq, *offset_scale), max_len)?;
                Ok(ModelInput::from(&packed))
            }
            Tokenizer::Dict { codebook } => {
                let t = dict_encode(&normalize(seq, codebook.offset_scale), codebook, max_len)?;
                Ok(ModelInput::from(&t))
            }
            Tokenizer::Grid { grid } => {
                let sketch = from_stroke3(seq, origin)?;
                Ok(ModelInput::from(&grid_encode(&sketch, grid, max_len)?.tokens))
            }
        }
    }

    pub fn encode(&self, sketch: &Sketch, max_len: usize) -> Result<ModelInput> {
        let (seq, origin) = to_stroke3(sketch);
        self.encode_seq(&seq, origin, max_len)
    }

    /// Decodes a well-formed model input back to a sketch. Offset schemes
    /// need the absolute position of the first point.
    pub fn decode(&self, input: &ModelInput, origin: Point) -> Result<Sketch> {
        match (self, input) {
            (Tokenizer::Continuous { offset_scale }, ModelInput::Rows(rows)) => {
                let seq = from_stroke5(&Stroke5Seq { rows: rows.clone() });
                from_stroke3(&denormalize(&seq, *offset_scale), origin)
            }
            (Tokenizer::Dict { codebook }, ModelInput::Tokens(t)) => {
                let ts = self.token_sequence(t.clone());
                ts.validate()?;
                let seq = dict_decode(&ts, codebook)?;
                from_stroke3(&denormalize(&seq, codebook.offset_scale), origin)
            }
            (Tokenizer::Grid { grid }, ModelInput::Tokens(t)) => {
                let ts = self.token_sequence(t.clone());
                ts.validate()?;
                grid_decode(&ts, grid)
            }
            _ => Err(Error::Decode(format!(
                "{} tokenizer cannot decode this input kind",
                self.name()
            ))),
        }
    }

    fn token_sequence(&self, tokens: Vec<u32>) -> TokenSequence {
        let (scheme, vocab_size) = self.scheme().expect("token scheme");
        TokenSequence {
            tokens,
            vocab_size,
            scheme,
        }
    }

    /// Decodes free-running model output, repairing structure the decoder is
    /// not forced to respect: stray PAD/SOS are dropped, repeated or edge
    /// separators collapse, and a missing terminator is supplied.
    pub fn decode_generated(&self, generated: &Generated, origin: Point) -> Result<Sketch> {
        match generated {
            Generated::Tokens(t) => {
                let mut content: Vec<u32> = Vec::new();
                for &tok in t.iter().skip_while(|&&x| x == SOS) {
                    match tok {
                        EOS => break,
                        PAD | SOS => {}
                        SEP if content.last().is_none_or(|&l| l == SEP) => {}
                        x => content.push(x),
                    }
                }
                if content.last() == Some(&SEP) {
                    content.pop();
                }
                if content.is_empty() {
                    return Err(Error::Decode("generated sequence has no content".into()));
                }
                let (scheme, vocab) = self.scheme().ok_or_else(|| {
                    Error::Decode("continuous tokenizer given generated tokens".into())
                })?;
                let max_len = content.len() + 2;
                let framed = frame(content, vocab, scheme, max_len)?;
                self.decode(&ModelInput::Tokens(framed.tokens), origin)
            }
            Generated::Rows(rows) => {
                let mut rows: Vec<_> = rows.iter().copied().take_while(|r| r.pen != Pen::End).collect();
                if rows.is_empty() {
                    return Err(Error::Decode("generated sequence has no content".into()));
                }
                rows.push(crate::sketch::Stroke5Row::END);
                self.decode(&ModelInput::Rows(rows), origin)
            }
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("scheme".to_string(), self.name().to_string())];
        match self {
            Tokenizer::Continuous { offset_scale } => {
                kv.push(("offset_scale".into(), offset_scale.to_string()));
            }
            Tokenizer::Dict { codebook } => {
                kv.push(("offset_scale".into(), codebook.offset_scale.to_string()));
                kv.push(("k".into(), codebook.k().to_string()));
                kv.push(("lift_fraction".into(), codebook.lift_fraction.to_string()));
                kv.push(("seed".into(), codebook.seed.to_string()));
                kv.push(("codebook_sha256".into(), codebook.digest()));
            }
            Tokenizer::Grid { grid } => {
                kv.push(("grid_n".into(), grid.n.to_string()));
                kv.push(("grid_origin_x".into(), grid.origin.x.to_string()));
                kv.push(("grid_origin_y".into(), grid.origin.y.to_string()));
                kv.push(("grid_size".into(), grid.size.to_string()));
            }
        }
        kv
    }

    /// Rebuilds from manifest entries; dictionary schemes also need their
    /// centroids.
    pub fn from_kv(kv: &BTreeMap<String, String>, centroids: Option<Vec<[f32; 2]>>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("tokenizer entry {k} missing")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("tokenizer entry {k} is not a number")))
        };
        match get("scheme")?.as_str() {
            "continuous" => Ok(Tokenizer::Continuous {
                offset_scale: num("offset_scale")?,
            }),
            "dict" => {
                let centroids = centroids
                    .ok_or_else(|| Error::Format("dictionary tokenizer without centroids".into()))?;
                let seed = get("seed")?
                    .parse()
                    .map_err(|_| Error::Format("tokenizer seed is not an integer".into()))?;
                let codebook = Codebook::new(centroids, num("lift_fraction")?, seed, num("offset_scale")?)?;
                if let Some(expected) = kv.get("codebook_sha256") {
                    if &codebook.digest() != expected {
                        return Err(Error::Format("codebook digest mismatch".into()));
                    }
                }
                Ok(Tokenizer::Dict { codebook })
            }
            "grid" => Ok(Tokenizer::Grid {
                grid: GridSpec::new(
                    num("grid_n")? as usize,
                    Point::new(num("grid_origin_x")?, num("grid_origin_y")?),
                    num("grid_size")?,
                )?,
            }),
            other => Err(Error::Format(format!("unknown tokenizer scheme {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::Stroke5Row;

    fn square() -> Sketch {
        Sketch::new(vec![
            vec![Point::new(10.0, 10.0), Point::new(50.0, 10.0), Point::new(50.0, 50.0)],
            vec![Point::new(10.0, 50.0), Point::new(10.0, 10.0)],
        ])
        .unwrap()
    }

    #[test]
    fn continuous_round_trip_is_exact_up_to_scaling() {
        let tk = Tokenizer::Continuous { offset_scale: 8.0 };
        let sk = square();
        let input = tk.encode(&sk, 10).unwrap();
        let back = tk.decode(&input, Point::new(10.0, 10.0)).unwrap();
        assert_eq!(back.strokes, sk.strokes);
    }

    #[test]
    fn grid_round_trip_lands_in_cells() {
        let grid = GridSpec::quickdraw(32).unwrap();
        let tk = Tokenizer::Grid { grid };
        let input = tk.encode(&square(), 12).unwrap();
        let back = tk.decode(&input, Point::new(0.0, 0.0)).unwrap();
        for (a, b) in back.points().zip(square().points()) {
            assert!(a.distance(b) <= grid.max_error() + 1e-12);
        }
    }

    #[test]
    fn generated_tokens_are_repaired() {
        let tk = Tokenizer::Grid {
            grid: GridSpec::quickdraw(4).unwrap(),
        };
        let g = Generated::Tokens(vec![SOS, SEP, 5, PAD, SEP, SEP, 6, SEP]);
        let sk = tk.decode_generated(&g, Point::new(0.0, 0.0)).unwrap();
        assert_eq!(sk.strokes.len(), 2);
        assert!(tk
            .decode_generated(&Generated::Tokens(vec![SOS, EOS]), Point::new(0.0, 0.0))
            .is_err());
    }

    #[test]
    fn generated_rows_stop_at_terminator() {
        let tk = Tokenizer::Continuous { offset_scale: 1.0 };
        let rows = vec![
            Stroke5Row { dx: 1.0, dy: 0.0, pen: Pen::Draw },
            Stroke5Row { dx: 1.0, dy: 0.0, pen: Pen::Lift },
            Stroke5Row::END,
            Stroke5Row { dx: 9.0, dy: 9.0, pen: Pen::Draw },
        ];
        let sk = tk.decode_generated(&Generated::Rows(rows), Point::new(0.0, 0.0)).unwrap();
        assert_eq!(sk.num_points(), 2);
    }

    #[test]
    fn kv_round_trip() {
        let cb = Codebook::new(vec![[0.0, 0.0], [1.0, 0.5], [-1.0, 2.0]], 0.2, 7, 3.5).unwrap();
        let tk = Tokenizer::Dict { codebook: cb.clone() };
        let kv: BTreeMap<_, _> = tk.to_kv().into_iter().collect();
        assert_eq!(Tokenizer::from_kv(&kv, Some(cb.centroids.clone())).unwrap(), tk);
        let mut tampered = cb.centroids.clone();
        tampered[0][0] = 0.25;
        assert!(Tokenizer::from_kv(&kv, Some(tampered)).is_err());
        let g = Tokenizer::Grid {
            grid: GridSpec::quickdraw(16).unwrap(),
        };
        let kv: BTreeMap<_, _> = g.to_kv().into_iter().collect();
        assert_eq!(Tokenizer::from_kv(&kv, None).unwrap(), g);
    }
}

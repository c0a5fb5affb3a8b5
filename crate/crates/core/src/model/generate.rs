use ndarray::{Array2, ArrayView1, Axis};

use super::{InputMode, ModelInput, Sketchformer};
use crate::nn::Scalar;
use crate::sketch::{Pen, Stroke5Row};
use crate::tokenize::{EOS, SOS};

#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    /// Starts with SOS; ends with EOS unless the step budget ran out.
    Tokens(Vec<u32>),
    /// Generated rows; the last is the terminator unless the budget ran out.
    Rows(Vec<Stroke5Row>),
}

impl Generated {
    /// Number of emitted steps.
    pub fn steps(&self) -> usize {
        match self {
            Generated::Tokens(t) => t.len() - 1,
            Generated::Rows(r) => r.len(),
        }
    }
}

fn argmax<T: Scalar>(v: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Sketchformer<T> {
    /// Greedy decoding from one embedding. The step budget is capped at
    /// `max_len − 1` so the decoder input never outgrows the position table.
    pub fn autoregress(&self, z: ArrayView1<T>, max_steps: usize) -> Generated {
        let memory = self.expand(&z.to_owned().insert_axis(Axis(0)));
        let steps = max_steps.min(self.config.max_len - 1);
        let last_row = |input: ModelInput| -> Array2<T> {
            let out = self
                .decode(&memory, &[input])
                .expect("decoder input built within bounds");
            let n = out.nrows();
            out.slice_move(ndarray::s![n - 1..n, ..])
        };
        match self.config.mode {
            InputMode::Tokenized { .. } => {
                let mut seq = vec![SOS];
                for _ in 0..steps {
                    let logits = last_row(ModelInput::Tokens(seq.clone()));
                    let t = argmax(logits.row(0)) as u32;
                    seq.push(t);
                    if t == EOS {
                        break;
                    }
                }
                Generated::Tokens(seq)
            }
            InputMode::Continuous => {
                let mut rows = vec![Stroke5Row::START];
                for _ in 0..steps {
                    let out = last_row(ModelInput::Rows(rows.clone()));
                    let o = out.row(0);
                    let pen = Pen::from_index(argmax(o.slice(ndarray::s![2..5])))
                        .expect("three pen logits");
                    rows.push(Stroke5Row {
                        dx: o[0].as_f64(),
                        dy: o[1].as_f64(),
                        pen,
                    });
                    if pen == Pen::End {
                        break;
                    }
                }
                rows.remove(0);
                Generated::Rows(rows)
            }
        }
    }
}

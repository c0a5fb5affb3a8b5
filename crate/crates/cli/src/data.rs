use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sketchformer::dataset::{Dataset, Split};
use sketchformer::sketch::{to_stroke3, Sketch, Stroke3Seq};
use sketchformer::synth::{synth_corpus, SynthClass};
use sketchformer::tokenize::{fit_codebook, grid_decode, grid_encode, GridSpec, Tokenizer};

use crate::args::{FitDictArgs, IngestArgs, QuantizationArgs, SynthArgs};
use crate::error::{io_error, CliError, CliResult};
use crate::io::{print_summary, read_sketches, Output, Record};
use crate::Context;

/// Labels records by their category word, registering new words in order
/// of first appearance.
fn labeled(records: Vec<Record>, classes: &mut Vec<String>) -> Vec<Sketch> {
    records
        .into_iter()
        .map(|r| {
            let mut sk = r.sketch;
            sk.source_id = Some(r.id);
            if let Some(word) = r.word {
                let label = classes.iter().position(|c| *c == word).unwrap_or_else(|| {
                    classes.push(word);
                    classes.len() - 1
                });
                sk.label = Some(label);
            }
            sk
        })
        .collect()
}

pub fn ingest(ctx: &Context, a: IngestArgs) -> CliResult<()> {
    let mut classes = Vec::new();
    let mut train = labeled(read_sketches(&ctx.path(&a.input))?, &mut classes);
    let test = match (&a.test_input, a.test_fraction) {
        (Some(p), _) => labeled(read_sketches(&ctx.path(p))?, &mut classes),
        (None, Some(f)) => {
            if !(0.0..1.0).contains(&f) {
                return Err(CliError::usage(format!("--test-fraction {f} outside [0, 1)")));
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed()));
            let n_test = (train.len() as f64 * f).round() as usize;
            let mut held: Vec<usize> = order[..n_test].to_vec();
            held.sort_unstable();
            let mut test = Vec::with_capacity(n_test);
            for &i in held.iter().rev() {
                test.push(train.remove(i));
            }
            test.reverse();
            test
        }
        (None, None) => Vec::new(),
    };
    let ds = Dataset::build(&train, &test, classes, a.rdp_epsilon)?;
    ds.save(&ctx.path(&a.output))?;
    print_summary(&json!({
        "train": ds.meta.train_size,
        "test": ds.meta.test_size,
        "classes": ds.meta.class_names,
        "offset_scale": ds.meta.offset_scale,
        "rdp_epsilon": ds.meta.rdp_epsilon,
    }));
    Ok(())
}

pub fn synth(ctx: &Context, a: SynthArgs) -> CliResult<()> {
    let mut out = Output::open(ctx, a.output.as_deref())?;
    for sk in synth_corpus(a.per_class, ctx.seed()) {
        let word = sk.label.and_then(SynthClass::from_id).map(SynthClass::name);
        out.line(&sk.to_quickdraw_line(word))?;
    }
    out.finish()
}

fn train_seqs(ds: &Dataset) -> Vec<Stroke3Seq> {
    ds.split(Split::Train).map(|i| i.seq.clone()).collect()
}

pub fn fit_dict(ctx: &Context, a: FitDictArgs) -> CliResult<()> {
    let ds = Dataset::load(&ctx.path(&a.dataset))?;
    let cb = fit_codebook(&train_seqs(&ds), a.k, a.sample, a.lift_fraction, ctx.seed(), ds.meta.offset_scale)?;
    cb.save(&ctx.path(&a.output))?;
    print_summary(&json!({
        "k": cb.k(),
        "vocab_size": cb.vocab_size(),
        "offset_scale": cb.offset_scale,
        "digest": cb.digest(),
    }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct QuantRow {
    scheme: &'static str,
    size: usize,
    sketches: usize,
    points: usize,
    mean_error: f64,
    max_error: f64,
    mean_endpoint_error: f64,
    /// Points that fell outside the grid and were clamped to its border.
    clamped: usize,
}

#[derive(Default)]
struct ErrorStats {
    sum: f64,
    max: f64,
    points: usize,
    endpoint_sum: f64,
    sketches: usize,
    clamped: usize,
}

impl ErrorStats {
    fn add(&mut self, original: &Sketch, decoded: &Sketch) -> CliResult<()> {
        if original.num_points() != decoded.num_points() {
            return Err(CliError::input("round trip changed the number of points"));
        }
        for (p, q) in original.points().zip(decoded.points()) {
            let d = p.distance(q);
            self.sum += d;
            self.max = self.max.max(d);
        }
        self.points += original.num_points();
        let last = |s: &Sketch| *s.points().last().expect("non-empty sketch");
        self.endpoint_sum += last(original).distance(&last(decoded));
        self.sketches += 1;
        Ok(())
    }

    fn row(&self, scheme: &'static str, size: usize) -> QuantRow {
        QuantRow {
            scheme,
            size,
            sketches: self.sketches,
            points: self.points,
            mean_error: self.sum / self.points.max(1) as f64,
            max_error: self.max,
            mean_endpoint_error: self.endpoint_sum / self.sketches.max(1) as f64,
            clamped: self.clamped,
        }
    }
}

/// Enough slots for every point, separator and frame token.
fn capacity(sk: &Sketch) -> usize {
    sk.num_points() + sk.strokes.len() + 2
}

pub fn quantization_report(ctx: &Context, a: QuantizationArgs) -> CliResult<()> {
    let ds = Dataset::load(&ctx.path(&a.dataset))?;
    let split = if ds.meta.test_size > 0 { Split::Test } else { Split::Train };
    let sketches: Vec<Sketch> = ds.split(split).map(|i| i.sketch()).collect();
    let mut rows = Vec::new();
    for &n in &a.grid_n {
        let grid = GridSpec::quickdraw(n)?;
        let mut stats = ErrorStats::default();
        for sk in &sketches {
            let enc = grid_encode(sk, &grid, capacity(sk))?;
            stats.clamped += enc.clamped;
            stats.add(sk, &grid_decode(&enc.tokens, &grid)?)?;
        }
        rows.push(stats.row("grid", n));
    }
    let seqs = train_seqs(&ds);
    for &k in &a.dict_k {
        let codebook = fit_codebook(&seqs, k, a.sample, a.lift_fraction, ctx.seed(), ds.meta.offset_scale)?;
        let tk = Tokenizer::Dict { codebook };
        let mut stats = ErrorStats::default();
        for sk in &sketches {
            let input = tk.encode(sk, capacity(sk))?;
            stats.add(sk, &tk.decode(&input, to_stroke3(sk).1)?)?;
        }
        rows.push(stats.row("dict", k));
    }
    let mut out = Output::open(ctx, a.output.as_deref())?;
    {
        let mut w = csv::Writer::from_writer(out.writer());
        for r in &rows {
            w.serialize(r).map_err(|e| io_error(Path::new("<report>"), std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| io_error(Path::new("<report>"), e))?;
    }
    out.finish()
}

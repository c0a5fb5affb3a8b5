use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sketchformer::crossmodal::{sbir_query, JointModel};
use sketchformer::dataset::{Dataset, Split};
use sketchformer::embed::{mean_average_precision, precision_at_k, EmbeddingDump, EmbeddingIndex};
use sketchformer::model::ModelInput;
use sketchformer::pipeline::SketchModel;
use sketchformer::sketch::{to_stroke3, Pen, Point, Sketch, Stroke5Row};
use sketchformer::tokenize::EOS;
use sketchformer_service::api::{self, RetrieveBody};
use sketchformer_service::{Limits, ServiceConfig, DUMP_DIGEST_KEY};

use crate::args::{
    DecodeArgs, EncodeArgs, EvalClassifyArgs, EvalRetrievalArgs, IndexArgs, InterpolateArgs, PerturbArgs,
    RetrieveArgs, ServeArgs, SketchIoArgs, SplitArg,
};
use crate::error::{CliError, CliResult, ExitKind};
use crate::io::{find, print_summary, read_lines, read_sketches, Output, Record, Tagged};
use crate::Context;

fn load_model(ctx: &Context, path: &std::path::Path) -> CliResult<SketchModel> {
    Ok(SketchModel::load(&ctx.path(path))?)
}

fn for_sketch(id: &str) -> impl Fn(sketchformer::Error) -> CliError + '_ {
    move |e| CliError::from(e).context(format!("sketch {id}"))
}

/// A QuickDraw line carrying a stroke list produced by the service builders.
fn quickdraw_line(word: Option<&str>, id: &str, strokes: Value) -> String {
    let mut obj = serde_json::Map::new();
    if let Some(w) = word {
        obj.insert("word".into(), Value::String(w.into()));
    }
    obj.insert("key_id".into(), Value::String(id.into()));
    obj.insert("drawing".into(), strokes);
    Value::Object(obj).to_string()
}

/// Tokenized form written by `encode` and read by `decode`.
#[derive(Debug, Serialize, Deserialize)]
struct Encoded {
    id: String,
    /// Absolute position of the first point.
    origin: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<[f64; 5]>>,
}

pub fn encode(ctx: &Context, a: EncodeArgs) -> CliResult<()> {
    let model = load_model(ctx, &a.io.model)?;
    let records = read_sketches(&ctx.path(&a.io.input))?;
    let mut out = Output::open(ctx, a.io.output.as_deref())?;
    for r in &records {
        if a.embedding {
            let body = api::encode(&model, &r.sketch).map_err(for_sketch(&r.id))?;
            out.json(&Tagged { id: &r.id, body })?;
            continue;
        }
        let input = model.input(&r.sketch).map_err(for_sketch(&r.id))?;
        let origin = to_stroke3(&r.sketch).1;
        let mut line = Encoded {
            id: r.id.clone(),
            origin: [origin.x, origin.y],
            tokens: None,
            rows: None,
        };
        match input {
            ModelInput::Tokens(t) => {
                let end = t.iter().position(|&x| x == EOS).map_or(t.len(), |i| i + 1);
                line.tokens = Some(t[..end].to_vec());
            }
            ModelInput::Rows(rows) => {
                let end = rows.iter().position(|r| r.pen == Pen::End).map_or(rows.len(), |i| i + 1);
                line.rows = Some(rows[..end].iter().map(|r| r.to_array()).collect());
            }
        }
        out.json(&line)?;
    }
    out.finish()
}

pub fn decode(ctx: &Context, a: DecodeArgs) -> CliResult<()> {
    let model = load_model(ctx, &a.model)?;
    let path = ctx.path(&a.input);
    let mut out = Output::open(ctx, a.output.as_deref())?;
    for (line_no, line) in read_lines(&path)? {
        let at = |e: CliError| e.context(format!("{}:{line_no}", path.display()));
        let enc: Encoded = serde_json::from_str(&line).map_err(|e| at(CliError::input(e.to_string())))?;
        let input = match (enc.tokens, enc.rows) {
            (Some(t), None) => ModelInput::Tokens(t),
            (None, Some(rows)) => ModelInput::Rows(
                rows.into_iter()
                    .map(Stroke5Row::from_array)
                    .collect::<sketchformer::Result<_>>()
                    .map_err(|e| at(e.into()))?,
            ),
            _ => return Err(at(CliError::input("expected exactly one of \"tokens\" or \"rows\""))),
        };
        let sketch = model
            .tokenizer()
            .decode(&input, Point::new(enc.origin[0], enc.origin[1]))
            .map_err(|e| at(e.into()))?;
        out.line(&quickdraw_line(None, &enc.id, sketch.to_stroke_list()))?;
    }
    out.finish()
}

fn sketch_io(ctx: &Context, io: &SketchIoArgs) -> CliResult<(SketchModel, Vec<Record>, Output)> {
    let model = load_model(ctx, &io.model)?;
    let records = read_sketches(&ctx.path(&io.input))?;
    let out = Output::open(ctx, io.output.as_deref())?;
    Ok((model, records, out))
}

pub fn reconstruct(ctx: &Context, a: SketchIoArgs) -> CliResult<()> {
    let (model, records, mut out) = sketch_io(ctx, &a)?;
    for r in &records {
        let body = api::reconstruct(&model, &r.sketch).map_err(for_sketch(&r.id))?;
        out.line(&quickdraw_line(r.word.as_deref(), &r.id, body.strokes))?;
    }
    out.finish()
}

pub fn interpolate(ctx: &Context, a: InterpolateArgs) -> CliResult<()> {
    let (model, records, mut out) = sketch_io(ctx, &a.io)?;
    let (ra, rb) = (find(&records, &a.a)?, find(&records, &a.b)?);
    let body = api::interpolate(&model, &ra.sketch, &rb.sketch, a.steps)?;
    for (i, frame) in body.frames.into_iter().enumerate() {
        out.line(&quickdraw_line(None, &format!("{}~{}:{i}", ra.id, rb.id), frame))?;
    }
    out.finish()
}

pub fn perturb(ctx: &Context, a: PerturbArgs) -> CliResult<()> {
    let (model, records, mut out) = sketch_io(ctx, &a.io)?;
    for r in &records {
        let body = api::perturb(&model, &r.sketch, a.sigma, ctx.seed()).map_err(for_sketch(&r.id))?;
        out.line(&quickdraw_line(r.word.as_deref(), &r.id, body.strokes))?;
    }
    out.finish()
}

/// Labels records by the model's class names; unknown or missing words map to `None`.
fn model_labels(model: &SketchModel, records: &[Record]) -> Vec<Option<usize>> {
    records
        .iter()
        .map(|r| {
            r.word
                .as_ref()
                .and_then(|w| model.class_names().iter().position(|c| c == w))
        })
        .collect()
}

fn load_joint(ctx: &Context, path: &std::path::Path, model: &SketchModel) -> CliResult<JointModel> {
    let joint = JointModel::load(&ctx.path(path))?;
    if joint.sketch_digest != model.digest() {
        return Err(CliError::new(
            ExitKind::Config,
            "joint heads were trained over a different sketch model",
        ));
    }
    Ok(joint)
}

pub fn index(ctx: &Context, a: IndexArgs) -> CliResult<()> {
    let model = load_model(ctx, &a.model)?;
    let (sketches, ids): (Vec<Sketch>, Vec<String>) = match (&a.dataset, &a.input) {
        (Some(p), _) => {
            let ds = Dataset::load(&ctx.path(p))?;
            let items: Vec<_> = match a.split {
                SplitArg::Train => ds.split(Split::Train).collect(),
                SplitArg::Test => ds.split(Split::Test).collect(),
                SplitArg::All => ds.items.iter().collect(),
            };
            items
                .into_iter()
                .enumerate()
                .map(|(i, it)| (it.sketch(), it.source_id.clone().unwrap_or_else(|| i.to_string())))
                .unzip()
        }
        (None, Some(p)) => {
            let records = read_sketches(&ctx.path(p))?;
            let labels = model_labels(&model, &records);
            records
                .into_iter()
                .zip(labels)
                .map(|(r, l)| {
                    let mut sk = r.sketch;
                    sk.label = l;
                    (sk, r.id)
                })
                .unzip()
        }
        (None, None) => return Err(CliError::usage("give --dataset or --input")),
    };
    let dump = match &a.joint {
        Some(p) => load_joint(ctx, p, &model)?.raster_dump(&sketches, ids)?,
        None => {
            let labels = sketches
                .iter()
                .zip(&ids)
                .map(|(s, id)| s.label.ok_or_else(|| CliError::input(format!("sketch {id} has no known class"))))
                .collect::<CliResult<Vec<_>>>()?;
            let mut dump = EmbeddingDump::new(ids, labels, model.embed_many(&sketches)?)?;
            dump.meta.insert("space".into(), "sketch".into());
            dump.meta.insert(DUMP_DIGEST_KEY.into(), model.digest().into());
            dump
        }
    };
    dump.save(&ctx.path(&a.output))?;
    print_summary(&json!({ "items": dump.ids.len(), "dim": dump.matrix.ncols(), "meta": dump.meta }));
    Ok(())
}

fn check_k(k: usize, len: usize) -> CliResult<()> {
    if k == 0 || k > len {
        return Err(CliError::usage(format!("--k must be in 1..={len}")));
    }
    Ok(())
}

pub fn retrieve(ctx: &Context, a: RetrieveArgs) -> CliResult<()> {
    let (model, records, mut out) = sketch_io(ctx, &a.io)?;
    let dump = EmbeddingDump::load(&ctx.path(&a.index))?;
    let index = EmbeddingIndex::from_dump(&dump, a.metric)?;
    check_k(a.k, index.len())?;
    let joint = match &a.joint {
        Some(p) => {
            if dump.meta.get("space").map(String::as_str) != Some("joint-raster") {
                return Err(CliError::usage("--joint needs an index built with `index --joint`"));
            }
            Some(load_joint(ctx, p, &model)?)
        }
        None => {
            if dump.meta.get(DUMP_DIGEST_KEY).map(String::as_str) != Some(model.digest()) {
                return Err(CliError::new(ExitKind::Config, "index was built with a different model"));
            }
            None
        }
    };
    for r in &records {
        let body = match &joint {
            Some(j) => RetrieveBody {
                results: sbir_query(j, &model, &r.sketch, &index, a.k).map_err(for_sketch(&r.id))?,
            },
            None => api::retrieve(&model, &index, &r.sketch, a.k).map_err(for_sketch(&r.id))?,
        };
        out.json(&Tagged { id: &r.id, body })?;
    }
    out.finish()
}

#[derive(Debug, Default, Serialize)]
struct ClassTally {
    items: usize,
    correct: usize,
}

pub fn eval_classify(ctx: &Context, a: EvalClassifyArgs) -> CliResult<()> {
    let model = load_model(ctx, &a.model)?;
    let (sketches, ids, labels): (Vec<Sketch>, Vec<String>, Vec<Option<usize>>) = match (&a.dataset, &a.input) {
        (Some(p), _) => {
            let ds = Dataset::load(&ctx.path(p))?;
            if ds.meta.class_names != model.class_names() {
                return Err(CliError::usage("dataset and model disagree on the class names"));
            }
            let mut out = (Vec::new(), Vec::new(), Vec::new());
            for (i, it) in ds.split(Split::Test).enumerate() {
                out.0.push(it.sketch());
                out.1.push(it.source_id.clone().unwrap_or_else(|| i.to_string()));
                out.2.push(it.label);
            }
            out
        }
        (None, Some(p)) => {
            let records = read_sketches(&ctx.path(p))?;
            let labels = model_labels(&model, &records);
            let (s, i) = records.into_iter().map(|r| (r.sketch, r.id)).unzip();
            (s, i, labels)
        }
        (None, None) => return Err(CliError::usage("give --dataset or --input")),
    };
    if sketches.is_empty() {
        return Err(CliError::input("nothing to classify"));
    }
    let mut predictions = a.predictions.as_deref().map(|p| Output::open(ctx, Some(p))).transpose()?;
    let mut per_class: BTreeMap<String, ClassTally> = BTreeMap::new();
    let (mut labelled, mut correct) = (0usize, 0usize);
    for ((sk, id), label) in sketches.iter().zip(&ids).zip(&labels) {
        let body = api::classify(&model, sk).map_err(for_sketch(id))?;
        if let Some(l) = *label {
            let hit = body.class == l;
            labelled += 1;
            correct += hit as usize;
            let name = model.class_names().get(l).cloned().unwrap_or_else(|| l.to_string());
            let t = per_class.entry(name).or_default();
            t.items += 1;
            t.correct += hit as usize;
        }
        if let Some(out) = &mut predictions {
            out.json(&Tagged { id, body })?;
        }
    }
    if let Some(out) = predictions {
        out.finish()?;
    }
    print_summary(&json!({
        "items": sketches.len(),
        "labelled": labelled,
        "accuracy": (labelled > 0).then(|| correct as f64 / labelled as f64),
        "per_class": per_class,
    }));
    Ok(())
}

fn labelled_split(ds: &Dataset, split: Split) -> CliResult<(Vec<Sketch>, Vec<String>, Vec<usize>)> {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (i, it) in ds.split(split).enumerate() {
        let id = it.source_id.clone().unwrap_or_else(|| i.to_string());
        let label = it.label.ok_or_else(|| CliError::input(format!("sketch {id} has no label")))?;
        out.0.push(it.sketch());
        out.1.push(id);
        out.2.push(label);
    }
    Ok(out)
}

pub fn eval_retrieval(ctx: &Context, a: EvalRetrievalArgs) -> CliResult<()> {
    let model = load_model(ctx, &a.model)?;
    let ds = Dataset::load(&ctx.path(&a.dataset))?;
    let (gallery, gallery_ids, gallery_labels) = labelled_split(&ds, Split::Train)?;
    let (queries, _, query_labels) = labelled_split(&ds, Split::Test)?;
    if queries.is_empty() {
        return Err(CliError::input("dataset has no test split to query with"));
    }
    check_k(a.k, gallery.len())?;
    let (g, q): (Array2<f32>, Array2<f32>) = match &a.joint {
        Some(p) => {
            let joint = load_joint(ctx, p, &model)?;
            (joint.embed_rasters(&gallery)?, joint.embed_sketches(&model, &queries)?)
        }
        None => (model.embed_many(&gallery)?, model.embed_many(&queries)?),
    };
    let index = EmbeddingIndex::new(gallery_ids, g, a.metric)?;
    let mut rankings = Vec::with_capacity(queries.len());
    let mut p_sum = 0.0;
    for (row, &label) in q.rows().into_iter().zip(&query_labels) {
        let ranked = index.rank_all(row.mapv(f64::from).view())?;
        let relevant: Vec<bool> = ranked.iter().map(|r| gallery_labels[r.index] == label).collect();
        p_sum += precision_at_k(&relevant, a.k)?;
        rankings.push(relevant);
    }
    print_summary(&json!({
        "queries": queries.len(),
        "gallery": index.len(),
        "space": if a.joint.is_some() { "joint" } else { "sketch" },
        "metric": a.metric,
        "map": mean_average_precision(&rankings),
        "k": a.k,
        "precision_at_k": p_sum / queries.len() as f64,
    }));
    Ok(())
}

pub fn serve(ctx: &Context, a: ServeArgs) -> CliResult<()> {
    let mut limits = Limits {
        max_body_bytes: a.max_body_bytes,
        max_points: a.max_points,
        ..Default::default()
    };
    if !a.cors_origins.is_empty() {
        limits.cors_origins = a.cors_origins;
    }
    let config = ServiceConfig {
        checkpoint: ctx.path(&a.model),
        codebook: a.codebook.map(|p| ctx.path(&p)),
        index: a.index.map(|p| ctx.path(&p)),
        metric: a.metric,
        listen: a.listen,
        limits,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(ExitKind::Serve, e.to_string()))?;
    runtime.block_on(sketchformer_service::serve(config))?;
    Ok(())
}

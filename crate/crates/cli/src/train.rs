use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::time::Instant;

use log::{info, warn};
use serde_json::json;
use sketchformer::crossmodal::{
    evaluate_joint, raster_input, train_joint as fit_joint, JointConfig, JointData, JointModel, RasterEncoder,
    RasterTrainConfig,
};
use sketchformer::dataset::{Dataset, DatasetItem, Split};
use sketchformer::model::Sketchformer;
use sketchformer::pipeline::{SketchModel, EMBED_CHUNK};
use sketchformer::sketch::Sketch;
use sketchformer::tokenize::{Codebook, GridSpec, Tokenizer};
use sketchformer::train::{Checkpoint, RunConfig, TrainItem, TrainSet, Trainer};
use sketchformer::Result;

use crate::args::{Mode, TrainArgs, TrainJointArgs};
use crate::error::{io_error, CliError, CliResult};
use crate::io::print_summary;
use crate::Context;

/// Triplets sampled when scoring the joint space on held-out data.
const EVAL_TRIPLETS: usize = 2000;

fn tokenizer(ctx: &Context, a: &TrainArgs, ds: &Dataset) -> CliResult<Tokenizer> {
    Ok(match a.mode {
        Mode::Continuous => Tokenizer::Continuous {
            offset_scale: ds.meta.offset_scale,
        },
        Mode::Grid => Tokenizer::Grid {
            grid: GridSpec::quickdraw(a.grid_n)?,
        },
        Mode::Dict => {
            let path = a
                .codebook
                .as_ref()
                .ok_or_else(|| CliError::usage("--mode dict needs --codebook"))?;
            let codebook = Codebook::load(&ctx.path(path))?;
            if codebook.offset_scale != ds.meta.offset_scale {
                warn!(
                    "codebook offset scale {} differs from the dataset's {}",
                    codebook.offset_scale, ds.meta.offset_scale
                );
            }
            Tokenizer::Dict { codebook }
        }
    })
}

fn fresh_trainer(ctx: &Context, a: &TrainArgs, ds: &Dataset) -> CliResult<Trainer> {
    let mut run = match &a.config {
        Some(p) => {
            let p = ctx.path(p);
            let text = std::fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
            RunConfig::parse(&text).map_err(|e| CliError::from(e).context(p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = ctx.seed {
        run.train.seed = seed;
    }
    run.train.shuffle_strokes |= a.shuffle_strokes;
    let tokenizer = tokenizer(ctx, a, ds)?;
    let config = run.model.config(tokenizer.input_mode(), ds.meta.class_names.len());
    let model = Sketchformer::new(config, run.train.seed)?;
    let mut trainer = Trainer::new(model, tokenizer, run.train)?;
    trainer.rdp_epsilon = ds.meta.rdp_epsilon;
    Ok(trainer)
}

fn train_items<'a>(items: impl IntoIterator<Item = &'a DatasetItem>, trainer: &Trainer) -> Result<TrainSet> {
    TrainSet::new(
        TrainItem::from_dataset(items)?,
        &trainer.tokenizer,
        trainer.model.config().max_len,
    )
}

pub fn train(ctx: &Context, a: TrainArgs) -> CliResult<()> {
    let ds = Dataset::load(&ctx.path(&a.dataset))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&ctx.path(p))?;
            if ckpt.class_names != ds.meta.class_names {
                return Err(CliError::usage("checkpoint and dataset disagree on the class names"));
            }
            Trainer::resume(ckpt)?
        }
        None => fresh_trainer(ctx, &a, &ds)?,
    };
    if let Some(steps) = a.steps {
        trainer.config.steps = steps;
    }
    let data = train_items(ds.split(Split::Train), &trainer)?;
    if data.skipped > 0 {
        warn!("{} training sketches exceed max_len and were skipped", data.skipped);
    }
    let mut log = match &a.log {
        Some(p) => {
            let p = ctx.path(p);
            let f = File::create(&p).map_err(|e| io_error(&p, e))?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let remaining = trainer.config.steps.saturating_sub(trainer.optimizer.step);
    let every = trainer.config.log_every;
    let start = Instant::now();
    let mut log_error = None;
    let reports = trainer.fit(&data, remaining, |_, r| {
        if r.step % every == 0 || r.step == 1 {
            info!("step {} loss {:.4} (recon {:.4}, class {:.4})", r.step, r.total, r.recon_loss, r.class_loss);
        }
        if let Some((w, p)) = &mut log {
            if let Err(e) = writeln!(w, "{}", r.to_log_line(start.elapsed().as_secs_f64())) {
                log_error = Some(io_error(p, e));
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| io_error(&p, e))?;
    }
    trainer.checkpoint(&ds.meta.class_names).save(&ctx.path(&a.output))?;

    let test = if ds.meta.test_size > 0 {
        let set = train_items(ds.split(Split::Test), &trainer)?;
        Some(trainer.evaluate(set.inputs(), &set.labels(), EMBED_CHUNK)?)
    } else {
        None
    };
    print_summary(&json!({
        "step": trainer.optimizer.step,
        "train_items": data.len(),
        "skipped": data.skipped,
        "last": reports.last(),
        "test": test,
    }));
    Ok(())
}

fn split_with_ids(ds: &Dataset, split: Split) -> (Vec<Sketch>, Vec<String>) {
    ds.split(split)
        .enumerate()
        .map(|(i, item)| (item.sketch(), item.source_id.clone().unwrap_or_else(|| i.to_string())))
        .unzip()
}

pub fn train_joint(ctx: &Context, a: TrainJointArgs) -> CliResult<()> {
    let model_path = ctx.path(&a.model);
    let sketch_model = SketchModel::load(&model_path)?;
    let ds = Dataset::load(&ctx.path(&a.dataset))?;
    let seed = ctx.seed();
    let (train, ids) = split_with_ids(&ds, Split::Train);

    let images = train.iter().map(raster_input).collect::<Result<Vec<_>>>()?;
    let labels = train
        .iter()
        .map(|s| s.label.ok_or_else(|| CliError::input("joint training needs labelled sketches")))
        .collect::<CliResult<Vec<_>>>()?;
    let mut raster = RasterEncoder::new(ds.meta.class_names.len(), seed)?;
    let losses = raster.pretrain(
        &images,
        &labels,
        &RasterTrainConfig {
            steps: a.raster_steps,
            seed,
            ..Default::default()
        },
    )?;
    info!("raster encoder pretrained, final loss {:?}", losses.last());
    raster.freeze();

    let data = JointData::build(&sketch_model, &raster, &train, ids)?;
    let config = JointConfig {
        phase1_steps: a.phase1_steps,
        phase2_steps: a.phase2_steps,
        batch_size: a.batch_size,
        base_lr: a.lr,
        seed,
        finetune_encoder: a.finetune_encoder,
        ..Default::default()
    };
    let mut encoder = sketch_model.model().clone();
    let outcome = fit_joint(&data, &mut encoder, &raster, &config, |r| {
        if r.step % 50 == 0 {
            info!("joint step {} phase {} loss {:.4} satisfied {:.3}", r.step, r.phase, r.total, r.satisfied);
        }
    })?;

    let sketch_model = match &a.encoder_output {
        Some(p) if a.finetune_encoder => {
            let mut ckpt = Checkpoint::load(&model_path)?.inference_only();
            ckpt.model = encoder;
            ckpt.save(&ctx.path(p))?;
            SketchModel::new(ckpt)?
        }
        _ => sketch_model,
    };
    let joint = JointModel {
        heads: outcome.heads.clone(),
        raster,
        sketch_digest: sketch_model.digest().to_string(),
    };
    joint.save(&ctx.path(&a.output))?;

    let held_out = if ds.meta.test_size > 0 {
        let (test, test_ids) = split_with_ids(&ds, Split::Test);
        let data = JointData::build(&sketch_model, &joint.raster, &test, test_ids)?;
        Some(json!({
            "phase1": evaluate_joint(&outcome.phase1_heads, &data, EVAL_TRIPLETS, seed)?,
            "final": evaluate_joint(&outcome.heads, &data, EVAL_TRIPLETS, seed)?,
        }))
    } else {
        None
    };
    print_summary(&json!({
        "steps": outcome.steps.len(),
        "last": outcome.steps.last(),
        "encoder_unchanged": outcome.encoder_digest.0 == outcome.encoder_digest.1,
        "raster_unchanged": outcome.raster_digest.0 == outcome.raster_digest.1,
        "test": held_out,
    }));
    Ok(())
}

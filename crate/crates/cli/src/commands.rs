use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use concur_core::eval::{embed_videos, nearest, recall_report, retrieval_recall};
use concur_core::model::{load_checkpoint, save_checkpoint, write_checkpoint, ModelState};
use concur_core::sampler::temporal_span;
use concur_core::synthvid::{generate_splits, write_video, Video};
use concur_core::train::{finetune, pretrain as run_pretrain, Mode, RunConfig, TrainError};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{resolve, Sources};
use crate::{ConfigArgs, EvalMode};

fn resolve_args(a: &ConfigArgs) -> Result<RunConfig> {
    resolve(&Sources {
        config: a.config.as_deref(),
        preset: a.preset.as_deref(),
        overrides: &a.overrides,
        seed: a.seed,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_data(cfg: &RunConfig) -> Result<(Vec<Video>, Vec<Video>)> {
    generate_splits(&cfg.dataset).context("generating dataset")
}

/// Pretrains into `dir`, streaming one metrics line per epoch.
fn pretrain_into(cfg: &RunConfig, train: &[Video], dir: &Path) -> Result<ModelState<f32>> {
    make_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let ckpt = dir.join("checkpoint.bin");
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let every = cfg.checkpoint_every;
    let outcome = run_pretrain(cfg, train, |m, state| {
        let line = serde_json::to_string(m).map_err(|e| TrainError::Callback(e.to_string()))?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| TrainError::Callback(format!("writing metrics: {e}")))?;
        if every > 0 && (m.epoch + 1) % every == 0 {
            save_checkpoint(&ckpt, state)?;
        }
        eprintln!(
            "epoch {:>3}  ts {:>3}  l_total {:.4}  lr {:.5}",
            m.epoch, m.ts, m.l_total, m.lr
        );
        Ok(())
    })?;
    save_checkpoint(&ckpt, &outcome.state)?;
    Ok(outcome.state)
}

pub fn pretrain(args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut cfg = resolve_args(args)?;
    cfg.mode = Mode::Pretrain;
    let (train, _) = load_data(&cfg)?;
    pretrain_into(&cfg, &train, out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn encoder_digest(state: &ModelState<f32>) -> String {
    hex::encode(Sha256::digest(write_checkpoint(&state.encoder_params())))
}

pub fn eval(mode: EvalMode, checkpoint: &Path, args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut cfg = resolve_args(args)?;
    match mode {
        EvalMode::Linear => cfg.mode = Mode::Linear,
        EvalMode::Finetune => cfg.mode = Mode::Finetune,
        EvalMode::Retrieve => {}
    }
    let state: ModelState<f32> = load_checkpoint(checkpoint, &cfg.model)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (train, test) = load_data(&cfg)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;

    if mode == EvalMode::Retrieve {
        let geom = cfg.geometry();
        let index = embed_videos(&train, &state, geom, &cfg.inference)?;
        let queries = embed_videos(&test, &state, geom, &cfg.inference)?;
        let recall = retrieval_recall(&index, &queries, &cfg.retrieval_ks)?;
        write_json(&out.join("report.json"), &recall_report(&recall))?;
        let kmax = cfg.retrieval_ks.iter().copied().max().unwrap_or(1);
        let neighbours = queries
            .keys()
            .iter()
            .zip(queries.labels())
            .map(|(q, &label)| {
                let idx = nearest(&index, q, kmax)?;
                let labels: Vec<usize> = idx.iter().map(|&j| index.labels()[j]).collect();
                Ok(json!({ "label": label, "neighbours": idx, "neighbour_labels": labels }))
            })
            .collect::<Result<Vec<Value>>>()?;
        write_json(&out.join("neighbours.json"), &neighbours)?;
        for (k, r) in &recall {
            println!("recall@{k}\t{r:.4}");
        }
        return Ok(());
    }

    let freeze = mode == EvalMode::Linear;
    let before = encoder_digest(&state);
    let result = finetune(&cfg, &state, &train, &test, freeze)?;
    let after = encoder_digest(&result.state);
    if freeze && before != after {
        bail!("encoder weights changed during linear evaluation");
    }
    save_checkpoint(&out.join("classifier.bin"), &result.state)?;
    let report = json!({
        "mode": if freeze { "linear" } else { "finetune" },
        "train_accuracy": result.train_accuracy,
        "test_accuracy": result.test_accuracy,
        "losses": result.losses,
        "encoder_sha256_before": before,
        "encoder_sha256_after": after,
    });
    write_json(&out.join("report.json"), &report)?;
    println!(
        "train_accuracy\t{:.4}\ntest_accuracy\t{:.4}",
        result.train_accuracy, result.test_accuracy
    );
    Ok(())
}

pub fn schedule(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_args(args)?;
    let cur = cfg.curriculum_resolved();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "epoch\tts")?;
    for e in 0..cfg.epochs {
        writeln!(stdout, "{e}\t{}", temporal_span(e, &cur))?;
    }
    Ok(())
}

/// Grid cells in the order (curriculum, cs_loss) = TT, TF, FT, FF.
pub const GRID: [(bool, bool); 4] = [(true, true), (true, false), (false, true), (false, false)];

pub fn ablate(args: &ConfigArgs, out: &Path, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(crate::config::config_err("--seeds must be at least 1"));
    }
    let base = resolve_args(args)?;
    let (train, test) = load_data(&base)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), &base)?;
    let mut rows = Vec::new();
    for (curriculum, cs_loss) in GRID {
        let mut accs = Vec::new();
        let mut seed_list = Vec::new();
        for i in 0..seeds {
            let mut cfg = base.ablated(curriculum, cs_loss);
            cfg.seed = base.seed + i;
            let dir = out.join(format!(
                "curriculum-{curriculum}_cs-{cs_loss}_seed-{}",
                cfg.seed
            ));
            eprintln!(
                "== curriculum={curriculum} cs_loss={cs_loss} seed={}",
                cfg.seed
            );
            let state = pretrain_into(&cfg, &train, &dir)?;
            let lin = finetune(&cfg, &state, &train, &test, true)?;
            accs.push(lin.test_accuracy);
            seed_list.push(cfg.seed);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("curriculum={curriculum}\tcs_loss={cs_loss}\tmean_accuracy={mean:.4}");
        rows.push(json!({
            "curriculum": curriculum,
            "cs_loss": cs_loss,
            "seeds": seed_list,
            "accuracy": accs,
            "mean_accuracy": mean,
        }));
    }
    write_json(&out.join("report.json"), &json!({ "rows": rows }))
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_args(args)?;
    let (train, test) = load_data(&cfg)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut index = Vec::new();
    for (split, videos) in [("train", &train), ("test", &test)] {
        let dir = out.join(split);
        make_dir(&dir)?;
        for (i, v) in videos.iter().enumerate() {
            let name = format!("{i:05}.cvid");
            write_video(&dir.join(&name), v)?;
            index.push(json!({ "split": split, "file": format!("{split}/{name}"), "label": v.label, "seed": v.seed }));
        }
    }
    write_json(&out.join("index.json"), &index)?;
    eprintln!(
        "wrote {} train and {} test videos to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

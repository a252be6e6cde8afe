//! The two training stages: codebook on images, then transformer on tokens.
//!
//! Every random draw comes from `stream(seed, purpose, step)`, so a run that
//! stops at step `t` and resumes from its checkpoint follows exactly the
//! trajectory of an uninterrupted run.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use serde_json::json;
use viewformer_core::codebook::Codebook;
use viewformer_core::image::Image;
use viewformer_core::model::{EpisodeBatch, Model, Tasks};
use viewformer_core::optim::AdamState;
use viewformer_core::rng::{permutation, stream};

use crate::checkpoint::{CodebookState, TransformerState};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split, TokenDataset};
use crate::error::{Error, Result};
use crate::report::{append_csv, log_event};

const PURPOSE_CODEBOOK_INIT: u64 = 1;
const PURPOSE_CODEBOOK_BATCH: u64 = 2;
const PURPOSE_CODEBOOK_STEP: u64 = 3;
const PURPOSE_MODEL_INIT: u64 = 4;
const PURPOSE_MODEL_BATCH: u64 = 5;
const PROGRESS_EVERY: u64 = 250;

pub const CODEBOOK_METRICS: &str = "codebook_metrics.csv";
pub const CODEBOOK_EVENTS: &str = "codebook_events.jsonl";
pub const TRANSFORMER_METRICS: &str = "transformer_metrics.csv";
pub const TRANSFORMER_EVENTS: &str = "transformer_events.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodebookRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub rec_mae: f64,
    pub edge: f64,
    pub commit: f64,
    pub active_codes: usize,
    pub reseeded: usize,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransformerRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_nvs: f64,
    pub loss_pose: f64,
    pub token_accuracy: f64,
    pub skipped: bool,
}

pub fn init_codebook(cfg: &RunConfig) -> Result<CodebookState> {
    let codebook = Codebook::new(cfg.codebook.clone(), &mut stream(cfg.seed, PURPOSE_CODEBOOK_INIT, 0))?;
    let adam = AdamState::new(&codebook.params);
    Ok(CodebookState {
        codebook,
        adam,
        step: 0,
    })
}

pub fn init_transformer(cfg: &RunConfig) -> Result<TransformerState> {
    let model = Model::new(cfg.model.clone(), &mut stream(cfg.seed, PURPOSE_MODEL_INIT, 0))?;
    let adam = AdamState::new(&model.params);
    Ok(TransformerState { model, adam, step: 0 })
}

/// Advances `state` until step `until` (capped at the configured total) and
/// returns one metrics row per step taken.
pub fn codebook_steps(
    cfg: &RunConfig,
    data: &Dataset,
    state: &mut CodebookState,
    until: u64,
) -> Result<Vec<CodebookRow>> {
    let images: Vec<&Image> = data
        .split(Split::Train)
        .flat_map(|e| e.views.iter().map(|v| &v.image))
        .collect();
    if images.is_empty() {
        return Err(Error::Config("dataset has no training images".into()));
    }
    let sched = &cfg.codebook_training;
    let mut rows = Vec::new();
    while state.step < until.min(sched.steps) {
        let step = state.step;
        let mut pick = stream(cfg.seed, PURPOSE_CODEBOOK_BATCH, step);
        let batch: Vec<&Image> = (0..sched.batch)
            .map(|_| images[pick.random_range(0..images.len())])
            .collect();
        let lr = sched.lr_at(step);
        let m = state.codebook.train_step(
            &mut state.adam,
            &cfg.adam,
            &batch,
            lr,
            &mut stream(cfg.seed, PURPOSE_CODEBOOK_STEP, step),
        )?;
        let row = CodebookRow {
            step,
            lr,
            loss: m.loss,
            rec_mae: m.rec_mae,
            edge: m.edge,
            commit: m.commit,
            active_codes: m.active_codes,
            reseeded: m.reseeded,
            skipped: m.skipped,
        };
        if (step + 1).is_multiple_of(PROGRESS_EVERY) {
            eprintln!(
                "codebook step {}: loss {:.5} rec_mae {:.5} active {}",
                step + 1,
                m.loss,
                m.rec_mae,
                m.active_codes
            );
        }
        rows.push(row);
        state.step += 1;
    }
    Ok(rows)
}

/// Samples the training batch for `step`: each episode contributes `n` of
/// its views in random order.
pub fn transformer_batch(
    cfg: &RunConfig,
    train: &[&crate::dataset::TokenEpisode],
    step: u64,
) -> Result<Vec<EpisodeBatch>> {
    let mut rng = stream(cfg.seed, PURPOSE_MODEL_BATCH, step);
    (0..cfg.transformer_training.batch)
        .map(|_| {
            let ep = train[rng.random_range(0..train.len())];
            let order = permutation(ep.views.len(), &mut rng);
            let chosen = &order[..cfg.model.n];
            let tokens = chosen.iter().map(|&i| ep.views[i].0.clone()).collect();
            let poses = chosen.iter().map(|&i| ep.views[i].1).collect();
            Ok(EpisodeBatch::new(tokens, poses, cfg.model.n_min)?)
        })
        .collect()
}

pub fn transformer_steps(
    cfg: &RunConfig,
    tokens: &TokenDataset,
    state: &mut TransformerState,
    until: u64,
) -> Result<Vec<TransformerRow>> {
    let train: Vec<_> = tokens.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("token set has no training episodes".into()));
    }
    if let Some(ep) = train.iter().find(|e| e.views.len() < cfg.model.n) {
        return Err(Error::Config(format!(
            "episode {} has {} views, need {}",
            ep.seed,
            ep.views.len(),
            cfg.model.n
        )));
    }
    let tasks = if cfg.localization {
        Tasks::Both
    } else {
        Tasks::NovelViewOnly
    };
    let sched = &cfg.transformer_training;
    let mut rows = Vec::new();
    while state.step < until.min(sched.steps) {
        let step = state.step;
        let batch = transformer_batch(cfg, &train, step)?;
        let lr = sched.lr_at(step);
        let m = state.model.train_step(&mut state.adam, &cfg.adam, &batch, tasks, lr)?;
        if (step + 1).is_multiple_of(PROGRESS_EVERY) {
            eprintln!(
                "transformer step {}: loss {:.5} nvs {:.5} pose {:.5} acc {:.3}",
                step + 1,
                m.loss,
                m.loss_nvs,
                m.loss_pose,
                m.token_accuracy
            );
        }
        rows.push(TransformerRow {
            step,
            lr,
            loss: m.loss,
            loss_nvs: m.loss_nvs,
            loss_pose: m.loss_pose,
            token_accuracy: m.token_accuracy,
            skipped: m.skipped,
        });
        state.step += 1;
    }
    Ok(rows)
}

/// Full codebook stage: trains (or resumes), then writes the checkpoint,
/// metrics table and event log under `cfg.out`.
pub fn train_codebook(cfg: &RunConfig, data: &Dataset, resume: Option<CodebookState>) -> Result<CodebookState> {
    fs::create_dir_all(&cfg.out).map_err(Error::io(&cfg.out))?;
    let events = cfg.out.join(CODEBOOK_EVENTS);
    let metrics = cfg.out.join(CODEBOOK_METRICS);
    let mut state = match resume {
        Some(s) => s,
        None => {
            remove_if_exists(&metrics)?;
            remove_if_exists(&events)?;
            init_codebook(cfg)?
        }
    };
    log_event(
        &events,
        &json!({"event": "start", "step": state.step, "seed": cfg.seed}),
    )?;
    let rows = codebook_steps(cfg, data, &mut state, cfg.codebook_training.steps)?;
    append_csv(&metrics, &rows)?;
    let path = cfg.codebook_path();
    state.save(&path)?;
    log_event(
        &events,
        &json!({"event": "checkpoint", "step": state.step, "path": file_name(&path)}),
    )?;
    Ok(state)
}

pub fn train_transformer(
    cfg: &RunConfig,
    tokens: &TokenDataset,
    resume: Option<TransformerState>,
) -> Result<TransformerState> {
    if tokens.k != cfg.model.k || tokens.n_lat != cfg.model.n_lat {
        return Err(Error::Config(format!(
            "token set has k={} n_lat={}, model expects k={} n_lat={}",
            tokens.k, tokens.n_lat, cfg.model.k, cfg.model.n_lat
        )));
    }
    fs::create_dir_all(&cfg.out).map_err(Error::io(&cfg.out))?;
    let events = cfg.out.join(TRANSFORMER_EVENTS);
    let metrics = cfg.out.join(TRANSFORMER_METRICS);
    let mut state = match resume {
        Some(s) => s,
        None => {
            remove_if_exists(&metrics)?;
            remove_if_exists(&events)?;
            init_transformer(cfg)?
        }
    };
    log_event(
        &events,
        &json!({"event": "start", "step": state.step, "seed": cfg.seed, "localization": cfg.localization}),
    )?;
    let rows = transformer_steps(cfg, tokens, &mut state, cfg.transformer_training.steps)?;
    append_csv(&metrics, &rows)?;
    let path = cfg.transformer_path();
    state.save(&path)?;
    log_event(
        &events,
        &json!({"event": "checkpoint", "step": state.step, "path": file_name(&path)}),
    )?;
    Ok(state)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path)(e)),
        _ => Ok(()),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}

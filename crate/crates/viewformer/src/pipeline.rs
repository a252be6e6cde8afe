//! Whole runs and one-off inference on stored episodes.

use std::fs;

use viewformer_core::codebook::TokenGrid;
use viewformer_core::image::Image;
use viewformer_core::model::{to_world_frame, Model};
use viewformer_core::pose::CameraPose;

use crate::checkpoint::CodebookState;
use crate::config::RunConfig;
use crate::dataset::{make_dataset, tokenize, Dataset, StoredEpisode};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalReport};
use crate::train::{train_codebook, train_transformer};

/// Dataset, codebook, tokens, transformer and evaluation, all under
/// `cfg.dataset` and `cfg.out`.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(Error::io(&cfg.out))?;
    cfg.save(&cfg.out.join("config.json"))?;
    let data = make_dataset(&cfg.data, &cfg.dataset)?;
    let cb = train_codebook(cfg, &data, None)?;
    let tokens = tokenize(&cb.codebook, &data, &cfg.tokens_dir())?;
    let tf = train_transformer(cfg, &tokens, None)?;
    let report = evaluate(cfg, &cb.codebook, Some(&tf.model), &data)?;
    report.write(&cfg.out)?;
    Ok(report)
}

/// Context views `0..context` and the query view of one stored episode.
pub struct Query<'a> {
    pub episode: &'a StoredEpisode,
    pub context: usize,
    pub query: usize,
}

impl<'a> Query<'a> {
    pub fn select(data: &'a Dataset, episode: usize, context: usize, query: Option<usize>) -> Result<Self> {
        let ep = data.episodes.get(episode).ok_or_else(|| {
            Error::Config(format!(
                "episode {episode} out of range ({} stored)",
                data.episodes.len()
            ))
        })?;
        let query = query.unwrap_or(ep.views.len() - 1);
        if context == 0 || query >= ep.views.len() || query < context {
            return Err(viewformer_core::error::Error::Validation(format!(
                "need 1 ≤ context ≤ query < {} views, got context {context}, query {query}",
                ep.views.len()
            ))
            .into());
        }
        Ok(Query {
            episode: ep,
            context,
            query,
        })
    }
}

/// Synthesizes the query view from the context views.
pub fn render(codebook: &CodebookState, model: &Model<f32>, q: &Query) -> Result<Image> {
    let views = &q.episode.views;
    let images: Vec<&Image> = views[..q.context].iter().map(|v| &v.image).collect();
    let grids = codebook.codebook.encode(&images)?;
    let context: Vec<(&TokenGrid, CameraPose)> = grids
        .iter()
        .zip(&views[..q.context])
        .map(|(g, v)| (g, v.pose))
        .collect();
    Ok(model.infer_novel_view(&codebook.codebook, &context, &views[q.query].pose)?)
}

/// Estimates the world-frame pose of the query view from its image and the
/// posed context views.
pub fn localize(codebook: &CodebookState, model: &Model<f32>, q: &Query) -> Result<CameraPose> {
    let views = &q.episode.views;
    let mut images: Vec<&Image> = views[..q.context].iter().map(|v| &v.image).collect();
    images.push(&views[q.query].image);
    let grids = codebook.codebook.encode(&images)?;
    let context: Vec<(&TokenGrid, CameraPose)> = grids[..q.context]
        .iter()
        .zip(&views[..q.context])
        .map(|(g, v)| (g, v.pose))
        .collect();
    let relative = model.infer_pose(&context, &grids[q.context])?;
    Ok(to_world_frame(&views[0].pose, &relative))
}

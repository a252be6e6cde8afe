//! Held-out evaluation of the trained pair against two model-free baselines:
//! copying the context view nearest to the query camera, and predicting the
//! first context camera's pose.

use serde::Serialize;
use viewformer_core::codebook::{Codebook, TokenGrid};
use viewformer_core::image::Image;
use viewformer_core::metrics::{foreground_psnr, mae, mean, median, psnr, rotation_error_deg};
use viewformer_core::model::Model;
use viewformer_core::pose::{norm3, sub3, CameraPose};
use viewformer_core::scene::view_angle;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Split, StoredEpisode};
use crate::error::{Error, Result};
use crate::report::{write_csv, write_json};

pub const MODEL: &str = "viewformer";
pub const NEAREST_VIEW: &str = "nearest_view";
pub const IDENTITY_POSE: &str = "identity_pose";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRow {
    pub context: usize,
    pub method: String,
    pub mae: f64,
    pub psnr: f64,
    pub fg_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseRow {
    pub context: usize,
    pub method: String,
    pub median_translation: f64,
    pub median_rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodebookRow {
    pub images: usize,
    pub mae: f64,
    pub psnr: f64,
    pub fg_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub codebook: CodebookRow,
    pub images: Vec<ImageRow>,
    pub poses: Vec<PoseRow>,
}

impl EvalReport {
    pub fn image(&self, context: usize, method: &str) -> Option<&ImageRow> {
        self.images.iter().find(|r| r.context == context && r.method == method)
    }

    pub fn pose(&self, context: usize, method: &str) -> Option<&PoseRow> {
        self.poses.iter().find(|r| r.context == context && r.method == method)
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        write_csv(&dir.join("eval_images.csv"), &self.images)?;
        write_csv(&dir.join("eval_poses.csv"), &self.poses)?;
        write_csv(&dir.join("eval_codebook.csv"), std::slice::from_ref(&self.codebook))?;
        write_json(&dir.join("eval.json"), self)
    }
}

/// Context views `0..c` predict the last view of each test episode, so every
/// context size is scored on the same targets.
pub fn evaluate(
    cfg: &RunConfig,
    codebook: &Codebook<f32>,
    model: Option<&Model<f32>>,
    data: &Dataset,
) -> Result<EvalReport> {
    let limit = cfg.eval.episodes.unwrap_or(usize::MAX);
    let episodes: Vec<&StoredEpisode> = data.split(Split::Test).take(limit).collect();
    if episodes.is_empty() {
        return Err(Error::Config("no test episodes to evaluate".into()));
    }
    for &c in &cfg.eval.context_sizes {
        if let Some(ep) = episodes.iter().find(|e| c == 0 || c >= e.views.len()) {
            return Err(viewformer_core::error::Error::Validation(format!(
                "context size {c} needs more than the {} views of episode {}",
                ep.views.len(),
                ep.seed
            ))
            .into());
        }
    }
    let mut cb = Acc::default();
    let mut img: Vec<(Acc, Acc)> = vec![Default::default(); cfg.eval.context_sizes.len()];
    let mut pose: Vec<(PoseAcc, PoseAcc)> = vec![Default::default(); cfg.eval.context_sizes.len()];
    for ep in episodes.iter().copied() {
        let images: Vec<&Image> = ep.views.iter().map(|v| &v.image).collect();
        let grids = codebook.encode(&images)?;
        let decoded = codebook.decode(&grids.iter().collect::<Vec<_>>())?;
        for (d, t) in decoded.iter().zip(&images) {
            cb.push(d, t);
        }
        let q = ep.views.len() - 1;
        let target = &ep.views[q];
        for (slot, &c) in cfg.eval.context_sizes.iter().enumerate() {
            let nearest = (0..c)
                .min_by(|&a, &b| {
                    view_angle(&ep.views[a].pose, &target.pose).total_cmp(&view_angle(&ep.views[b].pose, &target.pose))
                })
                .unwrap();
            img[slot].1.push(&ep.views[nearest].image, &target.image);
            let truth = target.pose.relative_to(&ep.views[0].pose);
            pose[slot].1.push(&CameraPose::IDENTITY, &truth);
            if let Some(model) = model {
                let context: Vec<(&TokenGrid, CameraPose)> = (0..c).map(|i| (&grids[i], ep.views[i].pose)).collect();
                let pred = model.infer_novel_view(codebook, &context, &target.pose)?;
                img[slot].0.push(&pred, &target.image);
                if cfg.localization {
                    let est = model.infer_pose(&context, &grids[q])?;
                    pose[slot].0.push(&est, &truth);
                }
            }
        }
    }
    let mut images = Vec::new();
    let mut poses = Vec::new();
    for (slot, &c) in cfg.eval.context_sizes.iter().enumerate() {
        if model.is_some() {
            images.push(img[slot].0.row(c, MODEL));
        }
        images.push(img[slot].1.row(c, NEAREST_VIEW));
        if model.is_some() && cfg.localization {
            poses.push(pose[slot].0.row(c, MODEL));
        }
        poses.push(pose[slot].1.row(c, IDENTITY_POSE));
    }
    Ok(EvalReport {
        episodes: episodes.len(),
        codebook: CodebookRow {
            images: cb.mae.len(),
            mae: mean(&cb.mae),
            psnr: mean(&cb.psnr),
            fg_psnr: mean(&cb.fg),
        },
        images,
        poses,
    })
}

#[derive(Clone, Default)]
struct Acc {
    mae: Vec<f64>,
    psnr: Vec<f64>,
    fg: Vec<f64>,
}

impl Acc {
    fn push(&mut self, pred: &Image, target: &Image) {
        self.mae.push(mae(pred, target));
        self.psnr.push(psnr(pred, target));
        self.fg.push(foreground_psnr(pred, target));
    }

    fn row(&self, context: usize, method: &str) -> ImageRow {
        ImageRow {
            context,
            method: method.into(),
            mae: mean(&self.mae),
            psnr: mean(&self.psnr),
            fg_psnr: mean(&self.fg),
        }
    }
}

#[derive(Clone, Default)]
struct PoseAcc {
    translation: Vec<f64>,
    rotation: Vec<f64>,
}

impl PoseAcc {
    fn push(&mut self, est: &CameraPose, truth: &CameraPose) {
        self.translation.push(norm3(sub3(est.position, truth.position)));
        self.rotation
            .push(rotation_error_deg(&est.orientation, &truth.orientation));
    }

    fn row(&self, context: usize, method: &str) -> PoseRow {
        PoseRow {
            context,
            method: method.into(),
            median_translation: median(&self.translation),
            median_rotation_deg: median(&self.rotation),
        }
    }
}

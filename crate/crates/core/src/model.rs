//! Decoder-only transformer over token grids with a trunk stream and two
//! branch streams (novel-view synthesis and localization).
//!
//! Each view contributes `k²` rows. The trunk row of view `j` carries its
//! image tokens and its camera pose; the synthesis branch replaces the image
//! tokens by the mask token `λ`; the localization branch replaces the pose by
//! the learned mask vector `∅`. Branch blocks attend to the trunk of earlier
//! views and to themselves, so one pass trains every context size at once.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::attention::{AttentionPlan, PlanBuilder};
use crate::codebook::{Codebook, TokenGrid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{AdamConfig, AdamState, StepOutcome};
use crate::params::{Bound, ParamId, ParamSet};
use crate::pose::{average_poses, canonicalize_poses, CameraPose};
use crate::real::Real;
use crate::rng::{normal_tensor, DetRng};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

pub const POSE_DIM: usize = 7;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub d_m: usize,
    pub layers: usize,
    pub heads: usize,
    pub k: usize,
    pub n_lat: usize,
    /// Leading views that are never predicted.
    pub n_min: usize,
    /// Views per training episode; also the largest context size plus one.
    pub n: usize,
    pub init_std: f64,
    /// Scene units to model units for positions, in pose inputs, targets
    /// and estimates.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_m: 128,
            layers: 4,
            heads: 4,
            k: 4,
            n_lat: 64,
            n_min: 2,
            n: 6,
            init_std: 0.02,
            position_scale: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_m.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_m {} not divisible by {} heads",
                self.d_m, self.heads
            )));
        }
        if self.n_min == 0 || self.n <= self.n_min {
            return Err(Error::Config(format!(
                "need n > n_min ≥ 1, got n={} n_min={}",
                self.n, self.n_min
            )));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::Config(format!(
                "position_scale {} must be positive",
                self.position_scale
            )));
        }
        if self.k == 0 || self.n_lat == 0 || self.layers == 0 {
            return Err(Error::Config("k, n_lat and layers must be positive".into()));
        }
        Ok(())
    }

    pub fn block(&self) -> usize {
        self.k * self.k
    }

    /// Token id of the mask token.
    pub fn mask_token(&self) -> usize {
        self.n_lat
    }
}

/// Which branches are built and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tasks {
    Both,
    /// Synthesis only, the localization branch is dropped.
    NovelViewOnly,
    LocalizationOnly,
}

impl Tasks {
    fn nvs(self) -> bool {
        self != Tasks::LocalizationOnly
    }

    fn loc(self) -> bool {
        self != Tasks::NovelViewOnly
    }
}

/// One training sequence: `n` views with world-frame poses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub tokens: Vec<TokenGrid>,
    pub poses: Vec<CameraPose>,
    pub n_min: usize,
}

impl EpisodeBatch {
    pub fn new(tokens: Vec<TokenGrid>, poses: Vec<CameraPose>, n_min: usize) -> Result<Self> {
        if tokens.len() != poses.len() {
            return Err(Error::Validation(format!(
                "{} token grids but {} poses",
                tokens.len(),
                poses.len()
            )));
        }
        if n_min == 0 || tokens.len() <= n_min {
            return Err(Error::Validation(format!(
                "need n > n_min ≥ 1, got n={} n_min={n_min}",
                tokens.len()
            )));
        }
        let k = tokens[0].k();
        if tokens.iter().any(|t| t.k() != k) {
            return Err(Error::Validation("token grids of different sizes".into()));
        }
        Ok(EpisodeBatch { tokens, poses, n_min })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Pose input of one row stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseInput {
    Pose(CameraPose),
    Mask,
}

/// 7-vector `[position · scale, quaternion]`, the pose embedding input and
/// regression target.
pub fn pose_features(p: &CameraPose, position_scale: f64) -> [f64; POSE_DIM] {
    let mut a = p.to_array();
    for v in &mut a[..3] {
        *v *= position_scale;
    }
    a
}

/// Row streams of a forward pass, already embedded.
pub struct TransformerInput {
    /// `[rows, d_m]` input embeddings.
    pub x: Var,
    pub plan: Arc<AttentionPlan>,
    /// Row indices of the synthesis branch blocks used as queries.
    pub nvs_rows: Vec<usize>,
    /// Row indices of the localization branch blocks used as queries.
    pub loc_rows: Vec<usize>,
}

/// Outputs of a training pass.
pub struct DualTaskOutput {
    /// Embedded input rows, `[rows, d_m]`.
    pub input: Var,
    /// Row indices (into `input`) of every synthesis query block.
    pub nvs_rows: Vec<usize>,
    /// Row indices (into `input`) of every localization query block.
    pub loc_rows: Vec<usize>,
    /// `[Q·k², n_lat]`, one block per synthesis query position.
    pub token_logits: Option<Var>,
    /// `[Q·k², 7]`, one block per localization query position.
    pub pose_estimates: Option<Var>,
    /// Target token per synthesis row.
    pub token_targets: Vec<usize>,
    /// Canonical target pose per localization row, sign-fixed.
    pub pose_targets: Vec<[f64; POSE_DIM]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetrics {
    pub loss: f64,
    pub loss_nvs: f64,
    pub loss_pose: f64,
    pub token_accuracy: f64,
    pub skipped: bool,
}

/// Token selection at inference.
pub enum Decoding<'a> {
    Greedy,
    Sample { temperature: f64, rng: &'a mut DetRng },
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1: ParamId,
    fc1_b: ParamId,
    fc2: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    tok_emb: ParamId,
    pos_emb: ParamId,
    pose_w1: ParamId,
    pose_b1: ParamId,
    pose_w2: ParamId,
    pose_b2: ParamId,
    pose_mask: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    loc_w1: ParamId,
    loc_b1: ParamId,
    loc_w2: ParamId,
    loc_b2: ParamId,
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    ids: Ids,
    forward_passes: AtomicUsize,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            forward_passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl<T: Real> core::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .field("forward_passes", &self.forward_passes())
            .finish()
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_m;
        let std = config.init_std;
        // residual projections are scaled down with depth, as in GPT-2
        let resid_std = std / libm::sqrt(2.0 * config.layers as f64);
        let mut p = ParamSet::new();
        let ones = || Tensor::full(&[d], T::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);

        let tok_emb = p.add("tok_emb", normal_tensor(&[config.n_lat + 1, d], std, rng));
        let pos_emb = p.add("pos_emb", normal_tensor(&[config.block(), d], std, rng));
        let pose_w1 = p.add(
            "pose.w1",
            normal_tensor(&[POSE_DIM, d], libm::sqrt(1.0 / POSE_DIM as f64), rng),
        );
        let pose_b1 = p.add("pose.b1", zeros(d));
        let pose_w2 = p.add("pose.w2", normal_tensor(&[d, d], std, rng));
        let pose_b2 = p.add("pose.b2", zeros(d));
        let pose_mask = p.add("pose_mask", normal_tensor(&[1, d], std, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut lin = |name: &str, rows: usize, cols: usize, s: f64| {
                let w = p.add(format!("h{l}.{name}.w"), normal_tensor(&[rows, cols], s, rng));
                let b = p.add(format!("h{l}.{name}.b"), zeros(cols));
                (w, b)
            };
            let (wq, bq) = lin("q", d, d, std);
            let (wk, bk) = lin("k", d, d, std);
            let (wv, bv) = lin("v", d, d, std);
            let (wo, bo) = lin("o", d, d, resid_std);
            let (fc1, fc1_b) = lin("fc1", d, 4 * d, std);
            let (fc2, fc2_b) = lin("fc2", 4 * d, d, resid_std);
            layers.push(Layer {
                ln1_g: p.add(format!("h{l}.ln1.g"), ones()),
                ln1_b: p.add(format!("h{l}.ln1.b"), zeros(d)),
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g: p.add(format!("h{l}.ln2.g"), ones()),
                ln2_b: p.add(format!("h{l}.ln2.b"), zeros(d)),
                fc1,
                fc1_b,
                fc2,
                fc2_b,
            });
        }
        let lnf_g = p.add("lnf.g", ones());
        let lnf_b = p.add("lnf.b", zeros(d));
        let head_w = p.add("head.w", normal_tensor(&[d, config.n_lat], std, rng));
        let head_b = p.add("head.b", zeros(config.n_lat));
        let loc_w1 = p.add("loc.w1", normal_tensor(&[d, d], std, rng));
        let loc_b1 = p.add("loc.b1", zeros(d));
        let loc_w2 = p.add("loc.w2", normal_tensor(&[d, POSE_DIM], std, rng));
        let loc_b2 = p.add("loc.b2", zeros(POSE_DIM));
        Ok(Model {
            config,
            params: p,
            ids: Ids {
                tok_emb,
                pos_emb,
                pose_w1,
                pose_b1,
                pose_w2,
                pose_b2,
                pose_mask,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
                loc_w1,
                loc_b1,
                loc_w2,
                loc_b2,
            },
            forward_passes: AtomicUsize::new(0),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            forward_passes: AtomicUsize::new(0),
        }
    }

    /// Number of transformer passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.ids.tok_emb
    }

    pub fn positional_embedding(&self) -> ParamId {
        self.ids.pos_emb
    }

    pub fn pose_mask(&self) -> ParamId {
        self.ids.pose_mask
    }

    /// Pose embeddings `[inputs.len(), d_m]`; masked inputs return `∅`.
    pub fn pose_embed(&self, tape: &mut Tape<T>, bound: &Bound, inputs: &[PoseInput]) -> Result<Var> {
        let (table, slots) = self.pose_table(tape, bound, inputs)?;
        tape.index_rows(table, slots)
    }

    /// Embeds every distinct pose once; returns a table whose last row is
    /// `∅` and the table row of each input.
    fn pose_table(&self, tape: &mut Tape<T>, bound: &Bound, inputs: &[PoseInput]) -> Result<(Var, Vec<usize>)> {
        let poses: Vec<&CameraPose> = inputs
            .iter()
            .filter_map(|p| match p {
                PoseInput::Pose(c) => Some(c),
                PoseInput::Mask => None,
            })
            .collect();
        let mask_slot = poses.len();
        let mut next = 0;
        let slots = inputs
            .iter()
            .map(|p| match p {
                PoseInput::Pose(_) => {
                    next += 1;
                    next - 1
                }
                PoseInput::Mask => mask_slot,
            })
            .collect();
        let ids = &self.ids;
        let mask = bound[ids.pose_mask];
        let table = if poses.is_empty() {
            mask
        } else {
            let feats: Vec<T> = poses
                .iter()
                .flat_map(|p| pose_features(p, self.config.position_scale).map(T::lit))
                .collect();
            let x = tape.constant(Tensor::from_parts(vec![poses.len(), POSE_DIM], feats));
            let h = tape.linear(x, bound[ids.pose_w1], bound[ids.pose_b1])?;
            let h = tape.gelu(h);
            let e = tape.linear(h, bound[ids.pose_w2], bound[ids.pose_b2])?;
            tape.concat_rows(&[e, mask])?
        };
        Ok((table, slots))
    }

    /// Row streams for a set of blocks. Each block is `(tokens, pose slot)`
    /// where `tokens` is `None` for the mask token.
    fn embed_blocks(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        blocks: &[(Option<&TokenGrid>, usize)],
        pose_table: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = cfg.block();
        let mut tok_ids = Vec::with_capacity(blocks.len() * b);
        let mut pose_ids = Vec::with_capacity(blocks.len() * b);
        for (grid, slot) in blocks {
            match grid {
                Some(g) => {
                    if g.k() != cfg.k {
                        return Err(Error::Validation(format!("token grid side {} != {}", g.k(), cfg.k)));
                    }
                    if let Some(&bad) = g.indices().iter().find(|&&t| t >= cfg.n_lat) {
                        return Err(Error::Validation(format!("token id {bad} ≥ n_lat {}", cfg.n_lat)));
                    }
                    tok_ids.extend_from_slice(g.indices());
                }
                None => tok_ids.extend(core::iter::repeat_n(cfg.mask_token(), b)),
            }
            pose_ids.extend(core::iter::repeat_n(*slot, b));
        }
        let pos_ids: Vec<usize> = (0..blocks.len() * b).map(|r| r % b).collect();
        let tok = tape.index_rows(bound[self.ids.tok_emb], tok_ids)?;
        let pose = tape.index_rows(pose_table, pose_ids)?;
        let pos = tape.index_rows(bound[self.ids.pos_emb], pos_ids)?;
        let x = tape.add(tok, pose)?;
        tape.add(x, pos)
    }

    /// Embeds a batch of episodes: per episode, the trunk of all `n` views,
    /// then synthesis and localization branch blocks for positions past the
    /// pure context.
    pub fn build_transformer_input(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        episodes: &[EpisodeBatch],
        tasks: Tasks,
    ) -> Result<(TransformerInput, Vec<usize>, Vec<[f64; POSE_DIM]>)> {
        let b = self.config.block();
        let mut pose_inputs = Vec::new();
        let mut canon = Vec::with_capacity(episodes.len());
        for ep in episodes {
            if ep.len() > self.config.n {
                return Err(Error::Validation(format!(
                    "episode of {} views exceeds n={}",
                    ep.len(),
                    self.config.n
                )));
            }
            let c = canonicalize_poses(&ep.poses)?;
            pose_inputs.extend(c.iter().map(|p| PoseInput::Pose(*p)));
            canon.push(c);
        }
        pose_inputs.push(PoseInput::Mask);
        let (table, slots) = self.pose_table(tape, bound, &pose_inputs)?;
        let mask_slot = *slots.last().unwrap();

        let mut builder = PlanBuilder::new(b);
        let mut blocks: Vec<(Option<&TokenGrid>, usize)> = Vec::new();
        let mut nvs_rows = Vec::new();
        let mut loc_rows = Vec::new();
        let mut token_targets = Vec::new();
        let mut pose_targets = Vec::new();
        let mut slot0 = 0;
        for (ep, c) in episodes.iter().zip(&canon) {
            let n = ep.len();
            let queries = ep.n_min..n;
            let trunk = builder.push_trunk(n);
            for j in 0..n {
                blocks.push((Some(&ep.tokens[j]), slot0 + j));
            }
            if tasks.nvs() {
                for j in queries.clone() {
                    nvs_rows.extend(builder.len() * b..(builder.len() + 1) * b);
                    builder.push_branch(trunk, [j]);
                    blocks.push((None, slot0 + j));
                    token_targets.extend_from_slice(ep.tokens[j].indices());
                }
            }
            if tasks.loc() {
                for j in queries.clone() {
                    loc_rows.extend(builder.len() * b..(builder.len() + 1) * b);
                    builder.push_branch(trunk, [j]);
                    blocks.push((Some(&ep.tokens[j]), mask_slot));
                    let target = pose_features(&c[j], self.config.position_scale);
                    pose_targets.extend(core::iter::repeat_n(target, b));
                }
            }
            slot0 += n;
        }
        let x = self.embed_blocks(tape, bound, &blocks, table)?;
        let input = TransformerInput {
            x,
            plan: Arc::new(builder.build()),
            nvs_rows,
            loc_rows,
        };
        Ok((input, token_targets, pose_targets))
    }

    /// Runs the transformer blocks and the final layer norm.
    pub fn backbone(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, plan: &Arc<AttentionPlan>) -> Result<Var> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let heads = self.config.heads;
        let mut h = x;
        for (l, layer) in self.ids.layers.iter().enumerate() {
            let a = tape.layer_norm(h, bound[layer.ln1_g], bound[layer.ln1_b])?;
            let q = tape.linear(a, bound[layer.wq], bound[layer.bq])?;
            let k = tape.linear(a, bound[layer.wk], bound[layer.bk])?;
            let v = tape.linear(a, bound[layer.wv], bound[layer.bv])?;
            let att = tape.block_attention(q, k, v, heads, plan.clone())?;
            let o = tape.linear(att, bound[layer.wo], bound[layer.bo])?;
            h = tape.add(h, o)?;
            let m = tape.layer_norm(h, bound[layer.ln2_g], bound[layer.ln2_b])?;
            let m = tape.linear(m, bound[layer.fc1], bound[layer.fc1_b])?;
            let m = tape.gelu(m);
            let m = tape.linear(m, bound[layer.fc2], bound[layer.fc2_b])?;
            h = tape.add(h, m)?;
            if !tape.value(h).all_finite() {
                return Err(Error::NonFinite(format!("activation after transformer layer {l}")));
            }
        }
        tape.layer_norm(h, bound[self.ids.lnf_g], bound[self.ids.lnf_b])
    }

    fn token_head(&self, tape: &mut Tape<T>, bound: &Bound, hidden: Var) -> Result<Var> {
        tape.linear(hidden, bound[self.ids.head_w], bound[self.ids.head_b])
    }

    fn pose_head(&self, tape: &mut Tape<T>, bound: &Bound, hidden: Var) -> Result<Var> {
        let h = tape.linear(hidden, bound[self.ids.loc_w1], bound[self.ids.loc_b1])?;
        let h = tape.gelu(h);
        tape.linear(h, bound[self.ids.loc_w2], bound[self.ids.loc_b2])
    }

    /// Training pass over a batch of episodes.
    pub fn forward_train(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        episodes: &[EpisodeBatch],
        tasks: Tasks,
    ) -> Result<DualTaskOutput> {
        let (input, token_targets, pose_targets) = self.build_transformer_input(tape, bound, episodes, tasks)?;
        let hidden = self.backbone(tape, bound, input.x, &input.plan)?;
        let token_logits = if input.nvs_rows.is_empty() {
            None
        } else {
            let rows = tape.index_rows(hidden, input.nvs_rows.clone())?;
            Some(self.token_head(tape, bound, rows)?)
        };
        let pose_estimates = if input.loc_rows.is_empty() {
            None
        } else {
            let rows = tape.index_rows(hidden, input.loc_rows.clone())?;
            Some(self.pose_head(tape, bound, rows)?)
        };
        Ok(DualTaskOutput {
            input: input.x,
            nvs_rows: input.nvs_rows,
            loc_rows: input.loc_rows,
            token_logits,
            pose_estimates,
            token_targets,
            pose_targets,
        })
    }

    /// One optimizer step on the summed task losses.
    pub fn train_step(
        &mut self,
        opt: &mut AdamState<T>,
        adam: &AdamConfig,
        episodes: &[EpisodeBatch],
        tasks: Tasks,
        lr: f64,
    ) -> Result<ModelMetrics> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward_train(&mut tape, &bound, episodes, tasks)?;
        let mut terms = Vec::new();
        let mut metrics = ModelMetrics {
            loss: 0.0,
            loss_nvs: 0.0,
            loss_pose: 0.0,
            token_accuracy: 0.0,
            skipped: false,
        };
        if let Some(logits) = out.token_logits {
            let l = loss_nvs(&mut tape, logits, &out.token_targets)?;
            metrics.loss_nvs = tape.value(l).data()[0].to_f64_lossy();
            metrics.token_accuracy = token_accuracy(tape.value(logits), &out.token_targets);
            terms.push(l);
        }
        if let Some(est) = out.pose_estimates {
            let l = loss_pose(&mut tape, est, &out.pose_targets)?;
            metrics.loss_pose = tape.value(l).data()[0].to_f64_lossy();
            terms.push(l);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        metrics.loss = tape.value(loss).data()[0].to_f64_lossy();
        if !metrics.loss.is_finite() {
            opt.skipped += 1;
            metrics.skipped = true;
            return Ok(metrics);
        }
        let mut grads = tape.backward(loss)?;
        let g = self.params.gradients(&bound, &mut grads);
        metrics.skipped = opt.step(&mut self.params, &g, lr, adam) == StepOutcome::Skipped;
        Ok(metrics)
    }

    fn check_context(&self, context: usize) -> Result<()> {
        if context == 0 || context >= self.config.n {
            return Err(Error::Validation(format!(
                "context size {context} outside 1..={}",
                self.config.n - 1
            )));
        }
        Ok(())
    }

    /// Logits `[k², n_lat]` for the view at `query_pose` given the context
    /// views, from a single transformer pass.
    pub fn novel_view_logits(
        &self,
        context: &[(&TokenGrid, CameraPose)],
        query_pose: &CameraPose,
    ) -> Result<Tensor<T>> {
        self.check_context(context.len())?;
        let mut poses: Vec<CameraPose> = context.iter().map(|c| c.1).collect();
        poses.push(*query_pose);
        let canon = canonicalize_poses(&poses)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let inputs: Vec<PoseInput> = canon.iter().map(|p| PoseInput::Pose(*p)).collect();
        let (table, slots) = self.pose_table(&mut tape, &bound, &inputs)?;
        let c = context.len();
        let mut blocks: Vec<(Option<&TokenGrid>, usize)> =
            context.iter().zip(&slots).map(|(v, &s)| (Some(v.0), s)).collect();
        blocks.push((None, slots[c]));
        let mut builder = PlanBuilder::new(self.config.block());
        let trunk = builder.push_trunk(c);
        builder.push_branch(trunk, [c]);
        let plan = Arc::new(builder.build());
        let x = self.embed_blocks(&mut tape, &bound, &blocks, table)?;
        let hidden = self.backbone(&mut tape, &bound, x, &plan)?;
        let b = self.config.block();
        let rows = tape.index_rows(hidden, (c * b..(c + 1) * b).collect())?;
        let logits = self.token_head(&mut tape, &bound, rows)?;
        Ok(tape.value(logits).clone())
    }

    pub fn infer_tokens(
        &self,
        context: &[(&TokenGrid, CameraPose)],
        query_pose: &CameraPose,
        decoding: Decoding<'_>,
    ) -> Result<TokenGrid> {
        let logits = self.novel_view_logits(context, query_pose)?;
        let tokens = match decoding {
            Decoding::Greedy => argmax_rows(&logits),
            Decoding::Sample { temperature, rng } => sample_rows(&logits, temperature, rng)?,
        };
        TokenGrid::new(self.config.k, tokens, self.config.n_lat)
    }

    /// Greedy single-pass synthesis decoded through `codebook`.
    pub fn infer_novel_view(
        &self,
        codebook: &Codebook<T>,
        context: &[(&TokenGrid, CameraPose)],
        query_pose: &CameraPose,
    ) -> Result<Image> {
        let grid = self.infer_tokens(context, query_pose, Decoding::Greedy)?;
        Ok(codebook.decode(&[&grid])?.remove(0))
    }

    /// Per-token pose estimates `[k², 7]` of the query image, in the frame of
    /// the first context camera.
    pub fn pose_estimates(&self, context: &[(&TokenGrid, CameraPose)], query: &TokenGrid) -> Result<Tensor<T>> {
        self.check_context(context.len())?;
        let poses: Vec<CameraPose> = context.iter().map(|c| c.1).collect();
        let canon = canonicalize_poses(&poses)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mut inputs: Vec<PoseInput> = canon.iter().map(|p| PoseInput::Pose(*p)).collect();
        inputs.push(PoseInput::Mask);
        let (table, slots) = self.pose_table(&mut tape, &bound, &inputs)?;
        let c = context.len();
        let mut blocks: Vec<(Option<&TokenGrid>, usize)> =
            context.iter().zip(&slots).map(|(v, &s)| (Some(v.0), s)).collect();
        blocks.push((Some(query), slots[c]));
        let mut builder = PlanBuilder::new(self.config.block());
        let trunk = builder.push_trunk(c);
        builder.push_branch(trunk, [c]);
        let plan = Arc::new(builder.build());
        let x = self.embed_blocks(&mut tape, &bound, &blocks, table)?;
        let hidden = self.backbone(&mut tape, &bound, x, &plan)?;
        let b = self.config.block();
        let rows = tape.index_rows(hidden, (c * b..(c + 1) * b).collect())?;
        let est = self.pose_head(&mut tape, &bound, rows)?;
        Ok(tape.value(est).clone())
    }

    /// Averaged pose of the query image relative to the first context camera.
    pub fn infer_pose(&self, context: &[(&TokenGrid, CameraPose)], query: &TokenGrid) -> Result<CameraPose> {
        let est = self.pose_estimates(context, query)?;
        let rows: Vec<[f64; POSE_DIM]> = (0..est.shape()[0])
            .map(|r| {
                let mut a = [0.0; POSE_DIM];
                for (o, v) in a.iter_mut().zip(est.row(r)) {
                    *o = v.to_f64_lossy();
                }
                for v in &mut a[..3] {
                    *v /= self.config.position_scale;
                }
                a
            })
            .collect();
        average_poses(&rows)
    }
}

/// Re-expresses a pose given in the frame of `first_context` in world frame.
pub fn to_world_frame(first_context: &CameraPose, relative: &CameraPose) -> CameraPose {
    first_context.compose(relative)
}

/// Mean cross-entropy over all rows.
pub fn loss_nvs<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets.to_vec())
}

/// `MSE(position) + MSE(quaternion)`, both averaged over rows; target
/// quaternions are sign-fixed first.
pub fn loss_pose<T: Real>(tape: &mut Tape<T>, estimates: Var, targets: &[[f64; POSE_DIM]]) -> Result<Var> {
    let rows = targets.len();
    if tape.shape(estimates) != [rows, POSE_DIM] {
        return Err(Error::shape("loss_pose", tape.shape(estimates), &[rows, POSE_DIM]));
    }
    let mut target = Vec::with_capacity(rows * POSE_DIM);
    let mut weight = Vec::with_capacity(rows * POSE_DIM);
    let r = rows as f64;
    for t in targets {
        let flip = if t[3] < 0.0 { -1.0 } else { 1.0 };
        for (c, &v) in t.iter().enumerate() {
            target.push(T::lit(if c < 3 { v } else { flip * v }));
            weight.push(T::lit(if c < 3 { 1.0 / (3.0 * r) } else { 1.0 / (4.0 * r) }));
        }
    }
    let t = tape.constant(Tensor::from_parts(vec![rows, POSE_DIM], target));
    let w = tape.constant(Tensor::from_parts(vec![rows, POSE_DIM], weight));
    let d = tape.sub(estimates, t)?;
    let sq = tape.square(d);
    let weighted = tape.mul(sq, w)?;
    Ok(tape.sum(weighted))
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let cols = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|r| {
            let row = logits.row(r);
            (0..cols).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

fn sample_rows<T: Real>(logits: &Tensor<T>, temperature: f64, rng: &mut DetRng) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "sampling temperature {temperature} must be positive"
        )));
    }
    let cols = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.shape()[0]);
    for r in 0..logits.shape()[0] {
        let mut p: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64_lossy() / temperature).collect();
        softmax_in_place(&mut p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = cols - 1;
        for (c, &pc) in p.iter().enumerate() {
            acc += pc;
            if u < acc {
                pick = c;
                break;
            }
        }
        out.push(pick);
    }
    Ok(out)
}

fn token_accuracy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(targets).filter(|(a, b)| a == b).count();
    hits as f64 / targets.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Quat;
    use crate::rng::seeded;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_m: 8,
            layers: 1,
            heads: 2,
            k: 2,
            n_lat: 5,
            n_min: 1,
            n: 3,
            init_std: 0.3,
            position_scale: 1.0,
        }
    }

    fn grid(rng: &mut DetRng, cfg: &ModelConfig) -> TokenGrid {
        let idx = (0..cfg.block()).map(|_| rng.random_range(0..cfg.n_lat)).collect();
        TokenGrid::new(cfg.k, idx, cfg.n_lat).unwrap()
    }

    fn pose(rng: &mut DetRng) -> CameraPose {
        let axis = [
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() + 0.1,
        ];
        let q = Quat::from_axis_angle(crate::pose::normalize3(axis), rng.random::<f64>() * 3.0);
        CameraPose::new([rng.random(), rng.random(), rng.random()], q).unwrap()
    }

    fn episode(rng: &mut DetRng, cfg: &ModelConfig) -> EpisodeBatch {
        let tokens = (0..cfg.n).map(|_| grid(rng, cfg)).collect();
        let poses = (0..cfg.n).map(|_| pose(rng)).collect();
        EpisodeBatch::new(tokens, poses, cfg.n_min).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            n_min: 6,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mask_pose_is_the_mask_vector() {
        let mut rng = seeded(1);
        let m = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let p = pose(&mut rng);
        let e = m
            .pose_embed(
                &mut tape,
                &bound,
                &[PoseInput::Pose(p), PoseInput::Mask, PoseInput::Pose(p)],
            )
            .unwrap();
        let e = tape.value(e);
        assert_eq!(e.row(1), m.params.get(m.pose_mask()).data());
        assert_eq!(e.row(0), e.row(2));
        assert_eq!(e.shape(), &[3, 8]);
    }

    #[test]
    fn output_covers_query_positions() {
        let mut rng = seeded(2);
        let cfg = tiny();
        let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let ep = episode(&mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let out = m.forward_train(&mut tape, &bound, &[ep], Tasks::Both).unwrap();
        let q = cfg.n - cfg.n_min;
        assert_eq!(tape.shape(out.token_logits.unwrap()), &[q * 4, cfg.n_lat]);
        assert_eq!(tape.shape(out.pose_estimates.unwrap()), &[q * 4, POSE_DIM]);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        assert!(TokenGrid::new(2, vec![0, 1, 2, 5], 5).is_err());
        let mut rng = seeded(3);
        let cfg = tiny();
        let m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let bad = TokenGrid::new(2, vec![0, 1, 2, 6], 7).unwrap();
        let p = pose(&mut rng);
        assert!(matches!(
            m.novel_view_logits(&[(&bad, p)], &p),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pose_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let target = [[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]];
        let exact = tape.constant(Tensor::new(&[1, 7], target[0].to_vec()).unwrap());
        let l = loss_pose(&mut tape, exact, &target).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let off = tape.constant(Tensor::new(&[1, 7], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = loss_pose(&mut tape, off, &target).unwrap();
        assert!((tape.value(l).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        // target with negative real part is compared after sign fixing
        let flipped = [[0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]];
        let l = loss_pose(&mut tape, exact, &flipped).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn nvs_loss_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[6, 64]));
        let l = loss_nvs(&mut tape, logits, &[0, 5, 9, 63, 1, 2]).unwrap();
        assert!((tape.value(l).data()[0] - libm::log(64.0)).abs() < 1e-12);
    }

    #[test]
    fn inference_is_one_pass_and_deterministic() {
        let mut rng = seeded(4);
        let cfg = tiny();
        let m = Model::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let ep = episode(&mut rng, &cfg);
        let ctx: Vec<_> = (0..2).map(|i| (&ep.tokens[i], ep.poses[i])).collect();
        let before = m.forward_passes();
        let a = m.infer_tokens(&ctx, &ep.poses[2], Decoding::Greedy).unwrap();
        assert_eq!(m.forward_passes(), before + 1);
        let b = m.infer_tokens(&ctx, &ep.poses[2], Decoding::Greedy).unwrap();
        assert_eq!(a, b);
        let ctx3: Vec<_> = (0..3).map(|i| (&ep.tokens[i], ep.poses[i])).collect();
        assert!(m.infer_tokens(&ctx3, &ep.poses[2], Decoding::Greedy).is_err());
    }
}

//! Vector-quantised autoencoder mapping images to `k × k` token grids.
//!
//! The encoder is a stack of strided convolutions, the quantizer snaps every
//! feature cell to its nearest code vector (straight-through gradient), and
//! the decoder mirrors the encoder with nearest-neighbour upsampling. Code
//! vectors are not trained by gradient; they follow exponential moving
//! averages of the features assigned to them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::conv::{ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{AdamConfig, AdamState, StepOutcome};
use crate::params::{Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::rng::{normal_tensor, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CodebookConfig {
    pub image_size: usize,
    /// Side of the token grid.
    pub k: usize,
    pub n_lat: usize,
    pub d_lat: usize,
    /// Channel width after each stride-2 stage, finest first.
    pub channels: Vec<usize>,
    pub w_rec: f64,
    pub w_commit: f64,
    /// Weight of the image-gradient L1 term; 0 disables it.
    pub w_edge: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    /// Codes unused for this many consecutive steps are reseeded.
    pub dead_code_steps: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            image_size: 32,
            k: 4,
            n_lat: 64,
            d_lat: 32,
            channels: vec![16, 48, 64],
            w_rec: 1.0,
            w_commit: 0.25,
            w_edge: 0.1,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            dead_code_steps: 200,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !self.image_size.is_multiple_of(self.k) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of grid size {}",
                self.image_size, self.k
            )));
        }
        let ratio = self.image_size / self.k;
        if !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!(
                "image_size / k = {ratio} must be a power of two ≥ 2"
            )));
        }
        let stages = ratio.trailing_zeros() as usize;
        if self.channels.len() != stages {
            return Err(Error::Config(format!(
                "stride {ratio} needs {stages} channel widths, got {}",
                self.channels.len()
            )));
        }
        if self.n_lat == 0 || self.d_lat == 0 || self.channels.contains(&0) {
            return Err(Error::Config("codebook sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.k * self.k
    }
}

/// `k × k` grid of code indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    k: usize,
    indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(k: usize, indices: Vec<usize>, n_lat: usize) -> Result<Self> {
        if indices.len() != k * k {
            return Err(Error::Validation(format!(
                "{k}×{k} grid needs {} tokens, got {}",
                k * k,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_lat) {
            return Err(Error::Validation(format!("token {bad} out of range for {n_lat} codes")));
        }
        Ok(TokenGrid { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Code vectors plus the moving-average statistics that update them.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookEmbedding<T> {
    /// `n_lat × d_lat`.
    pub weights: Tensor<T>,
    pub cluster_size: Vec<T>,
    /// `n_lat × d_lat`.
    pub embed_sum: Tensor<T>,
    pub decay: f64,
    pub eps: f64,
    pub unused_steps: Vec<u64>,
    /// False until the codes have been seeded from data.
    pub initialized: bool,
}

impl<T: Real> CodebookEmbedding<T> {
    pub fn new(weights: Tensor<T>, decay: f64, eps: f64) -> Self {
        let n_lat = weights.shape()[0];
        CodebookEmbedding {
            embed_sum: weights.clone(),
            weights,
            cluster_size: vec![T::one(); n_lat],
            decay,
            eps,
            unused_steps: vec![0; n_lat],
            initialized: false,
        }
    }

    pub fn n_lat(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn d_lat(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn code(&self, i: usize) -> &[T] {
        self.weights.row(i)
    }

    /// Moving-average update from one batch of feature rows and their
    /// assignments, with Laplace-smoothed cluster sizes. Returns the number
    /// of cells assigned to each code.
    pub fn ema_update(&mut self, features: &Tensor<T>, assignments: &[usize]) -> Result<Vec<usize>> {
        let (cells, d) = features.dims2("ema_update")?;
        if d != self.d_lat() || assignments.len() != cells {
            return Err(Error::shape(
                "ema_update",
                features.shape(),
                &[assignments.len(), self.d_lat()],
            ));
        }
        let n_lat = self.n_lat();
        let mut counts = vec![0usize; n_lat];
        let mut sums = vec![T::zero(); n_lat * d];
        for (r, &a) in assignments.iter().enumerate() {
            if a >= n_lat {
                return Err(Error::Validation(format!("assignment {a} out of range")));
            }
            counts[a] += 1;
            for (s, &f) in sums[a * d..(a + 1) * d].iter_mut().zip(features.row(r)) {
                *s += f;
            }
        }
        let decay = T::lit(self.decay);
        let keep = T::one() - decay;
        for kk in 0..n_lat {
            self.cluster_size[kk] = decay * self.cluster_size[kk] + keep * T::from_usize(counts[kk]).unwrap();
            let es = &mut self.embed_sum.data_mut()[kk * d..(kk + 1) * d];
            for (e, &s) in es.iter_mut().zip(&sums[kk * d..(kk + 1) * d]) {
                *e = decay * *e + keep * s;
            }
        }
        let total: T = self.cluster_size.iter().copied().sum();
        let eps = T::lit(self.eps);
        let n = T::from_usize(n_lat).unwrap();
        for kk in 0..n_lat {
            if self.cluster_size[kk] == T::zero() {
                continue;
            }
            let smoothed = (self.cluster_size[kk] + eps) / (total + n * eps) * total;
            for c in 0..d {
                let v = self.embed_sum.data()[kk * d + c] / smoothed;
                self.weights.data_mut()[kk * d + c] = v;
            }
        }
        Ok(counts)
    }

    /// Replaces the code vector `code` with `value` and resets its statistics.
    pub fn reseed(&mut self, code: usize, value: &[T]) {
        let d = self.d_lat();
        self.weights.data_mut()[code * d..(code + 1) * d].copy_from_slice(value);
        self.embed_sum.data_mut()[code * d..(code + 1) * d].copy_from_slice(value);
        self.cluster_size[code] = T::one();
        self.unused_steps[code] = 0;
    }

    pub fn cast<U: Real>(&self) -> CodebookEmbedding<U> {
        CodebookEmbedding {
            weights: self.weights.cast(),
            cluster_size: self.cluster_size.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            embed_sum: self.embed_sum.cast(),
            decay: self.decay,
            eps: self.eps,
            unused_steps: self.unused_steps.clone(),
            initialized: self.initialized,
        }
    }
}

/// Nearest code vector (squared L2) for every feature row; ties go to the
/// lowest index. Returns the indices and the selected code vectors.
pub fn nearest_codes<T: Real>(features: &Tensor<T>, cb: &CodebookEmbedding<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    let (cells, d) = features.dims2("quantize")?;
    if d != cb.d_lat() {
        return Err(Error::shape("quantize", features.shape(), cb.weights.shape()));
    }
    let mut idx = Vec::with_capacity(cells);
    let mut out = Vec::with_capacity(cells * d);
    for r in 0..cells {
        let f = features.row(r);
        let mut best = (T::infinity(), 0);
        for kk in 0..cb.n_lat() {
            let dist: T = f.iter().zip(cb.code(kk)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, kk);
            }
        }
        idx.push(best.1);
        out.extend_from_slice(cb.code(best.1));
    }
    Ok((idx, Tensor::from_parts(vec![cells, d], out)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    None,
    Gelu,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    geom: ConvGeometry,
    act: Act,
    upsample: bool,
}

/// Per-step training measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookMetrics {
    pub loss: f64,
    pub rec_mae: f64,
    pub edge: f64,
    pub commit: f64,
    pub active_codes: usize,
    pub reseeded: usize,
    pub skipped: bool,
}

/// Differentiable pieces of one forward pass.
pub struct CodebookForward {
    pub features: Var,
    pub quantized: Var,
    pub reconstruction: Var,
    pub assignments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub config: CodebookConfig,
    pub params: ParamSet<T>,
    pub embedding: CodebookEmbedding<T>,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
}

impl<T: Real> Codebook<T> {
    pub fn new(config: CodebookConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet<T>,
                        name: String,
                        cin: usize,
                        cout: usize,
                        geom: ConvGeometry,
                        act: Act,
                        upsample: bool| {
            let fan_in = cin * geom.kernel * geom.kernel;
            let gain = if act == Act::Gelu { 2.0 } else { 1.0 };
            let w = params.add(
                format!("{name}.w"),
                normal_tensor(
                    &[cout, cin, geom.kernel, geom.kernel],
                    libm::sqrt(gain / fan_in as f64),
                    rng,
                ),
            );
            let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
            ConvLayer {
                w,
                b,
                geom,
                act,
                upsample,
            }
        };
        let same3 = ConvGeometry::new(3, 1, 1, Padding::Replicate);
        let down4 = ConvGeometry::new(4, 2, 1, Padding::Replicate);
        let point = ConvGeometry::new(1, 1, 0, Padding::Zero);
        let ch = &config.channels;
        let deepest = *ch.last().unwrap();

        let mut encoder = vec![conv(&mut params, "enc.stem".into(), 3, ch[0], same3, Act::Gelu, false)];
        let mut cin = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(conv(
                &mut params,
                format!("enc.down{i}"),
                cin,
                c,
                down4,
                Act::Gelu,
                false,
            ));
            cin = c;
        }
        encoder.push(conv(
            &mut params,
            "enc.mid".into(),
            deepest,
            deepest,
            same3,
            Act::Gelu,
            false,
        ));
        encoder.push(conv(
            &mut params,
            "enc.out".into(),
            deepest,
            config.d_lat,
            point,
            Act::None,
            false,
        ));

        let mut decoder = vec![
            conv(
                &mut params,
                "dec.in".into(),
                config.d_lat,
                deepest,
                point,
                Act::Gelu,
                false,
            ),
            conv(&mut params, "dec.mid".into(), deepest, deepest, same3, Act::Gelu, false),
        ];
        let mut cin = deepest;
        for i in (0..ch.len()).rev() {
            let cout = if i == 0 { ch[0] } else { ch[i - 1] };
            decoder.push(conv(
                &mut params,
                format!("dec.up{i}"),
                cin,
                cout,
                same3,
                Act::Gelu,
                true,
            ));
            cin = cout;
        }
        decoder.push(conv(&mut params, "dec.out".into(), cin, 3, same3, Act::None, false));

        let codes = normal_tensor(&[config.n_lat, config.d_lat], 1.0, rng);
        let embedding = CodebookEmbedding::new(codes, config.ema_decay, config.ema_eps);
        Ok(Codebook {
            config,
            params,
            embedding,
            encoder,
            decoder,
        })
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn run(&self, tape: &mut Tape<T>, bound: &Bound, layers: &[ConvLayer], mut x: Var) -> Result<Var> {
        for layer in layers {
            if layer.upsample {
                x = tape.upsample2x(x)?;
            }
            x = tape.conv2d(x, bound[layer.w], Some(bound[layer.b]), layer.geom)?;
            x = match layer.act {
                Act::None => x,
                Act::Gelu => tape.gelu(x),
            };
        }
        Ok(x)
    }

    /// Encoder features of `[N, 3, H, W]` images as `[N·k², d_lat]` rows,
    /// one row per grid cell.
    pub fn encode_features(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images);
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Config(format!(
                "codebook expects [N, 3, {size}, {size}] input, got {s:?}"
            )));
        }
        let f = self.run(tape, bound, &self.encoder, images)?;
        tape.chw_to_rows(f)
    }

    /// Decoder from `[N·k², d_lat]` rows to `[N, 3, H, W]` images. The output
    /// is unbounded; `decode` clamps it to the image range.
    pub fn decode_rows(&self, tape: &mut Tape<T>, bound: &Bound, rows: Var) -> Result<Var> {
        let k = self.config.k;
        let n = tape.shape(rows)[0] / (k * k);
        let z = tape.rows_to_chw(rows, n, k, k)?;
        self.run(tape, bound, &self.decoder, z)
    }

    /// Quantizes encoder rows; the returned variable carries the code vectors
    /// forward and copies its gradient straight to `features`.
    pub fn quantize(&self, tape: &mut Tape<T>, features: Var) -> Result<(Vec<usize>, Var)> {
        let (idx, codes) = nearest_codes(tape.value(features), &self.embedding)?;
        let q = tape.straight_through(features, codes)?;
        Ok((idx, q))
    }

    /// Mean over cells of `‖f − sg(W_idx)‖²`. `codes` is the code table as a
    /// tape variable; it is stop-gradiented here.
    pub fn commitment_loss(&self, tape: &mut Tape<T>, features: Var, codes: Var, assignments: &[usize]) -> Result<Var> {
        let frozen = tape.stop_gradient(codes);
        let chosen = tape.index_rows(frozen, assignments.to_vec())?;
        let diff = tape.sub(features, chosen)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let cells = T::from_usize(assignments.len()).unwrap();
        Ok(tape.scale(total, T::one() / cells))
    }

    /// Full encode → quantize → decode pass on a batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<CodebookForward> {
        let features = self.encode_features(tape, bound, images)?;
        let (assignments, quantized) = self.quantize(tape, features)?;
        let reconstruction = self.decode_rows(tape, bound, quantized)?;
        Ok(CodebookForward {
            features,
            quantized,
            reconstruction,
            assignments,
        })
    }

    /// Weighted reconstruction (L1), image-gradient (L1) and commitment loss.
    /// Returns `(loss, rec_mae, edge, commit)`.
    pub fn loss(&self, tape: &mut Tape<T>, fwd: &CodebookForward, target: Var) -> Result<(Var, Var, Var, Var)> {
        let cfg = &self.config;
        let diff = tape.sub(fwd.reconstruction, target)?;
        let abs = tape.abs(diff);
        let rec = tape.mean(abs);
        let edge = {
            let dx_r = tape.diff_w(fwd.reconstruction)?;
            let dx_t = tape.diff_w(target)?;
            let dy_r = tape.diff_h(fwd.reconstruction)?;
            let dy_t = tape.diff_h(target)?;
            let ex = tape.sub(dx_r, dx_t)?;
            let ey = tape.sub(dy_r, dy_t)?;
            let ex = tape.abs(ex);
            let ey = tape.abs(ey);
            let mx = tape.mean(ex);
            let my = tape.mean(ey);
            let both = tape.add(mx, my)?;
            tape.scale(both, T::lit(0.5))
        };
        let codes = tape.constant(self.embedding.weights.clone());
        let commit = self.commitment_loss(tape, fwd.features, codes, &fwd.assignments)?;
        let a = tape.scale(rec, T::lit(cfg.w_rec));
        let b = tape.scale(edge, T::lit(cfg.w_edge));
        let c = tape.scale(commit, T::lit(cfg.w_commit));
        let ab = tape.add(a, b)?;
        let total = tape.add(ab, c)?;
        Ok((total, rec, edge, commit))
    }

    /// One optimizer step on encoder/decoder parameters followed by one
    /// moving-average update of the code vectors.
    pub fn train_step(
        &mut self,
        opt: &mut AdamState<T>,
        adam: &AdamConfig,
        images: &[&Image],
        lr: f64,
        rng: &mut DetRng,
    ) -> Result<CodebookMetrics> {
        let batch = Image::batch_chw::<T>(images)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(batch);
        if !self.embedding.initialized {
            let f = self.encode_features(&mut tape, &bound, x)?;
            self.seed_codes(tape.value(f), rng);
        }
        let fwd = self.forward(&mut tape, &bound, x)?;
        let (loss, rec, edge, commit) = self.loss(&mut tape, &fwd, x)?;
        let scalar = |v: Var, tape: &Tape<T>| tape.value(v).data()[0].to_f64_lossy();
        let metrics_loss = scalar(loss, &tape);
        let mut metrics = CodebookMetrics {
            loss: metrics_loss,
            rec_mae: scalar(rec, &tape),
            edge: scalar(edge, &tape),
            commit: scalar(commit, &tape),
            active_codes: 0,
            reseeded: 0,
            skipped: false,
        };
        if !metrics_loss.is_finite() {
            opt.skipped += 1;
            metrics.skipped = true;
            return Ok(metrics);
        }
        let mut grads = tape.backward(loss)?;
        let g = self.params.gradients(&bound, &mut grads);
        if opt.step(&mut self.params, &g, lr, adam) == StepOutcome::Skipped {
            metrics.skipped = true;
            return Ok(metrics);
        }
        let features = tape.value(fwd.features).clone();
        let counts = self.embedding.ema_update(&features, &fwd.assignments)?;
        metrics.active_codes = counts.iter().filter(|&&c| c > 0).count();
        metrics.reseeded = self.reseed_dead_codes(&counts, &features, rng);
        Ok(metrics)
    }

    fn seed_codes(&mut self, features: &Tensor<T>, rng: &mut DetRng) {
        let rows = features.shape()[0];
        for code in 0..self.embedding.n_lat() {
            let r = rng.random_range(0..rows);
            let row = features.row(r).to_vec();
            self.embedding.reseed(code, &row);
        }
        self.embedding.initialized = true;
    }

    fn reseed_dead_codes(&mut self, counts: &[usize], features: &Tensor<T>, rng: &mut DetRng) -> usize {
        let limit = self.config.dead_code_steps;
        let rows = features.shape()[0];
        let mut reseeded = 0;
        for (code, &c) in counts.iter().enumerate() {
            if c > 0 {
                self.embedding.unused_steps[code] = 0;
                continue;
            }
            self.embedding.unused_steps[code] += 1;
            if limit > 0 && self.embedding.unused_steps[code] >= limit {
                let row = features.row(rng.random_range(0..rows)).to_vec();
                self.embedding.reseed(code, &row);
                reseeded += 1;
            }
        }
        reseeded
    }

    /// Token grids for a batch of images.
    pub fn encode(&self, images: &[&Image]) -> Result<Vec<TokenGrid>> {
        let batch = Image::batch_chw::<T>(images)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(batch);
        let f = self.encode_features(&mut tape, &bound, x)?;
        let (idx, _) = nearest_codes(tape.value(f), &self.embedding)?;
        let cells = self.config.cells();
        idx.chunks(cells)
            .map(|c| TokenGrid::new(self.config.k, c.to_vec(), self.config.n_lat))
            .collect()
    }

    /// Images for a batch of token grids.
    pub fn decode(&self, grids: &[&TokenGrid]) -> Result<Vec<Image>> {
        let (k, n_lat) = (self.config.k, self.config.n_lat);
        let mut idx = Vec::new();
        for g in grids {
            if g.k() != k {
                return Err(Error::Validation(format!("token grid side {} != {k}", g.k())));
            }
            if let Some(&bad) = g.indices().iter().find(|&&i| i >= n_lat) {
                return Err(Error::Validation(format!("token {bad} out of range for {n_lat} codes")));
            }
            idx.extend_from_slice(g.indices());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let table = tape.constant(self.embedding.weights.clone());
        let rows = tape.index_rows(table, idx)?;
        let out = self.decode_rows(&mut tape, &bound, rows)?;
        let size = self.config.image_size;
        let per = 3 * size * size;
        tape.value(out)
            .data()
            .chunks(per)
            .map(|c| Image::from_chw(c, size))
            .collect()
    }

    /// Encode then decode.
    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let grids = self.encode(images)?;
        self.decode(&grids.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_config() -> CodebookConfig {
        CodebookConfig {
            image_size: 8,
            k: 2,
            n_lat: 8,
            d_lat: 4,
            channels: vec![4, 6],
            ..CodebookConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodebookConfig::default().validate().is_ok());
        let bad = CodebookConfig {
            k: 3,
            ..CodebookConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CodebookConfig {
            channels: vec![8],
            ..CodebookConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_code_maps_to_its_index() {
        let mut rng = seeded(1);
        let cb = CodebookEmbedding::new(normal_tensor::<f64>(&[16, 5], 1.0, &mut rng), 0.9, 1e-5);
        let f = Tensor::new(&[1, 5], cb.code(7).to_vec()).unwrap();
        let (idx, q) = nearest_codes(&f, &cb).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(q.data(), cb.code(7));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let w = Tensor::new(&[3, 1], vec![1.0, -1.0, 1.0]).unwrap();
        let cb = CodebookEmbedding::<f64>::new(w, 0.9, 1e-5);
        let f = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(nearest_codes(&f, &cb).unwrap().0, vec![0, 0]);
    }

    #[test]
    fn ema_with_zero_decay_is_batch_mean() {
        let w = Tensor::<f64>::zeros(&[4, 2]);
        let mut cb = CodebookEmbedding::new(w, 0.0, 1e-5);
        let f = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        cb.ema_update(&f, &[1, 1, 1]).unwrap();
        assert!((cb.code(1)[0] - 3.0).abs() < 1e-4);
        assert!((cb.code(1)[1] - 5.0).abs() < 1e-4);
        // empty clusters are left as they were
        assert_eq!(cb.code(0), &[0.0, 0.0]);
    }

    #[test]
    fn ema_converges_to_batch_mean() {
        let mut rng = seeded(2);
        let mut cb = CodebookEmbedding::new(normal_tensor::<f64>(&[4, 3], 1.0, &mut rng), 0.9, 1e-5);
        let f = normal_tensor::<f64>(&[10, 3], 1.0, &mut rng);
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..10).map(|r| f.row(r)[c]).sum::<f64>() / 10.0)
            .collect();
        for _ in 0..400 {
            cb.ema_update(&f, &[2; 10]).unwrap();
        }
        for c in 0..3 {
            assert!((cb.code(2)[c] - mean[c]).abs() < 1e-4, "{:?} vs {mean:?}", cb.code(2));
        }
    }

    #[test]
    fn empty_cluster_row_is_stable() {
        let mut rng = seeded(3);
        let mut cb = CodebookEmbedding::new(normal_tensor::<f64>(&[4, 3], 1.0, &mut rng), 0.9, 1e-5);
        let before = cb.code(3).to_vec();
        let f = normal_tensor::<f64>(&[6, 3], 1.0, &mut rng);
        cb.ema_update(&f, &[0, 1, 0, 1, 2, 2]).unwrap();
        for (a, b) in cb.code(3).iter().zip(&before) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
        }
        assert!((cb.cluster_size[3] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let mut rng = seeded(4);
        let cb = Codebook::<f64>::new(small_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = cb.params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(
            cb.encode_features(&mut tape, &bound, x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decode_validates_tokens_and_range() {
        let mut rng = seeded(5);
        let cb = Codebook::<f32>::new(small_config(), &mut rng).unwrap();
        assert!(TokenGrid::new(2, vec![0, 1, 2, 8], 8).is_err());
        let grid = TokenGrid::new(2, vec![0, 7, 3, 3], 8).unwrap();
        let imgs = cb.decode(&[&grid, &grid]).unwrap();
        assert_eq!(imgs[0].size(), 8);
        assert_eq!(imgs[0], imgs[1]);
        assert!(imgs[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

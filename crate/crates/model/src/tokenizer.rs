//! Vector-quantized pose autoencoder over local body vertices, plus the
//! temporal token smoother applied before decoding.

use maskmotion_core::autodiff::{clip_grad_norm, AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var};
use maskmotion_core::linalg::Vec3;
use maskmotion_core::scalar::{lit, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::Mlp;

/// `K × L` codebook entries.
pub type Codebook<T> = Tensor<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vertices: usize,
    /// Tokens per frame (P).
    pub tokens: usize,
    /// Latent width per token (L).
    pub latent: usize,
    /// Codebook size (K).
    pub codebook_size: usize,
    pub hidden: usize,
    /// Smoother window is `2 * smoother_radius + 1` frames.
    pub smoother_radius: usize,
    pub smoother_hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vertices: maskmotion_core::body::DEFAULT_VERTICES,
            tokens: 8,
            latent: 9,
            codebook_size: 512,
            hidden: 128,
            smoother_radius: 2,
            smoother_hidden: 18,
        }
    }
}

impl TokenizerConfig {
    pub fn input_width(&self) -> usize {
        self.vertices * 3
    }

    pub fn window(&self) -> usize {
        2 * self.smoother_radius + 1
    }
}

/// `P × L` encoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLatents<T> {
    pub z: Tensor<T>,
}

/// `frames × tokens` codebook indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PoseTokenSeq {
    pub frames: usize,
    pub tokens: usize,
    pub ids: Vec<usize>,
}

impl PoseTokenSeq {
    pub fn new(frames: usize, tokens: usize, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), frames * tokens);
        PoseTokenSeq { frames, tokens, ids }
    }

    pub fn frame(&self, f: usize) -> &[usize] {
        &self.ids[f * self.tokens..(f + 1) * self.tokens]
    }

    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if self.ids.len() != self.frames * self.tokens {
            return Err(ModelError::ShapeMismatch(format!("{} ids for {}×{}", self.ids.len(), self.frames, self.tokens)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= codebook_size) {
            return Err(ModelError::ShapeMismatch(format!("token id {bad} ≥ codebook size {codebook_size}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct SmootherIds {
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct TokenizerIds {
    mean: ParamId,
    scale: ParamId,
    enc: Mlp,
    dec: Mlp,
    codebook: ParamId,
}

#[derive(Clone, Debug)]
pub struct TokenizerWeights<T> {
    pub config: TokenizerConfig,
    pub params: ParamStore<T>,
    pub smoother: ParamStore<T>,
    ids: TokenizerIds,
    sids: SmootherIds,
}

/// Index of the nearest codebook row (squared distance, lowest index on ties).
pub fn nearest_entry<T: Scalar>(z: &[T], codebook: &Codebook<T>) -> usize {
    let mut best = (0usize, T::infinity());
    for k in 0..codebook.rows {
        let d: T = z.iter().zip(codebook.row(k)).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Nearest-neighbour quantization of every latent row.
pub fn quantize<T: Scalar>(z: &PoseLatents<T>, codebook: &Codebook<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    if z.z.cols != codebook.cols {
        return Err(ModelError::ShapeMismatch(format!("latent width {} vs codebook width {}", z.z.cols, codebook.cols)));
    }
    let ids: Vec<usize> = (0..z.z.rows).map(|r| nearest_entry(z.z.row(r), codebook)).collect();
    let q = embed(&ids, codebook);
    Ok((ids, q))
}

/// Codebook rows for `ids`.
pub fn embed<T: Scalar>(ids: &[usize], codebook: &Codebook<T>) -> Tensor<T> {
    let mut q = Tensor::zeros(ids.len(), codebook.cols);
    for (r, &k) in ids.iter().enumerate() {
        q.row_mut(r).copy_from_slice(codebook.row(k));
    }
    q
}

impl<T: Scalar> TokenizerWeights<T> {
    pub fn new(config: TokenizerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.input_width();
        let pl = config.tokens * config.latent;
        let mean = params.add_zeros("tok.mean", 1, d);
        let scale = params.add_filled("tok.scale", 1, 1, T::one());
        let enc = Mlp::new(&mut params, "tok.enc", (d, config.hidden, pl), 1.0, &mut rng);
        let dec = Mlp::new(&mut params, "tok.dec", (pl, config.hidden, d), 1.0, &mut rng);
        let codebook = params.add_normal("tok.codebook", config.codebook_size, config.latent, 1.0, &mut rng);
        let mut smoother = ParamStore::new();
        let mlp = Mlp::new(
            &mut smoother,
            "smoother",
            (config.window() * config.latent, config.smoother_hidden, config.latent),
            0.0,
            &mut rng,
        );
        TokenizerWeights { config, params, smoother, ids: TokenizerIds { mean, scale, enc, dec, codebook }, sids: SmootherIds { mlp } }
    }

    pub fn codebook(&self) -> &Codebook<T> {
        self.params.get(self.ids.codebook)
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook<T> {
        self.params.get_mut(self.ids.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.ids.codebook
    }

    fn check_vertices(&self, vertices: &[Vec3<T>]) -> Result<()> {
        if vertices.len() != self.config.vertices {
            return Err(ModelError::ShapeMismatch(format!("{} vertices, tokenizer expects {}", vertices.len(), self.config.vertices)));
        }
        Ok(())
    }

    /// `B × 3V` flattened vertices to `(B·P) × L` latents.
    pub fn encode_var(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let b = tape.shape(x).0;
        let mean = tape.detach(vars[self.ids.mean.0]);
        let scale = tape.value(vars[self.ids.scale.0]).item();
        let mean_rows = tape_broadcast(tape, mean, b);
        let centered = tape.sub(x, mean_rows);
        let h = tape.scale(centered, scale);
        let z = self.ids.enc.forward(tape, vars, h);
        tape.reshape(z, b * self.config.tokens, self.config.latent)
    }

    /// `(B·P) × L` embeddings to `B × 3V` vertices.
    pub fn decode_var(&self, tape: &mut Tape<T>, vars: &[Var], q: Var) -> Var {
        let (rows, _) = tape.shape(q);
        let b = rows / self.config.tokens;
        let flat = tape.reshape(q, b, self.config.tokens * self.config.latent);
        let y = self.ids.dec.forward(tape, vars, flat);
        let scale = tape.value(vars[self.ids.scale.0]).item();
        let y = tape.scale(y, T::one() / scale);
        tape.add_row(y, vars[self.ids.mean.0])
    }

    /// Temporal smoother over `(F·P) × L` embeddings; `svars` are bound from
    /// [`TokenizerWeights::smoother`].
    pub fn smooth_var(&self, tape: &mut Tape<T>, svars: &[Var], q: Var, frames: usize) -> Var {
        let p = self.config.tokens;
        let r = self.config.smoother_radius as i64;
        let taps: Vec<Var> = (-r..=r)
            .map(|o| {
                let rows: Vec<usize> = (0..frames * p)
                    .map(|i| {
                        let f = ((i / p) as i64 + o).clamp(0, frames as i64 - 1) as usize;
                        f * p + i % p
                    })
                    .collect();
                tape.gather_rows(q, &rows)
            })
            .collect();
        let window = tape.concat_cols(&taps);
        let delta = self.sids.mlp.forward(tape, svars, window);
        tape.add(q, delta)
    }

    pub fn encode(&self, vertices: &[Vec3<T>]) -> Result<PoseLatents<T>> {
        self.check_vertices(vertices)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(flatten(&[vertices]));
        let z = self.encode_var(&mut tape, &vars, x);
        Ok(PoseLatents { z: tape.value(z).clone() })
    }

    pub fn quantize(&self, z: &PoseLatents<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        quantize(z, self.codebook())
    }

    /// Token ids of one local vertex frame.
    pub fn tokenize(&self, vertices: &[Vec3<T>]) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(vertices)?)?.0)
    }

    /// Token ids for a sequence of local vertex frames.
    pub fn tokenize_sequence(&self, frames: &[Vec<Vec3<T>>]) -> Result<PoseTokenSeq> {
        for f in frames {
            self.check_vertices(f)?;
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let refs: Vec<&[Vec3<T>]> = frames.iter().map(|f| f.as_slice()).collect();
        let x = tape.constant(flatten(&refs));
        let z = self.encode_var(&mut tape, &vars, x);
        let (ids, _) = quantize(&PoseLatents { z: tape.value(z).clone() }, self.codebook())?;
        Ok(PoseTokenSeq::new(frames.len(), self.config.tokens, ids))
    }

    /// Decodes one frame of `P × L` embeddings.
    pub fn decode(&self, q: &Tensor<T>, use_smoother: bool) -> Result<Vec<Vec3<T>>> {
        Ok(self.decode_sequence(q, 1, use_smoother)?.remove(0))
    }

    /// Decodes `(F·P) × L` embeddings to `F` vertex frames.
    pub fn decode_sequence(&self, q: &Tensor<T>, frames: usize, use_smoother: bool) -> Result<Vec<Vec<Vec3<T>>>> {
        if q.cols != self.config.latent || q.rows != frames * self.config.tokens {
            return Err(ModelError::ShapeMismatch(format!(
                "embeddings {}×{} for {frames} frames of {}×{}",
                q.rows, q.cols, self.config.tokens, self.config.latent
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let mut x = tape.constant(q.clone());
        if use_smoother {
            let svars = self.smoother.bind(&mut tape, false);
            x = self.smooth_var(&mut tape, &svars, x, frames);
        }
        let y = self.decode_var(&mut tape, &vars, x);
        Ok(unflatten(tape.value(y)))
    }

    /// Decodes token ids (`F × P`).
    pub fn decode_tokens(&self, tokens: &PoseTokenSeq, use_smoother: bool) -> Result<Vec<Vec<Vec3<T>>>> {
        tokens.validate(self.config.codebook_size)?;
        self.decode_sequence(&embed(&tokens.ids, self.codebook()), tokens.frames, use_smoother)
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, vertices: &[Vec3<T>]) -> Result<Vec<Vec3<T>>> {
        let (_, q) = self.quantize(&self.encode(vertices)?)?;
        self.decode(&q, false)
    }
}

fn tape_broadcast<T: Scalar>(tape: &mut Tape<T>, row: Var, rows: usize) -> Var {
    tape.gather_rows(row, &vec![0; rows])
}

/// Stacks vertex frames into a `B × 3V` tensor.
pub fn flatten<T: Scalar>(frames: &[&[Vec3<T>]]) -> Tensor<T> {
    let v = frames.first().map_or(0, |f| f.len());
    let mut data = Vec::with_capacity(frames.len() * v * 3);
    for f in frames {
        for p in f.iter() {
            data.extend_from_slice(p);
        }
    }
    Tensor::from_vec(frames.len(), v * 3, data)
}

pub fn unflatten<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<Vec3<T>>> {
    (0..t.rows).map(|r| t.row(r).chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment: f64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig { epochs: 40, batch_size: 32, lr: 2e-3, commitment: 0.25, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizerTrainLog {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Entries re-initialized after each epoch.
    pub reinitialized: Vec<usize>,
}

/// Mean per-vertex Euclidean error between two vertex frames.
pub fn vertex_error<T: Scalar>(a: &[Vec3<T>], b: &[Vec3<T>]) -> f64 {
    let n = a.len().max(1);
    a.iter().zip(b).map(|(p, q)| maskmotion_core::linalg::dist(*p, *q).as_f64()).sum::<f64>() / n as f64
}

/// Fits encoder, decoder and codebook on local vertex frames.
pub fn train_tokenizer<T: Scalar>(
    data: &[Vec<Vec3<T>>],
    config: TokenizerConfig,
    train: TokenizerTrainConfig,
) -> Result<(TokenizerWeights<T>, TokenizerTrainLog)> {
    if data.is_empty() {
        return Err(ModelError::MissingDataset("tokenizer"));
    }
    let mut weights = TokenizerWeights::<T>::new(config, train.seed);
    for f in data {
        weights.check_vertices(f)?;
    }
    let all = flatten(&data.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let d = all.cols;
    let n = data.len();
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(all.row(r)) {
            *m += x.as_f64() / n as f64;
        }
    }
    let var = (0..n)
        .flat_map(|r| all.row(r).iter().zip(&mean).map(|(&x, &m)| (x.as_f64() - m).powi(2)).collect::<Vec<_>>())
        .sum::<f64>()
        / (n * d) as f64;
    *weights.params.get_mut(weights.ids.mean) = Tensor::from_vec(1, d, mean.iter().map(|&m| lit(m)).collect());
    *weights.params.get_mut(weights.ids.scale) = Tensor::scalar(lit(1.0 / var.sqrt().max(1e-6)));

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let (p, k) = (config.tokens, config.codebook_size);
    let latents_of = |w: &TokenizerWeights<T>, rows: &[usize]| {
        let mut tape = Tape::new();
        let vars = w.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(rows.len(), d, |r, c| all.at(rows[r], c)));
        let z = w.encode_var(&mut tape, &vars, x);
        tape.value(z).clone()
    };
    // seed the codebook with encoder outputs
    let sample: Vec<usize> = (0..k.div_ceil(p).max(1)).map(|_| rng.gen_range(0..n)).collect();
    let z0 = latents_of(&weights, &sample);
    let cb = weights.codebook_mut();
    for e in 0..k {
        let src = z0.row(e % z0.rows);
        for (c, &s) in cb.row_mut(e).iter_mut().zip(src) {
            *c = s + lit(rng.gen_range(-1e-3..1e-3));
        }
    }

    let batches_per_epoch = n.div_ceil(train.batch_size);
    let total_steps = (batches_per_epoch * train.epochs) as u64;
    let opt_cfg = AdamWConfig { lr: train.lr, total_steps, warmup_steps: (total_steps / 20).min(200), weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(opt_cfg, &weights.params);
    let mut log = TokenizerTrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let beta = lit::<T>(train.commitment);
    for _epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0usize; k];
        let mut epoch_loss = 0.0;
        let mut recent_latents = Tensor::zeros(0, config.latent);
        for chunk in order.chunks(train.batch_size) {
            let b = chunk.len();
            let mut tape = Tape::new();
            let vars = weights.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::from_fn(b, d, |r, c| all.at(chunk[r], c)));
            let z = weights.encode_var(&mut tape, &vars, x);
            let zv = tape.value(z).clone();
            let ids: Vec<usize> = (0..zv.rows).map(|r| nearest_entry(zv.row(r), weights.codebook())).collect();
            for &i in &ids {
                usage[i] += 1;
            }
            let q = tape.gather_rows(vars[weights.ids.codebook.0], &ids);
            let z_sg = tape.detach(z);
            let q_sg = tape.detach(q);
            let cb_diff = tape.sub(q, z_sg);
            let cb_sq = tape.square(cb_diff);
            let cb_loss = tape.mean_all(cb_sq);
            let cm_diff = tape.sub(z, q_sg);
            let cm_sq = tape.square(cm_diff);
            let cm_mean = tape.mean_all(cm_sq);
            let cm_loss = tape.scale(cm_mean, beta);
            // straight-through: forward uses q, gradient flows to z
            let st_delta = tape.constant(Tensor::from_vec(zv.rows, zv.cols, tape.value(q_sg).data.iter().zip(&zv.data).map(|(&a, &b)| a - b).collect()));
            let z_st = tape.add(z, st_delta);
            let y = weights.decode_var(&mut tape, &vars, z_st);
            let err = tape.sub(y, x);
            let sq = tape.square(err);
            let rec = tape.mean_all(sq);
            let rec = tape.scale(rec, lit::<T>(3.0) * weights.params.get(weights.ids.scale).item().powi(2));
            let l1 = tape.add(rec, cb_loss);
            let loss = tape.add(l1, cm_loss);
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(ModelError::Diverged { step: opt.step, loss: lv });
            }
            epoch_loss += lv / batches_per_epoch as f64;
            let mut g = tape.backward(loss);
            let mut grads = weights.params.collect_grads(&mut g, &vars);
            // the normalization statistics stay fixed
            grads[weights.ids.mean.0].scale_assign(T::zero());
            grads[weights.ids.scale.0].scale_assign(T::zero());
            clip_grad_norm(&mut grads, lit(1.0));
            opt.update(&mut weights.params, &grads);
            recent_latents = zv;
        }
        log.epoch_loss.push(epoch_loss);
        let dead: Vec<usize> = (0..k).filter(|&e| usage[e] == 0).collect();
        if !dead.is_empty() && recent_latents.rows > 0 {
            let cb = weights.params.get_mut(weights.ids.codebook);
            for &e in &dead {
                let src = recent_latents.row(rng.gen_range(0..recent_latents.rows)).to_vec();
                for (c, s) in cb.row_mut(e).iter_mut().zip(src) {
                    *c = s + lit(rng.gen_range(-1e-2..1e-2));
                }
            }
        }
        log.reinitialized.push(dead.len());
    }
    Ok((weights, log))
}

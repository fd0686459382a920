use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine_schedule, draw_noise, loss_with_draws, DiffusionSchedule, EmbeddingPair, MlpDenoiser, Prediction};
use super::{COSINE_OFFSET, MAX_BETA};
use crate::binio;
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp};
use crate::optimizer::{AdamHyper, AdamState};
use crate::rng::{RngStreams, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub prediction: Prediction,
    /// Data scale assumed by the x₀ preconditioner.
    pub sigma_data: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached along a
    /// half cosine. 1 keeps the rate constant.
    pub final_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: every step multiplies parameters by `1 − lr·weight_decay`.
    pub weight_decay: f64,
    /// Global L2 gradient-norm clip.
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub ema_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            hidden: vec![64, 64],
            time_dim: 16,
            prediction: Prediction::X0,
            sigma_data: 1.0,
            steps: 2000,
            batch_size: 1024,
            lr: 2e-3,
            final_lr_ratio: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 6.02e-2,
            clip_norm: 0.5,
            ema_decay: 0.9999,
            ema_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-size mapping-network hyperparameters: width 512, depth 6,
    /// lr 1.1e-4, batch 1024.
    pub fn full() -> Self {
        Self {
            hidden: vec![512; 6],
            time_dim: 64,
            lr: 1.1e-4,
            batch_size: 1024,
            ..Self::default()
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.final_lr_ratio == 1.0 || self.steps <= 1 {
            return self.lr;
        }
        let progress = (step as f64 / (self.steps - 1) as f64).min(1.0);
        let r = self.final_lr_ratio;
        self.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.timesteps == 0 || self.batch_size == 0 || self.ema_every == 0 {
            return Err(Error::param("timesteps, batch_size and ema_every must be positive"));
        }
        if self.time_dim % 2 != 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::param("time_dim must be even and hidden widths positive"));
        }
        if !pos(self.lr) || !pos(self.eps) || !pos(self.clip_norm) || !pos(self.sigma_data) {
            return Err(Error::param("lr, eps, clip_norm and sigma_data must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::param("weight_decay must be non-negative with lr·weight_decay < 1"));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::param("final_lr_ratio must lie in (0, 1]"));
        }
        for b in [self.beta1, self.beta2, self.ema_decay] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param("betas and ema_decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters. The effective decay warms
/// up as `min(decay, (1 + n)/(10 + n))` over the first `n` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f32>,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &[f32]) -> Self {
        Self {
            shadow: params.to_vec(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self, decay: f64) -> f64 {
        let n = self.updates as f64;
        decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &[f32], decay: f64) {
        let d = self.effective_decay(decay);
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = (d * *s as f64 + (1.0 - d) * p as f64) as f32;
        }
        self.updates += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
}

impl TrainRecord {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Denoiser, optimizer moments and EMA shadow under one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: DiffusionSchedule,
    pub denoiser: MlpDenoiser,
    pub ema: EmaState,
    adam: AdamState,
    step: u64,
}

const PARALLEL_CHUNKS: usize = 8;

impl Trainer {
    pub fn new(config: TrainConfig, data_dim: usize, cond_dim: usize) -> Result<Self> {
        config.validate()?;
        let schedule = cosine_schedule(config.timesteps)?;
        let mut rng = RngStreams::new(config.seed).stream(Stream::MlpInit);
        let denoiser = MlpDenoiser::new(
            data_dim,
            cond_dim,
            config.time_dim,
            &config.hidden,
            config.prediction,
            &schedule,
            config.sigma_data,
            &mut rng,
        )?;
        let n = denoiser.params().len();
        Ok(Self {
            ema: EmaState::new(denoiser.params()),
            adam: AdamState::new(n),
            schedule,
            denoiser,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update on a minibatch drawn with replacement from `data`.
    pub fn train_step(&mut self, data: &[EmbeddingPair]) -> Result<TrainRecord> {
        if data.is_empty() {
            return Err(Error::param("empty training set"));
        }
        let streams = RngStreams::new(self.config.seed);
        let mut pick = streams.at_step(Stream::Dataset, self.step);
        let batch: Vec<EmbeddingPair> = (0..self.config.batch_size)
            .map(|_| data[pick.gen_range(0..data.len())].clone())
            .collect();
        let dim = batch[0].target.len();
        let draws = draw_noise(
            batch.len(),
            dim,
            &self.schedule,
            &mut streams.at_step(Stream::Diffusion, self.step),
        );

        let n = batch.len();
        let chunk = n.div_ceil(PARALLEL_CHUNKS);
        let parts: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_chunks(chunk)
            .zip(draws.par_chunks(chunk))
            .map(|(b, d)| {
                let (l, mut g) = loss_with_draws(b, d, &self.denoiser, &self.schedule)?;
                let w = b.len() as f64 / n as f64;
                g.iter_mut().for_each(|v| *v *= w);
                Ok((l * w, g))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = vec![0.0; self.denoiser.params().len()];
        for part in parts {
            let (l, g) = part?;
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss {loss} at step {}", self.step)));
        }
        let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm > self.config.clip_norm {
            let k = self.config.clip_norm / grad_norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }

        let c = &self.config;
        let lr = c.lr_at(self.step);
        let hyper = AdamHyper {
            lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        };
        let shrink = 1.0 - lr * c.weight_decay;
        let adam = &mut self.adam;
        let mut result = Ok(());
        self.denoiser.update_params(|p| {
            p.iter_mut().for_each(|v| *v = (*v as f64 * shrink) as f32);
            result = adam.step(p, &grads, &hyper, "denoiser parameters");
        });
        result?;
        let record = TrainRecord {
            step: self.step,
            loss,
            grad_norm,
        };
        self.step += 1;
        if self.step % c.ema_every == 0 {
            self.ema.update(self.denoiser.params(), c.ema_decay);
        }
        Ok(record)
    }

    /// Runs until `config.steps`, reporting every step.
    pub fn train(&mut self, data: &[EmbeddingPair], mut on_step: impl FnMut(&TrainRecord)) -> Result<()> {
        while self.step < self.config.steps {
            let r = self.train_step(data)?;
            on_step(&r);
        }
        Ok(())
    }

    /// The denoiser carrying the EMA weights.
    pub fn ema_denoiser(&self) -> Result<MlpDenoiser> {
        self.denoiser.with_params(&self.ema.shadow)
    }

    pub fn checkpoint(&self) -> DiffusionCheckpoint {
        DiffusionCheckpoint {
            schedule: self.schedule.clone(),
            denoiser: self.denoiser.clone(),
            ema: self.ema.clone(),
        }
    }
}

/// Contents of an EDIF file.
#[derive(Clone, Debug)]
pub struct DiffusionCheckpoint {
    pub schedule: DiffusionSchedule,
    pub denoiser: MlpDenoiser,
    pub ema: EmaState,
}

const EDIF_MAGIC: &[u8; 4] = b"EDIF";
const EDIF_VERSION: u32 = 1;

impl DiffusionCheckpoint {
    pub fn ema_denoiser(&self) -> Result<MlpDenoiser> {
        self.denoiser.with_params(&self.ema.shadow)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        use super::Denoiser;
        binio::write_header(w, EDIF_MAGIC, EDIF_VERSION)?;
        w.write_u32::<LittleEndian>(self.schedule.timesteps() as u32)?;
        w.write_f64::<LittleEndian>(COSINE_OFFSET)?;
        w.write_f64::<LittleEndian>(MAX_BETA)?;
        let d = &self.denoiser;
        w.write_u32::<LittleEndian>(d.prediction().code())?;
        w.write_u32::<LittleEndian>(d.data_dim() as u32)?;
        w.write_u32::<LittleEndian>(d.cond_dim() as u32)?;
        w.write_u32::<LittleEndian>(d.time_dim() as u32)?;
        w.write_f64::<LittleEndian>(d.sigma_data())?;
        w.write_u32::<LittleEndian>(d.mlp().hidden_activation().code())?;
        w.write_u32::<LittleEndian>(d.mlp().output_activation().code())?;
        let shapes = d.mlp().shapes();
        w.write_u32::<LittleEndian>(shapes.len() as u32)?;
        for &(o, i) in shapes {
            w.write_u32::<LittleEndian>(o as u32)?;
            w.write_u32::<LittleEndian>(i as u32)?;
        }
        binio::write_f32s(w, d.params())?;
        w.write_u64::<LittleEndian>(self.ema.updates)?;
        binio::write_f32s(w, &self.ema.shadow)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        const KIND: &str = "EDIF";
        binio::read_header(r, KIND, EDIF_MAGIC, EDIF_VERSION)?;
        let t = binio::read_u32(r, KIND)? as usize;
        let s = binio::read_f64(r, KIND)?;
        let max_beta = binio::read_f64(r, KIND)?;
        if s != COSINE_OFFSET || max_beta != MAX_BETA {
            return Err(Error::format(KIND, format!("unsupported schedule constants s={s}, max β={max_beta}")));
        }
        let schedule = cosine_schedule(t).map_err(|e| Error::format(KIND, e.to_string()))?;
        let prediction = Prediction::from_code(binio::read_u32(r, KIND)?)
            .ok_or_else(|| Error::format(KIND, "unknown prediction target"))?;
        let data_dim = binio::read_u32(r, KIND)? as usize;
        let cond_dim = binio::read_u32(r, KIND)? as usize;
        let time_dim = binio::read_u32(r, KIND)? as usize;
        let sigma_data = binio::read_f64(r, KIND)?;
        let act = |code| Activation::from_code(code).ok_or_else(|| Error::format(KIND, "unknown activation"));
        let hidden = act(binio::read_u32(r, KIND)?)?;
        let output = act(binio::read_u32(r, KIND)?)?;
        let layers = binio::read_u32(r, KIND)? as usize;
        if layers == 0 || layers > 64 {
            return Err(Error::format(KIND, format!("implausible layer count {layers}")));
        }
        let mut shapes = Vec::with_capacity(layers);
        let mut n = 0u64;
        for _ in 0..layers {
            let o = binio::read_u32(r, KIND)? as u64;
            let i = binio::read_u32(r, KIND)? as u64;
            n = n.saturating_add(o.saturating_mul(i).saturating_add(o));
            shapes.push((o as usize, i as usize));
        }
        let n = binio::checked_count(n, KIND)?;
        let params = binio::read_f32s(r, n, KIND)?;
        let updates = binio::read_u64(r, KIND)?;
        let shadow = binio::read_f32s(r, n, KIND)?;
        if shadow.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(KIND, "non-finite EMA parameters"));
        }
        let mlp = Mlp::from_parts(shapes, params, hidden, output).map_err(|e| Error::format(KIND, e.to_string()))?;
        let denoiser = MlpDenoiser::from_mlp(mlp, data_dim, cond_dim, time_dim, prediction, &schedule, sigma_data)
            .map_err(|e| Error::format(KIND, e.to_string()))?;
        Ok(Self {
            schedule,
            denoiser,
            ema: EmaState { shadow, updates },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

//! Adam optimization of a [`VoxelField`] under image-space guidance.
//!
//! Every random choice in a step (viewpoint, background, jitter) is drawn
//! from a stream keyed by `(seed, step)`, so a run resumed from a checkpoint
//! retraces the uninterrupted run exactly.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::guidance::{photometric_guidance, GuidanceHandle};
use crate::losses::{annealed_tau, backpropagate, total_loss, LossBreakdown, LossWeights};
use crate::renderer::{background_augment, render, sample_camera_pose, AugmentMode, PoseSampler, RenderSettings};
use crate::rng::{RngStreams, Stream};
use crate::sdf_prior::SdfGrid;
use crate::voxel_field::VoxelField;

const ADAM_MAGIC: &[u8; 4] = b"ADAM";
const ADAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One Adam update with bias correction at step `t` (1-based).
/// Returns the new `(param, m, v)`.
#[inline]
pub fn adam_element(p: f64, m: f64, v: f64, g: f64, t: u64, h: &AdamHyper) -> (f64, f64, f64) {
    let m = h.beta1 * m + (1.0 - h.beta1) * g;
    let v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    let m_hat = m / (1.0 - h.beta1.powi(t as i32));
    let v_hat = v / (1.0 - h.beta2.powi(t as i32));
    (p - h.lr * m_hat / (v_hat.sqrt() + h.eps), m, v)
}

/// Adam over `f64` buffers; `t` is incremented first.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: &mut u64, h: &AdamHyper) -> Result<()> {
    check_grads(grads, params.len(), "parameters")?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::param("Adam moments do not match the parameters"));
    }
    *t += 1;
    for i in 0..params.len() {
        (params[i], m[i], v[i]) = adam_element(params[i], m[i], v[i], grads[i], *t, h);
    }
    Ok(())
}

fn check_grads(grads: &[f64], n: usize, what: &str) -> Result<()> {
    if grads.len() != n {
        return Err(Error::param(format!(
            "{} gradients for {n} {what}",
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let bad = grads.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::Numerical(format!(
            "non-finite gradient for {what}: {bad} of {n} entries, first at index {i} ({})",
            grads[i]
        )));
    }
    Ok(())
}

/// Adam moments for an `f32` parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    fn element(&self, params: &[f32], grads: &[f64], i: usize, h: &AdamHyper) -> (f64, f64, f64) {
        adam_element(params[i] as f64, self.m[i] as f64, self.v[i] as f64, grads[i], self.t + 1, h)
    }

    /// Validates the next update without applying it: gradient shape and
    /// finiteness, and that every updated value fits in f32.
    pub fn check(&self, params: &[f32], grads: &[f64], h: &AdamHyper, what: &str) -> Result<()> {
        check_grads(grads, params.len(), what)?;
        if self.m.len() != params.len() {
            return Err(Error::param(format!("Adam state sized for {} {what}", self.m.len())));
        }
        let overflow = (0..params.len()).find(|&i| {
            let (p, m, v) = self.element(params, grads, i, h);
            !((p as f32).is_finite() && (m as f32).is_finite() && (v as f32).is_finite())
        });
        match overflow {
            Some(i) => Err(Error::Numerical(format!(
                "{what} parameter {i} overflows at Adam step {}",
                self.t + 1
            ))),
            None => Ok(()),
        }
    }

    /// Applies one update; on error nothing is modified.
    pub fn step(&mut self, params: &mut [f32], grads: &[f64], h: &AdamHyper, what: &str) -> Result<()> {
        self.check(params, grads, h, what)?;
        for i in 0..params.len() {
            let (p, m, v) = self.element(params, grads, i, h);
            params[i] = p as f32;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
        }
        self.t += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauAnneal {
    pub start: f64,
    pub steps: u64,
}

impl Default for TauAnneal {
    fn default() -> Self {
        Self { start: 0.4, steps: 500 }
    }
}

/// Transmittance-target schedule. `Auto` ramps with the default
/// [`TauAnneal`] under remote guidance and holds the target fixed for
/// photometric runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    #[default]
    Auto,
    Off,
    Ramp(TauAnneal),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub camera: PoseSampler,
    pub render: RenderSettings,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Learning-rate multiplier reached at the last step (exponential decay).
    pub lr_decay: Option<f64>,
    pub tau_schedule: TauSchedule,
    /// Background modes drawn uniformly per step under remote guidance.
    pub augment: Vec<AugmentMode>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_grid: 0.5,
            lr_mlp: 5e-3,
            steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            camera: PoseSampler::default(),
            render: RenderSettings::default(),
            checkpoint_every: 500,
            lr_decay: None,
            tau_schedule: TauSchedule::Auto,
            augment: AugmentMode::ALL.to_vec(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_grid >= 0.0 && self.lr_mlp >= 0.0 && self.lr_grid.is_finite() && self.lr_mlp.is_finite()) {
            return Err(Error::param("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::param("need 0 <= beta1, beta2 < 1 and eps > 0"));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::param("lr_decay must be positive"));
            }
        }
        if self.augment.is_empty() {
            return Err(Error::param("at least one augmentation mode is required"));
        }
        self.weights.validate()?;
        self.camera.validate()?;
        self.render.validate()
    }

    fn hyper(&self, lr: f64, step: u64) -> AdamHyper {
        let scale = match self.lr_decay {
            Some(d) if self.steps > 0 => d.powf(step as f64 / self.steps as f64),
            _ => 1.0,
        };
        AdamHyper {
            lr: lr * scale,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Field plus optimizer state; `step()` counts completed steps.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub field: VoxelField,
    pub grid_adam: AdamState,
    pub mlp_adam: AdamState,
}

impl OptimState {
    pub fn new(field: VoxelField) -> Self {
        let grid_adam = AdamState::new(field.density().len());
        let mlp_adam = AdamState::new(field.color_mlp().num_params());
        Self {
            field,
            grid_adam,
            mlp_adam,
        }
    }

    pub fn step(&self) -> u64 {
        self.grid_adam.t
    }

    /// Writes `path` (VFLD) and the optimizer sidecar next to it, each via a
    /// temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, |w| self.field.write_to(w))?;
        write_atomic(&sidecar_path(path), |w| self.write_adam(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let field = VoxelField::load(path)?;
        let mut r = BufReader::new(File::open(sidecar_path(path))?);
        let (grid_adam, mlp_adam) = Self::read_adam(&mut r)?;
        if grid_adam.len() != field.density().len() || mlp_adam.len() != field.color_mlp().num_params() {
            return Err(Error::format("ADAM", "moment shapes do not match the field"));
        }
        if grid_adam.t != mlp_adam.t {
            return Err(Error::format("ADAM", "group step counters disagree"));
        }
        Ok(Self {
            field,
            grid_adam,
            mlp_adam,
        })
    }

    pub fn write_adam<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, ADAM_MAGIC, ADAM_VERSION)?;
        w.write_u32::<LittleEndian>(2)?;
        for s in [&self.grid_adam, &self.mlp_adam] {
            w.write_u64::<LittleEndian>(s.t)?;
            w.write_u64::<LittleEndian>(s.m.len() as u64)?;
            binio::write_f32s(w, &s.m)?;
            binio::write_f32s(w, &s.v)?;
        }
        Ok(())
    }

    pub fn read_adam<R: Read>(r: &mut R) -> Result<(AdamState, AdamState)> {
        const KIND: &str = "ADAM";
        binio::read_header(r, KIND, ADAM_MAGIC, ADAM_VERSION)?;
        let groups = binio::read_u32(r, KIND)?;
        if groups != 2 {
            return Err(Error::format(KIND, format!("expected 2 parameter groups, got {groups}")));
        }
        let mut read_group = || -> Result<AdamState> {
            let t = binio::read_u64(r, KIND)?;
            let n = binio::checked_count(binio::read_u64(r, KIND)?, KIND)?;
            let m = binio::read_f32s(r, n, KIND)?;
            let v = binio::read_f32s(r, n, KIND)?;
            Ok(AdamState { t, m, v })
        };
        let grid = read_group()?;
        let mlp = read_group()?;
        Ok((grid, mlp))
    }
}

/// `field.vfld` → `field.adam`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("adam")
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hooks run on the loop thread.
pub trait Observer {
    fn on_step(&mut self, _step: u64, _loss: &LossBreakdown, _state: &OptimState) -> Result<()> {
        Ok(())
    }

    /// Called with the last consistent state before an error is returned.
    fn on_abort(&mut self, _state: &OptimState, _error: &Error) {}
}

impl Observer for () {}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn on_step(&mut self, step: u64, loss: &LossBreakdown, state: &OptimState) -> Result<()> {
        self.0.on_step(step, loss, state)?;
        self.1.on_step(step, loss, state)
    }

    fn on_abort(&mut self, state: &OptimState, error: &Error) {
        self.0.on_abort(state, error);
        self.1.on_abort(state, error);
    }
}

/// Writes one JSON loss line per step.
pub struct MetricsWriter<W: Write>(pub W);

impl<W: Write> Observer for MetricsWriter<W> {
    fn on_step(&mut self, step: u64, loss: &LossBreakdown, _: &OptimState) -> Result<()> {
        writeln!(self.0, "{}", loss.json_line(step))?;
        Ok(())
    }
}

/// Saves `path` every `every` completed steps and when a run aborts.
pub struct Checkpointer {
    pub path: PathBuf,
    pub every: u64,
}

impl Observer for Checkpointer {
    fn on_step(&mut self, _: u64, _: &LossBreakdown, state: &OptimState) -> Result<()> {
        if self.every > 0 && state.step() % self.every == 0 {
            state.save(&self.path)?;
        }
        Ok(())
    }

    fn on_abort(&mut self, state: &OptimState, error: &Error) {
        if let Err(e) = state.save(&self.path) {
            log::error!("could not write checkpoint after {error}: {e}");
        }
    }
}

/// Runs `config.steps` steps from a fresh optimizer state.
pub fn optimize(
    field: VoxelField,
    guidance: &mut GuidanceHandle,
    prior: Option<&SdfGrid>,
    config: &OptimConfig,
    observer: &mut dyn Observer,
) -> Result<VoxelField> {
    let mut state = OptimState::new(field);
    run(&mut state, guidance, prior, config, observer)?;
    Ok(state.field)
}

/// Continues `state` until it has completed `config.steps` steps.
pub fn run(
    state: &mut OptimState,
    guidance: &mut GuidanceHandle,
    prior: Option<&SdfGrid>,
    config: &OptimConfig,
    observer: &mut dyn Observer,
) -> Result<()> {
    config.validate()?;
    if config.weights.w_prior > 0.0 {
        match prior {
            Some(sdf) if sdf.lattice().same_as(state.field.lattice()) => {}
            Some(_) => return Err(Error::param("prior SDF lattice does not match the field")),
            None => return Err(Error::param("w_prior > 0 needs a prior SDF")),
        }
    }
    while state.step() < config.steps {
        let i = state.step();
        let loss = match optimization_step(state, guidance, prior, config, i) {
            Ok(l) => l,
            Err(e) => {
                observer.on_abort(state, &e);
                return Err(e);
            }
        };
        observer.on_step(i, &loss, state)?;
    }
    Ok(())
}

fn optimization_step(
    state: &mut OptimState,
    guidance: &mut GuidanceHandle,
    prior: Option<&SdfGrid>,
    config: &OptimConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let streams = RngStreams::new(config.seed);
    let mut settings = config.render.clone();
    if settings.jitter {
        settings.jitter_seed = streams.at_step(Stream::Jitter, step).gen();
    }
    let mut weights = config.weights.clone();
    let field = &state.field;
    let (output, augmented, result, anneal_default) = match guidance {
        GuidanceHandle::Photometric(views) => {
            let k = streams.at_step(Stream::Camera, step).gen_range(0..views.len());
            let (cam, target) = views.get(k);
            let output = render(field, cam, &settings)?;
            let result = photometric_guidance(&output.rgb, target)?;
            (output, None, result, None)
        }
        GuidanceHandle::Remote { client, prompt } => {
            let cam = sample_camera_pose(&mut streams.at_step(Stream::Camera, step), &config.camera)?;
            let output = render(field, &cam, &settings)?;
            let mut rng = streams.at_step(Stream::Background, step);
            let mode = config.augment[rng.gen_range(0..config.augment.len())];
            let aug = background_augment(&output, &mut rng, mode);
            let result = client.score(&aug.image, prompt, step)?;
            (output, Some(aug), result, Some(TauAnneal::default()))
        }
    };
    let anneal = match config.tau_schedule {
        TauSchedule::Auto => anneal_default,
        TauSchedule::Off => None,
        TauSchedule::Ramp(a) => Some(a),
    };
    if let Some(a) = anneal {
        weights.tau_target = annealed_tau(step, a.start, config.weights.tau_target, a.steps);
    }
    let (loss, adjoints) = total_loss(field, &output, &result, prior, &weights)?;
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("loss is {} at step {step}: {loss:?}", loss.total)));
    }
    let grad = backpropagate(field, &output, augmented.as_ref(), &adjoints)?;
    let grid_h = config.hyper(config.lr_grid, step);
    let mlp_h = config.hyper(config.lr_mlp, step);
    let (density, mlp) = state.field.params_mut();
    // Validate both groups before touching either so an abort leaves a
    // consistent state.
    state.grid_adam.check(density, &grad.density, &grid_h, "density grid")?;
    state.mlp_adam.check(mlp, &grad.mlp, &mlp_h, "color MLP")?;
    state.grid_adam.step(density, &grad.density, &grid_h, "density grid")?;
    state.mlp_adam.step(mlp, &grad.mlp, &mlp_h, "color MLP")?;
    Ok(loss)
}

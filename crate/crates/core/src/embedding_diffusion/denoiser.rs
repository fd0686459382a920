use rand::Rng;

use super::{Denoiser, DiffusionSchedule, Prediction};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp, MlpEval};

/// Sinusoidal embedding of an integer timestep: `dim / 2` sines followed by
/// `dim / 2` cosines at geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// MLP on `x_t ⊕ condition ⊕ timestep embedding` with SiLU hidden units and
/// a linear output.
///
/// Under [`Prediction::X0`] the network `F` is wrapped in a preconditioner:
/// with `x' = x_t/√ᾱ_t` and `σ² = (1−ᾱ_t)/ᾱ_t`,
/// `x̂₀ = c_skip·x' + c_out·F(c_in·x')` where `c_in = 1/√(σ² + σ_d²)`,
/// `c_skip = σ_d²/(σ² + σ_d²)` and `c_out = σ·σ_d/√(σ² + σ_d²)`. The
/// network then only learns a unit-scale correction at every noise level.
/// Under [`Prediction::Epsilon`] the output is `F(x_t)` directly.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    mlp: Mlp,
    eval: MlpEval,
    data_dim: usize,
    cond_dim: usize,
    time_dim: usize,
    prediction: Prediction,
    alpha_bar: Vec<f64>,
    sigma_data: f64,
}

/// `(c_in, c_skip, c_out)` as applied to `x_t` itself.
fn preconditioning(alpha_bar: f64, sigma_data: f64) -> (f64, f64, f64) {
    let a = alpha_bar.sqrt();
    let sigma2 = (1.0 - alpha_bar) / alpha_bar;
    let sd2 = sigma_data * sigma_data;
    let norm = (sigma2 + sd2).sqrt();
    (1.0 / (norm * a), sd2 / ((sigma2 + sd2) * a), sigma2.sqrt() * sigma_data / norm)
}

impl MlpDenoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        cond_dim: usize,
        time_dim: usize,
        hidden: &[usize],
        prediction: Prediction,
        schedule: &DiffusionSchedule,
        sigma_data: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || time_dim % 2 != 0 {
            return Err(Error::param("denoiser needs data_dim ≥ 1 and an even time_dim"));
        }
        let mut widths = vec![data_dim + cond_dim + time_dim];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let mlp = Mlp::glorot(&widths, Activation::Silu, Activation::Identity, rng)?;
        Self::from_mlp(mlp, data_dim, cond_dim, time_dim, prediction, schedule, sigma_data)
    }

    pub fn from_mlp(
        mlp: Mlp,
        data_dim: usize,
        cond_dim: usize,
        time_dim: usize,
        prediction: Prediction,
        schedule: &DiffusionSchedule,
        sigma_data: f64,
    ) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::param("sigma_data must be positive"));
        }
        if mlp.input_width() != data_dim + cond_dim + time_dim || mlp.output_width() != data_dim {
            return Err(Error::param(format!(
                "network {}→{} does not fit data {data_dim}, condition {cond_dim}, time {time_dim}",
                mlp.input_width(),
                mlp.output_width()
            )));
        }
        Ok(Self {
            eval: mlp.evaluator(),
            mlp,
            data_dim,
            cond_dim,
            time_dim,
            prediction,
            alpha_bar: schedule.alpha_bars().to_vec(),
            sigma_data,
        })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    /// Number of timesteps the preconditioner was built for.
    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn params(&self) -> &[f32] {
        self.mlp.params()
    }

    /// Mutates the parameters and refreshes the cached evaluator.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f32])) {
        f(self.mlp.params_mut());
        self.eval = self.mlp.evaluator();
    }

    /// Copy with the parameters replaced, e.g. by an EMA shadow.
    pub fn with_params(&self, params: &[f32]) -> Result<Self> {
        if params.len() != self.mlp.num_params() {
            return Err(Error::param("parameter count mismatch"));
        }
        let mut out = self.clone();
        out.update_params(|p| p.copy_from_slice(params));
        Ok(out)
    }

    fn coefficients(&self, t: usize) -> (f64, f64, f64) {
        match self.prediction {
            Prediction::X0 => preconditioning(self.alpha_bar[t], self.sigma_data),
            Prediction::Epsilon => (1.0, 0.0, 1.0),
        }
    }

    fn input(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let c_in = self.coefficients(t).0;
        let mut x = Vec::with_capacity(self.mlp.input_width());
        x.extend(x_t.iter().map(|v| c_in * v));
        x.extend_from_slice(cond);
        x.extend(timestep_embedding(t, self.time_dim));
        x
    }
}

impl Denoiser for MlpDenoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn prediction(&self) -> Prediction {
        self.prediction
    }

    fn timesteps(&self) -> Option<usize> {
        Some(self.alpha_bar.len() - 1)
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let (_, c_skip, c_out) = self.coefficients(t);
        let mut scratch = self.eval.scratch();
        let f = self.eval.forward(&self.input(x_t, t, cond), &mut scratch);
        f.iter().zip(x_t).map(|(f, x)| c_skip * x + c_out * f).collect()
    }

    fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    fn backward(&self, x_t: &[f64], t: usize, cond: &[f64], grad_out: &[f64], grads: &mut [f64]) {
        let mut scratch = self.eval.scratch();
        self.eval.forward(&self.input(x_t, t, cond), &mut scratch);
        let c_out = self.coefficients(t).2;
        let g: Vec<f64> = grad_out.iter().map(|g| c_out * g).collect();
        self.eval.backward(&mut scratch, &g, grads, None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_diffusion::cosine_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> DiffusionSchedule {
        cosine_schedule(50).unwrap()
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(7, 6);
        assert!((e[0] - 7f64.sin()).abs() < 1e-15);
        assert!((e[3] - 7f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn widths_must_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = MlpDenoiser::new(3, 2, 8, &[16], Prediction::X0, &sched(), 1.0, &mut rng).unwrap();
        assert_eq!(d.mlp().input_width(), 13);
        assert_eq!(d.predict(&[0.0; 3], 5, &[1.0, 0.0]).len(), 3);
        assert!(MlpDenoiser::from_mlp(d.mlp().clone(), 3, 3, 8, Prediction::X0, &sched(), 1.0).is_err());
        assert!(MlpDenoiser::new(3, 2, 7, &[16], Prediction::X0, &sched(), 1.0, &mut rng).is_err());
    }

    #[test]
    fn updates_refresh_the_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = MlpDenoiser::new(2, 0, 4, &[8], Prediction::Epsilon, &sched(), 1.0, &mut rng).unwrap();
        let before = d.predict(&[0.1, 0.2], 3, &[]);
        d.update_params(|p| p.iter_mut().for_each(|v| *v = 0.0));
        assert_ne!(before, d.predict(&[0.1, 0.2], 3, &[]));
        assert_eq!(d.predict(&[0.1, 0.2], 3, &[]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_network_is_the_gaussian_posterior_mean() {
        // With F = 0 the x₀ estimate is E[x₀ | x_t] for x₀ ~ N(0, σ_d²).
        let s = sched();
        let mut d = MlpDenoiser::new(1, 0, 4, &[8], Prediction::X0, &s, 0.7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        d.update_params(|p| p.fill(0.0));
        for t in [1, 10, 30, 50] {
            let ab = s.alpha_bar(t);
            let expect = ab.sqrt() * 0.49 / (ab * 0.49 + 1.0 - ab) * 1.3;
            let got = d.predict(&[1.3], t, &[])[0];
            assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0), "t {t}: {got} vs {expect}");
        }
    }
}

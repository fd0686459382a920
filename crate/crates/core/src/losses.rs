//! Training objective: guidance + transmittance + shape-prior preservation.

use serde::{Deserialize, Serialize};

use crate::activation::{softplus, softplus_grad};
use crate::error::{Error, Result};
use crate::guidance::GuidanceResult;
use crate::renderer::{augment_backward, render_backward, AugmentedImage, RenderOutput};
use crate::sdf_prior::SdfGrid;
use crate::voxel_field::{FieldGrad, VoxelField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_guidance: f64,
    pub w_transmittance: f64,
    pub w_prior: f64,
    pub tau_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_guidance: 1.0,
            w_transmittance: 0.5,
            w_prior: 1e-3,
            tau_target: 0.88,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.w_guidance) || !ok(self.w_transmittance) || !ok(self.w_prior) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if !(self.tau_target > 0.0 && self.tau_target < 1.0) {
            return Err(Error::param("tau_target must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Linear ramp of the transmittance target from `start` to `end` over
/// `steps` steps, constant afterwards.
pub fn annealed_tau(step: u64, start: f64, end: f64, steps: u64) -> f64 {
    if steps == 0 || step >= steps {
        return end;
    }
    start + (end - start) * step as f64 / steps as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub guidance: f64,
    pub transmittance: f64,
    pub prior: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// One metrics line: `{"step", "guidance", "transmittance", "prior", "total"}`.
    pub fn json_line(&self, step: u64) -> String {
        serde_json::json!({
            "step": step,
            "guidance": self.guidance,
            "transmittance": self.transmittance,
            "prior": self.prior,
            "total": self.total,
        })
        .to_string()
    }
}

/// `−min(τ, mean T)` and its gradient per pixel.
pub fn transmittance_loss(transmittance: &[f64], tau_target: f64) -> (f64, Vec<f64>) {
    let n = transmittance.len();
    if n == 0 {
        return (-tau_target.min(1.0), Vec::new());
    }
    let mean = transmittance.iter().sum::<f64>() / n as f64;
    if mean < tau_target {
        (-mean, vec![-1.0 / n as f64; n])
    } else {
        (-tau_target, vec![0.0; n])
    }
}

/// `−Σ 1(sdf < 0) · (1 − exp(−σ s))` over voxels, with `s` the voxel size,
/// and its gradient with respect to the raw density grid.
pub fn prior_preserving_loss(field: &VoxelField, sdf: &SdfGrid) -> Result<(f64, Vec<f64>)> {
    if !field.lattice().same_as(sdf.lattice()) {
        return Err(Error::param("prior SDF and field use different lattices"));
    }
    let s = field.lattice().voxel_size();
    let b = field.bias();
    let mut loss = 0.0;
    let grad = field
        .density()
        .iter()
        .zip(sdf.values())
        .map(|(&raw, &d)| {
            if d >= 0.0 {
                return 0.0;
            }
            let x = raw as f64 + b;
            let transmit = (-softplus(x) * s).exp();
            loss -= 1.0 - transmit;
            -transmit * s * softplus_grad(x)
        })
        .collect();
    Ok((loss, grad))
}

/// Adjoints of the total loss, before they are pulled through the renderer.
#[derive(Clone, Debug)]
pub struct LossAdjoints {
    /// With respect to the scored (possibly augmented) image.
    pub image: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Direct gradient on the raw density grid, if the prior term is active.
    pub density: Option<Vec<f64>>,
}

pub fn total_loss(
    field: &VoxelField,
    output: &RenderOutput,
    guidance: &GuidanceResult,
    sdf: Option<&SdfGrid>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossAdjoints)> {
    weights.validate()?;
    if guidance.grad.len() != output.rgb.data().len() {
        return Err(Error::param("guidance gradient does not match the render size"));
    }
    let (lt, gt) = transmittance_loss(&output.transmittance, weights.tau_target);
    let (lp, gp) = if weights.w_prior > 0.0 {
        let sdf = sdf.ok_or_else(|| Error::param("w_prior > 0 needs a prior SDF"))?;
        let (l, g) = prior_preserving_loss(field, sdf)?;
        (l, Some(g))
    } else {
        (0.0, None)
    };
    let breakdown = LossBreakdown {
        guidance: guidance.loss,
        transmittance: lt,
        prior: lp,
        total: weights.w_guidance * guidance.loss + weights.w_transmittance * lt + weights.w_prior * lp,
    };
    let adjoints = LossAdjoints {
        image: guidance.grad.iter().map(|g| weights.w_guidance * g).collect(),
        transmittance: gt.iter().map(|g| weights.w_transmittance * g).collect(),
        density: gp.map(|g| g.into_iter().map(|v| weights.w_prior * v).collect()),
    };
    Ok((breakdown, adjoints))
}

/// Full parameter gradient of the total loss. `augmented` is the background
/// augmentation the guidance scored, if any.
pub fn backpropagate(
    field: &VoxelField,
    output: &RenderOutput,
    augmented: Option<&AugmentedImage>,
    adjoints: &LossAdjoints,
) -> Result<FieldGrad> {
    let (d_rgb, mut d_t) = match augmented {
        Some(aug) => augment_backward(output, aug, &adjoints.image)?,
        None => (adjoints.image.clone(), vec![0.0; output.transmittance.len()]),
    };
    if d_t.len() != adjoints.transmittance.len() {
        return Err(Error::param("transmittance adjoint does not match the render"));
    }
    for (a, b) in d_t.iter_mut().zip(&adjoints.transmittance) {
        *a += b;
    }
    let mut grad = render_backward(field, &output.tape, &d_rgb, &d_t)?;
    if let Some(gp) = &adjoints.density {
        for (a, b) in grad.density.iter_mut().zip(gp) {
            *a += b;
        }
    }
    Ok(grad)
}

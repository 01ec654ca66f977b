//! Phase retrieval by Adam descent on the LSQ or Poisson cost.

mod adam;
mod cost;

pub use cost::{
    cost_lsq, cost_of, cost_poisson, cost_poisson_with_floor, gradient, gradient_with_floor, CostKind,
    DEFAULT_POISSON_FLOOR,
};

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::grid::RealField;
use crate::phantom::{ObjectModel, SupportMask};

use adam::Adam;
use cost::Objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One update per pass over all exposures.
    Full,
    /// One update per exposure, in a seeded random order each pass.
    PerPosition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionConfig {
    pub cost: CostKind,
    pub max_iters: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_seed: u64,
    /// Standard deviation of the random initial phase, radians.
    pub init_sigma: f64,
    /// Required for NFH; ignored (with a warning) for FFP and NFP.
    pub support: Option<SupportMask>,
    pub nonneg: bool,
    /// Photons; the amplitude guard in the Poisson log is its square root.
    pub poisson_floor: f64,
    pub batch: BatchMode,
    /// Stop when the relative cost change over `patience` iterations falls below this.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::Lsq,
            max_iters: DEFAULT_MAX_ITERS,
            step_size: DEFAULT_STEP_SIZE,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_seed: 0,
            init_sigma: 0.1,
            support: None,
            nonneg: false,
            poisson_floor: DEFAULT_POISSON_FLOOR,
            batch: BatchMode::Full,
            tolerance: 1e-7,
            patience: 20,
        }
    }
}

pub const DEFAULT_STEP_SIZE: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 1000;

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.step_size) {
            return Err(Error::Config(format!("step size {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !positive(self.adam_eps) || !positive(self.poisson_floor) {
            return Err(Error::Config("eps and poisson floor must be positive".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config(format!("init sigma {}", self.init_sigma)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub object: ObjectModel,
    /// `(iteration, cost)` with the cost evaluated before that iteration's update.
    pub cost_history: Vec<(usize, f64)>,
    pub iters_run: usize,
    pub converged: bool,
}

impl ReconstructionResult {
    pub fn final_cost(&self) -> Option<f64> {
        self.cost_history.last().map(|&(_, c)| c)
    }
}

/// Support mask that will actually be applied for this dataset, after the
/// modality rules: mandatory for NFH, dropped for the ptychographic modes.
pub fn effective_support<'a>(data: &Dataset, cfg: &'a ReconstructionConfig) -> Result<Option<&'a SupportMask>> {
    match (data.geometry.modality, cfg.support.as_ref()) {
        (Modality::Nfh, None) => Err(Error::Config("NFH reconstruction requires a support mask".into())),
        (Modality::Nfh, Some(s)) => {
            let [h, w] = data.geometry.object_shape;
            if s.shape() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: (h, w),
                    actual: s.shape(),
                });
            }
            Ok(Some(s))
        }
        (m, Some(_)) => {
            log::warn!("{m} does not use a finite support constraint; ignoring the supplied mask");
            Ok(None)
        }
        (_, None) => Ok(None),
    }
}

fn project(phase: &mut [f64], support: Option<&SupportMask>, nonneg: bool) {
    if let Some(s) = support {
        for (p, &inside) in phase.iter_mut().zip(s.mask.iter()) {
            if !inside {
                *p = 0.0;
            }
        }
    }
    if nonneg {
        phase.iter_mut().for_each(|p| *p = p.max(0.0));
    }
}

/// Initial phase: N(0, σ²) per pixel from `init_seed`, then projected.
pub fn initial_phase(shape: (usize, usize), cfg: &ReconstructionConfig, support: Option<&SupportMask>) -> RealField {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let normal = Normal::new(0.0, cfg.init_sigma).expect("validated sigma");
    let mut v: Vec<f64> = (0..shape.0 * shape.1).map(|_| normal.sample(&mut rng)).collect();
    // the random start is non-negative even without the constraint
    v.iter_mut().for_each(|p| *p = p.max(0.0));
    project(&mut v, support, cfg.nonneg);
    RealField::new(Array2::from_shape_vec(shape, v).expect("shape"))
}

fn transmission(phase: &[f64], shape: (usize, usize)) -> Array2<Complex64> {
    Array2::from_shape_vec(shape, phase.iter().map(|&p| Complex64::from_polar(1.0, p)).collect())
        .expect("shape")
}

/// Recovers the phase map from `data` under `cfg`.
pub fn reconstruct(data: &Dataset, cfg: &ReconstructionConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let support = effective_support(data, cfg)?;
    let objective = Objective::new(data, cfg.cost, cfg.poisson_floor)?;
    let [h, w] = data.geometry.object_shape;
    let shape = (h, w);

    let mut phase = initial_phase(shape, cfg, support).into_inner().into_raw_vec_and_offset().0;
    let mut opt = Adam::new(phase.len(), cfg.step_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let all: Vec<usize> = (0..objective.num_exposures()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0x5eed_0f_0de5);
    let mut history: Vec<(usize, f64)> = Vec::with_capacity(cfg.max_iters.min(1 << 16));
    let mut converged = false;
    let mut iters = 0;
    // Gradients are divided by the RMS of the first full gradient so that
    // Adam's eps acts on a fluence-independent scale.
    let mut grad_scale: Option<f64> = None;

    while iters < cfg.max_iters {
        let t = transmission(&phase, shape);
        let cost = match cfg.batch {
            BatchMode::Full => {
                let (c, mut g) = objective.phase_gradient(&t, &all);
                check_finite(iters, c)?;
                let s = *grad_scale.get_or_insert_with(|| rms_scale(&g));
                g.mapv_inplace(|v| v * s);
                opt.step(&mut phase, g.as_slice().expect("standard layout"));
                project(&mut phase, support, cfg.nonneg);
                c
            }
            BatchMode::PerPosition => {
                let c = match grad_scale {
                    Some(_) => objective.evaluate(&t, &all, false).0,
                    None => {
                        let (c, g) = objective.phase_gradient(&t, &all);
                        grad_scale = Some(rms_scale(&g));
                        c
                    }
                };
                check_finite(iters, c)?;
                let s = grad_scale.expect("set above");
                let mut order = all.clone();
                order.shuffle(&mut order_rng);
                for k in order {
                    let t = transmission(&phase, shape);
                    let (_, mut g) = objective.phase_gradient(&t, &[k]);
                    g.mapv_inplace(|v| v * s);
                    opt.step(&mut phase, g.as_slice().expect("standard layout"));
                    project(&mut phase, support, cfg.nonneg);
                }
                c
            }
        };
        history.push((iters, cost));
        iters += 1;
        if history.len() > cfg.patience {
            let old = history[history.len() - 1 - cfg.patience].1;
            let change = (old - cost).abs();
            let scale = old.abs().max(cost.abs());
            if change <= cfg.tolerance * scale || scale == 0.0 {
                converged = true;
                break;
            }
        }
    }

    let phase = RealField::new(Array2::from_shape_vec(shape, phase).expect("shape"));
    let mut object = ObjectModel::pure_phase(phase);
    object.pixel_pitch = crate::phantom::DEFAULT_PIXEL_PITCH;
    Ok(ReconstructionResult {
        object,
        cost_history: history,
        iters_run: iters,
        converged,
    })
}

/// Reciprocal RMS of `g`, or 1 for an all-zero gradient.
fn rms_scale(g: &Array2<f64>) -> f64 {
    let rms = (g.iter().map(|v| v * v).sum::<f64>() / g.len().max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        1.0 / rms
    } else {
        1.0
    }
}

fn check_finite(iter: usize, cost: f64) -> Result<()> {
    if cost.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iter, cost })
    }
}

//! ℓ₁ sparse coding: `min_z ‖S_D(z) − x‖² + λ‖z‖₁` solved with FISTA.

use ndarray::{Array, Array2, Array3, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::operators::{dot2, dot3, lattice_shape, CoefficientMaps, Dictionary, ImageGrid, SynthesisMode, SynthesisOp};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub lipschitz_safety: f64,
    pub power_iters: usize,
    /// Seed of the power-iteration start vector.
    pub seed: u64,
}

impl Default for SparseCodeConfig {
    fn default() -> Self {
        Self { lambda: 0.1, max_iters: 50, lipschitz_safety: 1.05, power_iters: 30, seed: 0 }
    }
}

impl SparseCodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.lipschitz_safety >= 1.0) {
            return Err(Error::Config(format!("lipschitz_safety must be >= 1, got {}", self.lipschitz_safety)));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sign(v)·max(|v| − tau, 0)`.
#[inline]
pub fn shrink(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Elementwise soft threshold, the prox of `tau·|·|`.
pub fn soft_threshold<D: Dimension>(u: &Array<f64, D>, tau: f64) -> Array<f64, D> {
    debug_assert!(tau >= 0.0);
    u.mapv(|v| shrink(v, tau))
}

/// Power-iteration estimate of the largest eigenvalue of `SᵀS`.
///
/// In patch mode `SᵀS` is block diagonal with one identical `DᵀD` block per
/// tile, so a single tile is iterated whatever the image shape.
pub fn operator_norm_sq(
    dict: &Dictionary,
    shape: (usize, usize),
    mode: SynthesisMode,
    power_iters: usize,
    seed: u64,
) -> Result<f64> {
    let k = dict.atom_side();
    let image = match mode {
        SynthesisMode::Convolutional => shape,
        SynthesisMode::Patch => {
            lattice_shape(mode, shape, k)?;
            (k, k)
        }
    };
    let lattice = lattice_shape(mode, image, k)?;
    let op = SynthesisOp::new(dict, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array3::from_shape_simple_fn((dict.atom_count(), lattice.0, lattice.1), || {
        StandardNormal.sample(&mut rng)
    });
    let mut estimate = 0.0;
    for _ in 0..power_iters.max(1) {
        let norm = dot3(&v, &v).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.mapv_inplace(|e| e / norm);
        let sv = op.apply(&v);
        estimate = dot2(&sv, &sv);
        v = op.adjoint(&sv);
    }
    Ok(estimate)
}

/// Safety-scaled estimate of `λ_max(SᵀS)`.
///
/// The gradient of `‖Sz − x‖²` is Lipschitz with twice this constant.
pub fn estimate_lipschitz(
    dict: &Dictionary,
    shape: (usize, usize),
    mode: SynthesisMode,
    cfg: &SparseCodeConfig,
) -> Result<f64> {
    Ok(cfg.lipschitz_safety * operator_norm_sq(dict, shape, mode, cfg.power_iters, cfg.seed)?)
}

/// `‖S_D(z) − x‖² + λ‖z‖₁`.
pub fn sparse_objective(dict: &Dictionary, z: &CoefficientMaps, x: &ImageGrid, lambda: f64) -> Result<f64> {
    let s = crate::operators::synthesize(dict, z)?;
    if s.shape() != x.shape() {
        return Err(Error::Shape(format!("synthesized {:?} vs image {:?}", s.shape(), x.shape())));
    }
    let r: f64 = Zip::from(s.values()).and(x.values()).fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
    Ok(r + lambda * z.l1_norm())
}

/// `2‖Sᵀx‖_∞`: for `λ` at or above this value the zero vector is optimal.
pub fn lambda_kill_threshold(dict: &Dictionary, x: &ImageGrid, mode: SynthesisMode) -> Result<f64> {
    let st = crate::operators::adjoint(dict, x, mode)?;
    Ok(2.0 * st.max_abs())
}

/// Sparse codes and the objective after every iteration (entry 0 is the start).
#[derive(Debug, Clone)]
pub struct SparseCode {
    pub z: CoefficientMaps,
    pub trace: Vec<f64>,
    /// Iterations where momentum was reset after an objective increase.
    pub restarts: usize,
}

/// FISTA from a cold start `z = 0`.
pub fn fista_sparse_code(
    dict: &Dictionary,
    x: &ImageGrid,
    cfg: &SparseCodeConfig,
    mode: SynthesisMode,
) -> Result<SparseCode> {
    let z0 = CoefficientMaps::zeros(mode, dict.atom_count(), x.shape(), dict.atom_side(), x.pixel_spacing())?;
    fista_from(dict, x, cfg, &z0)
}

/// Cold-start FISTA with a known Lipschitz estimate.
pub fn fista_sparse_code_with(
    dict: &Dictionary,
    x: &ImageGrid,
    cfg: &SparseCodeConfig,
    mode: SynthesisMode,
    lip: f64,
) -> Result<SparseCode> {
    cfg.validate()?;
    let z0 = CoefficientMaps::zeros(mode, dict.atom_count(), x.shape(), dict.atom_side(), x.pixel_spacing())?;
    fista_with_lipschitz(dict, x, cfg, &z0, lip)
}

/// FISTA from a given start point, with a precomputed Lipschitz estimate if known.
pub fn fista_from(dict: &Dictionary, x: &ImageGrid, cfg: &SparseCodeConfig, init: &CoefficientMaps) -> Result<SparseCode> {
    cfg.validate()?;
    let lip = estimate_lipschitz(dict, x.shape(), init.mode(), cfg)?;
    fista_with_lipschitz(dict, x, cfg, init, lip)
}

/// FISTA with momentum `t_{k+1} = (1 + √(1 + 4t_k²))/2` and step `1/(2·lip)`.
///
/// An iterate that raises the objective is discarded and replaced by a plain
/// proximal-gradient step from the previous iterate with momentum reset, so
/// the trace never increases beyond rounding.
pub fn fista_with_lipschitz(
    dict: &Dictionary,
    x: &ImageGrid,
    cfg: &SparseCodeConfig,
    init: &CoefficientMaps,
    lip: f64,
) -> Result<SparseCode> {
    if init.image_shape() != x.shape() || init.channel_count() != dict.atom_count() {
        return Err(Error::Shape("initial coefficients do not match image and dictionary".into()));
    }
    let op = SynthesisOp::new(dict, init.mode());
    let target = x.values();
    let lambda = cfg.lambda;

    let objective = |sz: &Array2<f64>, z: &Array3<f64>| -> f64 {
        let r: f64 = Zip::from(sz).and(target).fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
        r + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
    };

    let mut z = init.data().clone();
    let mut sz = op.apply(&z);
    let mut f = objective(&sz, &z);
    let mut trace = vec![f];
    if lip == 0.0 {
        // Zero operator: the minimizer is z = 0.
        let zero = Array3::zeros(z.dim());
        trace.push(objective(&Array2::zeros(target.dim()), &zero));
        return Ok(SparseCode { z: init.with_data(zero), trace, restarts: 0 });
    }
    let step = 1.0 / (2.0 * lip);
    let tau = step * lambda;

    let prox_step = |y: &Array3<f64>, sy: &Array2<f64>| -> Array3<f64> {
        let grad = op.adjoint(&(sy - target));
        let mut out = y.clone();
        Zip::from(&mut out).and(&grad).for_each(|o, g| *o = shrink(*o - 2.0 * step * g, tau));
        out
    };

    let mut y = z.clone();
    let mut sy = sz.clone();
    let mut t = 1.0f64;
    let mut restarts = 0;
    for iteration in 1..=cfg.max_iters {
        let mut z_new = prox_step(&y, &sy);
        let mut sz_new = op.apply(&z_new);
        let mut f_new = objective(&sz_new, &z_new);
        if f_new > f && t > 1.0 {
            restarts += 1;
            t = 1.0;
            z_new = prox_step(&z, &sz);
            sz_new = op.apply(&z_new);
            f_new = objective(&sz_new, &z_new);
        }
        if !f_new.is_finite() {
            log::error!("FISTA diverged at iteration {iteration}; trace {trace:?}");
            return Err(Error::NonFinite { iteration, last_finite: f });
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        y = &z_new + &((&z_new - &z) * beta);
        sy = &sz_new + &((&sz_new - &sz) * beta);
        z = z_new;
        sz = sz_new;
        f = f_new;
        t = t_new;
        trace.push(f);
    }
    Ok(SparseCode { z: init.with_data(z), trace, restarts })
}

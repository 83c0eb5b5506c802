//! Stochastic dictionary learning: per-sample FISTA coding in patch mode,
//! Adam steps on the atoms, renormalization and an adaptive `λ`.

use std::io::Write;

use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{dict_gradient, normalize_atoms, DictGradient, Dictionary, ImageGrid, SynthesisMode};
use crate::sparse::{estimate_lipschitz, lambda_kill_threshold, sparse_objective, SparseCodeConfig};
use crate::tomo::{fbp, forward_project, AcquisitionGeometry, Window};

pub const DEFAULT_LOWPASS_CUTOFF: f64 = 0.10;

/// Relative numerical-zero level used when counting nonzeros.
pub const SPARSITY_RELATIVE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub atom_count: usize,
    pub atom_side: usize,
    /// Target mean number of nonzero coefficients per patch vector.
    pub target_sparsity: f64,
    /// Gain of the `λ` rule; `None` picks `1e-3·λ₀/s`.
    pub adjust_constant: Option<f64>,
    pub crop_size: usize,
    /// Crop origins are restricted to multiples of this stride.
    pub crop_stride: usize,
    pub steps: usize,
    pub adam: AdamParams,
    pub validation_interval: usize,
    pub fista_iters: usize,
    /// Starting `λ`; `None` picks `0.1·2‖Sᵀx‖_∞` on the first sample.
    pub lambda_init: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            atom_count: 512,
            atom_side: 16,
            target_sparsity: 3.0,
            adjust_constant: None,
            crop_size: 128,
            crop_stride: 1,
            steps: 50_000,
            adam: AdamParams::default(),
            validation_interval: 100,
            fista_iters: 50,
            lambda_init: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.atom_count == 0 || self.atom_side == 0 {
            return bad("atom_count and atom_side must be positive".into());
        }
        if self.crop_size == 0 || self.crop_size % self.atom_side != 0 {
            return bad(format!("crop_size {} must be a positive multiple of atom_side {}", self.crop_size, self.atom_side));
        }
        let tile_entries = self.atom_count as f64;
        if !(self.target_sparsity > 0.0 && self.target_sparsity <= tile_entries) {
            return bad(format!("target_sparsity must lie in (0, {tile_entries}], got {}", self.target_sparsity));
        }
        if let Some(c) = self.adjust_constant {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("adjust_constant must be positive, got {c}"));
            }
        }
        if let Some(l) = self.lambda_init {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("lambda_init must be positive, got {l}"));
            }
        }
        if self.crop_stride == 0 {
            return bad("crop_stride must be at least 1".into());
        }
        if self.validation_interval == 0 || self.fista_iters == 0 {
            return bad("validation_interval and fista_iters must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        Ok(())
    }
}

/// Adam moment accumulators shaped like the atom array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Array3<f64>,
    pub second_moment: Array3<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize, usize)) -> Self {
        Self { first_moment: Array3::zeros(shape), second_moment: Array3::zeros(shape), step: 0 }
    }

    /// Bias-corrected Adam step applied in place.
    pub fn apply(&mut self, grad: &DictGradient, atoms: &mut Array3<f64>, p: &AdamParams) -> Result<()> {
        if grad.0.dim() != atoms.dim() || self.first_moment.dim() != atoms.dim() {
            return Err(Error::Shape(format!(
                "Adam shapes differ: grad {:?}, atoms {:?}, state {:?}",
                grad.0.dim(),
                atoms.dim(),
                self.first_moment.dim()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - p.beta1.powi(self.step as i32);
        let c2 = 1.0 - p.beta2.powi(self.step as i32);
        Zip::from(atoms)
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .and(&grad.0)
            .for_each(|a, m, v, g| {
                *m = p.beta1 * *m + (1.0 - p.beta1) * g;
                *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
                *a -= p.learning_rate * (*m / c1) / ((*v / c2).sqrt() + p.epsilon);
            });
        Ok(())
    }
}

pub fn adam_update(
    state: &AdamState,
    grad: &DictGradient,
    atoms: &Array3<f64>,
    params: &AdamParams,
) -> Result<(AdamState, Array3<f64>)> {
    let mut next = state.clone();
    let mut out = atoms.clone();
    next.apply(grad, &mut out, params)?;
    Ok((next, out))
}

/// `x − FBP_lowpass(A x)`, the part of `x` that a low-pass reconstruction misses.
pub fn remove_low_frequency(x: &ImageGrid, geom: &AcquisitionGeometry, cutoff_fraction: f64) -> Result<ImageGrid> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction <= 1.0) {
        return Err(Error::Config(format!("cutoff fraction must lie in (0, 1], got {cutoff_fraction}")));
    }
    let sino = forward_project(x, geom)?;
    let low = fbp(&sino, geom, Window::Hanning, cutoff_fraction)?;
    Ok(x.with_values(x.values() - low.values()))
}

/// `λ + c(ŝ − s)` on every tenth validation step when `|ŝ − s| > 0.2·s`, floored at 0.
pub fn adapt_lambda(lambda: f64, s_hat: f64, s: f64, c: f64, t: usize) -> f64 {
    if t % 10 == 0 && (s_hat - s).abs() > 0.2 * s {
        (lambda + c * (s_hat - s)).max(0.0)
    } else {
        lambda
    }
}

pub fn measure_sparsity(z: &crate::operators::CoefficientMaps, threshold: f64) -> usize {
    z.nonzero_count(threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// `λ` used for this validation pass.
    pub lambda: f64,
    /// Mean nonzeros per patch vector on the validation slice.
    pub sparsity: f64,
    /// Mean sparse-coding objective on the validation slice.
    pub objective: f64,
    pub dead_atoms: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub initial_lambda: f64,
    pub final_lambda: f64,
    pub adjust_constant: f64,
    pub reinitialized_atoms: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,lambda,sparsity,objective,dead_atoms")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{:e},{}", r.step, r.lambda, r.sparsity, r.objective, r.dead_atoms)?;
        }
        Ok(())
    }
}

/// The dictionary `train_dictionary` starts from for a given config.
pub fn initial_dictionary(cfg: &TrainConfig) -> Result<Dictionary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Dictionary::random(cfg.atom_count, cfg.atom_side, &mut rng)
}

fn aligned(offset: usize, stride: usize) -> usize {
    offset - offset % stride
}

fn random_crop<R: Rng>(x: &ImageGrid, size: usize, stride: usize, rng: &mut R) -> Result<ImageGrid> {
    let (h, w) = x.shape();
    let r = rng.random_range(0..=(h - size) / stride) * stride;
    let c = rng.random_range(0..=(w - size) / stride) * stride;
    x.crop(r, c, size, size)
}

fn centre_crop(x: &ImageGrid, size: usize, stride: usize) -> Result<ImageGrid> {
    let (h, w) = x.shape();
    x.crop(aligned((h - size) / 2, stride), aligned((w - size) / 2, stride), size, size)
}

/// Replaces zero atoms with a normalized random patch of `x`, or noise if the patch is flat.
fn renormalize<R: Rng>(atoms: Array3<f64>, x: &ImageGrid, rng: &mut R, reinit: &mut usize) -> Result<Dictionary> {
    let mut atoms = atoms;
    loop {
        match normalize_atoms(&Dictionary::from_raw(atoms.clone())?) {
            Ok(d) => return Ok(d),
            Err(Error::ZeroAtom { index }) => {
                let k = atoms.dim().1;
                let (h, w) = x.shape();
                let patch = x.crop(rng.random_range(0..=h - k), rng.random_range(0..=w - k), k, k)?;
                let mut slot = atoms.index_axis_mut(Axis(0), index);
                if patch.norm_sq() > 0.0 {
                    slot.assign(patch.values());
                } else {
                    slot.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
                *reinit += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

struct Validation {
    sparsity: f64,
    objective: f64,
    dead_atoms: usize,
}

fn validate_on(dict: &Dictionary, crops: &[ImageGrid], sc: &SparseCodeConfig) -> Result<Validation> {
    let k = dict.atom_side();
    let lip = estimate_lipschitz(dict, (k, k), SynthesisMode::Patch, sc)?;
    let results: Vec<Result<(usize, usize, f64, Vec<bool>)>> = crops
        .par_iter()
        .map(|x| {
            let code = crate::sparse::fista_sparse_code_with(dict, x, sc, SynthesisMode::Patch, lip)?;
            let z = &code.z;
            let threshold = SPARSITY_RELATIVE_THRESHOLD * z.max_abs();
            let used = z
                .data()
                .outer_iter()
                .map(|ch| ch.iter().any(|v| v.abs() > threshold))
                .collect();
            let obj = sparse_objective(dict, z, x, sc.lambda)?;
            Ok((measure_sparsity(z, threshold), z.site_count(), obj, used))
        })
        .collect();
    let mut nnz = 0;
    let mut sites = 0;
    let mut objective = 0.0;
    let mut used = vec![false; dict.atom_count()];
    for r in results {
        let (n, s, o, u) = r?;
        nnz += n;
        sites += s;
        objective += o;
        for (a, b) in used.iter_mut().zip(u) {
            *a |= b;
        }
    }
    Ok(Validation {
        sparsity: nnz as f64 / sites as f64,
        objective: objective / crops.len() as f64,
        dead_atoms: used.iter().filter(|u| !**u).count(),
    })
}

/// Learns a dictionary from `dataset`.
///
/// With a geometry, each image is first reduced to its high-frequency part
/// via [`remove_low_frequency`] at `cutoff`; without one, images are used as is.
pub fn train_dictionary(
    dataset: &[ImageGrid],
    cfg: &TrainConfig,
    geom: Option<&AcquisitionGeometry>,
    cutoff: f64,
) -> Result<(Dictionary, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    for (i, x) in dataset.iter().enumerate() {
        if x.height() < cfg.crop_size || x.width() < cfg.crop_size {
            return Err(Error::Shape(format!(
                "image {i} of shape {:?} is smaller than crop size {}",
                x.shape(),
                cfg.crop_size
            )));
        }
    }

    let mut dict = initial_dictionary(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_D1C7);

    let images: Vec<ImageGrid> = match geom {
        Some(g) => dataset.iter().map(|x| remove_low_frequency(x, g, cutoff)).collect::<Result<_>>()?,
        None => dataset.to_vec(),
    };

    let n = images.len();
    let n_val = ((n as f64) * 0.01).round().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = if n > n_val { order[n_val..].to_vec() } else { order.clone() };
    let val_crops: Vec<ImageGrid> =
        val_idx.iter().map(|&i| centre_crop(&images[i], cfg.crop_size, cfg.crop_stride)).collect::<Result<_>>()?;

    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        log.initial_lambda = cfg.lambda_init.unwrap_or(0.0);
        log.final_lambda = log.initial_lambda;
        log.adjust_constant = cfg.adjust_constant.unwrap_or(0.0);
        return Ok((dict, log));
    }

    let mut sc = SparseCodeConfig { lambda: 0.0, max_iters: cfg.fista_iters, seed: cfg.seed, ..Default::default() };
    let mut lambda = f64::NAN;
    let mut c = f64::NAN;
    let mut adam = AdamState::new(dict.atoms().dim());
    let k = cfg.atom_side;
    let mut validation_index = 0;

    for step in 1..=cfg.steps {
        let img = &images[train_idx[rng.random_range(0..train_idx.len())]];
        let x = random_crop(img, cfg.crop_size, cfg.crop_stride, &mut rng)?;
        if lambda.is_nan() {
            lambda = match cfg.lambda_init {
                Some(l) => l,
                None => {
                    let kill = lambda_kill_threshold(&dict, &x, SynthesisMode::Patch)?;
                    if kill > 0.0 { 0.1 * kill } else { 1e-3 }
                }
            };
            c = cfg.adjust_constant.unwrap_or(1e-3 * lambda / cfg.target_sparsity);
            log.initial_lambda = lambda;
            log.adjust_constant = c;
        }
        sc.lambda = lambda;
        let lip = estimate_lipschitz(&dict, (k, k), SynthesisMode::Patch, &sc)?;
        let code = crate::sparse::fista_sparse_code_with(&dict, &x, &sc, SynthesisMode::Patch, lip)?;
        let grad = dict_gradient(&dict, &code.z, &x)?;
        let mut atoms = dict.into_atoms();
        adam.apply(&grad, &mut atoms, &cfg.adam)?;
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: step, last_finite: lambda });
        }
        dict = renormalize(atoms, &x, &mut rng, &mut log.reinitialized_atoms)?;

        if step % cfg.validation_interval == 0 {
            validation_index += 1;
            let v = validate_on(&dict, &val_crops, &sc)?;
            log::debug!(
                "step {step}: lambda {lambda:.4e} sparsity {:.4} objective {:.4e} dead {}",
                v.sparsity,
                v.objective,
                v.dead_atoms
            );
            log.records.push(TrainRecord {
                step,
                lambda,
                sparsity: v.sparsity,
                objective: v.objective,
                dead_atoms: v.dead_atoms,
            });
            lambda = adapt_lambda(lambda, v.sparsity, cfg.target_sparsity, c, validation_index);
        }
    }
    log.final_lambda = lambda;
    Ok((dict, log))
}

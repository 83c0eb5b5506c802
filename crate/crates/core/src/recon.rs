//! Dictionary-regularized CT reconstruction and the Huber baseline.
//!
//! The dictionary models only the high-frequency part of the image. A
//! low-pass FBP `x_lf` is computed once from the data and kept fixed; the
//! solver works on `x_hf = x − x_lf`, minimizing
//!
//! ```text
//! L(A(x_lf + x_hf), y) + λ₁‖x_hf − S_D(z)‖² + λ₂‖z‖₁
//! ```
//!
//! with alternating accelerated steps in `x_hf` and `z`.

use std::io::Write;

use ndarray::{s, Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::operators::{dot2, dot3, CoefficientMaps, Dictionary, ImageGrid, SynthesisMode, SynthesisOp};
use crate::sparse::{operator_norm_sq, shrink};
use crate::tomo::{back_project_raw, fbp, project_raw, projector_norm_sq, AcquisitionGeometry, Sinogram, WeightedLeastSquares, Window};

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    /// Coupling weight `λ₁ = 1/σ`.
    pub lambda1: f64,
    /// Sparsity weight `λ₂ = 1/b`.
    pub lambda2: f64,
    pub iters: usize,
    /// Cutoff (fraction of Nyquist) of the fixed low-frequency FBP.
    pub lowpass_cutoff: f64,
    /// Seed of the power iterations.
    pub seed: u64,
    pub power_iters: usize,
    pub lipschitz_safety: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda1: 50.0,
            lambda2: 0.0016,
            iters: 300,
            lowpass_cutoff: 0.1,
            seed: 0,
            power_iters: 30,
            lipschitz_safety: 1.05,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite() && self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda1, lambda2 must be positive, got {}, {}", self.lambda1, self.lambda2)));
        }
        if self.iters == 0 || self.power_iters == 0 {
            return Err(Error::Config("iters and power_iters must be at least 1".into()));
        }
        if !(self.lowpass_cutoff > 0.0 && self.lowpass_cutoff <= 1.0) {
            return Err(Error::Config(format!("lowpass_cutoff must lie in (0, 1], got {}", self.lowpass_cutoff)));
        }
        if !(self.lipschitz_safety >= 1.0) {
            return Err(Error::Config("lipschitz_safety must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HuberConfig {
    pub lambda: f64,
    /// Knee between the quadratic and linear branches.
    pub gamma: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { lambda: 5e-4, gamma: 4e-4, iters: 70, seed: 0 }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.gamma > 0.0) || !self.lambda.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config(format!("huber lambda and gamma must be positive, got {} and {}", self.lambda, self.gamma)));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub data_term: f64,
    pub coupling_term: f64,
    pub l1_term: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconTrace {
    /// Row 0 is the starting point.
    pub rows: Vec<TraceRow>,
    /// Iterations that were retried after an objective increase.
    pub restarts: usize,
    /// Whether the step sizes were halved.
    pub halved: bool,
}

impl ReconTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    /// Largest increase between consecutive entries relative to the first.
    pub fn worst_increase(&self) -> f64 {
        let first = self.rows.first().map_or(1.0, |r| r.objective.abs().max(f64::MIN_POSITIVE));
        self.rows.windows(2).map(|w| (w[1].objective - w[0].objective) / first).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_monotone(&self, relative_tolerance: f64) -> bool {
        self.rows.len() < 2 || self.worst_increase() <= relative_tolerance
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "iter,objective,data_term,coupling_term,l1_term")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", r.iter, r.objective, r.data_term, r.coupling_term, r.l1_term)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ImageGrid,
    pub low_frequency: ImageGrid,
    /// Channel-major coefficients: full-size maps for the convolutional
    /// variant, one vector per patch origin for the patch variant.
    pub coefficients: Array3<f64>,
    pub trace: ReconTrace,
}

/// `L(A(x), y) + λ₁‖x − S_D(z)‖² + λ₂‖z‖₁` with the weighted least-squares `L`.
pub fn recon_objective(
    x: &ImageGrid,
    z: &CoefficientMaps,
    y: &Sinogram,
    dict: &Dictionary,
    geom: &AcquisitionGeometry,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    geom.check_image(x)?;
    let wls = WeightedLeastSquares::new(y);
    if wls.y.dim() != geom.sinogram_shape() {
        return Err(Error::Shape("sinogram does not match geometry".into()));
    }
    let sz = crate::operators::synthesize(dict, z)?;
    if sz.shape() != x.shape() {
        return Err(Error::Shape(format!("synthesis {:?} vs image {:?}", sz.shape(), x.shape())));
    }
    let data = wls.loss_from_projection(&project_raw(x.values(), geom));
    let diff = x.values() - sz.values();
    Ok(data + lambda1 * dot2(&diff, &diff) + lambda2 * z.l1_norm())
}

/// Quantities derived linearly from `z` that the coupling term needs.
#[derive(Clone)]
struct Synth {
    /// Image-domain synthesis `B z`.
    bz: Array2<f64>,
    /// Gram product per patch origin, patch variant only.
    gz: Option<Array3<f64>>,
}

impl Synth {
    fn extrapolate(&self, prev: &Synth, beta: f64) -> Synth {
        Synth {
            bz: &self.bz + &((&self.bz - &prev.bz) * beta),
            gz: match (&self.gz, &prev.gz) {
                (Some(a), Some(b)) => Some(a + &((a - b) * beta)),
                _ => None,
            },
        }
    }
}

/// Coupling `Q(x, z)` between image and coefficients, without its weight.
trait Coupling: Sync {
    fn coefficient_shape(&self) -> (usize, usize, usize);
    fn synth(&self, z: &Array3<f64>) -> Synth;
    fn value(&self, x: &Array2<f64>, z: &Array3<f64>, s: &Synth) -> f64;
    fn grad_x(&self, x: &Array2<f64>, s: &Synth) -> Array2<f64>;
    fn grad_z(&self, x: &Array2<f64>, s: &Synth) -> Array3<f64>;
    /// Lipschitz constants of `grad_x` in `x` and `grad_z` in `z`.
    fn lipschitz(&self, cfg: &ReconConfig) -> Result<(f64, f64)>;
    /// Multipliers applied to `λ₁` and `λ₂`.
    fn scale(&self) -> f64;
}

/// `‖x − S_D z‖²` with the convolutional synthesis operator.
struct ConvCoupling<'a> {
    dict: &'a Dictionary,
    shape: (usize, usize),
}

impl Coupling for ConvCoupling<'_> {
    fn coefficient_shape(&self) -> (usize, usize, usize) {
        (self.dict.atom_count(), self.shape.0, self.shape.1)
    }

    fn synth(&self, z: &Array3<f64>) -> Synth {
        Synth { bz: SynthesisOp::new(self.dict, SynthesisMode::Convolutional).apply(z), gz: None }
    }

    fn value(&self, x: &Array2<f64>, _z: &Array3<f64>, s: &Synth) -> f64 {
        let d = x - &s.bz;
        dot2(&d, &d)
    }

    fn grad_x(&self, x: &Array2<f64>, s: &Synth) -> Array2<f64> {
        (x - &s.bz) * 2.0
    }

    fn grad_z(&self, x: &Array2<f64>, s: &Synth) -> Array3<f64> {
        SynthesisOp::new(self.dict, SynthesisMode::Convolutional).adjoint(&(&s.bz - x)) * 2.0
    }

    fn lipschitz(&self, cfg: &ReconConfig) -> Result<(f64, f64)> {
        let s2 = operator_norm_sq(self.dict, self.shape, SynthesisMode::Convolutional, cfg.power_iters, cfg.seed)?;
        Ok((2.0, 2.0 * s2))
    }

    fn scale(&self) -> f64 {
        1.0
    }
}

/// `Σ_p ‖P_p x − D z_p‖²` over every overlapping `k × k` patch `P_p x`,
/// expanded as `Σ cnt·x² − 2⟨x, Σ_p P_pᵀ D z_p⟩ + Σ_p z_pᵀ G z_p` with `G = DᵀD`.
struct PatchCoupling<'a> {
    dict: &'a Dictionary,
    shape: (usize, usize),
    /// Atoms flattened row-major, one per row.
    atoms: Array2<f64>,
    gram: Array2<f64>,
    counts: Array2<f64>,
}

impl<'a> PatchCoupling<'a> {
    fn new(dict: &'a Dictionary, shape: (usize, usize)) -> Result<Self> {
        let k = dict.atom_side();
        if shape.0 < k || shape.1 < k {
            return Err(Error::Shape(format!("image {shape:?} smaller than atoms of side {k}")));
        }
        let m = dict.atom_count();
        let atoms = dict.atoms().as_standard_layout().into_owned().into_shape_with_order((m, k * k)).expect("contiguous");
        let gram = atoms.dot(&atoms.t());
        let (pr, pc) = (shape.0 - k + 1, shape.1 - k + 1);
        let mut counts = Array2::zeros(shape);
        for r in 0..pr {
            for c in 0..pc {
                counts.slice_mut(s![r..r + k, c..c + k]).mapv_inplace(|v: f64| v + 1.0);
            }
        }
        Ok(Self { dict, shape, atoms, gram, counts })
    }

    fn origins(&self) -> (usize, usize) {
        let k = self.dict.atom_side();
        (self.shape.0 - k + 1, self.shape.1 - k + 1)
    }

    pub fn patch_count(&self) -> usize {
        let (a, b) = self.origins();
        a * b
    }

    /// Coefficients as an `m × patches` matrix.
    fn flat(&self, z: &Array3<f64>) -> Array2<f64> {
        let m = z.dim().0;
        z.as_standard_layout().into_owned().into_shape_with_order((m, self.patch_count())).expect("contiguous")
    }

    /// Every patch of `x` as a column, entry `(a·k + b, r·pc + c) = x[r + a, c + b]`.
    fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let k = self.dict.atom_side();
        let (pr, pc) = self.origins();
        let mut cols = Array2::zeros((k * k, pr * pc));
        for a in 0..k {
            for b in 0..k {
                let mut row = cols.row_mut(a * k + b);
                for r in 0..pr {
                    row.slice_mut(s![r * pc..(r + 1) * pc]).assign(&x.slice(s![r + a, b..b + pc]));
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: overlap-add the columns back into an image.
    fn col2im(&self, cols: &Array2<f64>) -> Array2<f64> {
        let k = self.dict.atom_side();
        let (pr, pc) = self.origins();
        let mut x = Array2::zeros(self.shape);
        for a in 0..k {
            for b in 0..k {
                let row = cols.row(a * k + b);
                for r in 0..pr {
                    let mut dst = x.slice_mut(s![r + a, b..b + pc]);
                    dst += &row.slice(s![r * pc..(r + 1) * pc]);
                }
            }
        }
        x
    }
}

impl Coupling for PatchCoupling<'_> {
    fn coefficient_shape(&self) -> (usize, usize, usize) {
        let (a, b) = self.origins();
        (self.dict.atom_count(), a, b)
    }

    fn synth(&self, z: &Array3<f64>) -> Synth {
        let zf = self.flat(z);
        let bz = self.col2im(&self.atoms.t().dot(&zf));
        let gz = self.gram.dot(&zf).into_shape_with_order(z.dim()).expect("contiguous");
        Synth { bz, gz: Some(gz) }
    }

    fn value(&self, x: &Array2<f64>, z: &Array3<f64>, s: &Synth) -> f64 {
        let gz = s.gz.as_ref().expect("patch synthesis carries the Gram product");
        let xx = Zip::from(x).and(&self.counts).fold(0.0, |acc, v, c| acc + c * v * v);
        (xx - 2.0 * dot2(x, &s.bz) + dot3(z, gz)).max(0.0)
    }

    fn grad_x(&self, x: &Array2<f64>, s: &Synth) -> Array2<f64> {
        let mut g = x * &self.counts;
        g -= &s.bz;
        g * 2.0
    }

    fn grad_z(&self, x: &Array2<f64>, s: &Synth) -> Array3<f64> {
        let gz = s.gz.as_ref().expect("patch synthesis carries the Gram product");
        let corr = self.atoms.dot(&self.im2col(x)).into_shape_with_order(gz.dim()).expect("contiguous");
        (gz - &corr) * 2.0
    }

    fn lipschitz(&self, cfg: &ReconConfig) -> Result<(f64, f64)> {
        let k = self.dict.atom_side();
        let g = operator_norm_sq(self.dict, (k, k), SynthesisMode::Patch, cfg.power_iters, cfg.seed)?;
        let max_count = self.counts.iter().fold(0.0f64, |a, b| a.max(*b));
        Ok((2.0 * max_count, 2.0 * g))
    }

    fn scale(&self) -> f64 {
        1.0 / self.patch_count() as f64
    }
}

struct Problem {
    wls: WeightedLeastSquares,
    /// `A(x_lf)`, so that `A(x) = A(x_hf) + a_lf`.
    a_lf: Array2<f64>,
    lambda1: f64,
    lambda2: f64,
}

impl Problem {
    fn row(&self, iter: usize, ax_hf: &Array2<f64>, coupling: f64, l1: f64) -> TraceRow {
        let data = self.wls.loss_from_projection(&(ax_hf + &self.a_lf));
        let coupling_term = self.lambda1 * coupling;
        let l1_term = self.lambda2 * l1;
        TraceRow { iter, objective: data + coupling_term + l1_term, data_term: data, coupling_term, l1_term }
    }
}

fn l1(z: &Array3<f64>) -> f64 {
    z.iter().map(|v| v.abs()).sum()
}

struct Start {
    x_lf: ImageGrid,
    x_hf: Array2<f64>,
    z: Array3<f64>,
}

fn check_inputs(y: &Sinogram, geom: &AcquisitionGeometry, cfg: &ReconConfig) -> Result<()> {
    cfg.validate()?;
    geom.validate()?;
    if y.values().dim() != geom.sinogram_shape() {
        return Err(Error::Shape(format!("sinogram {:?} does not match geometry {:?}", y.values().dim(), geom.sinogram_shape())));
    }
    Ok(())
}

/// `x_lf` from the low-pass FBP, `x_hf` from the full-band FBP minus `x_lf`, `z = 0`.
fn default_start<C: Coupling>(y: &Sinogram, geom: &AcquisitionGeometry, cfg: &ReconConfig, coupling: &C) -> Result<Start> {
    check_inputs(y, geom, cfg)?;
    let x_lf = fbp(y, geom, Window::Hanning, cfg.lowpass_cutoff)?;
    let x_full = fbp(y, geom, Window::Hanning, 1.0)?;
    let x_hf = x_full.values() - x_lf.values();
    Ok(Start { x_lf, x_hf, z: Array3::zeros(coupling.coefficient_shape()) })
}

fn solve<C: Coupling>(y: &Sinogram, geom: &AcquisitionGeometry, cfg: &ReconConfig, coupling: &C, start: Start) -> Result<Reconstruction> {
    check_inputs(y, geom, cfg)?;
    let Start { x_lf, x_hf: mut x, mut z } = start;
    if x.dim() != geom.image_shape() || z.dim() != coupling.coefficient_shape() {
        return Err(Error::Shape("starting point does not match the problem".into()));
    }
    let problem = Problem {
        wls: WeightedLeastSquares::new(y),
        a_lf: project_raw(x_lf.values(), geom),
        lambda1: cfg.lambda1 * coupling.scale(),
        lambda2: cfg.lambda2 * coupling.scale(),
    };

    let a_norm = projector_norm_sq(geom, cfg.power_iters, cfg.seed);
    let (cx, cz) = coupling.lipschitz(cfg)?;
    let mut lip_x = cfg.lipschitz_safety * (2.0 * problem.wls.max_weight() * a_norm + problem.lambda1 * cx);
    let mut lip_z = cfg.lipschitz_safety * problem.lambda1 * cz;
    if lip_z == 0.0 {
        lip_z = 1.0;
    }

    let mut ax = project_raw(&x, geom);
    let mut sz = coupling.synth(&z);
    let start = problem.row(0, &ax, coupling.value(&x, &z, &sz), 0.0);
    let tolerance = 1e-10 * start.objective.abs();
    let mut trace = ReconTrace { rows: vec![start], ..Default::default() };

    // Extrapolated points and their images under A and B.
    let (mut xe, mut axe, mut ze, mut sze) = (x.clone(), ax.clone(), z.clone(), sz.clone());
    let mut t = 1.0f64;

    for iter in 1..=cfg.iters {
        let mut attempt = 0;
        let (x_new, ax_new, z_new, sz_new, row) = loop {
            let grad_data = back_project_raw(&problem.wls.residual_weighted(&(&axe + &problem.a_lf)), geom);
            let gx = grad_data + coupling.grad_x(&xe, &sze) * problem.lambda1;
            let x_new = &xe - &(gx / lip_x);
            let ax_new = project_raw(&x_new, geom);

            let gz = coupling.grad_z(&x_new, &sze) * problem.lambda1;
            let tau = problem.lambda2 / lip_z;
            let mut z_new = ze.clone();
            Zip::from(&mut z_new).and(&gz).for_each(|v, g| *v = shrink(*v - g / lip_z, tau));
            let sz_new = coupling.synth(&z_new);

            let row = problem.row(iter, &ax_new, coupling.value(&x_new, &z_new, &sz_new), l1(&z_new));
            if !row.objective.is_finite() {
                log::error!("reconstruction diverged at iteration {iter}");
                return Err(Error::NonFinite { iteration: iter, last_finite: trace.rows.last().map_or(f64::NAN, |r| r.objective) });
            }
            let previous = trace.rows.last().expect("trace has a start row").objective;
            if row.objective <= previous + tolerance || attempt > 0 {
                break (x_new, ax_new, z_new, sz_new, row);
            }
            // Restart momentum from the last iterate; the first time also halve both steps.
            attempt += 1;
            trace.restarts += 1;
            if !trace.halved {
                trace.halved = true;
                lip_x *= 2.0;
                lip_z *= 2.0;
                log::debug!("objective increased at iteration {iter}; step sizes halved");
            }
            t = 1.0;
            xe = x.clone();
            axe = ax.clone();
            ze = z.clone();
            sze = sz.clone();
        };

        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        xe = &x_new + &((&x_new - &x) * beta);
        axe = &ax_new + &((&ax_new - &ax) * beta);
        ze = &z_new + &((&z_new - &z) * beta);
        sze = sz_new.extrapolate(&sz, beta);
        x = x_new;
        ax = ax_new;
        z = z_new;
        sz = sz_new;
        t = t_new;
        trace.rows.push(row);
    }

    let image = x_lf.with_values(&x + x_lf.values());
    Ok(Reconstruction { image, low_frequency: x_lf, coefficients: z, trace })
}

/// Alternating accelerated reconstruction with the convolutional dictionary prior.
pub fn reconstruct_dict(y: &Sinogram, dict: &Dictionary, geom: &AcquisitionGeometry, cfg: &ReconConfig) -> Result<Reconstruction> {
    let coupling = ConvCoupling { dict, shape: geom.image_shape() };
    let start = default_start(y, geom, cfg, &coupling)?;
    solve(y, geom, cfg, &coupling, start)
}

/// Same scheme with a prior over every overlapping `k × k` patch; both
/// penalty weights are divided by the number of patches.
pub fn reconstruct_dict_patch(y: &Sinogram, dict: &Dictionary, geom: &AcquisitionGeometry, cfg: &ReconConfig) -> Result<Reconstruction> {
    let coupling = PatchCoupling::new(dict, geom.image_shape())?;
    let start = default_start(y, geom, cfg, &coupling)?;
    solve(y, geom, cfg, &coupling, start)
}

/// Forward differences along rows and columns, zero across the far boundary.
pub fn gradient_2d(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut gv = Array2::zeros((h, w));
    let mut gh = Array2::zeros((h, w));
    if h > 1 {
        let d = &x.slice(s![1.., ..]) - &x.slice(s![..h - 1, ..]);
        gv.slice_mut(s![..h - 1, ..]).assign(&d);
    }
    if w > 1 {
        let d = &x.slice(s![.., 1..]) - &x.slice(s![.., ..w - 1]);
        gh.slice_mut(s![.., ..w - 1]).assign(&d);
    }
    (gv, gh)
}

/// Adjoint of [`gradient_2d`].
pub fn gradient_2d_adjoint(gv: &Array2<f64>, gh: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gv.dim();
    let mut out = Array2::zeros((h, w));
    if h > 1 {
        let top = gv.slice(s![..h - 1, ..]);
        out.slice_mut(s![1.., ..]).zip_mut_with(&top, |o, g| *o += g);
        out.slice_mut(s![..h - 1, ..]).zip_mut_with(&top, |o, g| *o -= g);
    }
    if w > 1 {
        let left = gh.slice(s![.., ..w - 1]);
        out.slice_mut(s![.., 1..]).zip_mut_with(&left, |o, g| *o += g);
        out.slice_mut(s![.., ..w - 1]).zip_mut_with(&left, |o, g| *o -= g);
    }
    out
}

#[inline]
pub fn huber(v: f64, gamma: f64) -> f64 {
    let a = v.abs();
    if a < gamma {
        v * v / (2.0 * gamma)
    } else {
        a - gamma / 2.0
    }
}

#[inline]
fn huber_derivative(v: f64, gamma: f64) -> f64 {
    if v.abs() < gamma {
        v / gamma
    } else {
        v.signum()
    }
}

/// `H_γ(∇x)` summed over both difference directions, and its gradient in `x`.
pub fn huber_functional_and_gradient(x: &ImageGrid, gamma: f64) -> (f64, ImageGrid) {
    let (gv, gh) = gradient_2d(x.values());
    let value = gv.iter().chain(gh.iter()).map(|v| huber(*v, gamma)).sum();
    let grad = gradient_2d_adjoint(&gv.mapv(|v| huber_derivative(v, gamma)), &gh.mapv(|v| huber_derivative(v, gamma)));
    (value, x.with_values(grad))
}

#[derive(Debug, Clone)]
pub struct HuberReconstruction {
    pub image: ImageGrid,
    /// Objective at the start and after every iteration.
    pub trace: Vec<f64>,
}

/// Nesterov-accelerated gradient descent on `L(A(x), y) + λ·H_γ(∇x)`, from the
/// full-band Hanning FBP.
pub fn reconstruct_huber(y: &Sinogram, geom: &AcquisitionGeometry, cfg: &HuberConfig) -> Result<HuberReconstruction> {
    cfg.validate()?;
    let x0 = fbp(y, geom, Window::Hanning, 1.0)?;
    let wls = WeightedLeastSquares::new(y);
    let lip = 1.05 * (2.0 * wls.max_weight() * projector_norm_sq(geom, 30, cfg.seed) + 8.0 * cfg.lambda / cfg.gamma);
    let objective_and_grad = |x: &Array2<f64>| -> (f64, Array2<f64>) {
        let ax = project_raw(x, geom);
        let data = wls.loss_from_projection(&ax);
        let (h, gh) = huber_functional_and_gradient(&x0.with_values(x.clone()), cfg.gamma);
        let grad = back_project_raw(&wls.residual_weighted(&ax), geom) + gh.values() * cfg.lambda;
        (data + cfg.lambda * h, grad)
    };
    let (x, trace) = nesterov(x0.values().clone(), lip, cfg.iters, objective_and_grad);
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iteration: trace.len(), last_finite: trace[0] });
    }
    Ok(HuberReconstruction { image: x0.with_values(x), trace })
}

/// Accelerated gradient descent with step `1/lip`; returns the iterate and its objective trace.
pub(crate) fn nesterov<F>(x0: Array2<f64>, lip: f64, iters: usize, f: F) -> (Array2<f64>, Vec<f64>)
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    let mut x = x0.clone();
    let mut ye = x0;
    let mut t = 1.0f64;
    let mut trace = vec![f(&x).0];
    for _ in 0..iters {
        let (_, g) = f(&ye);
        let x_new = &ye - &(g / lip);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        ye = &x_new + &((&x_new - &x) * ((t - 1.0) / t_new));
        x = x_new;
        t = t_new;
        trace.push(f(&x).0);
    }
    (x, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{shepp_logan, Contrast};
    use crate::tomo::forward_project;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(n: usize, r: &mut ChaCha8Rng) -> ImageGrid {
        ImageGrid::new(Array2::from_shape_simple_fn((n, n), || r.random_range(-1.0..1.0)), 1.0).unwrap()
    }

    fn small_setup(n: usize) -> (AcquisitionGeometry, Dictionary, Sinogram) {
        let mut r = rng(1);
        let geom = AcquisitionGeometry::parallel(24, (n as f64 * 1.5) as usize, 1.0, (n, n), 1.0).unwrap();
        let dict = Dictionary::random(4, 3, &mut r).unwrap();
        let phantom = shepp_logan(32, Contrast::Modified).unwrap();
        let o = 16 - n / 2;
        let x = phantom.crop(o, o, n, n).unwrap();
        let y = forward_project(&x.with_values(x.values() * 0.05), &geom).unwrap();
        (geom, dict, y)
    }

    #[test]
    fn objective_cases() {
        let n = 8;
        let (geom, dict, y) = small_setup(n);
        let zero_y = Sinogram::zeros(&geom);
        let x0 = ImageGrid::zeros(n, n, 1.0);
        let z0 = CoefficientMaps::zeros(SynthesisMode::Convolutional, 4, (n, n), 3, 1.0).unwrap();
        assert_eq!(recon_objective(&x0, &z0, &zero_y, &dict, &geom, 2.0, 3.0).unwrap(), 0.0);

        let mut r = rng(5);
        let x = random_image(n, &mut r);
        let with_zero = recon_objective(&x, &z0, &y, &dict, &geom, 2.0, 3.0).unwrap();
        let (l, _) = crate::tomo::data_loss_and_gradient(&x, &y, &geom).unwrap();
        assert!((with_zero - (l + 2.0 * x.norm_sq())).abs() < 1e-12 * with_zero);

        let z = z0.with_data(Array3::from_shape_simple_fn((4, n, n), || r.random_range(-1.0..1.0)));
        let got = recon_objective(&x, &z, &y, &dict, &geom, 2.0, 3.0).unwrap();
        let ax = forward_project(&x, &geom).unwrap();
        let mut data = 0.0;
        for (a, yv) in ax.values().iter().zip(y.values()) {
            data += (-yv).exp() * (a - yv).powi(2);
        }
        let sz = crate::operators::synthesize_conv(&dict, &z).unwrap();
        let coupling: f64 = x.values().iter().zip(sz.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let l1: f64 = z.data().iter().map(|v| v.abs()).sum();
        let expected = data + 2.0 * coupling + 3.0 * l1;
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn trace_matches_objective_function() {
        let n = 8;
        let (geom, dict, y) = small_setup(n);
        let cfg = ReconConfig { lambda1: 3.0, lambda2: 0.05, iters: 10, ..Default::default() };
        let rec = reconstruct_dict(&y, &dict, &geom, &cfg).unwrap();
        let z = CoefficientMaps::from_array(SynthesisMode::Convolutional, rec.coefficients.clone(), (n, n), 1.0).unwrap();
        let x_hf = rec.image.with_values(rec.image.values() - rec.low_frequency.values());
        let sz = crate::operators::synthesize_conv(&dict, &z).unwrap();
        let ax = forward_project(&rec.image, &geom).unwrap();
        let wls = WeightedLeastSquares::new(&y);
        let expected = wls.loss_from_projection(ax.values())
            + 3.0 * (x_hf.values() - sz.values()).mapv(|v| v * v).sum()
            + 0.05 * z.l1_norm();
        let last = rec.trace.rows.last().unwrap();
        assert_eq!(rec.trace.rows.len(), 11);
        assert!((last.objective - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn monotone_traces() {
        let n = 16;
        let (geom, dict, y) = small_setup(n);
        for (l1, l2) in [(1.0, 0.01), (20.0, 0.001), (0.1, 0.1)] {
            let cfg = ReconConfig { lambda1: l1, lambda2: l2, iters: 60, ..Default::default() };
            let conv = reconstruct_dict(&y, &dict, &geom, &cfg).unwrap();
            assert!(conv.trace.is_monotone(1e-8), "conv {l1} {l2}: {}", conv.trace.worst_increase());
            let patch = reconstruct_dict_patch(&y, &dict, &geom, &cfg).unwrap();
            assert!(patch.trace.is_monotone(1e-8), "patch {l1} {l2}: {}", patch.trace.worst_increase());
        }
    }

    #[test]
    fn huge_l2_keeps_z_zero() {
        let n = 8;
        let (geom, dict, y) = small_setup(n);
        let cfg = ReconConfig { lambda1: 1.0, lambda2: 1e12, iters: 300, ..Default::default() };
        let conv = reconstruct_dict(&y, &dict, &geom, &cfg).unwrap();
        assert!(conv.coefficients.iter().all(|v| *v == 0.0));
        assert!(conv.trace.rows.iter().all(|r| r.l1_term == 0.0));
        let patch = reconstruct_dict_patch(&y, &dict, &geom, &cfg).unwrap();
        assert!(patch.coefficients.iter().all(|v| *v == 0.0));

        // With z = 0 the problem is the quadratic L(A(x_lf + x)) + λ₁‖x‖².
        let wls = WeightedLeastSquares::new(&y);
        let x_lf = &conv.low_frequency;
        let lip = 1.05 * (2.0 * wls.max_weight() * projector_norm_sq(&geom, 30, 0) + 2.0);
        let a_lf = project_raw(x_lf.values(), &geom);
        let f = |x: &Array2<f64>| {
            let ax = project_raw(x, &geom) + &a_lf;
            let g = back_project_raw(&wls.residual_weighted(&ax), &geom) + x * 2.0;
            (wls.loss_from_projection(&ax) + dot2(x, x), g)
        };
        let (x_ref, ref_trace) = nesterov(Array2::zeros((n, n)), lip, 5000, f);
        let got = conv.image.values() - x_lf.values();
        let err = (&got - &x_ref).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        let scale = x_ref.mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(err < 1e-3 * scale, "{err} vs {scale}");
        let best = *ref_trace.last().unwrap();
        assert!((conv.trace.rows.last().unwrap().objective - best).abs() < 1e-6 * best);
    }

    #[test]
    fn stationary_point_is_preserved() {
        // With y = A(x_lf) exactly, (x_hf, z) = (0, 0) zeroes the data gradient,
        // the coupling gradients and the prox residual at once.
        let n = 8;
        let mut r = rng(12);
        let geom = AcquisitionGeometry::parallel(24, 12, 1.0, (n, n), 1.0).unwrap();
        let dict = Dictionary::random(4, 3, &mut r).unwrap();
        let x_lf = ImageGrid::new(Array2::from_shape_simple_fn((n, n), || r.random_range(0.0..0.05)), 1.0).unwrap();
        let y = forward_project(&x_lf, &geom).unwrap();
        let cfg = ReconConfig { lambda1: 2.0, lambda2: 0.01, iters: 1, ..Default::default() };
        for patch in [false, true] {
            let start = Start { x_lf: x_lf.clone(), x_hf: Array2::zeros((n, n)), z: Array3::zeros((4, n, n)) };
            let rec = if patch {
                let c = PatchCoupling::new(&dict, (n, n)).unwrap();
                let start = Start { z: Array3::zeros(c.coefficient_shape()), ..start };
                solve(&y, &geom, &cfg, &c, start).unwrap()
            } else {
                solve(&y, &geom, &cfg, &ConvCoupling { dict: &dict, shape: (n, n) }, start).unwrap()
            };
            let dx = (rec.image.values() - x_lf.values()).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
            assert!(dx < 1e-10, "{dx}");
            assert!(rec.coefficients.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn patch_coupling_matches_direct_sum() {
        let (n, k, m) = (9, 3, 4);
        let mut r = rng(21);
        let dict = Dictionary::random(m, k, &mut r).unwrap();
        let c = PatchCoupling::new(&dict, (n, n)).unwrap();
        let x = random_image(n, &mut r).into_values();
        let z = Array3::from_shape_simple_fn(c.coefficient_shape(), || r.random_range(-1.0..1.0));
        let residual = |z: &Array3<f64>| {
            let mut res = Array3::zeros((n - k + 1, n - k + 1, k * k));
            for pr in 0..n - k + 1 {
                for pc in 0..n - k + 1 {
                    let mut patch = x.slice(s![pr..pr + k, pc..pc + k]).to_owned();
                    for i in 0..m {
                        patch.scaled_add(-z[[i, pr, pc]], &dict.atom(i));
                    }
                    res.slice_mut(s![pr, pc, ..]).assign(&Array1::from_iter(patch.iter().copied()));
                }
            }
            res
        };
        let direct = residual(&z).mapv(|v| v * v).sum();
        let sz = c.synth(&z);
        let value = c.value(&x, &z, &sz);
        assert!((value - direct).abs() < 1e-10 * direct, "{value} vs {direct}");
        let gz = c.grad_z(&x, &sz);
        let res = residual(&z);
        for (i, pr, pc) in [(0, 0, 0), (2, 3, 5), (3, 6, 6)] {
            let a = Array1::from_iter(dict.atom(i).iter().copied());
            let expect = -2.0 * a.dot(&res.slice(s![pr, pc, ..]));
            assert!((gz[[i, pr, pc]] - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_adjoint() {
        let mut r = rng(8);
        let x = random_image(7, &mut r);
        let gv = random_image(7, &mut r);
        let gh = random_image(7, &mut r);
        let (dv, dh) = gradient_2d(x.values());
        let lhs = dot2(&dv, gv.values()) + dot2(&dh, gh.values());
        let rhs = dot2(x.values(), &gradient_2d_adjoint(gv.values(), gh.values()));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        assert_eq!(dv.row(6).sum(), 0.0);
        assert_eq!(dh.column(6).sum(), 0.0);
    }

    #[test]
    fn huber_branches_meet() {
        for gamma in [0.25f64, 1.0, 2.0] {
            assert_eq!(gamma * gamma / (2.0 * gamma), gamma - gamma / 2.0);
            assert_eq!(huber(gamma, gamma), gamma / 2.0);
        }
        for gamma in [1e-4f64, 4e-4, 0.3] {
            let quad = gamma * gamma / (2.0 * gamma);
            let lin = gamma - gamma / 2.0;
            assert!((quad - lin).abs() <= f64::EPSILON * gamma);
            let below = huber(gamma * (1.0 - 1e-12), gamma);
            assert!((below - huber(gamma, gamma)).abs() < 1e-11 * gamma);
        }
        assert_eq!(huber(-3.0, 1.0), 2.5);
    }

    #[test]
    fn huber_gradient_finite_differences() {
        let mut r = rng(3);
        let x = random_image(8, &mut r);
        let gamma = 0.2;
        let (_, g) = huber_functional_and_gradient(&x, gamma);
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in [(0, 0), (3, 4), (7, 7), (5, 2)] {
            let mut xp = x.clone();
            xp.values_mut()[idx] += h;
            let mut xm = x.clone();
            xm.values_mut()[idx] -= h;
            let fd = (huber_functional_and_gradient(&xp, gamma).0 - huber_functional_and_gradient(&xm, gamma).0) / (2.0 * h);
            max_rel = max_rel.max((fd - g.values()[idx]).abs() / fd.abs().max(1e-3));
        }
        assert!(max_rel < 1e-4, "{max_rel}");
    }

    #[test]
    fn huber_large_gamma_is_quadratic() {
        let n = 8;
        let (geom, _, y) = small_setup(n);
        let cfg = HuberConfig { lambda: 0.5, gamma: 1e3, iters: 30, seed: 0 };
        let rec = reconstruct_huber(&y, &geom, &cfg).unwrap();
        let wls = WeightedLeastSquares::new(&y);
        let lip = 1.05 * (2.0 * wls.max_weight() * projector_norm_sq(&geom, 30, 0) + 8.0 * cfg.lambda / cfg.gamma);
        let f = |x: &Array2<f64>| {
            let ax = project_raw(x, &geom);
            let (gv, gh) = gradient_2d(x);
            let q = (dot2(&gv, &gv) + dot2(&gh, &gh)) / (2.0 * cfg.gamma);
            let g = back_project_raw(&wls.residual_weighted(&ax), &geom) + gradient_2d_adjoint(&gv, &gh) * (cfg.lambda / cfg.gamma);
            (wls.loss_from_projection(&ax) + cfg.lambda * q, g)
        };
        let x0 = fbp(&y, &geom, Window::Hanning, 1.0).unwrap();
        let (x_ref, _) = nesterov(x0.values().clone(), lip, 30, f);
        let err = (rec.image.values() - &x_ref).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(err < 1e-6, "{err}");
        let (gv, gh) = gradient_2d(rec.image.values());
        assert!(gv.iter().chain(gh.iter()).all(|v| v.abs() * 10.0 < cfg.gamma));
    }

    #[test]
    fn config_validation() {
        assert!(ReconConfig::default().validate().is_ok());
        assert!(ReconConfig { lambda1: 0.0, ..Default::default() }.validate().is_err());
        assert!(ReconConfig { iters: 0, ..Default::default() }.validate().is_err());
        assert!(ReconConfig { lowpass_cutoff: 1.5, ..Default::default() }.validate().is_err());
        assert!(HuberConfig::default().validate().is_ok());
        assert!(HuberConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trace_csv() {
        let trace = ReconTrace {
            rows: vec![
                TraceRow { iter: 0, objective: 3.0, data_term: 1.0, coupling_term: 1.5, l1_term: 0.5 },
                TraceRow { iter: 1, objective: 2.0, data_term: 1.0, coupling_term: 0.5, l1_term: 0.5 },
            ],
            ..Default::default()
        };
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iter,objective,data_term,coupling_term,l1_term");
        assert_eq!(text.lines().count(), 3);
        assert!(trace.is_monotone(0.0));
    }
}

//! Numerical checks of the Laplace-posterior ELBO bound.
//!
//! The generative model is `x = Dz + ε` with `ε ~ N(0, σ²I)` and a Laplace(0, b)
//! prior on `z`; the variational family is `q = Laplace(z*, b*)` centred at the
//! posterior mode. With `f(x,z) = ‖Dz − x‖²/(2σ²) + ‖z‖₁/b` the ELBO is
//! `−𝔼_q f + C` where `C = −(n/2)ln 2πσ² + m ln(b*/b) + m`.
//!
//! Everything here works with an explicitly assembled dense `D`, which keeps the
//! checks independent of the fast operator kernels and restricts them to tiny
//! instances.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{lattice_shape, synthesize, CoefficientMaps, Dictionary, ImageGrid, SynthesisMode};
use crate::sparse::{fista_sparse_code, SparseCodeConfig};

/// Samples per Monte-Carlo block. Fixed so the estimate does not depend on how
/// blocks are scheduled.
const MC_BLOCK: usize = 1024;

/// Columns whose squared norm differs from one by more than this are reported
/// by [`DenseModel::unit_columns`].
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub sigma: f64,
    /// Prior Laplace scale.
    pub b: f64,
    /// Posterior Laplace scale.
    pub b_star: f64,
    /// Signal dimension.
    pub n: usize,
    /// Latent dimension.
    pub m: usize,
}

impl ModelParams {
    pub fn new(sigma: f64, b: f64, b_star: f64, n: usize, m: usize) -> Result<Self> {
        let p = Self { sigma, b, b_star, n, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("b", self.b), ("b_star", self.b_star)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("n and m must be positive".into()));
        }
        Ok(())
    }

    /// Sparse-coding weight whose minimizer is the posterior mode: `2σ²/b`.
    pub fn fista_lambda(&self) -> f64 {
        2.0 * self.sigma * self.sigma / self.b
    }

    /// `C(σ, b, b*) = −(n/2)ln 2πσ² + m ln(b*/b) + m`.
    pub fn constant_c(&self) -> f64 {
        let (n, m) = (self.n as f64, self.m as f64);
        -0.5 * n * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln() + m * (self.b_star / self.b).ln() + m
    }

    fn check_dims(&self, model: &DenseModel) -> Result<()> {
        self.validate()?;
        if (self.n, self.m) != (model.n(), model.m()) {
            return Err(Error::Shape(format!(
                "params are for n={}, m={} but the model is {}x{}",
                self.n,
                self.m,
                model.n(),
                model.m()
            )));
        }
        Ok(())
    }
}

/// Dense synthesis matrix `n × m`.
///
/// Column `j` is the synthesized image of the `j`-th coefficient in row-major
/// `(channel, row, col)` order, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    matrix: Array2<f64>,
}

impl DenseModel {
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.is_empty() {
            return Err(Error::Shape("empty synthesis matrix".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("synthesis matrix has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    /// Assembles `S_D` for images of `shape` column by column.
    pub fn from_dictionary(dict: &Dictionary, shape: (usize, usize), mode: SynthesisMode) -> Result<Self> {
        let lattice = lattice_shape(mode, shape, dict.atom_side())?;
        let m = dict.atom_count() * lattice.0 * lattice.1;
        let n = shape.0 * shape.1;
        let mut matrix = Array2::zeros((n, m));
        let mut data = Array3::<f64>::zeros((dict.atom_count(), lattice.0, lattice.1));
        for j in 0..m {
            data.as_slice_mut().unwrap()[j] = 1.0;
            let z = CoefficientMaps::from_array(mode, data.clone(), shape, 1.0)?;
            let col = synthesize(dict, &z)?;
            for (p, v) in col.values().iter().enumerate() {
                matrix[[p, j]] = *v;
            }
            data.as_slice_mut().unwrap()[j] = 0.0;
        }
        Ok(Self { matrix })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn m(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn apply(&self, z: &[f64]) -> Array1<f64> {
        self.matrix.dot(&ArrayView1::from(z))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.matrix.iter().map(|v| v * v).sum()
    }

    /// True when every column has unit norm, as atoms of a patch dictionary do.
    pub fn unit_columns(&self) -> bool {
        self.matrix.columns().into_iter().all(|c| (c.dot(&c) - 1.0).abs() <= UNIT_TOL)
    }

    fn check(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.n() || z.len() != self.m() {
            return Err(Error::Shape(format!(
                "x has {} entries and z {}, model is {}x{}",
                x.len(),
                z.len(),
                self.n(),
                self.m()
            )));
        }
        Ok(())
    }
}

/// `−m ln 2b − ‖z − μ‖₁/b`.
pub fn laplace_logpdf(z: &[f64], mu: &[f64], b: f64) -> f64 {
    debug_assert_eq!(z.len(), mu.len());
    let l1: f64 = z.iter().zip(mu).map(|(a, c)| (a - c).abs()).sum();
    -(z.len() as f64) * (2.0 * b).ln() - l1 / b
}

/// `−(n/2)ln 2πσ² − ‖v‖²/(2σ²)`.
pub fn gaussian_logpdf(v: &[f64], sigma: f64) -> f64 {
    let sq: f64 = v.iter().map(|e| e * e).sum();
    -0.5 * v.len() as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

/// Differential entropy of an `m`-dimensional Laplace with scale `b`: `m(ln 2b + 1)`.
pub fn laplace_entropy(m: usize, b: f64) -> f64 {
    m as f64 * ((2.0 * b).ln() + 1.0)
}

/// `𝔼|μ + ε|` for `ε ~ Laplace(0, b)` (folded Laplace mean).
pub fn folded_laplace_mean(mu: f64, b: f64) -> f64 {
    mu.abs() + b * (-mu.abs() / b).exp()
}

/// `log ρ(x, z) = log N(x − Dz; σ) + log Laplace(z; 0, b)`.
pub fn joint_log_density(x: &[f64], z: &[f64], model: &DenseModel, params: &ModelParams) -> Result<f64> {
    model.check(x, z)?;
    let residual: Vec<f64> = model.apply(z).iter().zip(x).map(|(a, b)| b - a).collect();
    Ok(gaussian_logpdf(&residual, params.sigma) + laplace_logpdf(z, &vec![0.0; z.len()], params.b))
}

/// `f(x, z) = ‖Dz − x‖²/(2σ²) + ‖z‖₁/b`.
pub fn f_value(x: &[f64], z: &[f64], model: &DenseModel, params: &ModelParams) -> Result<f64> {
    model.check(x, z)?;
    let r: f64 = model.apply(z).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    Ok(r / (2.0 * params.sigma * params.sigma) + l1 / params.b)
}

/// Posterior mode `argmin_z f(x, z)` by FISTA at `λ = 2σ²/b`, flattened in
/// [`DenseModel`] column order.
pub fn posterior_mode(
    x: &ImageGrid,
    dict: &Dictionary,
    mode: SynthesisMode,
    params: &ModelParams,
    iters: usize,
) -> Result<Array1<f64>> {
    params.validate()?;
    let cfg = SparseCodeConfig { lambda: params.fista_lambda(), max_iters: iters, ..Default::default() };
    let code = fista_sparse_code(dict, x, &cfg, mode)?;
    Ok(Array1::from_iter(code.z.data().iter().copied()))
}

/// Terms of the closed-form bound and of the exact expectation at one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub f_at_mode: f64,
    /// `b*²‖D‖_F²/σ²`, equal to `m b*²/σ²` for unit-norm columns.
    pub penalty_quad: f64,
    /// `m b*/b`.
    pub penalty_lin: f64,
    pub constant_c: f64,
    /// `−f(x,z*) − penalty_quad − penalty_lin + C`.
    pub lower_bound: f64,
    /// Closed-form `𝔼_q f`.
    pub exact_elbo_term: f64,
    /// `−𝔼_q f + C`.
    pub exact_elbo: f64,
    /// `(b*/b)‖z*‖₀`.
    pub gap_bound: f64,
    /// Number of nonzero entries of `z*`.
    pub support: usize,
}

impl ElboReport {
    pub const CSV_HEADER: &'static str =
        "f_at_mode,penalty_quad,penalty_lin,constant_c,lower_bound,exact_elbo_term,exact_elbo,gap,gap_bound,support";

    pub fn gap(&self) -> f64 {
        self.exact_elbo - self.lower_bound
    }

    /// Whether the bound or the gap bound fails beyond `tol`.
    pub fn violates(&self, tol: f64) -> bool {
        self.exact_elbo < self.lower_bound - tol || self.gap() > self.gap_bound + tol
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.f_at_mode,
            self.penalty_quad,
            self.penalty_lin,
            self.constant_c,
            self.lower_bound,
            self.exact_elbo_term,
            self.exact_elbo,
            self.gap(),
            self.gap_bound,
            self.support
        )
    }
}

/// Bound and exact ELBO for a given centre `z*` (any point, not only the mode).
pub fn elbo_report_at(x: &[f64], z_star: &[f64], model: &DenseModel, params: &ModelParams) -> Result<ElboReport> {
    params.check_dims(model)?;
    let f_at_mode = f_value(x, z_star, model, params)?;
    let s2 = params.sigma * params.sigma;
    let bs = params.b_star;
    let m = params.m as f64;
    let penalty_quad = bs * bs * model.frobenius_sq() / s2;
    let penalty_lin = m * bs / params.b;
    let constant_c = params.constant_c();
    let lower_bound = -f_at_mode - penalty_quad - penalty_lin + constant_c;
    // exact − bound = (b*/b)·Σ(1 − e^{−|zᵢ|/b*}), summed termwise so zero
    // entries contribute exactly nothing.
    let gap = bs / params.b * z_star.iter().map(|z| -(-z.abs() / bs).exp_m1()).sum::<f64>();
    let exact_elbo_term = f_at_mode + penalty_quad + penalty_lin - gap;
    let support = z_star.iter().filter(|z| **z != 0.0).count();
    Ok(ElboReport {
        f_at_mode,
        penalty_quad,
        penalty_lin,
        constant_c,
        lower_bound,
        exact_elbo_term,
        exact_elbo: lower_bound + gap,
        gap_bound: bs / params.b * support as f64,
        support,
    })
}

/// Finds the posterior mode of `x` and evaluates the bound there.
pub fn elbo_lower_bound(
    x: &ImageGrid,
    dict: &Dictionary,
    mode: SynthesisMode,
    params: &ModelParams,
    iters: usize,
) -> Result<(ElboReport, Array1<f64>)> {
    let model = DenseModel::from_dictionary(dict, x.shape(), mode)?;
    let z_star = posterior_mode(x, dict, mode, params, iters)?;
    let xv: Vec<f64> = x.values().iter().copied().collect();
    let report = elbo_report_at(&xv, z_star.as_slice().unwrap(), &model, params)?;
    Ok((report, z_star))
}

fn splitmix64(mut state: u64) -> u64 {
    state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform on the open interval (0, 1) as a pure function of `(seed, counter)`.
fn counter_uniform(seed: u64, counter: u64) -> f64 {
    let bits = splitmix64(splitmix64(seed) ^ counter) >> 11;
    (bits as f64 + 0.5) / (1u64 << 53) as f64
}

/// Inverse CDF of Laplace(0, b).
fn laplace_quantile(u: f64, b: f64) -> f64 {
    let d = u - 0.5;
    -b * d.signum() * (1.0 - 2.0 * d.abs()).ln()
}

/// Draw `index` of a `Laplace(center, scale)` stream, coordinate by coordinate.
pub fn laplace_sample(center: &[f64], scale: f64, seed: u64, index: u64, out: &mut [f64]) {
    let m = center.len() as u64;
    for (j, (o, c)) in out.iter_mut().zip(center).enumerate() {
        *o = c + laplace_quantile(counter_uniform(seed, index * m + j as u64), scale);
    }
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Sample mean of `g(z̃)` with `z̃ ~ Laplace(z*, b*)`, blocked for rayon.
///
/// Values are shifted by `shift` before accumulation to limit cancellation in
/// the variance.
fn mc_mean<G>(z_star: &[f64], b_star: f64, n_samples: usize, seed: u64, shift: f64, g: G) -> Estimate
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let blocks = n_samples.div_ceil(MC_BLOCK);
    let partial: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut z = vec![0.0; z_star.len()];
            let (mut s, mut sq) = (0.0, 0.0);
            for i in blk * MC_BLOCK..((blk + 1) * MC_BLOCK).min(n_samples) {
                laplace_sample(z_star, b_star, seed, i as u64, &mut z);
                let v = g(&z) - shift;
                s += v;
                sq += v * v;
            }
            (s, sq)
        })
        .collect();
    let (s, sq) = partial.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = n_samples as f64;
    let mean = s / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Estimate { mean: mean + shift, stderr: (var / n).sqrt() }
}

/// Monte-Carlo ELBO: `𝔼_q log ρ(x, z̃) + H(q)` with the entropy in closed form.
pub fn elbo_monte_carlo(
    x: &[f64],
    model: &DenseModel,
    params: &ModelParams,
    z_star: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    params.check_dims(model)?;
    model.check(x, z_star)?;
    if n_samples < 1000 {
        return Err(Error::Config(format!("need at least 1000 samples, got {n_samples}")));
    }
    let shift = joint_log_density(x, z_star, model, params)?;
    let est = mc_mean(z_star, params.b_star, n_samples, seed, shift, |z| {
        joint_log_density(x, z, model, params).expect("shapes checked")
    });
    Ok(Estimate { mean: est.mean + laplace_entropy(params.m, params.b_star), stderr: est.stderr })
}

/// Monte-Carlo estimate of `𝔼_q f(x, z̃)`.
pub fn expected_f_monte_carlo(
    x: &[f64],
    model: &DenseModel,
    params: &ModelParams,
    z_star: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    params.check_dims(model)?;
    model.check(x, z_star)?;
    let shift = f_value(x, z_star, model, params)?;
    Ok(mc_mean(z_star, params.b_star, n_samples, seed, shift, |z| {
        f_value(x, z, model, params).expect("shapes checked")
    }))
}

/// Log evidence by quadrature together with a resolution-based error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence {
    pub log_evidence: f64,
    /// Distance between the extrapolated value and the plain fine-grid rule.
    pub error: f64,
}

/// `ln(eᵗ² erfc t)`, stable for large positive `t`.
fn ln_erfcx(t: f64) -> f64 {
    if t < 20.0 {
        libm::erfc(t).ln() + t * t
    } else {
        // Asymptotic series; at t ≥ 20 the truncation error is far below 1e-16.
        let u = 1.0 / (2.0 * t * t);
        let series = 1.0 - u + 3.0 * u * u - 15.0 * u * u * u + 105.0 * u * u * u * u;
        series.ln() - t.ln() - 0.5 * std::f64::consts::PI.ln()
    }
}

/// `ln ∫ exp(−a z² + c z − |z|/b) dz` over the real line, `a > 0`.
fn ln_gauss_laplace_integral(a: f64, c: f64, b: f64) -> f64 {
    // ∫₀^∞ exp(−a z² + p z) dz = ½√(π/a)·erfcx(−p/(2√a)).
    let half = |p: f64| 0.5 * (std::f64::consts::PI / a).ln() - std::f64::consts::LN_2 + ln_erfcx(-p / (2.0 * a.sqrt()));
    let (l, r) = (half(c - 1.0 / b), half(-c - 1.0 / b));
    let hi = l.max(r);
    hi + ((l - hi).exp() + (r - hi).exp()).ln()
}

/// Streaming log-sum-exp.
#[derive(Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum { max: f64::NEG_INFINITY, sum: 0.0 };

    fn push(&mut self, v: f64) {
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn merge(self, other: LogSum) -> LogSum {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        let max = self.max.max(other.max);
        LogSum { max, sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp() }
    }

    fn value(self) -> f64 {
        self.max + self.sum.ln()
    }
}

fn log_evidence_on_grid(x: &[f64], model: &DenseModel, params: &ModelParams, points: usize) -> f64 {
    let (n, m) = (model.n(), model.m());
    let s2 = params.sigma * params.sigma;
    let last = model.matrix.column(m - 1).to_owned();
    let a = last.dot(&last) / (2.0 * s2);
    let base = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * s2).ln() - m as f64 * (2.0 * params.b).ln();

    // Integrand over the first m − 1 coordinates, the last integrated exactly.
    let inner = |outer: &[f64]| -> f64 {
        let mut r = x.to_vec();
        for (j, zj) in outer.iter().enumerate() {
            for (p, rp) in r.iter_mut().enumerate() {
                *rp -= model.matrix[[p, j]] * zj;
            }
        }
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let c = last.iter().zip(&r).map(|(d, v)| d * v).sum::<f64>() / s2;
        let l1: f64 = outer.iter().map(|v| v.abs()).sum();
        -rr / (2.0 * s2) - l1 / params.b + ln_gauss_laplace_integral(a, c, params.b)
    };

    if m == 1 {
        return base + inner(&[]);
    }
    let half_span = 30.0 * params.b;
    let h = 2.0 * half_span / (points - 1) as f64;
    let node = |i: usize| -half_span + i as f64 * h;
    let ln_w = |i: usize| if i == 0 || i == points - 1 { (0.5 * h).ln() } else { h.ln() };

    // Parallel over the first outer coordinate; partial sums merge in index order.
    let parts: Vec<LogSum> = (0..points)
        .into_par_iter()
        .map(|i0| {
            let mut acc = LogSum::EMPTY;
            let mut outer = vec![node(i0); m - 1];
            let rest = m - 2;
            let total = points.pow(rest as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut lw = ln_w(i0);
                for d in 0..rest {
                    let idx = rem % points;
                    rem /= points;
                    outer[1 + d] = node(idx);
                    lw += ln_w(idx);
                }
                acc.push(lw + inner(&outer));
            }
            acc
        })
        .collect();
    base + parts.into_iter().fold(LogSum::EMPTY, LogSum::merge).value()
}

/// `ln ρ(x) = ln ∫ ρ(x, z) dz` for `m ≤ 3`.
///
/// The first `m − 1` coordinates use a trapezoid grid of `points` nodes on
/// `[−30b, 30b]`; the last is integrated in closed form through `erfc`. The
/// result is Richardson-extrapolated against the grid with every other node.
pub fn log_evidence_quadrature(x: &[f64], model: &DenseModel, params: &ModelParams, points: usize) -> Result<Evidence> {
    params.check_dims(model)?;
    if x.len() != model.n() {
        return Err(Error::Shape(format!("x has {} entries, model expects {}", x.len(), model.n())));
    }
    if model.m() > 3 {
        return Err(Error::Contract(format!("quadrature evidence supports m <= 3, got {}", model.m())));
    }
    if points < 5 || points % 2 == 0 {
        return Err(Error::Config(format!("points must be odd and at least 5, got {points}")));
    }
    let last = model.matrix.column(model.m() - 1);
    if last.dot(&last) == 0.0 {
        return Err(Error::Contract("last column of the synthesis matrix is zero".into()));
    }
    let fine = log_evidence_on_grid(x, model, params, points);
    let coarse = log_evidence_on_grid(x, model, params, points.div_ceil(2));
    // The |z| kinks sit on grid nodes, so the trapezoid error is O(h²);
    // one Richardson step removes the leading term.
    let extrapolated = fine + ((4.0 - (coarse - fine).exp()) / 3.0).ln();
    Ok(Evidence { log_evidence: extrapolated, error: (extrapolated - fine).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trapezoid(lo: f64, hi: f64, points: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (hi - lo) / (points - 1) as f64;
        (0..points)
            .map(|i| {
                let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
                w * f(lo + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    fn instance(seed: u64, k: usize, atoms: usize, sigma: f64) -> (Dictionary, ImageGrid, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = Dictionary::random(atoms, k, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((k, k), || rng.random_range(-1.0..1.0));
        let params = ModelParams::new(sigma, 0.5, 0.05, k * k, atoms).unwrap();
        (dict, ImageGrid::new(x, 1.0).unwrap(), params)
    }

    fn flat(x: &ImageGrid) -> Vec<f64> {
        x.values().iter().copied().collect()
    }

    #[test]
    fn densities_normalize() {
        let b = 0.5;
        assert_eq!(laplace_logpdf(&[0.3], &[0.3], b), 0.0);
        let mass = trapezoid(-20.0 * b, 20.0 * b, 400_001, |z| laplace_logpdf(&[z], &[0.0], b).exp());
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        assert_eq!(laplace_logpdf(&[1.0, -2.0], &[0.5, 0.5], 0.7), laplace_logpdf(&[0.5, -2.5], &[0.0, 0.0], 0.7));

        assert!((gaussian_logpdf(&[0.0], 1.0) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let mass = trapezoid(-12.0, 12.0, 20_001, |v| gaussian_logpdf(&[v], 1.3).exp());
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
        let v = [0.1, -0.4, 2.0];
        assert_eq!(gaussian_logpdf(&v, 0.6), gaussian_logpdf(&[2.0, 0.1, -0.4], 0.6));
    }

    #[test]
    fn joint_density_matches_f() {
        let (dict, x, params) = instance(1, 4, 12, 0.3);
        let model = DenseModel::from_dictionary(&dict, (4, 4), SynthesisMode::Patch).unwrap();
        assert!(model.unit_columns());
        let zero = vec![0.0; 12];
        let j0 = joint_log_density(&vec![0.0; 16], &zero, &model, &params).unwrap();
        let expect = -8.0 * (2.0 * std::f64::consts::PI * 0.09f64).ln() - 12.0 * 1.0f64.ln();
        assert!((j0 - expect).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = flat(&x);
        let constant = -8.0 * (2.0 * std::f64::consts::PI * 0.09f64).ln() - 12.0 * (2.0 * params.b).ln();
        for _ in 0..20 {
            let z: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j = joint_log_density(&xv, &z, &model, &params).unwrap();
            let f = f_value(&xv, &z, &model, &params).unwrap();
            assert!((j - (constant - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_model_matches_operator() {
        let (dict, _, _) = instance(3, 3, 2, 0.3);
        let model = DenseModel::from_dictionary(&dict, (5, 4), SynthesisMode::Convolutional).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array3::from_shape_simple_fn((2, 5, 4), || rng.random_range(-1.0..1.0));
        let z = CoefficientMaps::from_array(SynthesisMode::Convolutional, data.clone(), (5, 4), 1.0).unwrap();
        let expect = synthesize(&dict, &z).unwrap();
        let got = model.apply(data.as_slice().unwrap());
        for (a, b) in got.iter().zip(expect.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_has_zero_mode() {
        let (dict, _, params) = instance(5, 4, 8, 0.3);
        let z = posterior_mode(&ImageGrid::zeros(4, 4, 1.0), &dict, SynthesisMode::Patch, &params, 100).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mode_is_tight_at_zero() {
        let (dict, x, params) = instance(6, 4, 8, 0.3);
        let model = DenseModel::from_dictionary(&dict, (4, 4), SynthesisMode::Patch).unwrap();
        let report = elbo_report_at(&flat(&x), &vec![0.0; 8], &model, &params).unwrap();
        assert!(report.gap().abs() < 1e-12);
        assert_eq!(report.gap_bound, 0.0);
    }

    #[test]
    fn gap_bound_holds() {
        for seed in 0..20 {
            let (dict, x, params) = instance(100 + seed, 4, 24, 0.2);
            let (report, z) = elbo_lower_bound(&x, &dict, SynthesisMode::Patch, &params, 2000).unwrap();
            assert!(report.support > 0 && report.support == z.iter().filter(|v| **v != 0.0).count());
            assert!(report.exact_elbo >= report.lower_bound, "seed {seed}");
            assert!(report.gap() <= report.gap_bound + 1e-10, "seed {seed}");
            assert!(!report.violates(1e-10));
            assert_eq!(report.csv_row().split(',').count(), ElboReport::CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn expected_f_one_dimensional() {
        let model = DenseModel::from_matrix(Array2::from_elem((1, 1), 1.0)).unwrap();
        let params = ModelParams::new(0.4, 0.8, 0.3, 1, 1).unwrap();
        let x = [0.7];
        let z = [0.2];
        let report = elbo_report_at(&x, &z, &model, &params).unwrap();
        let est = expected_f_monte_carlo(&x, &model, &params, &z, 1_000_000, 9).unwrap();
        assert!((est.mean - report.exact_elbo_term).abs() < 3.0 * est.stderr, "{est:?} vs {}", report.exact_elbo_term);
    }

    #[test]
    fn folded_laplace_sampling() {
        let center = [0.0, 0.1, -0.4];
        let b = 0.25;
        let est = mc_mean(&center, b, 400_000, 11, 0.0, |z| z.iter().map(|v| v.abs()).sum());
        let exact: f64 = center.iter().map(|c| folded_laplace_mean(*c, b)).sum();
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
    }

    #[test]
    fn monte_carlo_matches_exact() {
        let (dict, x, params) = instance(7, 4, 16, 0.3);
        let model = DenseModel::from_dictionary(&dict, (4, 4), SynthesisMode::Patch).unwrap();
        let (report, z) = elbo_lower_bound(&x, &dict, SynthesisMode::Patch, &params, 2000).unwrap();
        let xv = flat(&x);
        let est = elbo_monte_carlo(&xv, &model, &params, z.as_slice().unwrap(), 100_000, 3).unwrap();
        assert!((est.mean - report.exact_elbo).abs() < 3.0 * est.stderr, "{est:?} vs {}", report.exact_elbo);
        let again = elbo_monte_carlo(&xv, &model, &params, z.as_slice().unwrap(), 100_000, 3).unwrap();
        assert_eq!(est, again);
        assert!(elbo_monte_carlo(&xv, &model, &params, z.as_slice().unwrap(), 999, 3).is_err());
    }

    #[test]
    fn collapsing_posterior() {
        let (dict, x, mut params) = instance(8, 4, 8, 0.3);
        params.b_star = 1e-6;
        let model = DenseModel::from_dictionary(&dict, (4, 4), SynthesisMode::Patch).unwrap();
        let z = posterior_mode(&x, &dict, SynthesisMode::Patch, &params, 1000).unwrap();
        let xv = flat(&x);
        let zs = z.as_slice().unwrap();
        let est = elbo_monte_carlo(&xv, &model, &params, zs, 10_000, 5).unwrap();
        let limit = joint_log_density(&xv, zs, &model, &params).unwrap() + laplace_entropy(8, 1e-6);
        assert!((est.mean - limit).abs() < 3.0 * est.stderr + 1e-4, "{est:?} vs {limit}");
    }

    #[test]
    fn inner_integral_matches_trapezoid() {
        for &(a, c, b) in &[(2.0, 0.5, 0.7), (50.0, -30.0, 0.2), (0.3, 0.0, 3.0), (800.0, 400.0, 0.5)] {
            let exact = ln_gauss_laplace_integral(a, c, b);
            let num = trapezoid(-40.0, 40.0, 800_001, |z| (-a * z * z + c * z - z.abs() / b - exact).exp()).ln();
            assert!(num.abs() < 1e-8, "a={a} c={c}: {num}");
        }
        // Across the branch switch of ln erfcx.
        assert!((ln_erfcx(19.999_999) - ln_erfcx(20.0)).abs() < 1e-6);
    }

    #[test]
    fn evidence_matches_brute_force_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let model = DenseModel::from_matrix(d).unwrap();
        let params = ModelParams::new(0.5, 0.4, 0.1, 3, 2).unwrap();
        let x = [0.3, -0.2, 0.5];
        let ev = log_evidence_quadrature(&x, &model, &params, 2001).unwrap();
        let span = 30.0 * params.b;
        let brute = |points: usize| {
            let inner = |z0: f64| {
                trapezoid(-span, span, points, |z1| joint_log_density(&x, &[z0, z1], &model, &params).unwrap().exp())
            };
            trapezoid(-span, span, points, inner)
        };
        let brute = ((4.0 * brute(4001) - brute(2001)) / 3.0).ln();
        assert!((ev.log_evidence - brute).abs() < 1e-5, "{} vs {brute} err {}", ev.log_evidence, ev.error);
        assert!(ev.error < 1e-3);
    }

    #[test]
    fn evidence_dominates_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dict = Dictionary::random(3, 2, &mut rng).unwrap();
        let x = ImageGrid::new(Array2::from_shape_simple_fn((2, 2), || rng.random_range(-1.0..1.0)), 1.0).unwrap();
        let model = DenseModel::from_dictionary(&dict, (2, 2), SynthesisMode::Patch).unwrap();
        let params = ModelParams::new(0.5, 0.5, 0.2, 4, 3).unwrap();
        let z = posterior_mode(&x, &dict, SynthesisMode::Patch, &params, 2000).unwrap();
        let xv = flat(&x);
        let ev = log_evidence_quadrature(&xv, &model, &params, 201).unwrap();
        let est = elbo_monte_carlo(&xv, &model, &params, z.as_slice().unwrap(), 20_000, 1).unwrap();
        assert!(ev.log_evidence >= est.mean - 3.0 * est.stderr - ev.error);
    }

    #[test]
    fn errors() {
        assert!(ModelParams::new(0.0, 1.0, 1.0, 1, 1).is_err());
        assert!(ModelParams::new(1.0, 1.0, f64::NAN, 1, 1).is_err());
        let model = DenseModel::from_matrix(Array2::from_elem((2, 4), 0.5)).unwrap();
        let params = ModelParams::new(1.0, 1.0, 1.0, 2, 4).unwrap();
        assert!(log_evidence_quadrature(&[0.0, 0.0], &model, &params, 11).is_err());
        let wrong = ModelParams::new(1.0, 1.0, 1.0, 3, 4).unwrap();
        assert!(elbo_report_at(&[0.0, 0.0], &[0.0; 4], &model, &wrong).is_err());
        assert!(f_value(&[0.0], &[0.0; 4], &model, &params).is_err());
    }
}

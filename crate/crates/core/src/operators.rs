//! Images, dictionaries, coefficient maps and synthesis operators.
//!
//! Two linear synthesis operators map coefficients to images:
//!
//! - **convolutional**: `S(z) = Σᵢ zᵢ ∗ dᵢ`, one full-resolution map per atom,
//!   zero padding, "same"-size output;
//! - **patch**: the image is tiled into non-overlapping `k×k` blocks and every
//!   block is `Σᵢ zᵢ·dᵢ` for its own coefficient vector. This is the
//!   convolutional operator evaluated with stride `k`.
//!
//! Orientation is fixed: synthesis is a true convolution with the kernel
//! centre at index `k / 2`, the adjoint is the matching cross-correlation.
//! For a single coefficient at `q` the synthesized image holds the unflipped
//! atom with its element `(a, b)` at `q + (a, b) − (k/2, k/2)`.

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};

/// Norm tolerance for the unit-norm dictionary invariant.
pub const ATOM_NORM_TOLERANCE: f64 = 1e-6;

/// A 2D scalar field with a physical pixel spacing (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    values: Array2<f64>,
    pixel_spacing: f64,
}

impl ImageGrid {
    pub fn new(values: Array2<f64>, pixel_spacing: f64) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return shape_err("image must have at least one row and one column");
        }
        if !(pixel_spacing > 0.0 && pixel_spacing.is_finite()) {
            return Err(Error::Config(format!("pixel spacing must be positive, got {pixel_spacing}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("image contains non-finite values".into()));
        }
        Ok(Self { values, pixel_spacing })
    }

    pub fn zeros(height: usize, width: usize, pixel_spacing: f64) -> Self {
        Self { values: Array2::zeros((height, width)), pixel_spacing }
    }

    /// Builds an image from values that are known to be well formed.
    pub(crate) fn from_parts(values: Array2<f64>, pixel_spacing: f64) -> Self {
        Self { values, pixel_spacing }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn with_values(&self, values: Array2<f64>) -> Self {
        Self { values, pixel_spacing: self.pixel_spacing }
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        dot2(&self.values, &other.values)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Copies the `size×size` window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<ImageGrid> {
        if row + rows > self.height() || col + cols > self.width() {
            return shape_err(format!(
                "crop {rows}x{cols} at ({row},{col}) exceeds image {}x{}",
                self.height(),
                self.width()
            ));
        }
        Ok(self.with_values(self.values.slice(s![row..row + rows, col..col + cols]).to_owned()))
    }
}

pub(crate) fn dot2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y)
}

pub(crate) fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y)
}

/// `m` square `k×k` atoms stored atom-major as an `(m, k, k)` array.
///
/// Atom order defines channel identity everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array3<f64>,
}

impl Dictionary {
    /// Wraps atoms that must already have unit Euclidean norm.
    pub fn new(atoms: Array3<f64>) -> Result<Self> {
        let dict = Self::from_raw(atoms)?;
        for (i, n) in dict.atom_norms().iter().enumerate() {
            if (n - 1.0).abs() > ATOM_NORM_TOLERANCE {
                return Err(Error::Contract(format!("atom {i} has norm {n}, expected 1")));
            }
        }
        Ok(dict)
    }

    /// Wraps atoms without the unit-norm check (optimizer iterates, perturbed copies).
    pub fn from_raw(atoms: Array3<f64>) -> Result<Self> {
        let (m, k1, k2) = atoms.dim();
        if m == 0 || k1 == 0 {
            return shape_err("dictionary needs at least one atom of positive size");
        }
        if k1 != k2 {
            return shape_err(format!("atoms must be square, got {k1}x{k2}"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("dictionary contains non-finite entries".into()));
        }
        Ok(Self { atoms: atoms.as_standard_layout().into_owned() })
    }

    /// Standard-normal entries, then normalized.
    pub fn random<R: Rng + ?Sized>(atom_count: usize, atom_side: usize, rng: &mut R) -> Result<Self> {
        let atoms = Array3::from_shape_simple_fn((atom_count, atom_side, atom_side), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        normalize_atoms(&Self::from_raw(atoms)?)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.dim().0
    }

    pub fn atom_side(&self) -> usize {
        self.atoms.dim().1
    }

    pub fn atom(&self, index: usize) -> ArrayView2<'_, f64> {
        self.atoms.index_axis(Axis(0), index)
    }

    pub fn atoms(&self) -> &Array3<f64> {
        &self.atoms
    }

    pub fn into_atoms(self) -> Array3<f64> {
        self.atoms
    }

    pub fn atom_norms(&self) -> Vec<f64> {
        self.atoms
            .outer_iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Zero-padding offset of the kernel centre.
    pub fn center(&self) -> usize {
        self.atom_side() / 2
    }
}

/// Rescales every atom to unit Euclidean norm, keeping its direction.
///
/// Fails with [`Error::ZeroAtom`] on the first atom that is identically zero;
/// the training loop treats that as a request to reinitialize the atom.
pub fn normalize_atoms(dict: &Dictionary) -> Result<Dictionary> {
    let mut atoms = dict.atoms.clone();
    for (index, mut atom) in atoms.outer_iter_mut().enumerate() {
        let norm = atom.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroAtom { index });
        }
        atom.mapv_inplace(|v| v / norm);
    }
    Ok(Dictionary { atoms })
}

/// Gradient with respect to the atoms, shaped like [`Dictionary::atoms`].
#[derive(Debug, Clone, PartialEq)]
pub struct DictGradient(pub Array3<f64>);

/// Which synthesis operator a set of coefficients belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthesisMode {
    Convolutional,
    Patch,
}

impl std::str::FromStr for SynthesisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "convolutional" => Ok(Self::Convolutional),
            "patch" => Ok(Self::Patch),
            other => Err(Error::Config(format!("unknown synthesis mode `{other}`"))),
        }
    }
}

/// Latent coefficients, stored channel-major as `(m, rows, cols)`.
///
/// In convolutional mode `rows × cols` is the image shape; in patch mode it is
/// the tile lattice `(H/k, W/k)` and `data[.., ty, tx]` is the coefficient
/// vector of tile `(ty, tx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMaps {
    mode: SynthesisMode,
    data: Array3<f64>,
    image_shape: (usize, usize),
    pixel_spacing: f64,
}

impl CoefficientMaps {
    pub fn zeros(
        mode: SynthesisMode,
        channels: usize,
        image_shape: (usize, usize),
        atom_side: usize,
        pixel_spacing: f64,
    ) -> Result<Self> {
        let lattice = lattice_shape(mode, image_shape, atom_side)?;
        Ok(Self {
            mode,
            data: Array3::zeros((channels, lattice.0, lattice.1)),
            image_shape,
            pixel_spacing,
        })
    }

    /// Coefficients bound to an image of `image_shape`; `data` must match the lattice.
    pub fn from_array(
        mode: SynthesisMode,
        data: Array3<f64>,
        image_shape: (usize, usize),
        pixel_spacing: f64,
    ) -> Result<Self> {
        let (_, r, c) = data.dim();
        let ok = match mode {
            SynthesisMode::Convolutional => (r, c) == image_shape,
            SynthesisMode::Patch => {
                r > 0 && c > 0 && image_shape.0 % r == 0 && image_shape.1 % c == 0
                    && image_shape.0 / r == image_shape.1 / c
            }
        };
        if !ok {
            return shape_err(format!(
                "{mode:?} coefficients of lattice {r}x{c} cannot bind to image {:?}",
                image_shape
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("coefficients contain non-finite values".into()));
        }
        Ok(Self { mode, data: data.as_standard_layout().into_owned(), image_shape, pixel_spacing })
    }

    pub fn mode(&self) -> SynthesisMode {
        self.mode
    }

    pub fn channel_count(&self) -> usize {
        self.data.dim().0
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    /// Coefficient lattice shape (image shape in convolutional mode).
    pub fn lattice(&self) -> (usize, usize) {
        let (_, r, c) = self.data.dim();
        (r, c)
    }

    /// Number of coefficient vectors: pixels (convolutional) or tiles (patch).
    pub fn site_count(&self) -> usize {
        let (r, c) = self.lattice();
        r * c
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn with_data(&self, data: Array3<f64>) -> Self {
        debug_assert_eq!(data.dim(), self.data.dim());
        Self { data, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Count of entries with `|z| > threshold`.
    pub fn nonzero_count(&self, threshold: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > threshold).count()
    }

    pub fn dot(&self, other: &CoefficientMaps) -> f64 {
        dot3(&self.data, &other.data)
    }

    /// Places patch coefficients on the stride-`k` lattice of a convolutional map.
    ///
    /// Tile `(ty, tx)` goes to pixel `(ty·k + k/2, tx·k + k/2)`, so that
    /// `synthesize_conv` of the result equals `synthesize_patch` of `self`.
    pub fn embed_on_lattice(&self) -> Result<CoefficientMaps> {
        if self.mode != SynthesisMode::Patch {
            return Err(Error::Contract("only patch coefficients can be embedded".into()));
        }
        let (m, ty, _) = self.data.dim();
        let k = self.image_shape.0 / ty;
        let c = k / 2;
        let mut data = Array3::zeros((m, self.image_shape.0, self.image_shape.1));
        for ((i, y, x), v) in self.data.indexed_iter() {
            data[[i, y * k + c, x * k + c]] = *v;
        }
        Ok(CoefficientMaps {
            mode: SynthesisMode::Convolutional,
            data,
            image_shape: self.image_shape,
            pixel_spacing: self.pixel_spacing,
        })
    }
}

/// Coefficient lattice for an image shape; patch mode requires divisibility by `k`.
pub fn lattice_shape(mode: SynthesisMode, image_shape: (usize, usize), atom_side: usize) -> Result<(usize, usize)> {
    match mode {
        SynthesisMode::Convolutional => Ok(image_shape),
        SynthesisMode::Patch => {
            if atom_side == 0 || image_shape.0 % atom_side != 0 || image_shape.1 % atom_side != 0 {
                return shape_err(format!(
                    "image {}x{} is not divisible into {atom_side}x{atom_side} tiles",
                    image_shape.0, image_shape.1
                ));
            }
            Ok((image_shape.0 / atom_side, image_shape.1 / atom_side))
        }
    }
}

fn check_pair(dict: &Dictionary, z: &CoefficientMaps) -> Result<()> {
    if z.channel_count() != dict.atom_count() {
        return shape_err(format!(
            "{} coefficient channels for {} atoms",
            z.channel_count(),
            dict.atom_count()
        ));
    }
    if z.mode == SynthesisMode::Patch {
        let expected = lattice_shape(SynthesisMode::Patch, z.image_shape, dict.atom_side())?;
        if expected != z.lattice() {
            return shape_err(format!("patch lattice {:?} does not match tiles {:?}", z.lattice(), expected));
        }
    }
    Ok(())
}

/// `Σᵢ zᵢ ∗ dᵢ` with zero padding and "same"-size output.
pub fn synthesize_conv(dict: &Dictionary, z: &CoefficientMaps) -> Result<ImageGrid> {
    if z.mode != SynthesisMode::Convolutional {
        return Err(Error::Contract("synthesize_conv needs convolutional coefficients".into()));
    }
    check_pair(dict, z)?;
    Ok(ImageGrid::from_parts(conv_synth(dict.atoms(), z.data()), z.pixel_spacing))
}

/// Tile-wise `Σᵢ zᵢ·dᵢ` over non-overlapping `k×k` tiles.
pub fn synthesize_patch(dict: &Dictionary, z: &CoefficientMaps) -> Result<ImageGrid> {
    if z.mode != SynthesisMode::Patch {
        return Err(Error::Contract("synthesize_patch needs patch coefficients".into()));
    }
    check_pair(dict, z)?;
    Ok(ImageGrid::from_parts(patch_synth(dict.atoms(), z.data()), z.pixel_spacing))
}

/// Dispatches on the coefficient mode.
pub fn synthesize(dict: &Dictionary, z: &CoefficientMaps) -> Result<ImageGrid> {
    match z.mode {
        SynthesisMode::Convolutional => synthesize_conv(dict, z),
        SynthesisMode::Patch => synthesize_patch(dict, z),
    }
}

/// Correlation of `r` with every atom: the adjoint of [`synthesize_conv`].
pub fn adjoint_conv(dict: &Dictionary, r: &ImageGrid) -> CoefficientMaps {
    CoefficientMaps {
        mode: SynthesisMode::Convolutional,
        data: conv_adjoint(dict.atoms(), r.values()),
        image_shape: r.shape(),
        pixel_spacing: r.pixel_spacing(),
    }
}

/// Per-tile inner products with every atom: the adjoint of [`synthesize_patch`].
pub fn adjoint_patch(dict: &Dictionary, r: &ImageGrid) -> Result<CoefficientMaps> {
    lattice_shape(SynthesisMode::Patch, r.shape(), dict.atom_side())?;
    Ok(CoefficientMaps {
        mode: SynthesisMode::Patch,
        data: patch_adjoint(dict.atoms(), r.values()),
        image_shape: r.shape(),
        pixel_spacing: r.pixel_spacing(),
    })
}

pub fn adjoint(dict: &Dictionary, r: &ImageGrid, mode: SynthesisMode) -> Result<CoefficientMaps> {
    match mode {
        SynthesisMode::Convolutional => Ok(adjoint_conv(dict, r)),
        SynthesisMode::Patch => adjoint_patch(dict, r),
    }
}

/// Exact gradient of `D ↦ ‖S_D(z) − x‖²` in atom coordinates.
pub fn dict_gradient(dict: &Dictionary, z: &CoefficientMaps, x: &ImageGrid) -> Result<DictGradient> {
    check_pair(dict, z)?;
    if z.image_shape != x.shape() {
        return shape_err(format!("coefficients bound to {:?}, image is {:?}", z.image_shape, x.shape()));
    }
    let synth = synthesize(dict, z)?;
    let residual = synth.values() - x.values();
    let k = dict.atom_side();
    let grad = match z.mode {
        SynthesisMode::Convolutional => conv_dict_grad(z.data(), &residual, k),
        SynthesisMode::Patch => patch_dict_grad(z.data(), &residual, k),
    };
    Ok(DictGradient(grad))
}

/// Raw-array view of a synthesis operator, used by the iterative solvers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SynthesisOp<'a> {
    pub atoms: &'a Array3<f64>,
    pub mode: SynthesisMode,
}

impl<'a> SynthesisOp<'a> {
    pub fn new(dict: &'a Dictionary, mode: SynthesisMode) -> Self {
        Self { atoms: dict.atoms(), mode }
    }

    pub fn apply(&self, z: &Array3<f64>) -> Array2<f64> {
        match self.mode {
            SynthesisMode::Convolutional => conv_synth(self.atoms, z),
            SynthesisMode::Patch => patch_synth(self.atoms, z),
        }
    }

    pub fn adjoint(&self, r: &Array2<f64>) -> Array3<f64> {
        match self.mode {
            SynthesisMode::Convolutional => conv_adjoint(self.atoms, r),
            SynthesisMode::Patch => patch_adjoint(self.atoms, r),
        }
    }
}

// Kernels on raw arrays. Each output element is accumulated in a fixed order,
// so results do not depend on the rayon thread count.

pub(crate) fn conv_synth(atoms: &Array3<f64>, z: &Array3<f64>) -> Array2<f64> {
    let (m, k, _) = atoms.dim();
    let (_, h, w) = z.dim();
    let c = k / 2;
    let mut out = Array2::<f64>::zeros((h, w));
    let atoms = atoms.as_standard_layout();
    let z = z.as_standard_layout();
    let atoms = atoms.as_slice().expect("standard layout");
    let zs = z.as_slice().expect("standard layout");
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(r, mut row)| {
        let row = row.as_slice_mut().expect("contiguous row");
        for i in 0..m {
            let atom = &atoms[i * k * k..(i + 1) * k * k];
            let map = &zs[i * h * w..(i + 1) * h * w];
            for a in 0..k {
                // source row r + c - a
                let sr = r as isize + c as isize - a as isize;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let src = &map[sr as usize * w..(sr as usize + 1) * w];
                for b in 0..k {
                    let coef = atom[a * k + b];
                    if coef == 0.0 {
                        continue;
                    }
                    let off = c as isize - b as isize;
                    axpy_shifted(row, src, coef, off);
                }
            }
        }
    });
    out
}

/// `dst[j] += coef * src[j + off]` for every `j` with `j + off` in range.
#[inline]
fn axpy_shifted(dst: &mut [f64], src: &[f64], coef: f64, off: isize) {
    let w = dst.len() as isize;
    let lo = (-off).max(0);
    let hi = (w - off).min(w);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let s0 = (lo as isize + off) as usize;
    let d = &mut dst[lo..hi];
    let s = &src[s0..s0 + (hi - lo)];
    for (dv, sv) in d.iter_mut().zip(s) {
        *dv += coef * sv;
    }
}

pub(crate) fn conv_adjoint(atoms: &Array3<f64>, r: &Array2<f64>) -> Array3<f64> {
    let (m, k, _) = atoms.dim();
    let (h, w) = r.dim();
    let c = k / 2;
    let r = r.as_standard_layout();
    let rs = r.as_slice().expect("standard layout");
    let mut out = Array3::<f64>::zeros((m, h, w));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut map)| {
        let atom = atoms.index_axis(Axis(0), i);
        let map = map.as_slice_mut().expect("contiguous map");
        for q in 0..h {
            let dst = &mut map[q * w..(q + 1) * w];
            for a in 0..k {
                let sr = q as isize + a as isize - c as isize;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let src = &rs[sr as usize * w..(sr as usize + 1) * w];
                for b in 0..k {
                    let coef = atom[[a, b]];
                    if coef == 0.0 {
                        continue;
                    }
                    axpy_shifted(dst, src, coef, b as isize - c as isize);
                }
            }
        }
    });
    out
}

fn conv_dict_grad(z: &Array3<f64>, residual: &Array2<f64>, k: usize) -> Array3<f64> {
    let (m, h, w) = z.dim();
    let c = k / 2;
    let mut grad = Array3::<f64>::zeros((m, k, k));
    let res = residual.as_standard_layout();
    let rs = res.as_slice().expect("standard layout");
    let z = z.as_standard_layout();
    let zs = z.as_slice().expect("standard layout");
    grad.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut g)| {
        let map = &zs[i * h * w..(i + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                // Σ_p res[p] · z[p + c − (a, b)]
                let dr = c as isize - a as isize;
                let dc = c as isize - b as isize;
                let mut acc = 0.0;
                for pr in 0..h {
                    let sr = pr as isize + dr;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let rrow = &rs[pr * w..(pr + 1) * w];
                    let zrow = &map[sr as usize * w..(sr as usize + 1) * w];
                    let lo = (-dc).max(0) as usize;
                    let hi = (w as isize - dc).min(w as isize) as usize;
                    for pc in lo..hi {
                        acc += rrow[pc] * zrow[(pc as isize + dc) as usize];
                    }
                }
                g[[a, b]] = 2.0 * acc;
            }
        }
    });
    grad
}

pub(crate) fn patch_synth(atoms: &Array3<f64>, z: &Array3<f64>) -> Array2<f64> {
    let (m, k, _) = atoms.dim();
    let (_, ty, tx) = z.dim();
    let mut out = Array2::<f64>::zeros((ty * k, tx * k));
    for y in 0..ty {
        for x in 0..tx {
            let mut tile = out.slice_mut(s![y * k..(y + 1) * k, x * k..(x + 1) * k]);
            for i in 0..m {
                let coef = z[[i, y, x]];
                if coef != 0.0 {
                    tile.scaled_add(coef, &atoms.index_axis(Axis(0), i));
                }
            }
        }
    }
    out
}

pub(crate) fn patch_adjoint(atoms: &Array3<f64>, r: &Array2<f64>) -> Array3<f64> {
    let (m, k, _) = atoms.dim();
    let (h, w) = r.dim();
    let (ty, tx) = (h / k, w / k);
    let mut out = Array3::<f64>::zeros((m, ty, tx));
    for y in 0..ty {
        for x in 0..tx {
            let tile = r.slice(s![y * k..(y + 1) * k, x * k..(x + 1) * k]);
            for i in 0..m {
                out[[i, y, x]] = Zip::from(&tile)
                    .and(&atoms.index_axis(Axis(0), i))
                    .fold(0.0, |acc, a, b| acc + a * b);
            }
        }
    }
    out
}

fn patch_dict_grad(z: &Array3<f64>, residual: &Array2<f64>, k: usize) -> Array3<f64> {
    let (m, ty, tx) = z.dim();
    let mut grad = Array3::<f64>::zeros((m, k, k));
    for y in 0..ty {
        for x in 0..tx {
            let tile = residual.slice(s![y * k..(y + 1) * k, x * k..(x + 1) * k]);
            for i in 0..m {
                let coef = z[[i, y, x]];
                if coef != 0.0 {
                    grad.index_axis_mut(Axis(0), i).scaled_add(2.0 * coef, &tile);
                }
            }
        }
    }
    grad
}

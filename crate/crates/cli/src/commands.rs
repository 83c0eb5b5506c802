use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dictolearn::analytics::io::{load_dictionary, load_grid, load_image, save_dictionary, save_grid, save_image, save_pgm16};
use dictolearn::analytics::{
    atom_montage, atom_significance, evaluate, random_ellipse_phantom, shepp_logan, Contrast, MetricReport,
};
use dictolearn::config::{self, ConfigFile, GEOMETRY_KEYS, HUBER_KEYS, RECON_KEYS, TRAIN_KEYS};
use dictolearn::elbo::{elbo_lower_bound, elbo_monte_carlo, DenseModel, ElboReport, ModelParams};
use dictolearn::learn::{initial_dictionary, train_dictionary, DEFAULT_LOWPASS_CUTOFF};
use dictolearn::recon::{reconstruct_dict, reconstruct_dict_patch, reconstruct_huber, Reconstruction};
use dictolearn::tomo::{
    fbp, forward_project, linearize, simulate_counts, AcquisitionGeometry, NoiseModel, Sinogram, Window,
    DEFAULT_INCIDENT_PHOTONS, MU_WATER,
};
use dictolearn::{CoefficientMaps, Dictionary, Error, ImageGrid, Result, SynthesisMode};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::GlobalArgs;

/// Resolves `--threads`, then `DICTOLEARN_THREADS`, and sizes the rayon pool.
pub fn setup_threads(global: &GlobalArgs) -> Result<Option<usize>> {
    let threads = match global.threads {
        Some(n) => Some(n),
        None => match std::env::var("DICTOLEARN_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("DICTOLEARN_THREADS=`{v}` is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(threads)
}

#[derive(Clone)]
pub struct Context {
    pub config: ConfigFile,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn new(global: &GlobalArgs, threads: Option<usize>) -> Result<Self> {
        let mut config = match &global.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        for entry in &global.overrides {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{entry}`")))?;
            config.set(k.trim(), v.trim());
        }
        if let Some(seed) = global.seed {
            config.set("seed", seed);
        }
        let seed = config.get("seed")?.unwrap_or(0);
        Ok(Self { config, config_path: global.config.clone(), seed, threads, out: global.out.clone() })
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| Error::Config("--out is required for this command".into()))?;
        std::fs::create_dir_all(dir)?;
        Ok(dir)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, self.config_path.as_deref(), self.seed, self.threads);
        m.config = self.config.keys().map(|k| (k.to_string(), self.config.raw(k).unwrap_or("").to_string())).collect();
        m
    }

    fn check_keys(&self, groups: &[&[&str]]) -> Result<()> {
        let allowed: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        self.config.check_known(&allowed)
    }

    fn set_opt<T: ToString>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.config.set(key, v.to_string());
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// JSON number, or the string `"inf"` for the identical-image PSNR sentinel.
fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn metrics_json(m: &MetricReport) -> serde_json::Value {
    json!({ "psnr": json_number(m.psnr), "ssim": json_number(m.ssim) })
}

fn load_geometry_file(path: &Path) -> Result<AcquisitionGeometry> {
    let cfg = ConfigFile::load(path)?;
    cfg.check_known(GEOMETRY_KEYS)?;
    config::geometry_config(&cfg)
}

fn geometry_only(cfg: &ConfigFile) -> ConfigFile {
    let mut g = ConfigFile::default();
    for k in GEOMETRY_KEYS {
        if let Some(v) = cfg.raw(k) {
            g.set(k, v);
        }
    }
    g
}

/// `--geometry`, else `geometry.cfg` beside `sinogram`, else configuration keys.
fn resolve_geometry(
    ctx: &Context,
    explicit: Option<&Path>,
    sinogram: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<AcquisitionGeometry> {
    let sibling = sinogram.and_then(|s| s.parent()).map(|d| d.join("geometry.cfg")).filter(|p| p.exists());
    match explicit.map(Path::to_path_buf).or(sibling) {
        Some(p) => {
            manifest.add_input(&p)?;
            load_geometry_file(&p)
        }
        None => config::geometry_config(&geometry_only(&ctx.config)),
    }
}

fn load_sinogram(path: &Path, geom: &AcquisitionGeometry) -> Result<Sinogram> {
    let (values, _) = load_grid(path)?;
    Sinogram::new(values, geom)
}

/// Channel-major coefficients stacked into a `(m·rows) × cols` grid.
fn coefficients_to_grid(z: &Array3<f64>) -> Array2<f64> {
    let (m, r, c) = z.dim();
    z.as_standard_layout().into_owned().into_shape_with_order((m * r, c)).expect("contiguous")
}

fn grid_to_coefficients(grid: Array2<f64>, m: usize) -> Result<Array3<f64>> {
    let (rows, cols) = grid.dim();
    if m == 0 || rows % m != 0 {
        return Err(Error::Shape(format!("coefficient grid with {rows} rows does not split into {m} channels")));
    }
    Ok(grid.as_standard_layout().into_owned().into_shape_with_order((m, rows / m, cols)).expect("contiguous"))
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// `shepp-logan` or `random`.
    #[arg(long, default_value = "shepp-logan")]
    kind: String,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// `standard` or `modified` (Shepp-Logan only).
    #[arg(long, default_value = "modified")]
    contrast: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Pixel spacing in mm.
    #[arg(long, default_value_t = 2.0)]
    pixel_spacing: f64,
    /// Keep unit intensities instead of scaling to water attenuation.
    #[arg(long)]
    unit: bool,
}

pub fn cmd_phantom(ctx: &Context, a: &PhantomArgs) -> Result<()> {
    ctx.check_keys(&[&["seed"]])?;
    let out = ctx.out_dir()?;
    let mut manifest = ctx.manifest("phantom");
    let scale = if a.unit { 1.0 } else { MU_WATER };
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.sub_seed("phantom"));
    let names: Vec<PathBuf> = (0..a.count).map(|i| out.join(format!("phantom_{i:03}.grid"))).collect();
    manifest.outputs = names.clone();
    manifest.write(out)?;
    for path in &names {
        let img = match a.kind.as_str() {
            "shepp-logan" => shepp_logan(a.size, a.contrast.parse::<Contrast>()?)?,
            "random" => random_ellipse_phantom(a.size, &mut rng)?,
            other => return Err(Error::Config(format!("unknown phantom kind `{other}`"))),
        };
        save_image(path, &ImageGrid::new(img.values() * scale, a.pixel_spacing)?)?;
    }
    manifest.status = "ok".into();
    manifest.write(out)
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Attenuation image (DLGRID1).
    #[arg(long)]
    image: PathBuf,
    /// Incident photons per ray.
    #[arg(long)]
    photons: Option<f64>,
}

pub fn cmd_simulate(ctx: &Context, a: &SimulateArgs) -> Result<()> {
    let mut ctx = ctx.clone();
    ctx.set_opt("photons", &a.photons);
    ctx.check_keys(&[GEOMETRY_KEYS, &["photons", "seed"]])?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("simulate");
    manifest.add_input(&a.image)?;
    let image = load_image(&a.image)?;
    if image.height() != image.width() {
        return Err(Error::Shape(format!("simulation expects a square image, got {:?}", image.shape())));
    }
    let mut gcfg = geometry_only(&ctx.config);
    if !gcfg.contains("image_size") {
        gcfg.set("image_size", image.height());
    }
    if !gcfg.contains("pixel_spacing") {
        gcfg.set("pixel_spacing", image.pixel_spacing());
    }
    let geom = config::geometry_config(&gcfg)?;
    let photons = ctx.config.get("photons")?.unwrap_or(DEFAULT_INCIDENT_PHOTONS);
    let noise = NoiseModel { incident_photons: photons, seed: manifest.sub_seed("simulate") };
    let files = ["clean.grid", "counts.grid", "sinogram.grid", "geometry.cfg"].map(|f| out.join(f));
    manifest.outputs = files.to_vec();
    manifest.write(&out)?;

    let clean = forward_project(&image, &geom)?;
    let counts = simulate_counts(&image, &geom, &noise)?;
    let y = linearize(&counts, photons, &geom)?;
    save_grid(&files[0], clean.values(), geom.detector_spacing)?;
    save_grid(&files[1], &counts, geom.detector_spacing)?;
    save_grid(&files[2], y.values(), geom.detector_spacing)?;
    let mut gout = ConfigFile::default();
    config::geometry_entries(&geom, &mut gout);
    std::fs::write(&files[3], gout.to_text())?;
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of DLGRID1 training images (`*.grid`).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Geometry file used for low-frequency removal.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Train on the raw images instead of their high-frequency parts.
    #[arg(long)]
    no_lowfreq: bool,
}

fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "grid"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .grid images in {}", dir.display())));
    }
    Ok(files)
}

pub fn cmd_train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let mut ctx = ctx.clone();
    ctx.set_opt("steps", &a.steps);
    if a.no_lowfreq {
        ctx.config.set("remove_lowfreq", false);
    }
    ctx.check_keys(&[TRAIN_KEYS, GEOMETRY_KEYS, &["remove_lowfreq"]])?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("train");
    let files = dataset_files(&a.dataset)?;
    for f in &files {
        manifest.add_input(f)?;
    }
    let mut cfg = config::train_config(&ctx.config)?;
    cfg.seed = manifest.sub_seed("train");
    let dataset = files.iter().map(|f| load_image(f)).collect::<Result<Vec<_>>>()?;
    let remove = ctx.config.get("remove_lowfreq")?.unwrap_or(true);
    let cutoff = ctx.config.get("lowpass_cutoff")?.unwrap_or(DEFAULT_LOWPASS_CUTOFF);
    let geom = if !remove {
        None
    } else if let Some(p) = &a.geometry {
        manifest.add_input(p)?;
        Some(load_geometry_file(p)?)
    } else {
        let mut g = geometry_only(&ctx.config);
        if !g.contains("image_size") {
            g.set("image_size", dataset[0].height());
        }
        if !g.contains("pixel_spacing") {
            g.set("pixel_spacing", dataset[0].pixel_spacing());
        }
        Some(config::geometry_config(&g)?)
    };
    let outputs = ["dictionary.dict", "train_log.csv", "atoms.pgm"].map(|f| out.join(f));
    manifest.outputs = outputs.to_vec();
    manifest.write(&out)?;

    let (dict, log) = if cfg.steps == 0 {
        (initial_dictionary(&cfg)?, None)
    } else {
        let (d, l) = train_dictionary(&dataset, &cfg, geom.as_ref(), cutoff)?;
        (d, Some(l))
    };
    save_dictionary(&outputs[0], &dict)?;
    let mut w = create(&outputs[1])?;
    match &log {
        Some(l) => l.write_csv(&mut w)?,
        None => writeln!(w, "step,lambda,sparsity,objective,dead_atoms")?,
    }
    finish(w)?;
    let order: Vec<usize> = (0..dict.atom_count()).collect();
    save_pgm16(&outputs[2], &atom_montage(&dict, &order)?)?;
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dict,
    DictPatch,
    Fbp,
    Huber,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Linearized sinogram (DLGRID1).
    #[arg(long)]
    sinogram: PathBuf,
    /// Geometry file; defaults to `geometry.cfg` beside the sinogram.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dict")]
    method: Method,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Ground truth; when given, metrics are written too.
    #[arg(long)]
    truth: Option<PathBuf>,
}

const FBP_KEYS: &[&str] = &["fbp_window", "fbp_cutoff"];

fn require_dictionary(path: Option<&Path>, method: Method, manifest: &mut RunManifest) -> Result<Dictionary> {
    let p = path.ok_or_else(|| Error::Config(format!("method {method:?} requires --dictionary")))?;
    manifest.add_input(p)?;
    load_dictionary(p)
}

fn run_dict(method: Method, y: &Sinogram, dict: &Dictionary, geom: &AcquisitionGeometry, cfg: &dictolearn::recon::ReconConfig) -> Result<Reconstruction> {
    match method {
        Method::Dict => reconstruct_dict(y, dict, geom, cfg),
        Method::DictPatch => reconstruct_dict_patch(y, dict, geom, cfg),
        _ => unreachable!("not a dictionary method"),
    }
}

pub fn cmd_reconstruct(ctx: &Context, a: &ReconstructArgs) -> Result<()> {
    let mut ctx = ctx.clone();
    ctx.set_opt("lambda1", &a.lambda1);
    ctx.set_opt("lambda2", &a.lambda2);
    ctx.set_opt(if a.method == Method::Huber { "huber_iters" } else { "iters" }, &a.iters);
    ctx.check_keys(&[RECON_KEYS, HUBER_KEYS, GEOMETRY_KEYS, FBP_KEYS])?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("reconstruct");
    manifest.add_input(&a.sinogram)?;
    let geom = resolve_geometry(&ctx, a.geometry.as_deref(), Some(&a.sinogram), &mut manifest)?;
    let y = load_sinogram(&a.sinogram, &geom)?;
    let dict = match a.method {
        Method::Dict | Method::DictPatch => Some(require_dictionary(a.dictionary.as_deref(), a.method, &mut manifest)?),
        _ => None,
    };
    let truth = match &a.truth {
        Some(p) => {
            manifest.add_input(p)?;
            Some(load_image(p)?)
        }
        None => None,
    };
    let mut outputs = vec![out.join("image.grid")];
    if a.method != Method::Fbp {
        outputs.push(out.join("trace.csv"));
    }
    if dict.is_some() {
        outputs.push(out.join("coefficients.grid"));
    }
    if truth.is_some() {
        outputs.push(out.join("metrics.json"));
    }
    manifest.outputs = outputs.clone();
    manifest.write(&out)?;

    let recon_seed = manifest.sub_seed("recon");
    let image = match a.method {
        Method::Fbp => {
            let window: Window = ctx.config.raw("fbp_window").unwrap_or("hann").parse()?;
            let cutoff = ctx.config.get("fbp_cutoff")?.unwrap_or(0.75);
            fbp(&y, &geom, window, cutoff)?
        }
        Method::Huber => {
            let mut cfg = config::huber_config(&ctx.config)?;
            cfg.seed = recon_seed;
            let rec = reconstruct_huber(&y, &geom, &cfg)?;
            let mut w = create(&out.join("trace.csv"))?;
            writeln!(w, "iter,objective")?;
            for (i, v) in rec.trace.iter().enumerate() {
                writeln!(w, "{i},{v:e}")?;
            }
            finish(w)?;
            rec.image
        }
        Method::Dict | Method::DictPatch => {
            let mut cfg = config::recon_config(&ctx.config)?;
            cfg.seed = recon_seed;
            let rec = run_dict(a.method, &y, dict.as_ref().expect("loaded above"), &geom, &cfg)?;
            let mut w = create(&out.join("trace.csv"))?;
            rec.trace.write_csv(&mut w)?;
            finish(w)?;
            save_grid(&out.join("coefficients.grid"), &coefficients_to_grid(&rec.coefficients), geom.pixel_spacing)?;
            rec.image
        }
    };
    save_image(&out.join("image.grid"), &image)?;
    if let Some(t) = &truth {
        write_json(&out.join("metrics.json"), &metrics_json(&evaluate(&image, t)?))?;
    }
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

pub fn cmd_evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<()> {
    ctx.check_keys(&[&["seed"]])?;
    let report = evaluate(&load_image(&a.recon)?, &load_image(&a.truth)?)?;
    let value = metrics_json(&report);
    println!("{}", serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))?);
    if ctx.out.is_some() {
        let out = ctx.out_dir()?;
        let mut manifest = ctx.manifest("evaluate");
        manifest.add_input(&a.recon)?;
        manifest.add_input(&a.truth)?;
        manifest.outputs = vec![out.join("metrics.json")];
        manifest.write(out)?;
        write_json(&out.join("metrics.json"), &value)?;
        manifest.status = "ok".into();
        manifest.write(out)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    sinogram: PathBuf,
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated λ₁ values.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 50.0])]
    lambda1: Vec<f64>,
    /// Comma-separated λ₂ values.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0012, 0.0016, 0.0024])]
    lambda2: Vec<f64>,
    #[arg(long, value_enum, default_value = "dict")]
    method: Method,
}

pub fn cmd_sweep(ctx: &Context, a: &SweepArgs) -> Result<()> {
    ctx.check_keys(&[RECON_KEYS, GEOMETRY_KEYS])?;
    if !matches!(a.method, Method::Dict | Method::DictPatch) {
        return Err(Error::Config("sweep supports the dict and dict-patch methods".into()));
    }
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("sweep");
    manifest.add_input(&a.sinogram)?;
    let geom = resolve_geometry(ctx, a.geometry.as_deref(), Some(&a.sinogram), &mut manifest)?;
    let y = load_sinogram(&a.sinogram, &geom)?;
    let dict = require_dictionary(Some(&a.dictionary), a.method, &mut manifest)?;
    manifest.add_input(&a.truth)?;
    let truth = load_image(&a.truth)?;
    manifest.outputs = vec![out.join("sweep.csv")];
    manifest.write(&out)?;

    let mut base = config::recon_config(&ctx.config)?;
    base.seed = manifest.sub_seed("recon");
    let mut w = create(&out.join("sweep.csv"))?;
    writeln!(w, "lambda1,lambda2,psnr,ssim")?;
    for &l1 in &a.lambda1 {
        for &l2 in &a.lambda2 {
            let cfg = dictolearn::recon::ReconConfig { lambda1: l1, lambda2: l2, ..base.clone() };
            let rec = run_dict(a.method, &y, &dict, &geom, &cfg)?;
            let m = evaluate(&rec.image, &truth)?;
            writeln!(w, "{l1},{l2},{},{}", m.psnr, m.ssim)?;
        }
    }
    finish(w)?;
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[derive(Args, Debug)]
pub struct VerifyElboArgs {
    #[arg(long)]
    dictionary: PathBuf,
    /// Images to draw `k × k` patches from.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Prior Laplace scale.
    #[arg(long, default_value_t = 0.1)]
    b: f64,
    /// Posterior Laplace scale.
    #[arg(long, default_value_t = 0.01)]
    b_star: f64,
    /// Patches per image.
    #[arg(long, default_value_t = 1)]
    crops: usize,
    /// Monte-Carlo samples per patch; 0 skips the estimate.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    fista_iters: usize,
}

pub fn cmd_verify_elbo(ctx: &Context, a: &VerifyElboArgs) -> Result<()> {
    ctx.check_keys(&[&["seed"]])?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("verify-elbo");
    manifest.add_input(&a.dictionary)?;
    let dict = load_dictionary(&a.dictionary)?;
    let mut images = Vec::new();
    for p in &a.images {
        manifest.add_input(p)?;
        images.push(load_image(p)?);
    }
    manifest.outputs = vec![out.join("elbo.csv")];
    manifest.write(&out)?;

    let k = dict.atom_side();
    let params = ModelParams::new(a.sigma, a.b, a.b_star, k * k, dict.atom_count())?;
    let model = DenseModel::from_dictionary(&dict, (k, k), SynthesisMode::Patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.sub_seed("elbo"));
    let mc_seed = manifest.sub_seed("elbo-mc");
    let mut w = create(&out.join("elbo.csv"))?;
    writeln!(w, "sample,image,row,col,{},mc_estimate,mc_stderr", ElboReport::CSV_HEADER)?;
    let mut violations = 0;
    let mut sample = 0u64;
    for (i, img) in images.iter().enumerate() {
        if img.height() < k || img.width() < k {
            return Err(Error::Shape(format!("image {i} is smaller than the {k}x{k} atoms")));
        }
        for _ in 0..a.crops {
            let r = rng.random_range(0..=img.height() - k);
            let c = rng.random_range(0..=img.width() - k);
            let patch = ImageGrid::new(img.values().slice(s![r..r + k, c..c + k]).to_owned(), img.pixel_spacing())?;
            let (report, z) = elbo_lower_bound(&patch, &dict, SynthesisMode::Patch, &params, a.fista_iters)?;
            if report.violates(1e-10) {
                violations += 1;
            }
            let (est, se) = if a.samples > 0 {
                let xv: Vec<f64> = patch.values().iter().copied().collect();
                let e = elbo_monte_carlo(&xv, &model, &params, z.as_slice().expect("contiguous"), a.samples, mc_seed ^ sample)?;
                (e.mean.to_string(), e.stderr.to_string())
            } else {
                (String::new(), String::new())
            };
            writeln!(w, "{sample},{i},{r},{c},{},{est},{se}", report.csv_row())?;
            sample += 1;
        }
    }
    finish(w)?;
    if violations > 0 {
        manifest.status = "violation".into();
        manifest.write(&out)?;
        return Err(Error::Contract(format!("{violations} of {sample} patches violate the ELBO bound")));
    }
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[derive(Args, Debug)]
pub struct AtomsArgs {
    #[arg(long)]
    dictionary: PathBuf,
    /// Coefficient grids written by `reconstruct`.
    #[arg(long, num_args = 1.., required = true)]
    coefficients: Vec<PathBuf>,
}

pub fn cmd_atoms(ctx: &Context, a: &AtomsArgs) -> Result<()> {
    ctx.check_keys(&[&["seed"]])?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut manifest = ctx.manifest("atoms");
    manifest.add_input(&a.dictionary)?;
    let dict = load_dictionary(&a.dictionary)?;
    let mut maps = Vec::new();
    for p in &a.coefficients {
        manifest.add_input(p)?;
        let (grid, spacing) = load_grid(p)?;
        let z = grid_to_coefficients(grid, dict.atom_count())?;
        let shape = (z.dim().1, z.dim().2);
        maps.push(CoefficientMaps::from_array(SynthesisMode::Convolutional, z, shape, spacing)?);
    }
    manifest.outputs = vec![out.join("significance.csv"), out.join("montage.pgm")];
    manifest.write(&out)?;

    let ranked = atom_significance(&dict, &maps)?;
    let mut w = create(&out.join("significance.csv"))?;
    writeln!(w, "rank,atom,score")?;
    for (rank, s) in ranked.iter().enumerate() {
        writeln!(w, "{rank},{},{}", s.index, s.score)?;
    }
    finish(w)?;
    let order: Vec<usize> = ranked.iter().map(|s| s.index).collect();
    save_pgm16(&out.join("montage.pgm"), &atom_montage(&dict, &order)?)?;
    manifest.status = "ok".into();
    manifest.write(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_grid_round_trip() {
        let z = Array3::from_shape_fn((3, 2, 4), |(i, r, c)| (i * 100 + r * 10 + c) as f64);
        let g = coefficients_to_grid(&z);
        assert_eq!(g.dim(), (6, 4));
        assert_eq!(g[[3, 1]], 111.0);
        assert_eq!(grid_to_coefficients(g.clone(), 3).unwrap(), z);
        assert!(grid_to_coefficients(g, 4).is_err());
    }

    #[test]
    fn json_sentinel() {
        assert_eq!(json_number(f64::INFINITY), json!("inf"));
        assert_eq!(json_number(1.5), json!(1.5));
    }
}

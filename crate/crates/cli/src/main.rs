use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use nearfar_core::harness::container::{
    load_dataset, load_phase_object, load_support, save_dataset, save_object, save_reconstruction, save_support,
    Manifest, Role,
};
use nearfar_core::harness::pgm::write_pgm;
use nearfar_core::harness::sweep::{
    run_grid_experiment, run_sweep_on, write_cost_history, write_grid_csv, write_sweep_csv, PhantomSpec, ReconSettings, SweepConfig,
    DEFAULT_FLUENCES, DEFAULT_NFP_FLUENCES,
};
use nearfar_core::harness::{align_offset_for, compute_metrics, DEFAULT_LOOSENESS};
use nearfar_core::phantom::{load_object, object_stats};
use nearfar_core::reconstruct::BatchMode;
use nearfar_core::{
    acquisition::DEFAULT_FRESNEL_NUMBER, add_poisson_noise, generate_phantom, make_support_mask, reconstruct,
    scale_to_fluence, simulate, AcquisitionGeometry, CostKind, Error, Modality, ObjectModel, ReconstructionConfig,
    Scale, ScanGrid,
};

#[derive(Parser)]
#[command(name = "nearfar", version, about = "Simulate and reconstruct NFH, FFP and NFP data at equal fluence")]
struct Cli {
    /// Seed for phantoms, noise and initial guesses.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom object, its support mask and a preview.
    Phantom(PhantomArgs),
    /// Simulate detector data for one modality.
    Simulate(SimulateArgs),
    /// Reconstruct a phase map from a dataset.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against the truth.
    Metrics(MetricsArgs),
    /// Run a fluence sweep with paired noise instances.
    Sweep(SweepArgs),
    /// Compare fine and coarse FFP scan grids at equal fluence.
    Grid(GridArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u32).range(64..))]
    size: u32,
    #[arg(long, default_value_t = 0.643)]
    mean_phase: f64,
    #[arg(long, default_value_t = 0.194)]
    support_fraction: f64,
    /// Dilation of the written support mask, pixels.
    #[arg(long, default_value_t = DEFAULT_LOOSENESS)]
    looseness: usize,
    #[arg(long, default_value = "phantom")]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Nfh,
    Ffp,
    Nfp,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Nfh => Modality::Nfh,
            ModalityArg::Ffp => Modality::Ffp,
            ModalityArg::Nfp => Modality::Nfp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Lsq,
    Poisson,
}

impl From<CostArg> for CostKind {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Lsq => CostKind::Lsq,
            CostArg::Poisson => CostKind::Poisson,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchArg {
    Full,
    PerPosition,
}

#[derive(Args, Clone, Default)]
struct GeometryArgs {
    /// NFH vacuum margin on each side, pixels.
    #[arg(long)]
    pad: Option<usize>,
    /// Fresnel number per pixel for the near-field modalities.
    #[arg(long)]
    fresnel_number: Option<f64>,
    /// FFP scan grid as ROWSxCOLS.
    #[arg(long)]
    grid: Option<String>,
    /// FFP step between probe positions, pixels.
    #[arg(long)]
    grid_step: Option<usize>,
    /// FFP patch (and probe array) size, pixels.
    #[arg(long)]
    patch: Option<usize>,
    /// FFP probe magnitude standard deviation, pixels.
    #[arg(long)]
    probe_sigma: Option<f64>,
    /// NFP illumination frame size, pixels.
    #[arg(long)]
    illumination: Option<usize>,
    /// NFP positions per axis.
    #[arg(long)]
    positions: Option<usize>,
}

impl GeometryArgs {
    fn is_empty(&self) -> bool {
        self.pad.is_none()
            && self.fresnel_number.is_none()
            && self.grid.is_none()
            && self.grid_step.is_none()
            && self.patch.is_none()
            && self.probe_sigma.is_none()
            && self.illumination.is_none()
            && self.positions.is_none()
    }

    fn build(&self, modality: Modality, n: usize) -> anyhow::Result<AcquisitionGeometry> {
        let preset = Scale::for_object_size(n).map(|s| AcquisitionGeometry::preset(modality, s));
        if self.is_empty() {
            if let Some(g) = preset {
                return Ok(g);
            }
        }
        let d = self.fresnel_number.unwrap_or(DEFAULT_FRESNEL_NUMBER);
        Ok(match modality {
            Modality::Nfh => AcquisitionGeometry::nfh(n, self.pad.unwrap_or(n / 2), d)?,
            Modality::Ffp => {
                let base = preset.as_ref().and_then(|g| g.grid.clone());
                let (rows, cols) = match (&self.grid, &base) {
                    (Some(s), _) => parse_grid(s)?,
                    (None, Some(g)) => (g.rows, g.cols),
                    (None, None) => bail!("--grid ROWSxCOLS is required for a {n}x{n} object"),
                };
                let step = self.grid_step.or(base.as_ref().map(|g| g.step)).unwrap_or(5);
                let patch = self.patch.or(base.as_ref().map(|g| g.patch_size)).unwrap_or(72);
                let grid = ScanGrid::centered(rows, cols, step, patch, (n, n))?;
                AcquisitionGeometry::ffp(n, grid, self.probe_sigma.unwrap_or(6.0), 0.5)?
            }
            Modality::Nfp => AcquisitionGeometry::nfp(
                n,
                self.illumination.unwrap_or(n * 3 / 2),
                self.positions.unwrap_or(4),
                0.3,
                5.0,
                17,
                d,
            )?,
        })
    }
}

fn parse_grid(s: &str) -> anyhow::Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid '{s}' is not ROWSxCOLS"))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Object container (.json).
    #[arg(long)]
    object: PathBuf,
    /// Photons per object pixel summed over exposures.
    #[arg(long, default_value_t = 350.0)]
    fluence: f64,
    /// Skip the Poisson noise step.
    #[arg(long)]
    noise_free: bool,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value = "dataset")]
    out: String,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "lsq")]
    cost: CostArg,
    /// Support container; required for NFH, ignored for FFP and NFP.
    #[arg(long)]
    support: Option<PathBuf>,
    /// Clamp the phase to be non-negative after every update (default: on).
    #[arg(long)]
    nonneg: Option<bool>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, value_enum, default_value = "full")]
    batch: BatchArg,
    #[arg(long, default_value = "recon")]
    out: String,
}

#[derive(Args)]
struct MetricsArgs {
    /// Ground-truth object container.
    #[arg(long)]
    truth: PathBuf,
    /// Reconstruction (or object) container.
    #[arg(long)]
    recon: PathBuf,
    /// Independent second reconstruction for paired correlation and FRC.
    #[arg(long)]
    recon_b: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LOOSENESS)]
    looseness: usize,
    /// Modality whose offset-alignment rule to apply.
    #[arg(long, value_enum, default_value = "nfh")]
    modality: ModalityArg,
    #[arg(long, default_value = "metrics.json")]
    out: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Phantom size when no object is given.
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Use this object instead of generating a phantom.
    #[arg(long)]
    object: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["nfh", "ffp", "nfp"])]
    modalities: Vec<ModalityArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["lsq", "poisson"])]
    costs: Vec<CostArg>,
    #[arg(long, value_delimiter = ',')]
    fluences: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    nfp_fluences: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2)]
    instances: usize,
    /// Iteration cap applied to every modality.
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_LOOSENESS)]
    looseness: usize,
    /// Write reconstructions, previews and cost histories next to the CSV.
    #[arg(long)]
    gallery: bool,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value = "sweep.csv")]
    out: String,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long)]
    object: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    fluence: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["lsq", "poisson"])]
    costs: Vec<CostArg>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Fine-grid geometry; the coarse grid halves the density.
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value = "grid.csv")]
    out: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { 4 } else { 3 })
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = |name: &str| cli.out_dir.join(name);
    match &cli.command {
        Command::Phantom(a) => phantom(cli.seed, a, &out(&a.out)),
        Command::Simulate(a) => simulate_cmd(cli.seed, a, &out(&a.out)),
        Command::Reconstruct(a) => reconstruct_cmd(cli.seed, a, &out(&a.out)),
        Command::Metrics(a) => metrics_cmd(a, &out(&a.out)),
        Command::Sweep(a) => sweep_cmd(cli.seed, a, &cli.out_dir, &out(&a.out)),
        Command::Grid(a) => grid_cmd(cli.seed, a, &cli.out_dir, &out(&a.out)),
    }
}

fn phantom(seed: u64, a: &PhantomArgs, stem: &Path) -> anyhow::Result<()> {
    let obj = generate_phantom(seed, a.size as usize, a.mean_phase, a.support_fraction)?;
    let stats = object_stats(&obj)?;
    let path = save_object(stem, &obj)?;
    write_pgm(&stem.with_extension("pgm"), &obj.phase, None)?;
    let support = make_support_mask(&obj, a.looseness);
    let mut support_stem = stem.as_os_str().to_owned();
    support_stem.push("_support");
    save_support(Path::new(&support_stem), &support)?;
    info!(
        "wrote {} (mean phase {:.4}, sigma {:.4}, support fraction {:.4})",
        path.display(),
        stats.mean_phase,
        stats.sigma_phase,
        stats.support_fraction
    );
    Ok(())
}

fn simulate_cmd(seed: u64, a: &SimulateArgs, stem: &Path) -> anyhow::Result<()> {
    let obj = load_object(&a.object)?;
    let (n, w) = obj.shape();
    if n != w {
        bail!("objects must be square, got {n}x{w}");
    }
    let geom = a.geometry.build(a.modality.into(), n)?;
    let mut data = scale_to_fluence(&simulate(&obj, &geom)?, a.fluence)?;
    if !a.noise_free {
        data = add_poisson_noise(&data, seed)?;
    }
    let path = save_dataset(stem, &data)?;
    write_pgm(&stem.with_extension("pgm"), &data.frames[0], None)?;
    info!(
        "wrote {} ({} frames of {:?}, illumination scale {:.6})",
        path.display(),
        data.frames.len(),
        geom.detector_shape(),
        data.illumination_scale
    );
    Ok(())
}

fn reconstruct_cmd(seed: u64, a: &ReconstructArgs, stem: &Path) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    let modality = data.geometry.modality;
    let support = match (&a.support, modality) {
        (None, Modality::Nfh) => bail!(Error::Config("NFH reconstruction requires --support".into())),
        (Some(_), Modality::Ffp | Modality::Nfp) => {
            warn!("{modality} does not use a finite support constraint; ignoring --support");
            None
        }
        (Some(p), _) => Some(load_support(p)?),
        (None, _) => None,
    };
    let defaults = ReconSettings::default_for(modality);
    let cfg = ReconstructionConfig {
        cost: a.cost.into(),
        max_iters: a.max_iters.unwrap_or(defaults.max_iters),
        step_size: a.step_size.unwrap_or(defaults.step_size),
        init_seed: seed,
        support,
        nonneg: a.nonneg.unwrap_or(defaults.nonneg),
        batch: match a.batch {
            BatchArg::Full => BatchMode::Full,
            BatchArg::PerPosition => BatchMode::PerPosition,
        },
        ..Default::default()
    };
    let res = reconstruct(&data, &cfg)?;
    let mut m = Manifest::new(Role::Reconstruction);
    m.seeds.insert("init".into(), seed);
    m.geometry = Some(data.geometry.clone());
    m.fluence = data.fluence.is_finite().then_some(data.fluence);
    m.pgm = Some(write_pgm(&stem.with_extension("pgm"), &res.object.phase, None)?);
    let path = save_reconstruction(stem, &res, m)?;
    let mut hist = stem.as_os_str().to_owned();
    hist.push("_cost.csv");
    write_cost_history(Path::new(&hist), &res.cost_history)?;
    info!(
        "wrote {} after {} iterations (converged: {}, final cost {:.6e})",
        path.display(),
        res.iters_run,
        res.converged,
        res.final_cost().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn metrics_cmd(a: &MetricsArgs, path: &Path) -> anyhow::Result<()> {
    let truth = load_object(&a.truth)?;
    let recon = load_phase_object(&a.recon)?;
    let second = a.recon_b.as_deref().map(load_phase_object).transpose()?;
    let support = make_support_mask(&truth, a.looseness);
    let report = compute_metrics(&truth, &recon, second.as_ref(), &support, align_offset_for(a.modality.into()))?;
    std::fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    info!(
        "snr {:.4}, r {:.4}, smse {:.6}, FRC crossing {:.3} of Nyquist",
        report.snr, report.r, report.smse, report.frc.crossing_fraction_of_nyquist
    );
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn object_for(seed: u64, size: usize, object: &Option<PathBuf>) -> anyhow::Result<(ObjectModel, PhantomSpec)> {
    let spec = PhantomSpec {
        size,
        seed,
        ..Default::default()
    };
    Ok(match object {
        Some(p) => {
            let obj = load_object(p)?;
            let spec = PhantomSpec { size: obj.shape().0, ..spec };
            (obj, spec)
        }
        None => (spec.generate()?, spec),
    })
}

fn sweep_cmd(seed: u64, a: &SweepArgs, dir: &Path, csv: &Path) -> anyhow::Result<()> {
    let (obj, phantom) = object_for(seed, a.size, &a.object)?;
    let modalities: Vec<Modality> = a.modalities.iter().map(|&m| m.into()).collect();
    let mut overrides = BTreeMap::new();
    if !a.geometry.is_empty() || Scale::for_object_size(phantom.size).is_none() {
        for &m in &modalities {
            overrides.insert(m, a.geometry.build(m, phantom.size)?);
        }
    }
    let recon = Modality::ALL
        .iter()
        .map(|&m| {
            let d = ReconSettings::default_for(m);
            let s = ReconSettings {
                max_iters: a.max_iters.unwrap_or(d.max_iters),
                step_size: a.step_size.unwrap_or(d.step_size),
                ..d
            };
            (m, s)
        })
        .collect();
    let cfg = SweepConfig {
        modalities,
        fluences: a.fluences.clone().unwrap_or_else(|| DEFAULT_FLUENCES.to_vec()),
        nfp_fluences: Some(a.nfp_fluences.clone().unwrap_or_else(|| DEFAULT_NFP_FLUENCES.to_vec())),
        costs: a.costs.iter().map(|&c| c.into()).collect(),
        noise_instances: a.instances,
        base_seed: seed,
        phantom,
        geometry_overrides: overrides,
        looseness: a.looseness,
        recon,
        output_dir: a.gallery.then(|| dir.to_path_buf()),
    };
    let rows = run_sweep_on(&cfg, &obj)?;
    write_sweep_csv(csv, &rows)?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    info!("wrote {} rows to {} ({failed} failed cells)", rows.len(), csv.display());
    Ok(())
}

fn grid_cmd(seed: u64, a: &GridArgs, dir: &Path, csv: &Path) -> anyhow::Result<()> {
    let (obj, _) = object_for(seed, a.size, &a.object)?;
    let n = obj.shape().0;
    let fine = a.geometry.build(Modality::Ffp, n)?;
    let d = ReconSettings::default_for(Modality::Ffp);
    let settings = ReconSettings {
        max_iters: a.max_iters.unwrap_or(d.max_iters),
        step_size: a.step_size.unwrap_or(d.step_size),
        ..d
    };
    let costs: Vec<CostKind> = a.costs.iter().map(|&c| c.into()).collect();
    let exp = run_grid_experiment(&obj, &fine, a.fluence, &costs, settings, seed, DEFAULT_LOOSENESS, Some(dir))?;
    write_grid_csv(csv, &exp.rows)?;
    info!(
        "coarse/fine photons per exposure: {:.4}; wrote {}",
        exp.exposure_ratio,
        csv.display()
    );
    Ok(())
}

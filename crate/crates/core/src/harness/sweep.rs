//! Fluence sweeps with paired noise instances, and the coarse/fine scan-grid
//! comparison for far-field ptychography.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::container::{save_reconstruction, Manifest, Role};
use super::pgm::write_pgm;
use super::{align_offset_for, aligned_phase, compute_metrics, DEFAULT_LOOSENESS};
use crate::acquisition::{
    add_poisson_noise, scale_to_fluence, simulate, AcquisitionGeometry, Dataset, Modality, Scale, ScanGrid,
};
use crate::error::{Error, Result};
use crate::metrics::{frc, smse_fields};
use crate::phantom::{generate_phantom, make_support_mask, ObjectModel, SupportMask};
use crate::reconstruct::{reconstruct, CostKind, ReconstructionConfig, ReconstructionResult};

pub const DEFAULT_FLUENCES: [f64; 8] = [0.8, 2.0, 8.0, 35.0, 200.0, 350.0, 1000.0, 20000.0];
pub const DEFAULT_NFP_FLUENCES: [f64; 4] = [2.0, 35.0, 350.0, 1000.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub seed: u64,
    pub mean_phase: f64,
    pub support_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 512,
            seed: 0,
            mean_phase: 0.643,
            support_fraction: 0.194,
        }
    }
}

impl PhantomSpec {
    pub fn generate(&self) -> Result<ObjectModel> {
        generate_phantom(self.seed, self.size, self.mean_phase, self.support_fraction)
    }
}

/// Optimizer budget for one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSettings {
    pub max_iters: usize,
    pub step_size: f64,
    pub nonneg: bool,
}

impl ReconSettings {
    /// Frozen after noise-free desk-scale pilots. The phase is kept
    /// non-negative for every modality; only NFH also gets a support.
    pub fn default_for(modality: Modality) -> Self {
        let step_size = match modality {
            Modality::Nfh => 0.05,
            Modality::Ffp => 0.1,
            Modality::Nfp => 0.2,
        };
        Self {
            max_iters: 200,
            step_size,
            nonneg: true,
        }
    }

    pub fn config(&self, cost: CostKind, init_seed: u64, support: Option<SupportMask>) -> ReconstructionConfig {
        ReconstructionConfig {
            cost,
            max_iters: self.max_iters,
            step_size: self.step_size,
            init_seed,
            support,
            nonneg: self.nonneg,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub modalities: Vec<Modality>,
    pub fluences: Vec<f64>,
    /// Fluences used for NFP; `None` means the same list as the others.
    pub nfp_fluences: Option<Vec<f64>>,
    pub costs: Vec<CostKind>,
    pub noise_instances: usize,
    pub base_seed: u64,
    pub phantom: PhantomSpec,
    /// Replaces the preset geometry of a modality.
    pub geometry_overrides: BTreeMap<Modality, AcquisitionGeometry>,
    pub looseness: usize,
    pub recon: BTreeMap<Modality, ReconSettings>,
    /// Cost histories, reconstructions and PGM previews go here when set.
    pub output_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            fluences: DEFAULT_FLUENCES.to_vec(),
            nfp_fluences: Some(DEFAULT_NFP_FLUENCES.to_vec()),
            costs: vec![CostKind::Lsq, CostKind::Poisson],
            noise_instances: 2,
            base_seed: 0,
            phantom: PhantomSpec::default(),
            geometry_overrides: BTreeMap::new(),
            looseness: DEFAULT_LOOSENESS,
            recon: Modality::ALL.iter().map(|&m| (m, ReconSettings::default_for(m))).collect(),
            output_dir: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_instances < 2 {
            return Err(Error::Config("paired metrics need at least two noise instances".into()));
        }
        if self.modalities.is_empty() || self.costs.is_empty() || self.fluences.is_empty() {
            return Err(Error::Config("sweep has no cells".into()));
        }
        if let Some(f) = self.fluences.iter().chain(self.nfp_fluences.iter().flatten()).find(|f| !(**f >= 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("fluence {f}")));
        }
        Ok(())
    }

    pub fn geometry(&self, modality: Modality) -> Result<AcquisitionGeometry> {
        if let Some(g) = self.geometry_overrides.get(&modality) {
            return Ok(g.clone());
        }
        let scale = Scale::for_object_size(self.phantom.size).ok_or_else(|| {
            Error::Config(format!(
                "no preset geometry for a {0}x{0} object; supply an override",
                self.phantom.size
            ))
        })?;
        Ok(AcquisitionGeometry::preset(modality, scale))
    }

    pub fn fluences_for(&self, modality: Modality) -> &[f64] {
        match (modality, &self.nfp_fluences) {
            (Modality::Nfp, Some(f)) => f,
            _ => &self.fluences,
        }
    }

    pub fn settings(&self, modality: Modality) -> ReconSettings {
        self.recon
            .get(&modality)
            .copied()
            .unwrap_or_else(|| ReconSettings::default_for(modality))
    }
}

/// One row per (modality, cost, fluence, instance pair).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub modality: Modality,
    pub cost: CostKind,
    pub fluence: f64,
    pub pair: usize,
    pub seed_a: u64,
    pub seed_b: u64,
    pub snr: f64,
    pub r: f64,
    /// Mean of the two instances' SMSE against the truth.
    pub smse: f64,
    /// Half-bit crossing of the two instances against each other.
    pub frc_crossing: f64,
    /// Half-bit crossing of the first instance against the truth.
    pub gt_frc_crossing: f64,
    pub feature_sigma: Option<f64>,
    /// Iterations of the first and second instance.
    pub iters: String,
    pub converged: bool,
    pub error: String,
    /// Seconds spent reconstructing both instances.
    pub wall_time: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise and initialization seed of one reconstruction in a sweep.
pub fn instance_seed(base: u64, modality: Modality, cost: CostKind, fluence: f64, instance: usize) -> u64 {
    let parts = [modality as u64, cost as u64, fluence.to_bits(), instance as u64];
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

struct Cell {
    modality: Modality,
    cost: CostKind,
    fluence: f64,
}

fn cell_tag(modality: Modality, cost: CostKind, fluence: f64) -> String {
    format!("{modality}_{cost}_{fluence}")
}

/// Runs every cell of the sweep on a generated phantom.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let obj = cfg.phantom.generate()?;
    run_sweep_on(cfg, &obj)
}

/// Runs every cell of the sweep on a given object. Rows come back sorted by
/// (modality, cost, fluence, pair) whatever order the cells finish in.
pub fn run_sweep_on(cfg: &SweepConfig, obj: &ObjectModel) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let support = make_support_mask(obj, cfg.looseness);
    let mut modalities = cfg.modalities.clone();
    modalities.sort();
    modalities.dedup();
    let mut costs = cfg.costs.clone();
    costs.sort();
    costs.dedup();

    let mut unit: BTreeMap<Modality, Dataset> = BTreeMap::new();
    for &m in &modalities {
        let geom = cfg.geometry(m)?;
        log::info!("simulating {m} ({} exposures)", geom.num_exposures());
        unit.insert(m, simulate(obj, &geom)?);
    }

    let mut cells = Vec::new();
    for &m in &modalities {
        for &c in &costs {
            let mut fl = cfg.fluences_for(m).to_vec();
            fl.sort_by(f64::total_cmp);
            fl.dedup();
            cells.extend(fl.into_iter().map(|f| Cell { modality: m, cost: c, fluence: f }));
        }
    }

    let rows: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .map(|cell| run_cell(cfg, obj, &support, &unit[&cell.modality], cell))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn run_cell(cfg: &SweepConfig, obj: &ObjectModel, support: &SupportMask, unit: &Dataset, cell: &Cell) -> Vec<SweepRow> {
    let settings = cfg.settings(cell.modality);
    let seeds: Vec<u64> = (0..cfg.noise_instances)
        .map(|i| instance_seed(cfg.base_seed, cell.modality, cell.cost, cell.fluence, i))
        .collect();
    let tag = cell_tag(cell.modality, cell.cost, cell.fluence);
    log::info!("cell {tag}");

    let mut results: Vec<(Result<ReconstructionResult>, f64)> = Vec::with_capacity(seeds.len());
    let scaled = scale_to_fluence(unit, cell.fluence);
    for (i, &seed) in seeds.iter().enumerate() {
        let start = Instant::now();
        let res = scaled
            .as_ref()
            .map_err(clone_err)
            .and_then(|d| add_poisson_noise(d, seed))
            .and_then(|d| {
                let recon_support = (cell.modality == Modality::Nfh).then(|| support.clone());
                reconstruct(&d, &settings.config(cell.cost, seed, recon_support))
            });
        let elapsed = start.elapsed().as_secs_f64();
        if let (Ok(r), Some(dir)) = (&res, &cfg.output_dir) {
            if let Err(e) = write_instance(dir, &tag, i, seed, r, cell.fluence) {
                log::warn!("could not write outputs for {tag}/{i}: {e}");
            }
        }
        results.push((res, elapsed));
    }

    let align = align_offset_for(cell.modality);
    (0..cfg.noise_instances / 2)
        .map(|p| {
            let (ia, ib) = (2 * p, 2 * p + 1);
            let mut row = SweepRow {
                modality: cell.modality,
                cost: cell.cost,
                fluence: cell.fluence,
                pair: p,
                seed_a: seeds[ia],
                seed_b: seeds[ib],
                snr: f64::NAN,
                r: f64::NAN,
                smse: f64::NAN,
                frc_crossing: f64::NAN,
                gt_frc_crossing: f64::NAN,
                feature_sigma: None,
                iters: String::new(),
                converged: false,
                error: String::new(),
                wall_time: results[ia].1 + results[ib].1,
            };
            match (&results[ia].0, &results[ib].0) {
                (Ok(a), Ok(b)) => {
                    row.iters = format!("{}/{}", a.iters_run, b.iters_run);
                    row.converged = a.converged && b.converged;
                    if let Err(e) = fill_metrics(&mut row, obj, a, b, support, align) {
                        row.error = e.to_string();
                    }
                }
                (Err(e), _) | (_, Err(e)) => row.error = e.to_string(),
            }
            row
        })
        .collect()
}

fn clone_err(e: &Error) -> Error {
    Error::Config(e.to_string())
}

fn fill_metrics(
    row: &mut SweepRow,
    truth: &ObjectModel,
    a: &ReconstructionResult,
    b: &ReconstructionResult,
    support: &SupportMask,
    align: bool,
) -> Result<()> {
    let m = compute_metrics(truth, &a.object, Some(&b.object), support, align)?;
    row.snr = m.snr;
    row.r = m.r;
    row.smse = m.smse;
    row.frc_crossing = m.frc.crossing_fraction_of_nyquist;
    let pa = support.apply(&aligned_phase(&truth.phase, &a.object.phase, support, align));
    let pt = support.apply(&truth.phase);
    row.gt_frc_crossing = frc(&pa, &pt)?.crossing_fraction_of_nyquist;
    let second = compute_metrics(truth, &b.object, None, support, align)?.feature_sigma;
    row.feature_sigma = match (m.feature_sigma, second) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        (x, y) => x.or(y),
    };
    Ok(())
}

fn write_instance(dir: &Path, tag: &str, instance: usize, seed: u64, r: &ReconstructionResult, fluence: f64) -> Result<()> {
    let stem = dir.join(format!("{tag}_{instance}"));
    let mut m = Manifest::new(Role::Reconstruction);
    m.seeds.insert("noise".into(), seed);
    m.seeds.insert("init".into(), seed);
    m.fluence = Some(fluence);
    let pgm = stem.with_extension("pgm");
    m.pgm = Some(write_pgm(&pgm, &r.object.phase, None)?);
    save_reconstruction(&stem, r, m)?;
    write_cost_history(&dir.join(format!("{tag}_{instance}_cost.csv")), &r.cost_history)
}

pub fn write_cost_history(path: &Path, history: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "cost"])?;
    for (i, c) in history {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn sweep_csv_string(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(SWEEP_COLUMNS)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub const SWEEP_COLUMNS: [&str; 16] = [
    "modality",
    "cost",
    "fluence",
    "pair",
    "seed_a",
    "seed_b",
    "snr",
    "r",
    "smse",
    "frc_crossing",
    "gt_frc_crossing",
    "feature_sigma",
    "iters",
    "converged",
    "error",
    "wall_time",
];

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let text = sweep_csv_string(rows)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// The CSV with the `wall_time` column removed, for reproducibility checks.
pub fn strip_wall_time(csv_text: &str) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut drop: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let idx = *drop.get_or_insert_with(|| rec.iter().position(|f| f == "wall_time").unwrap_or(usize::MAX));
        w.write_record(rec.iter().enumerate().filter(|(i, _)| *i != idx).map(|(_, f)| f))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Coarse scan grid with twice the step of `fine` and half the positions per
/// axis, centered on the same object.
pub fn coarse_grid(fine: &ScanGrid, object: (usize, usize)) -> Result<ScanGrid> {
    ScanGrid::centered(
        fine.rows.div_ceil(2),
        fine.cols.div_ceil(2),
        fine.step * 2,
        fine.patch_size,
        object,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub grid: String,
    pub rows: usize,
    pub cols: usize,
    pub step: usize,
    pub exposures: usize,
    pub illumination_scale: f64,
    pub cost: CostKind,
    pub smse: f64,
    pub iters: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridExperiment {
    pub rows: Vec<GridRow>,
    /// Coarse over fine photons per exposure.
    pub exposure_ratio: f64,
}

/// Reconstructs the same object from fine- and coarse-grid FFP data at
/// equal fluence, one noise instance per grid.
pub fn run_grid_experiment(
    obj: &ObjectModel,
    fine: &AcquisitionGeometry,
    fluence: f64,
    costs: &[CostKind],
    settings: ReconSettings,
    seed: u64,
    looseness: usize,
    output_dir: Option<&Path>,
) -> Result<GridExperiment> {
    let fine_grid = fine
        .grid
        .clone()
        .ok_or_else(|| Error::Config("grid experiment needs an FFP geometry".into()))?;
    let (h, w) = obj.shape();
    let coarse = AcquisitionGeometry {
        grid: Some(coarse_grid(&fine_grid, (h, w))?),
        ..fine.clone()
    };
    coarse.validate()?;
    let support = make_support_mask(obj, looseness);
    let mut rows = Vec::new();
    let mut scales = Vec::new();
    for (name, geom) in [("fine", fine), ("coarse", &coarse)] {
        let data = scale_to_fluence(&simulate(obj, geom)?, fluence)?;
        scales.push(data.illumination_scale);
        let noisy = add_poisson_noise(&data, seed)?;
        let grid = geom.grid.as_ref().expect("ffp");
        for &cost in costs {
            let mut row = GridRow {
                grid: name.into(),
                rows: grid.rows,
                cols: grid.cols,
                step: grid.step,
                exposures: grid.len(),
                illumination_scale: data.illumination_scale,
                cost,
                smse: f64::NAN,
                iters: 0,
                error: String::new(),
            };
            match reconstruct(&noisy, &settings.config(cost, seed, None)) {
                Ok(res) => {
                    row.iters = res.iters_run;
                    row.smse = smse_fields(&obj.phase, &res.object.phase, &support, true)?;
                    if let Some(dir) = output_dir {
                        let img = support.apply(&aligned_phase(&obj.phase, &res.object.phase, &support, true));
                        write_pgm(&dir.join(format!("grid_{name}_{cost}.pgm")), &img, Some((0.0, 1.0)))?;
                    }
                }
                Err(e) => row.error = e.to_string(),
            }
            rows.push(row);
        }
    }
    Ok(GridExperiment {
        rows,
        exposure_ratio: scales[1] / scales[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SweepConfig {
        let nfh = AcquisitionGeometry::nfh(64, 32, 4e-3).unwrap();
        let ffp = AcquisitionGeometry::ffp(64, ScanGrid::centered(6, 6, 6, 24, (64, 64)).unwrap(), 4.0, 0.5).unwrap();
        SweepConfig {
            modalities: vec![Modality::Ffp, Modality::Nfh],
            fluences: vec![50.0, 5.0],
            nfp_fluences: None,
            costs: vec![CostKind::Lsq],
            noise_instances: 2,
            base_seed: 7,
            phantom: PhantomSpec {
                size: 64,
                seed: 1,
                ..Default::default()
            },
            geometry_overrides: [(Modality::Nfh, nfh), (Modality::Ffp, ffp)].into_iter().collect(),
            looseness: 3,
            recon: Modality::ALL
                .iter()
                .map(|&m| (m, ReconSettings { max_iters: 15, step_size: 0.02, nonneg: m == Modality::Nfh }))
                .collect(),
            output_dir: None,
        }
    }

    #[test]
    fn rows_are_sorted_and_reproducible() {
        let cfg = tiny_config();
        let a = run_sweep(&cfg).unwrap();
        let keys: Vec<(Modality, f64)> = a.iter().map(|r| (r.modality, r.fluence)).collect();
        assert_eq!(keys, vec![(Modality::Nfh, 5.0), (Modality::Nfh, 50.0), (Modality::Ffp, 5.0), (Modality::Ffp, 50.0)]);
        assert!(a.iter().all(|r| r.error.is_empty() && r.snr.is_finite()));
        let b = run_sweep(&cfg).unwrap();
        let sa = strip_wall_time(&sweep_csv_string(&a).unwrap()).unwrap();
        let sb = strip_wall_time(&sweep_csv_string(&b).unwrap()).unwrap();
        assert_eq!(sa, sb);
        assert!(sa.starts_with("modality,cost,fluence,pair,seed_a,seed_b,snr,r,smse,frc_crossing,gt_frc_crossing,feature_sigma,iters,converged,error\n"));
    }

    #[test]
    fn instance_seeds_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for m in Modality::ALL {
            for c in CostKind::ALL {
                for f in DEFAULT_FLUENCES {
                    for i in 0..2 {
                        assert!(seen.insert(instance_seed(0, m, c, f, i)));
                    }
                }
            }
        }
        assert_ne!(instance_seed(0, Modality::Nfh, CostKind::Lsq, 2.0, 0), instance_seed(1, Modality::Nfh, CostKind::Lsq, 2.0, 0));
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut cfg = tiny_config();
        cfg.modalities = vec![Modality::Nfh];
        cfg.fluences = vec![5.0];
        cfg.recon.insert(Modality::Nfh, ReconSettings { max_iters: 3, step_size: 0.01, nonneg: true });
        cfg.looseness = 3;
        // an invalid step size fails inside the cell, not up front
        cfg.recon.get_mut(&Modality::Nfh).unwrap().step_size = -1.0;
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(!rows[0].error.is_empty());
        assert!(rows[0].snr.is_nan());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.noise_instances = 1;
        assert!(matches!(run_sweep(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.geometry_overrides.clear();
        assert!(matches!(run_sweep(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn coarse_grid_quarters_the_exposures() {
        let fine = AcquisitionGeometry::preset(Modality::Ffp, Scale::Desk);
        let g = coarse_grid(fine.grid.as_ref().unwrap(), (256, 256)).unwrap();
        assert_eq!((g.rows, g.cols, g.step), (17, 17, 10));
        assert_eq!(fine.grid.as_ref().unwrap().len(), 4 * g.len());
        let full = AcquisitionGeometry::preset(Modality::Ffp, Scale::Full);
        let g = coarse_grid(full.grid.as_ref().unwrap(), (512, 512)).unwrap();
        assert_eq!((g.rows, g.cols), (33, 34));
        assert_eq!(full.grid.as_ref().unwrap().len(), 4 * g.len());
    }

    #[test]
    fn cost_history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_cost_history(&p, &[(0, 1.5), (1, 0.25)]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "iter,cost\n0,1.5\n1,0.25\n");
    }
}

//! On-disk container: a JSON manifest `<stem>.json` next to a raw
//! little-endian blob `<stem>.bin`.
//!
//! Real arrays are stored as `f32` when every value survives the round trip
//! through single precision (photon counts, masks, quick-look data) and as
//! `f64` otherwise, so reading a container back is always bit-exact.
//! Complex arrays use interleaved (re, im) pairs with the same rule.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionGeometry, Dataset};
use crate::error::{Error, Result};
use crate::grid::{ComplexField, RealField};
use crate::phantom::{ObjectModel, SupportMask};
use crate::reconstruct::ReconstructionResult;

pub const FORMAT: &str = "nearfar-container";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Object,
    Dataset,
    Support,
    Reconstruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
    F64,
    /// Interleaved f32 pairs.
    C64,
    /// Interleaved f64 pairs.
    C128,
}

impl Dtype {
    fn item_bytes(&self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::C64 => 8,
            Dtype::C128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length in the blob.
    pub length: usize,
}

/// Linear 8-bit scaling used for a PGM preview.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmScaling {
    pub min: f64,
    pub max: f64,
    pub maxval: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub endianness: String,
    pub blob: String,
    pub arrays: Vec<ArraySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<AcquisitionGeometry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illumination_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_free: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_pitch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgm: Option<PgmScaling>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(role: Role) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            role,
            endianness: "little".into(),
            blob: String::new(),
            arrays: Vec::new(),
            geometry: None,
            seeds: BTreeMap::new(),
            fluence: None,
            illumination_scale: None,
            noise_free: None,
            pixel_pitch: None,
            pgm: None,
            attributes: BTreeMap::new(),
        }
    }
}

/// Array payloads, flattened row-major with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    Real { shape: Vec<usize>, data: Vec<f64> },
    Complex { shape: Vec<usize>, data: Vec<Complex64> },
    Mask { shape: Vec<usize>, data: Vec<bool> },
}

impl ArrayData {
    fn shape(&self) -> &[usize] {
        match self {
            ArrayData::Real { shape, .. } | ArrayData::Complex { shape, .. } | ArrayData::Mask { shape, .. } => shape,
        }
    }
}

fn f32_exact(v: f64) -> bool {
    let r = v as f32 as f64;
    r.to_bits() == v.to_bits() || (v.is_nan() && r.is_nan())
}

fn encode(arr: &ArrayData, out: &mut Vec<u8>) -> Dtype {
    match arr {
        ArrayData::Real { data, .. } => {
            if data.iter().all(|&v| f32_exact(v)) {
                data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
                Dtype::F32
            } else {
                data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                Dtype::F64
            }
        }
        ArrayData::Complex { data, .. } => {
            if data.iter().all(|c| f32_exact(c.re) && f32_exact(c.im)) {
                for c in data {
                    out.extend_from_slice(&(c.re as f32).to_le_bytes());
                    out.extend_from_slice(&(c.im as f32).to_le_bytes());
                }
                Dtype::C64
            } else {
                for c in data {
                    out.extend_from_slice(&c.re.to_le_bytes());
                    out.extend_from_slice(&c.im.to_le_bytes());
                }
                Dtype::C128
            }
        }
        ArrayData::Mask { data, .. } => {
            out.extend(data.iter().map(|&b| b as u8));
            Dtype::U8
        }
    }
}

fn f32s(b: &[u8]) -> impl Iterator<Item = f64> + '_ {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
}

fn f64s(b: &[u8]) -> impl Iterator<Item = f64> + '_ {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

fn decode(spec: &ArraySpec, bytes: &[u8], path: &Path) -> Result<ArrayData> {
    let count: usize = spec.shape.iter().product();
    if spec.length != count * spec.dtype.item_bytes() || bytes.len() != spec.length {
        return Err(Error::parse(path, format!("array '{}' has inconsistent length", spec.name)));
    }
    let shape = spec.shape.clone();
    Ok(match spec.dtype {
        Dtype::U8 => ArrayData::Mask {
            shape,
            data: bytes.iter().map(|&b| b != 0).collect(),
        },
        Dtype::F32 => ArrayData::Real { shape, data: f32s(bytes).collect() },
        Dtype::F64 => ArrayData::Real { shape, data: f64s(bytes).collect() },
        Dtype::C64 => {
            let v: Vec<f64> = f32s(bytes).collect();
            ArrayData::Complex {
                shape,
                data: v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
            }
        }
        Dtype::C128 => {
            let v: Vec<f64> = f64s(bytes).collect();
            ArrayData::Complex {
                shape,
                data: v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
            }
        }
    })
}

/// `<stem>.json` and `<stem>.bin` for a path given with or without extension.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "json" || e == "bin") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// Writes a manifest and its arrays; returns the manifest path.
pub fn write_container(path: &Path, mut manifest: Manifest, arrays: &[(&str, ArrayData)]) -> Result<PathBuf> {
    let (json_path, bin_path) = container_paths(path);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blob = Vec::new();
    manifest.arrays.clear();
    for (name, arr) in arrays {
        let offset = blob.len();
        let dtype = encode(arr, &mut blob);
        manifest.arrays.push(ArraySpec {
            name: name.to_string(),
            dtype,
            shape: arr.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    manifest.blob = bin_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&json_path, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

pub fn read_container(path: &Path) -> Result<(Manifest, BTreeMap<String, ArrayData>)> {
    let (json_path, _) = container_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&json_path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::parse(
            &json_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    if manifest.endianness != "little" {
        return Err(Error::parse(&json_path, "only little-endian blobs are supported"));
    }
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut arrays = BTreeMap::new();
    for spec in &manifest.arrays {
        let end = spec.offset.checked_add(spec.length).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::parse(&bin_path, format!("array '{}' runs past the blob", spec.name)));
        };
        arrays.insert(spec.name.clone(), decode(spec, &blob[spec.offset..end], &bin_path)?);
    }
    Ok((manifest, arrays))
}

fn expect_role(manifest: &Manifest, role: Role, path: &Path) -> Result<()> {
    if manifest.role != role {
        return Err(Error::parse(path, format!("expected a {role:?} container, found {:?}", manifest.role)));
    }
    Ok(())
}

fn take_real2(arrays: &mut BTreeMap<String, ArrayData>, name: &str, path: &Path) -> Result<RealField> {
    match arrays.remove(name) {
        Some(ArrayData::Real { shape, data }) if shape.len() == 2 => Ok(RealField::new(
            Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::parse(path, e.to_string()))?,
        )),
        _ => Err(Error::parse(path, format!("missing 2-D real array '{name}'"))),
    }
}

fn real2(f: &RealField) -> ArrayData {
    let (h, w) = f.shape();
    ArrayData::Real {
        shape: vec![h, w],
        data: f.data().iter().copied().collect(),
    }
}

pub fn save_object(path: &Path, obj: &ObjectModel) -> Result<PathBuf> {
    let mut m = Manifest::new(Role::Object);
    m.pixel_pitch = Some(obj.pixel_pitch);
    write_container(path, m, &[("phase", real2(&obj.phase)), ("absorption", real2(&obj.absorption))])
}

pub fn load_object(path: &Path) -> Result<ObjectModel> {
    let (m, mut arrays) = read_container(path)?;
    expect_role(&m, Role::Object, path)?;
    let obj = ObjectModel {
        phase: take_real2(&mut arrays, "phase", path)?,
        absorption: take_real2(&mut arrays, "absorption", path)?,
        pixel_pitch: m.pixel_pitch.unwrap_or(crate::phantom::DEFAULT_PIXEL_PITCH),
    };
    obj.validate()?;
    Ok(obj)
}

pub fn save_support(path: &Path, support: &SupportMask) -> Result<PathBuf> {
    let mut m = Manifest::new(Role::Support);
    m.attributes.insert("looseness".into(), support.looseness.into());
    let (h, w) = support.shape();
    write_container(
        path,
        m,
        &[(
            "mask",
            ArrayData::Mask {
                shape: vec![h, w],
                data: support.mask.iter().copied().collect(),
            },
        )],
    )
}

pub fn load_support(path: &Path) -> Result<SupportMask> {
    let (m, mut arrays) = read_container(path)?;
    expect_role(&m, Role::Support, path)?;
    let looseness = m.attributes.get("looseness").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    match arrays.remove("mask") {
        Some(ArrayData::Mask { shape, data }) if shape.len() == 2 => Ok(SupportMask {
            mask: Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::parse(path, e.to_string()))?,
            looseness,
        }),
        _ => Err(Error::parse(path, "missing mask array")),
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<PathBuf> {
    let mut m = Manifest::new(Role::Dataset);
    m.geometry = Some(data.geometry.clone());
    m.fluence = data.fluence.is_finite().then_some(data.fluence);
    m.illumination_scale = Some(data.illumination_scale);
    m.noise_free = Some(data.noise_free);
    if let Some(s) = data.seed {
        m.seeds.insert("noise".into(), s);
    }
    let (h, w) = data.geometry.detector_shape();
    let mut flat = Vec::with_capacity(data.frames.len() * h * w);
    for f in &data.frames {
        if f.shape() != (h, w) {
            return Err(Error::ShapeMismatch { expected: (h, w), actual: f.shape() });
        }
        flat.extend(f.data().iter().copied());
    }
    write_container(
        path,
        m,
        &[(
            "frames",
            ArrayData::Real {
                shape: vec![data.frames.len(), h, w],
                data: flat,
            },
        )],
    )
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (m, mut arrays) = read_container(path)?;
    expect_role(&m, Role::Dataset, path)?;
    let geometry = m.geometry.clone().ok_or_else(|| Error::parse(path, "dataset has no geometry"))?;
    geometry.validate()?;
    let frames = match arrays.remove("frames") {
        Some(ArrayData::Real { shape, data }) if shape.len() == 3 => {
            let (k, h, w) = (shape[0], shape[1], shape[2]);
            if (h, w) != geometry.detector_shape() || k != geometry.num_exposures() {
                return Err(Error::parse(path, "frame stack does not match the geometry"));
            }
            data.chunks_exact(h * w)
                .map(|c| RealField::new(Array2::from_shape_vec((h, w), c.to_vec()).expect("shape")))
                .collect()
        }
        _ => return Err(Error::parse(path, "missing 3-D frames array")),
    };
    Ok(Dataset {
        frames,
        geometry,
        fluence: m.fluence.unwrap_or(f64::NAN),
        illumination_scale: m
            .illumination_scale
            .ok_or_else(|| Error::parse(path, "dataset has no illumination scale"))?,
        seed: m.seeds.get("noise").copied(),
        noise_free: m.noise_free.unwrap_or(false),
    })
}

pub fn save_reconstruction(path: &Path, result: &ReconstructionResult, mut manifest: Manifest) -> Result<PathBuf> {
    manifest.role = Role::Reconstruction;
    manifest.pixel_pitch = Some(result.object.pixel_pitch);
    manifest.attributes.insert("iters_run".into(), result.iters_run.into());
    manifest.attributes.insert("converged".into(), result.converged.into());
    let (iters, costs): (Vec<f64>, Vec<f64>) = result.cost_history.iter().map(|&(i, c)| (i as f64, c)).unzip();
    write_container(
        path,
        manifest,
        &[
            ("phase", real2(&result.object.phase)),
            ("absorption", real2(&result.object.absorption)),
            ("history_iter", ArrayData::Real { shape: vec![iters.len()], data: iters }),
            ("history_cost", ArrayData::Real { shape: vec![costs.len()], data: costs }),
        ],
    )
}

pub fn load_reconstruction(path: &Path) -> Result<ReconstructionResult> {
    let (m, mut arrays) = read_container(path)?;
    expect_role(&m, Role::Reconstruction, path)?;
    let object = ObjectModel {
        phase: take_real2(&mut arrays, "phase", path)?,
        absorption: take_real2(&mut arrays, "absorption", path)?,
        pixel_pitch: m.pixel_pitch.unwrap_or(crate::phantom::DEFAULT_PIXEL_PITCH),
    };
    let vec1 = |a: Option<ArrayData>| match a {
        Some(ArrayData::Real { data, .. }) => Ok(data),
        _ => Err(Error::parse(path, "missing cost history")),
    };
    let iters = vec1(arrays.remove("history_iter"))?;
    let costs = vec1(arrays.remove("history_cost"))?;
    Ok(ReconstructionResult {
        object,
        cost_history: iters.into_iter().map(|i| i as usize).zip(costs).collect(),
        iters_run: m.attributes.get("iters_run").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
        converged: m.attributes.get("converged").and_then(|v| v.as_bool()).unwrap_or(false),
    })
}

/// Reads either an object or a reconstruction container as an object.
pub fn load_phase_object(path: &Path) -> Result<ObjectModel> {
    let (m, _) = read_container(path)?;
    match m.role {
        Role::Reconstruction => Ok(load_reconstruction(path)?.object),
        _ => load_object(path),
    }
}

pub fn complex_array(f: &ComplexField) -> ArrayData {
    let (h, w) = f.shape();
    ArrayData::Complex {
        shape: vec![h, w],
        data: f.data().iter().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{add_poisson_noise, scale_to_fluence, simulate, Modality, Scale};
    use crate::phantom::{generate_phantom, make_support_mask};
    use crate::reconstruct::{reconstruct, ReconstructionConfig};

    #[test]
    fn object_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let obj = generate_phantom(3, 64, 0.643, 0.194).unwrap();
        let p = save_object(&dir.path().join("obj"), &obj).unwrap();
        assert!(p.ends_with("obj.json"));
        assert_eq!(load_object(&p).unwrap(), obj);
        let (m, _) = read_container(&p).unwrap();
        assert_eq!(m.arrays[0].dtype, Dtype::F64);
        assert_eq!(m.arrays[1].dtype, Dtype::F32);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let obj = generate_phantom(3, 64, 0.643, 0.194).unwrap();
        let geom = AcquisitionGeometry::nfp(64, 96, 2, 0.3, 3.0, 1, 1e-3).unwrap();
        let clean = scale_to_fluence(&simulate(&obj, &geom).unwrap(), 5.0).unwrap();
        let noisy = add_poisson_noise(&clean, 9).unwrap();
        for ds in [&clean, &noisy] {
            let p = save_dataset(&dir.path().join("d.json"), ds).unwrap();
            assert_eq!(&load_dataset(&p).unwrap(), ds);
        }
        let (m, _) = read_container(&dir.path().join("d")).unwrap();
        assert_eq!(m.arrays[0].dtype, Dtype::F32);
        assert_eq!(m.seeds["noise"], 9);
        let unit = simulate(&obj, &geom).unwrap();
        let p = save_dataset(&dir.path().join("unit"), &unit).unwrap();
        let back = load_dataset(&p).unwrap();
        assert!(back.fluence.is_nan());
        assert_eq!(back.frames, unit.frames);
    }

    #[test]
    fn support_and_reconstruction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let obj = generate_phantom(3, 64, 0.643, 0.194).unwrap();
        let s = make_support_mask(&obj, 4);
        let p = save_support(&dir.path().join("s"), &s).unwrap();
        assert_eq!(load_support(&p).unwrap(), s);

        let geom = AcquisitionGeometry::nfh(64, 16, 1e-3).unwrap();
        let ds = scale_to_fluence(&simulate(&obj, &geom).unwrap(), 10.0).unwrap();
        let cfg = ReconstructionConfig {
            support: Some(s),
            max_iters: 3,
            ..Default::default()
        };
        let res = reconstruct(&ds, &cfg).unwrap();
        let p = save_reconstruction(&dir.path().join("r"), &res, Manifest::new(Role::Reconstruction)).unwrap();
        assert_eq!(load_reconstruction(&p).unwrap(), res);
        assert_eq!(load_phase_object(&p).unwrap(), res.object);
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let obj = generate_phantom(3, 64, 0.643, 0.194).unwrap();
        let p = save_object(&dir.path().join("o"), &obj).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { .. })));
        fs::write(dir.path().join("o.bin"), [0u8; 10]).unwrap();
        assert!(matches!(load_object(&p), Err(Error::Parse { .. })));
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_object(&p), Err(Error::Parse { .. })));
        assert!(matches!(load_object(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn preset_geometry_serializes() {
        let g = AcquisitionGeometry::preset(Modality::Ffp, Scale::Desk);
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<AcquisitionGeometry>(&text).unwrap(), g);
    }
}

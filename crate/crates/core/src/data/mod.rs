//! Multi-domain datasets: in-memory types, the on-disk layout, normalization,
//! augmentation, batch sampling and the synthetic generator.

pub mod augment;
pub mod sampler;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use sampler::{Batch, BatchSampler, SamplerConfig};
pub use synth::{generate_synthetic_domains, DomainTransform, SyntheticDomainSpec};

/// One image with its label mask. The image is `[channels, spatial..]`, the
/// label holds one class index per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Tensor,
    pub label: Vec<u8>,
}

impl Case {
    pub fn new(id: impl Into<String>, image: Tensor, label: Vec<u8>) -> Result<Self> {
        if image.rank() < 2 {
            return Err(Error::shape(format!("case image needs [c, spatial..], got {:?}", image.shape())));
        }
        let vol: usize = image.shape()[1..].iter().product();
        if vol != label.len() {
            return Err(Error::shape(format!(
                "image spatial volume {vol} differs from label length {}",
                label.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn spatial(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    pub fn in_channels(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub modality: String,
    pub cases: Vec<Case>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for case in &self.cases {
            if let Some(&bad) = case.label.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::invalid(format!(
                    "case {} of domain {} has label {bad} outside 0..{num_classes}",
                    case.id, self.domain_id
                )));
            }
        }
        Ok(())
    }

    /// Copy with every image normalized.
    pub fn normalized(&self) -> Self {
        Self {
            domain_id: self.domain_id,
            modality: self.modality.clone(),
            cases: self
                .cases
                .iter()
                .map(|c| Case {
                    id: c.id.clone(),
                    image: normalize(&c.image),
                    label: c.label.clone(),
                })
                .collect(),
        }
    }

    /// Deterministic split into (first `n - n_val`, last `n_val`) cases.
    pub fn split(&self, n_val: usize) -> (Self, Self) {
        let n_val = n_val.min(self.cases.len());
        let cut = self.cases.len() - n_val;
        let part = |cases: &[Case]| Self {
            domain_id: self.domain_id,
            modality: self.modality.clone(),
            cases: cases.to_vec(),
        };
        (part(&self.cases[..cut]), part(&self.cases[cut..]))
    }
}

/// Zero mean, unit population variance over the whole case. A constant image
/// maps to all zeros.
pub fn normalize(image: &Tensor) -> Tensor {
    let n = image.numel().max(1) as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Tensor::zeros(image.shape());
    }
    image.map(|v| ((v as f64 - mean) / std) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: usize,
    pub modality: String,
    pub cases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_domains: usize,
    pub num_classes: usize,
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub domains: Vec<DomainEntry>,
}

impl DatasetManifest {
    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.domain_id).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    shape: Vec<usize>,
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn domain_dir(root: &Path, domain_id: usize) -> PathBuf {
    root.join(format!("domain_{domain_id}"))
}

fn write_array(path: &Path, dtype: &str, shape: &[usize], bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    let sidecar = Sidecar {
        dtype: dtype.into(),
        shape: shape.to_vec(),
    };
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

fn read_array(path: &Path, dtype: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let side_path = path.with_extension("json");
    let side: Sidecar = serde_json::from_slice(&fs::read(&side_path).map_err(|e| dataset_err(&side_path, e.to_string()))?)?;
    if side.dtype != dtype {
        return Err(dataset_err(path, format!("expected dtype {dtype}, sidecar says {}", side.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| dataset_err(path, e.to_string()))?;
    let width = if dtype == "f32" { 4 } else { 1 };
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * width {
        return Err(dataset_err(
            path,
            format!("{} bytes do not match shape {:?}", bytes.len(), side.shape),
        ));
    }
    Ok((side.shape, bytes))
}

/// Write `domain_<k>/{images,labels}/case_<id>.bin` plus sidecars and
/// `manifest.json` under `root`.
pub fn write_dataset(root: &Path, datasets: &[DomainDataset], num_classes: usize) -> Result<DatasetManifest> {
    let first = datasets
        .iter()
        .flat_map(|d| d.cases.first())
        .next()
        .ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let spatial_rank = first.spatial().len();
    let in_channels = first.in_channels();
    let mut domains = Vec::with_capacity(datasets.len());
    for ds in datasets {
        ds.validate(num_classes)?;
        let dir = domain_dir(root, ds.domain_id);
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut ids = Vec::with_capacity(ds.cases.len());
        for case in &ds.cases {
            if case.spatial().len() != spatial_rank || case.in_channels() != in_channels {
                return Err(Error::shape(format!("case {} does not match the dataset layout", case.id)));
            }
            let bytes: Vec<u8> = case.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let name = format!("case_{}.bin", case.id);
            write_array(&dir.join("images").join(&name), "f32", case.image.shape(), &bytes)?;
            write_array(&dir.join("labels").join(&name), "u8", case.spatial(), &case.label)?;
            ids.push(case.id.clone());
        }
        domains.push(DomainEntry {
            domain_id: ds.domain_id,
            modality: ds.modality.clone(),
            cases: ids,
        });
    }
    let manifest = DatasetManifest {
        num_domains: datasets.len(),
        num_classes,
        spatial_rank,
        in_channels,
        domains,
    };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    if m.num_domains != m.domains.len() {
        return Err(dataset_err(&path, "num_domains disagrees with the domain list"));
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<DomainDataset>)> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        let dir = domain_dir(root, entry.domain_id);
        let mut cases = Vec::with_capacity(entry.cases.len());
        for id in &entry.cases {
            let name = format!("case_{id}.bin");
            let img_path = dir.join("images").join(&name);
            let (shape, bytes) = read_array(&img_path, "f32")?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let image = Tensor::from_vec(&shape, values)?;
            let lbl_path = dir.join("labels").join(&name);
            let (lshape, label) = read_array(&lbl_path, "u8")?;
            if lshape.as_slice() != &shape[1..] {
                return Err(dataset_err(&lbl_path, format!("label shape {lshape:?} vs image {shape:?}")));
            }
            cases.push(Case::new(id.clone(), image, label)?);
        }
        let ds = DomainDataset {
            domain_id: entry.domain_id,
            modality: entry.modality.clone(),
            cases,
        };
        ds.validate(manifest.num_classes)
            .map_err(|e| dataset_err(&dir, e.to_string()))?;
        out.push(ds);
    }
    Ok((manifest, out))
}

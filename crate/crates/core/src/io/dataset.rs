//! Case containers and corpus assembly.
//!
//! One directory per case: `image.f32`, `roi.u8`, `tissue.u8`, `segments.u8`,
//! `anomaly.u8` (anomalous cases only), and `manifest.json`. A corpus is a
//! directory of case containers plus `corpus.json` listing each case's
//! directory, split, and label. Loading re-validates every structural
//! invariant, so a tampered manifest or raster is a precondition error.

use crate::error::{Error, Result};
use crate::io::raster;
use crate::phantom::{embed_anomalies, generate_phantom, CaseRecord, PhantomConfig};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub is_anomalous: bool,
    pub gt_segments: Vec<u8>,
}

pub fn save_case<T: Scalar>(dir: &Path, case: &CaseRecord<T>) -> Result<()> {
    case.validate()?;
    fs::create_dir_all(dir)?;
    raster::write_f32(&dir.join("image.f32"), &case.image)?;
    raster::write_u8(&dir.join("roi.u8"), &case.roi)?;
    raster::write_u8(&dir.join("tissue.u8"), &case.tissue)?;
    raster::write_u8(&dir.join("segments.u8"), &case.segments)?;
    if case.is_anomalous {
        raster::write_u8(&dir.join("anomaly.u8"), &case.anomaly)?;
    }
    let manifest = CaseManifest {
        height: case.image.dim().0,
        width: case.image.dim().1,
        seed: case.seed,
        is_anomalous: case.is_anomalous,
        gt_segments: case.gt_segments.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load one case container. The case id is the directory name.
pub fn load_case<T: Scalar>(dir: &Path) -> Result<CaseRecord<T>> {
    let manifest_bytes = fs::read(dir.join("manifest.json")).map_err(|e| {
        Error::precondition(format!("case manifest missing at {}: {e}", dir.display()))
    })?;
    let m: CaseManifest = serde_json::from_slice(&manifest_bytes)?;
    let (h, w) = (m.height, m.width);
    let anomaly_path = dir.join("anomaly.u8");
    let case = CaseRecord {
        id: dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::argument("case directory has no readable name"))?
            .to_string(),
        image: raster::read_f32(&dir.join("image.f32"), h, w)?,
        roi: raster::read_u8(&dir.join("roi.u8"), h, w)?,
        tissue: raster::read_u8(&dir.join("tissue.u8"), h, w)?,
        segments: raster::read_u8(&dir.join("segments.u8"), h, w)?,
        anomaly: if anomaly_path.exists() {
            raster::read_u8(&anomaly_path, h, w)?
        } else {
            Array2::zeros((h, w))
        },
        is_anomalous: m.is_anomalous,
        seed: m.seed,
        gt_segments: m.gt_segments,
    };
    case.validate()?;
    Ok(case)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Case directory name relative to the corpus root.
    pub dir: String,
    pub split: Split,
    pub is_anomalous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub seed: u64,
    pub target_prevalence: f64,
    pub cases: Vec<CorpusEntry>,
}

/// Corpus composition: healthy pretraining split plus a target split with
/// the given anomaly prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub pretrain_cases: usize,
    pub target_cases: usize,
    pub target_prevalence: f64,
    /// Lesions per anomalous case are drawn uniformly from 1..=this.
    pub max_lesions: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { pretrain_cases: 200, target_cases: 40, target_prevalence: 0.3, max_lesions: 3 }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_prevalence) {
            return Err(Error::config("target_prevalence outside [0, 1]"));
        }
        if !(1..=3).contains(&self.max_lesions) {
            return Err(Error::config("max_lesions outside 1..=3"));
        }
        Ok(())
    }

    pub fn anomalous_count(&self) -> usize {
        (self.target_cases as f64 * self.target_prevalence).round() as usize
    }
}

/// Compose a corpus in memory. Pretrain cases come first, then target cases,
/// of which the first `anomalous_count()` carry lesions. The two splits may
/// use different phantom configs, modeling a domain shift between the
/// pretraining source and the adaptation target. Per-case draws come from
/// seed streams keyed by corpus position, so composition is reproducible.
pub fn corpus_cases<T: Scalar>(
    pretrain_phantom: &PhantomConfig,
    target_phantom: &PhantomConfig,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<Vec<(CaseRecord<T>, Split)>> {
    pretrain_phantom.validate()?;
    target_phantom.validate()?;
    spec.validate()?;
    let n_anomalous = spec.anomalous_count();
    let mut cases = Vec::with_capacity(spec.pretrain_cases + spec.target_cases);
    for i in 0..spec.pretrain_cases + spec.target_cases {
        let case_seed: u64 = stream(seed, tag::CORPUS_CASE, &[i as u64]).random();
        let target_idx = i.checked_sub(spec.pretrain_cases);
        let phantom = if target_idx.is_some() { target_phantom } else { pretrain_phantom };
        let mut case: CaseRecord<T> = generate_phantom(phantom, case_seed)?;
        case.id = format!("case_{i:04}");
        if matches!(target_idx, Some(t) if t < n_anomalous) {
            let mut rng = stream(seed, tag::CORPUS_LESION, &[i as u64]);
            let n = rng.random_range(1..=spec.max_lesions);
            case = embed_anomalies(&case, n, &mut rng)?;
        }
        cases.push((case, if target_idx.is_some() { Split::Target } else { Split::Pretrain }));
    }
    Ok(cases)
}

/// Generate and persist a corpus. Regeneration with the same configs and
/// seed is byte-identical.
pub fn generate_corpus<T: Scalar>(
    dir: &Path,
    pretrain_phantom: &PhantomConfig,
    target_phantom: &PhantomConfig,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<CorpusIndex> {
    let cases = corpus_cases::<T>(pretrain_phantom, target_phantom, spec, seed)?;
    fs::create_dir_all(dir)?;
    let entries = cases
        .iter()
        .map(|(case, split)| {
            save_case(&dir.join(&case.id), case)?;
            Ok(CorpusEntry {
                dir: case.id.clone(),
                split: *split,
                is_anomalous: case.is_anomalous,
            })
        })
        .collect::<Result<_>>()?;
    let index = CorpusIndex { seed, target_prevalence: spec.target_prevalence, cases: entries };
    fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<CorpusIndex> {
    let bytes = fs::read(dir.join("corpus.json"))
        .map_err(|e| Error::precondition(format!("corpus index missing at {}: {e}", dir.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load every case of one split, in index order. Each case is re-validated
/// and its label must agree with the index entry.
pub fn load_split<T: Scalar>(dir: &Path, index: &CorpusIndex, split: Split) -> Result<Vec<CaseRecord<T>>> {
    index
        .cases
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let case = load_case(&dir.join(&e.dir))?;
            if case.is_anomalous != e.is_anomalous {
                return Err(Error::precondition(format!(
                    "case {} label disagrees with the corpus index",
                    e.dir
                )));
            }
            Ok(case)
        })
        .collect()
}

/// SHA-256 over every corpus file (sorted relative paths and contents).
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(dir.join(&rel))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().into_owned());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_phantom() -> PhantomConfig {
        PhantomConfig {
            height: 32,
            width: 32,
            cord_halfwidth: (3.0, 4.0),
            wobble_amplitude: (0.5, 1.0),
            wobble_wavelength: (20.0, 40.0),
            csf_margin: (2.0, 3.0),
            n_segments: 4,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn case_containers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let healthy: CaseRecord<f32> = generate_phantom(&tiny_phantom(), 7).unwrap();
        let case =
            embed_anomalies(&healthy, 2, &mut stream(7, "test/case-rt", &[])).unwrap();
        let case_dir = dir.path().join(&case.id);
        save_case(&case_dir, &case).unwrap();
        let back: CaseRecord<f32> = load_case(&case_dir).unwrap();
        assert_eq!(back.id, case.id);
        assert_eq!(back.image, case.image);
        assert_eq!(back.roi, case.roi);
        assert_eq!(back.tissue, case.tissue);
        assert_eq!(back.segments, case.segments);
        assert_eq!(back.anomaly, case.anomaly);
        assert_eq!(back.is_anomalous, case.is_anomalous);
        assert_eq!(back.seed, case.seed);
        assert_eq!(back.gt_segments, case.gt_segments);
    }

    #[test]
    fn healthy_cases_omit_the_anomaly_raster() {
        let dir = tempfile::tempdir().unwrap();
        let case: CaseRecord<f32> = generate_phantom(&tiny_phantom(), 9).unwrap();
        let case_dir = dir.path().join("case_h");
        save_case(&case_dir, &case).unwrap();
        assert!(!case_dir.join("anomaly.u8").exists());
        let back: CaseRecord<f32> = load_case(&case_dir).unwrap();
        assert!(!back.is_anomalous);
        assert!(back.anomaly.iter().all(|&a| a == 0));
    }

    #[test]
    fn tampered_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case: CaseRecord<f32> = generate_phantom(&tiny_phantom(), 11).unwrap();
        let case_dir = dir.path().join("case_t");
        save_case(&case_dir, &case).unwrap();
        let manifest_path = case_dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, text.replace("\"is_anomalous\": false", "\"is_anomalous\": true"))
            .unwrap();
        assert!(matches!(load_case::<f32>(&case_dir), Err(Error::Precondition(_))));
    }

    #[test]
    fn corpus_generation_is_byte_identical_and_splits_correctly() {
        let spec = CorpusSpec {
            pretrain_cases: 3,
            target_cases: 4,
            target_prevalence: 0.5,
            max_lesions: 2,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_corpus::<f32>(a.path(), &tiny_phantom(), &tiny_phantom(), &spec, 33).unwrap();
        let ib = generate_corpus::<f32>(b.path(), &tiny_phantom(), &tiny_phantom(), &spec, 33).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(corpus_digest(a.path()).unwrap(), corpus_digest(b.path()).unwrap());

        let other = tempfile::tempdir().unwrap();
        generate_corpus::<f32>(other.path(), &tiny_phantom(), &tiny_phantom(), &spec, 34).unwrap();
        assert_ne!(corpus_digest(a.path()).unwrap(), corpus_digest(other.path()).unwrap());

        assert_eq!(ia.cases.len(), 7);
        let anomalous = ia.cases.iter().filter(|e| e.is_anomalous).count();
        assert_eq!(anomalous, 2);
        assert!(ia
            .cases
            .iter()
            .filter(|e| e.split == Split::Pretrain)
            .all(|e| !e.is_anomalous));

        let loaded = load_index(a.path()).unwrap();
        assert_eq!(loaded, ia);
        let pretrain: Vec<CaseRecord<f32>> = load_split(a.path(), &loaded, Split::Pretrain).unwrap();
        let target: Vec<CaseRecord<f32>> = load_split(a.path(), &loaded, Split::Target).unwrap();
        assert_eq!(pretrain.len(), 3);
        assert_eq!(target.len(), 4);
        assert_eq!(target.iter().filter(|c| c.is_anomalous).count(), 2);
    }

    #[test]
    fn zero_prevalence_yields_an_all_healthy_corpus() {
        let spec = CorpusSpec {
            pretrain_cases: 1,
            target_cases: 3,
            target_prevalence: 0.0,
            max_lesions: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let index = generate_corpus::<f32>(dir.path(), &tiny_phantom(), &tiny_phantom(), &spec, 5).unwrap();
        assert!(index.cases.iter().all(|e| !e.is_anomalous));
    }
}

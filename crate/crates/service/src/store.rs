//! On-disk volume and label store behind the HTTP service.
//!
//! ```text
//! root/{volume_id}/oct.rfnv                 required
//! root/{volume_id}/octa.rfnv                optional
//! root/{volume_id}/prediction.rfnv          optional, label or probability volume
//! root/{volume_id}/graders/{grader}.rfnv    one label volume per grader
//! root/{volume_id}/graders/{grader}.json    per-B-scan versions
//! root/{volume_id}/merged.rfnv              voting result
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use refnet_core::groundtruth::{self, GraderSet, Resolution};
use refnet_core::volume::{
    codes, load_labels, load_scan, load_volume, save_volume, LabelVolume, Provenance, ScanVolume,
    Volume,
};

use crate::error::ServiceError;
use crate::rle::RleMask;

type Result<T> = std::result::Result<T, ServiceError>;

pub struct VolumeEntry {
    pub id: String,
    pub dir: PathBuf,
    pub oct: ScanVolume,
    pub octa: Option<ScanVolume>,
    pub prediction: Option<LabelVolume>,
}

#[derive(Clone)]
struct GraderLabels {
    labels: LabelVolume,
    versions: Vec<u64>,
}

impl GraderLabels {
    fn complete(&self) -> bool {
        self.versions.iter().all(|&v| v > 0)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    versions: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeSummary {
    pub volume_id: String,
    pub shape: [usize; 3],
    pub modalities: Vec<String>,
    pub has_prediction: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeMeta {
    pub volume_id: String,
    pub shape: [usize; 3],
    pub spacing_um: [f64; 3],
    pub modalities: Vec<String>,
    pub has_prediction: bool,
    pub has_merged: bool,
    pub graders: Vec<GraderStatus>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraderStatus {
    pub grader_id: String,
    pub graded_bscans: usize,
    pub complete: bool,
}

/// One label row as served over HTTP.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelRow {
    pub volume_id: String,
    pub grader_id: String,
    pub bscan_index: usize,
    pub version: u64,
    pub mask: RleMask,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MergeSummary {
    /// `[bscan, row, column]` of every unresolved pixel.
    pub unresolved: Vec<[usize; 3]>,
    pub count: usize,
}

pub struct Store {
    root: PathBuf,
    volumes: BTreeMap<String, Arc<VolumeEntry>>,
    labels: RwLock<HashMap<(String, String), Arc<GraderLabels>>>,
    merged: RwLock<HashMap<String, Arc<LabelVolume>>>,
    writes: Mutex<()>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !s.starts_with('.')
}

fn sidecar_path(dir: &Path, grader: &str) -> PathBuf {
    dir.join("graders").join(format!("{grader}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::File::open(&tmp)?.sync_all()?;
    fs::rename(&tmp, path)
}

impl Store {
    /// Loads every volume directory under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let mut volumes = BTreeMap::new();
        let mut labels = HashMap::new();
        let mut merged = HashMap::new();
        let entries = fs::read_dir(&root).map_err(|e| refnet_core::Error::io(&root, e))?;
        for entry in entries {
            let dir = entry.map_err(|e| refnet_core::Error::io(&root, e))?.path();
            if !dir.join("oct.rfnv").is_file() {
                continue;
            }
            let oct = load_scan(dir.join("oct.rfnv"))?;
            let id = oct.volume_id.clone();
            let octa = match dir.join("octa.rfnv") {
                p if p.is_file() => Some(load_scan(p)?),
                _ => None,
            };
            let prediction = match dir.join("prediction.rfnv") {
                p if p.is_file() => Some(match load_volume(p)? {
                    Volume::Label(l) => l,
                    Volume::Probability(p) => p.argmax(),
                    Volume::Scan(_) => {
                        return Err(ServiceError::Unprocessable(format!("{id}: prediction is a scan volume")))
                    }
                }),
                _ => None,
            };
            let graders_dir = dir.join("graders");
            if graders_dir.is_dir() {
                for g in fs::read_dir(&graders_dir).map_err(|e| refnet_core::Error::io(&graders_dir, e))? {
                    let p = g.map_err(|e| refnet_core::Error::io(&graders_dir, e))?.path();
                    if p.extension().is_some_and(|e| e == "rfnv") {
                        let l = load_labels(&p)?;
                        let grader = l.grader_id.clone().unwrap_or_default();
                        let side = sidecar_path(&dir, &grader);
                        let versions = match fs::read(&side) {
                            Ok(b) => serde_json::from_slice::<Sidecar>(&b)
                                .map_err(|e| ServiceError::Unprocessable(format!("{}: {e}", side.display())))?
                                .versions,
                            Err(_) => vec![0; l.shape.n_bscans],
                        };
                        labels.insert((id.clone(), grader), Arc::new(GraderLabels { labels: l, versions }));
                    }
                }
            }
            if dir.join("merged.rfnv").is_file() {
                merged.insert(id.clone(), Arc::new(load_labels(dir.join("merged.rfnv"))?));
            }
            volumes.insert(
                id.clone(),
                Arc::new(VolumeEntry {
                    id,
                    dir,
                    oct,
                    octa,
                    prediction,
                }),
            );
        }
        Ok(Self {
            root,
            volumes,
            labels: RwLock::new(labels),
            merged: RwLock::new(merged),
            writes: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn volume(&self, id: &str) -> Result<Arc<VolumeEntry>> {
        self.volumes
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown volume {id}")))
    }

    pub fn list(&self) -> Vec<VolumeSummary> {
        self.volumes
            .values()
            .map(|v| VolumeSummary {
                volume_id: v.id.clone(),
                shape: v.oct.shape.as_array(),
                modalities: modalities(v),
                has_prediction: v.prediction.is_some(),
            })
            .collect()
    }

    pub fn meta(&self, id: &str) -> Result<VolumeMeta> {
        let v = self.volume(id)?;
        let labels = self.labels.read().unwrap();
        let mut graders: Vec<GraderStatus> = labels
            .iter()
            .filter(|((vid, _), _)| vid == id)
            .map(|((_, g), l)| GraderStatus {
                grader_id: g.clone(),
                graded_bscans: l.versions.iter().filter(|&&x| x > 0).count(),
                complete: l.complete(),
            })
            .collect();
        graders.sort_by(|a, b| a.grader_id.cmp(&b.grader_id));
        Ok(VolumeMeta {
            volume_id: v.id.clone(),
            shape: v.oct.shape.as_array(),
            spacing_um: v.oct.spacing.as_array(),
            modalities: modalities(&v),
            has_prediction: v.prediction.is_some(),
            has_merged: self.merged.read().unwrap().contains_key(id),
            graders,
        })
    }

    fn check_bscan(v: &VolumeEntry, index: usize) -> Result<()> {
        if index >= v.oct.shape.n_bscans {
            return Err(ServiceError::NotFound(format!(
                "B-scan {index} out of range for {} (has {})",
                v.id, v.oct.shape.n_bscans
            )));
        }
        Ok(())
    }

    fn check_grader(grader: &str) -> Result<()> {
        if !valid_name(grader) {
            return Err(ServiceError::BadRequest(format!("invalid grader id {grader:?}")));
        }
        Ok(())
    }

    fn row(volume_id: &str, grader: &str, index: usize, version: u64, labels: &LabelVolume) -> LabelRow {
        let s = labels.shape;
        LabelRow {
            volume_id: volume_id.to_string(),
            grader_id: grader.to_string(),
            bscan_index: index,
            version,
            mask: RleMask::encode(s.depth, s.width, labels.bscan(index)),
        }
    }

    /// Current labels of one grader on one B-scan; all background at
    /// version 0 before the first write.
    pub fn get_labels(&self, id: &str, grader: &str, index: usize) -> Result<LabelRow> {
        let v = self.volume(id)?;
        Self::check_grader(grader)?;
        Self::check_bscan(&v, index)?;
        let current = self.labels.read().unwrap().get(&(id.to_string(), grader.to_string())).cloned();
        Ok(match current {
            Some(g) => Self::row(id, grader, index, g.versions[index], &g.labels),
            None => {
                let s = v.oct.shape;
                LabelRow {
                    volume_id: id.to_string(),
                    grader_id: grader.to_string(),
                    bscan_index: index,
                    version: 0,
                    mask: RleMask::encode(s.depth, s.width, &vec![codes::BACKGROUND; s.bscan_len()]),
                }
            }
        })
    }

    /// Replaces one B-scan of a grader's labels if `expected_version` is
    /// current. The write is on disk before this returns.
    pub fn put_labels(
        &self,
        id: &str,
        grader: &str,
        index: usize,
        mask: &RleMask,
        expected_version: u64,
    ) -> Result<LabelRow> {
        let v = self.volume(id)?;
        Self::check_grader(grader)?;
        Self::check_bscan(&v, index)?;
        let s = v.oct.shape;
        if mask.shape != [s.depth, s.width] {
            return Err(ServiceError::Unprocessable(format!(
                "mask shape {:?} does not match the B-scan [{}, {}]",
                mask.shape, s.depth, s.width
            )));
        }
        let row_codes = mask.decode(false).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;

        let _guard = self.writes.lock().unwrap();
        let key = (id.to_string(), grader.to_string());
        let current = self.labels.read().unwrap().get(&key).cloned();
        let mut next = match current {
            Some(g) => (*g).clone(),
            None => GraderLabels {
                labels: new_grader_volume(&v, grader),
                versions: vec![0; s.n_bscans],
            },
        };
        let have = next.versions[index];
        if have != expected_version {
            return Err(ServiceError::Conflict(format!(
                "version conflict: expected {expected_version}, current {have}"
            )));
        }
        next.labels.bscan_mut(index).copy_from_slice(&row_codes);
        next.versions[index] = have + 1;

        let graders_dir = v.dir.join("graders");
        fs::create_dir_all(&graders_dir).map_err(|e| refnet_core::Error::io(&graders_dir, e))?;
        save_volume(&Volume::Label(next.labels.clone()), graders_dir.join(format!("{grader}.rfnv")))?;
        let side = sidecar_path(&v.dir, grader);
        let bytes = serde_json::to_vec(&Sidecar {
            versions: next.versions.clone(),
        })
        .expect("sidecar serializes");
        write_atomic(&side, &bytes).map_err(|e| refnet_core::Error::io(&side, e))?;

        let row = Self::row(id, grader, index, next.versions[index], &next.labels);
        self.labels.write().unwrap().insert(key, Arc::new(next));
        Ok(row)
    }

    /// Votes the three complete grader volumes and persists the result.
    pub fn merge(&self, id: &str) -> Result<MergeSummary> {
        let v = self.volume(id)?;
        let _guard = self.writes.lock().unwrap();
        let mut complete: Vec<(String, Arc<GraderLabels>)> = self
            .labels
            .read()
            .unwrap()
            .iter()
            .filter(|((vid, _), g)| vid == id && g.complete())
            .map(|((_, g), l)| (g.clone(), l.clone()))
            .collect();
        complete.sort_by(|a, b| a.0.cmp(&b.0));
        if complete.len() != 3 {
            return Err(ServiceError::Conflict(format!(
                "merge needs exactly three completely graded label sets, found {}",
                complete.len()
            )));
        }
        let set = GraderSet::new(complete.iter().map(|(_, g)| g.labels.clone()).collect())?;
        let (mut merged, _) = groundtruth::vote_merge(&set);
        merged.volume_id = v.id.clone();
        merged.eye_id = v.oct.eye_id.clone();
        self.persist_merged(&v, merged)
    }

    /// Applies consensus decisions to the merged volume.
    pub fn resolve(&self, id: &str, resolutions: &[Resolution]) -> Result<MergeSummary> {
        let v = self.volume(id)?;
        let _guard = self.writes.lock().unwrap();
        let merged = self
            .merged
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::Conflict(format!("{id} has not been merged yet")))?;
        let resolved = groundtruth::resolve(&merged, resolutions).map_err(|e| match e {
            refnet_core::Error::Resolution(m) => ServiceError::Unprocessable(m),
            other => other.into(),
        })?;
        self.persist_merged(&v, resolved)
    }

    fn persist_merged(&self, v: &VolumeEntry, merged: LabelVolume) -> Result<MergeSummary> {
        save_volume(&Volume::Label(merged.clone()), v.dir.join("merged.rfnv"))?;
        let unresolved = groundtruth::unresolved_voxels(&merged);
        self.merged.write().unwrap().insert(v.id.clone(), Arc::new(merged));
        Ok(MergeSummary {
            count: unresolved.len(),
            unresolved,
        })
    }

    pub fn merged_summary(&self, id: &str) -> Result<MergeSummary> {
        self.volume(id)?;
        let merged = self
            .merged
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("{id} has not been merged yet")))?;
        let unresolved = groundtruth::unresolved_voxels(&merged);
        Ok(MergeSummary {
            count: unresolved.len(),
            unresolved,
        })
    }

    pub fn merged_row(&self, id: &str, index: usize) -> Result<RleMask> {
        let v = self.volume(id)?;
        Self::check_bscan(&v, index)?;
        let merged = self
            .merged
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("{id} has not been merged yet")))?;
        let s = merged.shape;
        Ok(RleMask::encode(s.depth, s.width, merged.bscan(index)))
    }

    pub fn prediction_row(&self, id: &str, index: usize) -> Result<RleMask> {
        let v = self.volume(id)?;
        Self::check_bscan(&v, index)?;
        let p = v
            .prediction
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound(format!("{id} has no prediction")))?;
        let s = p.shape;
        Ok(RleMask::encode(s.depth, s.width, p.bscan(index)))
    }
}

fn modalities(v: &VolumeEntry) -> Vec<String> {
    let mut m = vec!["oct".to_string()];
    if v.octa.is_some() {
        m.push("octa".into());
        m.push("fused".into());
    }
    m
}

fn new_grader_volume(v: &VolumeEntry, grader: &str) -> LabelVolume {
    let mut l = LabelVolume::filled(v.oct.shape, v.oct.spacing, Provenance::Grader, &v.id, codes::BACKGROUND);
    l.eye_id = v.oct.eye_id.clone();
    l.grader_id = Some(grader.to_string());
    l
}

/// Lays out a volume directory the store can open.
pub fn write_volume_dir(
    root: &Path,
    oct: &ScanVolume,
    octa: Option<&ScanVolume>,
    prediction: Option<&LabelVolume>,
) -> refnet_core::Result<PathBuf> {
    let dir = root.join(&oct.volume_id);
    fs::create_dir_all(&dir).map_err(|e| refnet_core::Error::io(&dir, e))?;
    save_volume(&Volume::Scan(oct.clone()), dir.join("oct.rfnv"))?;
    if let Some(a) = octa {
        save_volume(&Volume::Scan(a.clone()), dir.join("octa.rfnv"))?;
    }
    if let Some(p) = prediction {
        save_volume(&Volume::Label(p.clone()), dir.join("prediction.rfnv"))?;
    }
    Ok(dir)
}

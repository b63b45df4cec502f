use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_pair, SegMask, Slice};
use crate::error::{Error, Result};

pub const HEADER_BYTES: usize = 16;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_U8: u32 = 2;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    /// Unlabeled target slices used for adaptation.
    TargetTrain,
    /// Annotations of the target-train slices; read only by the target-only ceiling.
    TargetOracle,
    TargetTest,
}

impl Role {
    pub fn carries_masks(self) -> bool {
        self != Role::TargetTrain
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slice_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub role: Role,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.patient_id.is_empty() {
                return Err(Error::Split(format!("entry {} has no patient_id", e.slice_path)));
            }
            match (self.role.carries_masks(), &e.mask_path) {
                (false, Some(_)) => {
                    return Err(Error::Config(format!(
                        "target-train entry {} carries a mask path; target-train data must be unlabeled",
                        e.slice_path
                    )))
                }
                (true, None) => {
                    return Err(Error::Config(format!("{:?} entry {} has no mask path", self.role, e.slice_path)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.patient_id.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub slice: Slice,
    pub mask: Option<SegMask>,
    pub patient_id: String,
}

/// In-memory dataset: one role, slices with optional masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Patient-level split into `(train, test)`, both keeping this role.
    pub fn split(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        let counts = patient_counts(self.samples.iter().map(|s| s.patient_id.as_str()));
        let train = partition_patients(&counts, train_fraction, self.seed)?;
        let (a, b): (Vec<Sample>, Vec<Sample>) =
            self.samples.iter().cloned().partition(|s| train.contains(&s.patient_id));
        let make = |samples| Dataset { role: self.role, seed: self.seed, samples };
        Ok((make(a), make(b)))
    }

    /// Same slices with masks removed, for the unlabeled training role.
    pub fn unlabeled(&self) -> Dataset {
        let samples = self.samples.iter().map(|s| Sample { mask: None, ..s.clone() }).collect();
        Dataset { role: Role::TargetTrain, seed: self.seed, samples }
    }

    pub fn with_role(mut self, role: Role) -> Dataset {
        self.role = role;
        self
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.patient_id.as_str()).collect()
    }
}

fn patient_counts<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<(String, usize)> {
    let mut m: BTreeMap<&str, usize> = BTreeMap::new();
    for id in ids {
        *m.entry(id).or_default() += 1;
    }
    m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Chooses the train patients: a non-empty proper subset whose slice share is
/// closest to `train_fraction`. Among equally close subsets the choice depends
/// only on `seed`.
pub fn partition_patients(counts: &[(String, usize)], train_fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    if counts.len() < 2 {
        return Err(Error::Split(format!("{} patient(s) cannot be split at patient level", counts.len())));
    }
    if let Some((id, _)) = counts.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Split(format!("patient {id} has no slices")));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: usize = counts.iter().map(|(_, n)| n).sum();

    // Subset-sum table: reach[i][s] = some subset of the first i patients sums to s.
    let mut reach = vec![vec![false; total + 1]; order.len() + 1];
    reach[0][0] = true;
    for (i, &p) in order.iter().enumerate() {
        let n = counts[p].1;
        for s in 0..=total {
            reach[i + 1][s] = reach[i][s] || (s >= n && reach[i][s - n]);
        }
    }
    let score = |s: usize| (s as f64 / total as f64 - train_fraction).abs();
    let best = (1..total)
        .filter(|&s| reach[order.len()][s])
        .min_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)))
        .ok_or_else(|| Error::Split("no proper patient subset exists".into()))?;

    let mut chosen = BTreeSet::new();
    let mut s = best;
    for i in (0..order.len()).rev() {
        if !reach[i][s] {
            let p = order[i];
            chosen.insert(counts[p].0.clone());
            s -= counts[p].1;
        }
    }
    debug_assert_eq!(s, 0);
    Ok(chosen)
}

/// Splits a manifest by patient into `(train, test)` manifests of the same role.
pub fn split_patient_level(
    manifest: &DatasetManifest,
    train_fraction: f64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let counts = patient_counts(manifest.entries.iter().map(|e| e.patient_id.as_str()));
    let train = partition_patients(&counts, train_fraction, manifest.seed)?;
    let (a, b): (Vec<_>, Vec<_>) = manifest.entries.iter().cloned().partition(|e| train.contains(&e.patient_id));
    let make = |entries| DatasetManifest { entries, ..manifest.clone() };
    let (ta, tb) = (make(a), make(b));
    if !ta.patients().is_disjoint(&tb.patients()) {
        return Err(Error::Split("patient sets overlap after split".into()));
    }
    Ok((ta, tb))
}

fn encode(h: usize, w: usize, tag: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len());
    for v in [h as u32, w as u32, tag, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(rel);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(&path, bytes)?;
    Ok(sha256_hex(bytes))
}

/// Writes slices, masks and `manifest.json` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let (h, w) = ds.samples.first().map(|s| (s.slice.height(), s.slice.width())).unwrap_or((0, 0));
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        if (s.slice.height(), s.slice.width()) != (h, w) {
            return Err(Error::Shape(format!("sample {i} is {}x{}, dataset is {h}x{w}", s.slice.height(), s.slice.width())));
        }
        let slice_path = format!("slices/{i:05}.f32");
        let bytes: Vec<u8> = s.slice.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
        let slice_sha256 = Some(write_file(dir, &slice_path, &encode(h, w, DTYPE_F32, &bytes))?);
        let (mask_path, mask_sha256) = match &s.mask {
            Some(m) => {
                check_pair(&s.slice, m)?;
                let p = format!("masks/{i:05}.u8");
                let sum = write_file(dir, &p, &encode(h, w, DTYPE_U8, m.labels()))?;
                (Some(p), Some(sum))
            }
            None => (None, None),
        };
        entries.push(ManifestEntry { slice_path, mask_path, patient_id: s.patient_id.clone(), slice_sha256, mask_sha256 });
    }
    let manifest = DatasetManifest { role: ds.role, height: h, width: w, seed: ds.seed, entries };
    manifest.validate()?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| missing_or_io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt { path: path.clone(), reason: e.to_string() })?;
    m.validate()?;
    Ok(m)
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn read_payload(dir: &Path, rel: &str, sha: Option<&str>, want: (usize, usize), tag: u32) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| missing_or_io(&path, e))?;
    if let Some(sha) = sha {
        if sha256_hex(&bytes) != sha {
            return Err(Error::Corrupt { path, reason: "checksum mismatch".into() });
        }
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Corrupt { path, reason: "truncated header".into() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, t) = (word(0), word(1), word(2) as u32);
    if (h, w) != want {
        return Err(Error::Shape(format!(
            "{}: manifest declares {}x{} but payload is {h}x{w}",
            path.display(),
            want.0,
            want.1
        )));
    }
    if t != tag {
        return Err(Error::Corrupt { path, reason: format!("dtype tag {t}, expected {tag}") });
    }
    let elem = if tag == DTYPE_F32 { 4 } else { 1 };
    if bytes.len() != HEADER_BYTES + h * w * elem {
        return Err(Error::Corrupt { path, reason: format!("payload of {} bytes for {h}x{w}", bytes.len() - HEADER_BYTES) });
    }
    Ok((path, bytes[HEADER_BYTES..].to_vec()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let dims = (m.height, m.width);
    let mut samples = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let (path, raw) = read_payload(dir, &e.slice_path, e.slice_sha256.as_deref(), dims, DTYPE_F32)?;
        let px = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let slice =
            Slice::new(m.height, m.width, px).map_err(|err| Error::Corrupt { path, reason: err.to_string() })?;
        let mask = match &e.mask_path {
            Some(p) => {
                let (path, raw) = read_payload(dir, p, e.mask_sha256.as_deref(), dims, DTYPE_U8)?;
                Some(SegMask::new(m.height, m.width, raw).map_err(|err| Error::Corrupt { path, reason: err.to_string() })?)
            }
            None => None,
        };
        samples.push(Sample { slice, mask, patient_id: e.patient_id.clone() });
    }
    Ok(Dataset { role: m.role, seed: m.seed, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(v: &[usize]) -> Vec<(String, usize)> {
        v.iter().enumerate().map(|(i, &n)| (format!("p{i}"), n)).collect()
    }

    #[test]
    fn even_patients_split_exactly() {
        let train = partition_patients(&counts(&[20; 10]), 0.7, 3).unwrap();
        assert_eq!(train.len(), 7);
    }

    /// Exhaustive search over all patient subsets.
    #[test]
    fn uneven_patients_match_brute_force() {
        for sizes in [vec![10, 10, 80], vec![3, 9, 4, 17, 1], vec![50, 1, 1, 1]] {
            let c = counts(&sizes);
            let total: usize = sizes.iter().sum();
            let n = sizes.len();
            let best = (1..(1u32 << n) - 1)
                .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| sizes[i]).sum::<usize>())
                .map(|s| (s as f64 / total as f64 - 0.7).abs())
                .fold(f64::INFINITY, f64::min);
            for seed in 0..5 {
                let train = partition_patients(&c, 0.7, seed).unwrap();
                let s: usize = c.iter().filter(|(id, _)| train.contains(id)).map(|(_, n)| n).sum();
                assert!(((s as f64 / total as f64 - 0.7).abs() - best).abs() < 1e-12, "{sizes:?}");
                assert!(!train.is_empty() && train.len() < n);
            }
        }
    }

    #[test]
    fn single_patient_and_bad_fraction_rejected() {
        assert!(matches!(partition_patients(&counts(&[5]), 0.7, 0), Err(Error::Split(_))));
        assert!(partition_patients(&counts(&[5, 5]), 1.0, 0).is_err());
        assert!(partition_patients(&counts(&[5, 5]), 0.0, 0).is_err());
    }
}

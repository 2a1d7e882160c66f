//! Image catalogs with labels, pair linkage and content hashes.
//!
//! A manifest file is line-delimited JSON: the first line is a header holding
//! the root directory and the metadata block, each following line one
//! [`ImageRecord`]. Record paths are relative to the root and use `/`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, ContainerFormat};
use crate::seed;

const FORMAT_TAG: &str = "fakeprint-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_target(self) -> f32 {
        self as u8 as f32
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(Error::InvalidArgument(format!("label must be real or fake, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width_px: u32,
    pub height_px: u32,
    pub container_format: ContainerFormat,
    pub label: Label,
    pub source_tag: String,
    /// On a fake produced by reconstruction, the id of its real source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    manifest: String,
    root: PathBuf,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub meta: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            root: root.into(),
            records: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(record.path.replace('/', std::path::MAIN_SEPARATOR_STR))
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<imaging::Image> {
        imaging::load(&self.resolve(record))
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            manifest: FORMAT_TAG.to_string(),
            root: self.root.clone(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(mut lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let first = lines.next().ok_or_else(|| Error::parse("manifest", "empty file"))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::parse("manifest header", e))?;
        if header.manifest != FORMAT_TAG {
            return Err(Error::parse("manifest header", format!("unknown format {:?}", header.manifest)));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ImageRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse("manifest record", format!("line {}: {e}", i + 2)))?;
            records.push(r);
        }
        let m = DatasetManifest {
            root: header.root,
            records,
            meta: header.meta,
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(self.to_jsonl().as_bytes()).at(path)
    }

    /// Reads a manifest; a relative root is taken relative to the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).at(path)?;
        let lines = BufReader::new(f).lines().map(|l| l.at(path));
        let mut m = Self::from_lines(lines)?;
        if m.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            m.root = base.join(&m.root);
        }
        Ok(m)
    }

    /// Digest of the serialized manifest, used as dataset provenance.
    pub fn content_hash(&self) -> String {
        seed::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::parse("manifest", format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(())
    }

    /// `(real index, fake index)` for every fake whose `pair_id` resolves to a real record.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let reals: HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == Label::Real)
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == Label::Fake)
            .filter_map(|(i, r)| reals.get(r.pair_id.as_deref()?).map(|&ri| (ri, i)))
            .collect()
    }

    /// Same as [`pairs`](Self::pairs) but fails when there is nothing to pair.
    pub fn require_pairs(&self) -> Result<Vec<(usize, usize)>> {
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Err(Error::Unpaired(format!("no linked real/fake pairs among {} records", self.len())));
        }
        Ok(pairs)
    }

    /// Groups records that must stay together: each real with the fakes
    /// linked to it, and every other record alone. Ordered by first member.
    pub fn units(&self) -> Vec<Vec<usize>> {
        let by_id: HashMap<&str, usize> = self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let mut owner: Vec<usize> = (0..self.len()).collect();
        for (i, r) in self.records.iter().enumerate() {
            if r.label == Label::Fake {
                if let Some(&ri) = r.pair_id.as_deref().and_then(|p| by_id.get(p)) {
                    if self.records[ri].label == Label::Real {
                        owner[i] = ri;
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &o) in owner.iter().enumerate() {
            groups.entry(o).or_default().push(i);
        }
        let mut units: Vec<Vec<usize>> = groups.into_values().collect();
        units.iter_mut().for_each(|u| u.sort_unstable());
        units.sort_by_key(|u| u[0]);
        units
    }

    /// New manifest holding the given records (kept in original order).
    pub fn select(&self, indices: &[usize]) -> DatasetManifest {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        DatasetManifest {
            root: self.root.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&ImageRecord) -> bool) -> DatasetManifest {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.records[i])).collect();
        self.select(&idx)
    }

    /// Combines manifests under their deepest common root directory.
    /// Roots must be absolute (or all identical).
    pub fn merge(parts: &[&DatasetManifest]) -> Result<DatasetManifest> {
        let first = parts.first().ok_or_else(|| Error::Empty("no manifests to merge".into()))?;
        let root = if parts.iter().all(|p| p.root == first.root) {
            first.root.clone()
        } else {
            common_ancestor(parts.iter().map(|p| p.root.as_path()))?
        };
        let mut merged = DatasetManifest::new(root.clone());
        for p in parts {
            let rel_root = p.root.strip_prefix(&root).expect("common ancestor");
            for r in &p.records {
                let mut rec = r.clone();
                rec.path = join_rel(rel_root, &r.path);
                merged.records.push(rec);
            }
            for (k, v) in &p.meta {
                merged.meta.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
        merged.check_unique_ids()?;
        Ok(merged)
    }
}

fn join_rel(prefix: &Path, rel: &str) -> String {
    let mut parts: Vec<String> = prefix
        .components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    parts.push(rel.to_string());
    parts.join("/")
}

fn common_ancestor<'a>(mut paths: impl Iterator<Item = &'a Path>) -> Result<PathBuf> {
    let first = paths.next().expect("non-empty");
    if !first.is_absolute() {
        return Err(Error::InvalidArgument(format!(
            "cannot merge manifests with relative root {}",
            first.display()
        )));
    }
    let mut common: Vec<Component> = first.components().collect();
    for p in paths {
        if !p.is_absolute() {
            return Err(Error::InvalidArgument(format!(
                "cannot merge manifests with relative root {}",
                p.display()
            )));
        }
        let comps: Vec<Component> = p.components().collect();
        let n = common.iter().zip(&comps).take_while(|(a, b)| a == b).count();
        common.truncate(n);
    }
    Ok(common.iter().collect())
}

pub(crate) fn relative_path_string(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Builds the record for an image file that already exists on disk.
pub fn describe_file(
    root: &Path,
    path: &Path,
    id: String,
    label: Label,
    source_tag: &str,
    pair_id: Option<String>,
) -> Result<ImageRecord> {
    let bytes = std::fs::read(path).at(path)?;
    let img = imaging::decode(&bytes)?;
    let container_format = ContainerFormat::sniff(&bytes)
        .or_else(|| ContainerFormat::from_extension(path))
        .ok_or_else(|| Error::parse("image", format!("unrecognized container for {}", path.display())))?;
    Ok(ImageRecord {
        id,
        path: relative_path_string(root, path),
        width_px: img.width(),
        height_px: img.height(),
        container_format,
        label,
        source_tag: source_tag.to_string(),
        pair_id,
        content_hash: seed::sha256_hex(&bytes),
    })
}

#[derive(Debug)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Catalogs every `.png`, `.jpg`/`.jpeg` and `.webp` below `root`, ordered by
/// relative path. Files that fail to decode are skipped with a warning.
pub fn ingest_directory(root: &Path, label: Label, source_tag: &str) -> Result<Ingested> {
    let meta = std::fs::metadata(root).at(root)?;
    if !meta.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let root = root.canonicalize().at(root)?;
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(&root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.clone());
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && ContainerFormat::from_extension(entry.path()).is_some() {
            files.push(entry.into_path());
        }
    }
    files.sort_by_key(|p| relative_path_string(&root, p));

    let mut manifest = DatasetManifest::new(root.clone());
    manifest.meta.insert("source_tag".into(), source_tag.into());
    let mut warnings = Vec::new();
    for path in files {
        let rel = relative_path_string(&root, &path);
        let id = format!("{source_tag}:{rel}");
        match describe_file(&root, &path, id, label, source_tag, None) {
            Ok(r) => manifest.records.push(r),
            Err(e) => {
                let msg = format!("skipping {}: {e}", path.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(Ingested { manifest, warnings })
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidArgument(format!("split fractions must be positive: {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

fn partition_units(units: &mut [Vec<usize>], fractions: &[f64], rng: &mut impl rand::Rng, out: &mut [Vec<usize>]) {
    units.shuffle(rng);
    let n = units.len();
    let mut start = 0;
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        for u in &units[start..end] {
            out[k].extend_from_slice(u);
        }
        start = end;
    }
}

/// Seeded partition into disjoint manifests. Pair groups (a real and its
/// linked fakes) are kept whole, so fractions apply to groups.
pub fn split_manifest(m: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    check_fractions(fractions)?;
    let mut units = m.units();
    let mut rng = seed::rng(seed, "split");
    let mut out = vec![Vec::new(); fractions.len()];
    partition_units(&mut units, fractions, &mut rng, &mut out);
    Ok(out.iter().map(|idx| m.select(idx)).collect())
}

/// Like [`split_manifest`], but partitions each `source_tag` separately so
/// every split keeps the source proportions. A group's tag is that of its
/// first record.
pub fn split_manifest_stratified(m: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    check_fractions(fractions)?;
    let mut by_tag: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    for u in m.units() {
        by_tag.entry(m.records[u[0]].source_tag.clone()).or_default().push(u);
    }
    let mut out = vec![Vec::new(); fractions.len()];
    for (tag, mut units) in by_tag {
        let mut rng = seed::rng(seed, &format!("split/{tag}"));
        partition_units(&mut units, fractions, &mut rng, &mut out);
    }
    Ok(out.iter().map(|idx| m.select(idx)).collect())
}

/// Draws `count` pair groups (or single records) without replacement.
pub fn sample_units(m: &DatasetManifest, count: usize, seed: u64) -> Result<DatasetManifest> {
    let mut units = m.units();
    if count > units.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {count} groups but the manifest has {}",
            units.len()
        )));
    }
    let mut rng = seed::rng(seed, "sample-units");
    units.shuffle(&mut rng);
    let idx: Vec<usize> = units[..count].iter().flatten().copied().collect();
    Ok(m.select(&idx))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    Missing { id: String, path: String },
    Undecodable { id: String, detail: String },
    HashMismatch { id: String, expected: String, actual: String },
    DimensionMismatch { id: String, recorded: (u32, u32), actual: (u32, u32) },
    BrokenPairLink { id: String, pair_id: String },
    PairTargetNotReal { id: String, pair_id: String },
    SharedPairTarget { pair_id: String, fakes: Vec<String> },
    PairDimensionMismatch { real: String, fake: String },
}

/// Checks hashes and dimensions against disk and the integrity of pair links.
pub fn verify_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for r in &m.records {
        if !seen.insert(r.id.as_str()) {
            out.push(Violation::DuplicateId { id: r.id.clone() });
        }
    }
    for r in &m.records {
        let path = m.resolve(r);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                out.push(Violation::Missing {
                    id: r.id.clone(),
                    path: path.display().to_string(),
                });
                continue;
            }
        };
        let actual = seed::sha256_hex(&bytes);
        if actual != r.content_hash {
            out.push(Violation::HashMismatch {
                id: r.id.clone(),
                expected: r.content_hash.clone(),
                actual,
            });
        }
        match image::ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| e.to_string())
            .and_then(|rd| rd.into_dimensions().map_err(|e| e.to_string()))
        {
            Ok(dims) if dims != (r.width_px, r.height_px) => out.push(Violation::DimensionMismatch {
                id: r.id.clone(),
                recorded: (r.width_px, r.height_px),
                actual: dims,
            }),
            Ok(_) => {}
            Err(detail) => out.push(Violation::Undecodable { id: r.id.clone(), detail }),
        }
    }

    let by_id: HashMap<&str, &ImageRecord> = m.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut targets: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in m.records.iter().filter(|r| r.label == Label::Fake) {
        let Some(pid) = r.pair_id.as_deref() else { continue };
        match by_id.get(pid) {
            None => out.push(Violation::BrokenPairLink {
                id: r.id.clone(),
                pair_id: pid.to_string(),
            }),
            Some(real) if real.label != Label::Real => out.push(Violation::PairTargetNotReal {
                id: r.id.clone(),
                pair_id: pid.to_string(),
            }),
            Some(real) => {
                targets.entry(pid).or_default().push(r.id.clone());
                if (real.width_px, real.height_px) != (r.width_px, r.height_px) {
                    out.push(Violation::PairDimensionMismatch {
                        real: real.id.clone(),
                        fake: r.id.clone(),
                    });
                }
            }
        }
    }
    for (pid, fakes) in targets {
        if fakes.len() > 1 {
            out.push(Violation::SharedPairTarget {
                pair_id: pid.to_string(),
                fakes,
            });
        }
    }
    out
}

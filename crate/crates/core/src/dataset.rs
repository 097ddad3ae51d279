//! Manifests, writer-independent splits, verification pairs and the five
//! reference/target test setups.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_signature, save_signature, Polarity, SignatureImage, Source};

/// Pair counts of the original study, kept for documentation. They describe
/// data that is not distributed and are never asserted.
pub mod reference_counts {
    /// Reference vs unstamped target pool: (total, match, mismatch).
    pub const CUSTOM_UNSTAMPED_PAIRS: (usize, usize, usize) = (2609, 1001, 1608);
    /// Reference vs stamped target pool: (total, match, mismatch).
    pub const CUSTOM_STAMPED_PAIRS: (usize, usize, usize) = (2630, 1022, 1608);
    pub const CUSTOM_REPRESENTATION_USERS: usize = 109;
    pub const TOBACCO_SIGNATURES: usize = 746;
    pub const TOBACCO_USERS: usize = 130;
    pub const TOBACCO_TRAIN_USERS: usize = 60;
    pub const TOBACCO_TEST_USERS: usize = 70;
    pub const TOBACCO_POSITIVE_PAIRS: usize = 166;
}

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Match,
    Mismatch,
}

impl Label {
    pub fn from_users(a: &str, b: &str) -> Self {
        if a == b {
            Label::Match
        } else {
            Label::Mismatch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    S1,
    S2,
    S3,
    S4,
    S5,
    #[serde(rename = "tobacco")]
    Tobacco,
}

impl Setup {
    pub const TABLE: [Setup; 5] = [Setup::S1, Setup::S2, Setup::S3, Setup::S4, Setup::S5];

    /// Target source the setup draws from, `None` for all-pairs setups.
    pub fn target_source(self) -> Option<Source> {
        match self {
            Setup::S1 | Setup::S2 => Some(Source::TargetUnstamped),
            Setup::S3 | Setup::S4 | Setup::S5 => Some(Source::TargetStamped),
            Setup::Tobacco => None,
        }
    }

    pub fn cleans_reference(self) -> bool {
        matches!(self, Setup::S2 | Setup::S5)
    }

    pub fn cleans_target(self) -> bool {
        matches!(self, Setup::S2 | Setup::S4 | Setup::S5)
    }

    pub fn needs_cleaner(self) -> bool {
        self.cleans_reference() || self.cleans_target()
    }

    pub fn description(self) -> &'static str {
        match self {
            Setup::S1 => "reference vs unstamped target",
            Setup::S2 => "cleaned reference vs cleaned unstamped target",
            Setup::S3 => "reference vs stamped target",
            Setup::S4 => "reference vs cleaned stamped target",
            Setup::S5 => "cleaned reference vs cleaned stamped target",
            Setup::Tobacco => "all same-user pairs with balanced negatives",
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setup::S1 => "S1",
            Setup::S2 => "S2",
            Setup::S3 => "S3",
            Setup::S4 => "S4",
            Setup::S5 => "S5",
            Setup::Tobacco => "tobacco",
        };
        f.write_str(s)
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S1" | "s1" => Ok(Setup::S1),
            "S2" | "s2" => Ok(Setup::S2),
            "S3" | "s3" => Ok(Setup::S3),
            "S4" | "s4" => Ok(Setup::S4),
            "S5" | "s5" => Ok(Setup::S5),
            "tobacco" => Ok(Setup::Tobacco),
            other => Err(Error::validation(format!("unknown setup '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub user_id: String,
    pub source: Source,
    pub has_stamp: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(dataset_name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            dataset_name: dataset_name.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.user_id.trim().is_empty() {
                return Err(Error::validation(format!("entry {} has an empty user_id", e.path)));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(Error::validation(format!("duplicate image path {}", e.path)));
            }
        }
        Ok(())
    }

    /// Entries per user, users and paths in sorted order.
    pub fn by_user(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.user_id.as_str()).or_default().push(e);
        }
        for v in map.values_mut() {
            v.sort_by(|a, b| a.path.cmp(&b.path));
        }
        map
    }

    pub fn users(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.user_id.clone()).collect()
    }

    pub fn lookup(&self) -> HashMap<&str, &ManifestEntry> {
        self.entries.iter().map(|e| (e.path.as_str(), e)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "user_id", "source", "has_stamp"])?;
        for e in &self.entries {
            let stamp = e.has_stamp.map(|b| b.to_string()).unwrap_or_default();
            w.write_record([e.path.as_str(), e.user_id.as_str(), e.source.as_str(), stamp.as_str()])?;
        }
        w.flush().map_err(|err| Error::io(path, err))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let parse_err = |message: String| Error::Parse {
                source_name: path.display().to_string(),
                line,
                message,
            };
            if row.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", row.len())));
            }
            let source = row[2].parse::<Source>().map_err(|e| parse_err(e.to_string()))?;
            let has_stamp = match row[3].trim() {
                "" => None,
                "true" | "1" => Some(true),
                "false" | "0" => Some(false),
                other => return Err(parse_err(format!("bad has_stamp '{other}'"))),
            };
            entries.push(ManifestEntry {
                path: row[0].to_string(),
                user_id: row[1].to_string(),
                source,
                has_stamp,
            });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// `root/<user>/[<source>/]<image>`; a `<source>` directory name must be
    /// one of the source tags, otherwise the source is `unknown`.
    UserDirs,
    /// Released annotation list (`<relative path> <user id>` per line) plus
    /// an optional exclusion list of relative paths.
    Tobacco800 {
        annotations: PathBuf,
        exclusions: Option<PathBuf>,
    },
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn stamp_flag(source: Source) -> Option<bool> {
    match source {
        Source::TargetStamped => Some(true),
        Source::TargetUnstamped | Source::Reference => Some(false),
        Source::Unknown => None,
    }
}

pub fn build_manifest(root: &Path, layout: &Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut entries = Vec::new();
    match layout {
        Layout::UserDirs => {
            for user_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
                let user = user_dir.file_name().unwrap().to_string_lossy().into_owned();
                for item in sorted_dir(&user_dir)? {
                    if item.is_dir() {
                        let tag = item.file_name().unwrap().to_string_lossy().into_owned();
                        let source = tag.parse::<Source>().unwrap_or(Source::Unknown);
                        for img in sorted_dir(&item)?.into_iter().filter(|p| is_image(p)) {
                            entries.push(ManifestEntry {
                                path: img.to_string_lossy().into_owned(),
                                user_id: user.clone(),
                                source,
                                has_stamp: stamp_flag(source),
                            });
                        }
                    } else if is_image(&item) {
                        entries.push(ManifestEntry {
                            path: item.to_string_lossy().into_owned(),
                            user_id: user.clone(),
                            source: Source::Unknown,
                            has_stamp: None,
                        });
                    }
                }
            }
        }
        Layout::Tobacco800 {
            annotations,
            exclusions,
        } => {
            let ann_path = if annotations.is_absolute() {
                annotations.clone()
            } else {
                root.join(annotations)
            };
            let excluded: HashSet<String> = match exclusions {
                Some(p) => {
                    let p = if p.is_absolute() { p.clone() } else { root.join(p) };
                    std::fs::read_to_string(&p)
                        .map_err(|e| Error::io(&p, e))?
                        .lines()
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .collect()
                }
                None => HashSet::new(),
            };
            let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|f| !f.is_empty())
                    .collect();
                if fields.len() != 2 {
                    return Err(Error::Parse {
                        source_name: ann_path.display().to_string(),
                        line: i + 1,
                        message: format!("expected '<path> <user_id>', got '{raw}'"),
                    });
                }
                if excluded.contains(fields[0]) {
                    continue;
                }
                entries.push(ManifestEntry {
                    path: root.join(fields[0]).to_string_lossy().into_owned(),
                    user_id: fields[1].to_string(),
                    source: Source::Unknown,
                    has_stamp: None,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::validation(format!(
            "no images found under {}",
            root.display()
        )));
    }
    DatasetManifest::new(name, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    /// Lists hold image paths.
    #[default]
    Image,
    /// Lists hold user ids.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub unit: SplitUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<(f64, f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<(usize, usize, usize)>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn is_disjoint(&self) -> bool {
        let a: HashSet<&String> = self.train.iter().collect();
        let b: HashSet<&String> = self.val.iter().collect();
        self.test.iter().chain(&self.val).all(|x| !a.contains(x))
            && self.test.iter().all(|x| !b.contains(x))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn ratio_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((n as f64) * ratios.0).round() as usize;
    let val = (((n as f64) * ratios.1).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

/// Random three-way split of the representation pool. `SplitUnit::Image`
/// splits signature images, `SplitUnit::User` splits writers.
pub fn split_representation(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
    unit: SplitUnit,
) -> Result<SplitSpec> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| *r < 0.0 || !r.is_finite()) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let users = manifest.users();
    if users.len() < 3 {
        return Err(Error::validation(format!(
            "representation split needs >= 3 users, found {}",
            users.len()
        )));
    }
    let mut items: Vec<String> = match unit {
        SplitUnit::Image => {
            let mut v: Vec<String> = manifest.entries.iter().map(|e| e.path.clone()).collect();
            v.sort();
            v
        }
        SplitUnit::User => users.into_iter().collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let (nt, nv, _) = ratio_counts(items.len(), ratios);
    let test = items.split_off(nt + nv);
    let val = items.split_off(nt);
    Ok(SplitSpec {
        seed,
        unit,
        ratios: Some(ratios),
        counts: None,
        train: items,
        val,
        test,
    })
}

/// Picks `n_train_users` writers for representation learning; the rest form
/// the verification test set.
pub fn split_verification_users(manifest: &DatasetManifest, n_train_users: usize, seed: u64) -> Result<SplitSpec> {
    let users: Vec<String> = manifest.users().into_iter().collect();
    if n_train_users == 0 {
        return Err(Error::validation("n_train_users must be positive"));
    }
    if n_train_users >= users.len() {
        return Err(Error::validation(format!(
            "n_train_users ({n_train_users}) must be below the user count ({})",
            users.len()
        )));
    }
    let mut shuffled = users;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut test = shuffled.split_off(n_train_users);
    let mut train = shuffled;
    train.sort();
    test.sort();
    Ok(SplitSpec {
        seed,
        unit: SplitUnit::User,
        ratios: None,
        counts: Some((train.len(), 0, test.len())),
        train,
        val: Vec::new(),
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub ref_path: String,
    pub target_path: String,
    pub label: Label,
    pub setup: Setup,
}

pub fn write_pairs_csv(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["pair_id", "ref_path", "target_path", "label", "setup"])?;
    for p in pairs {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Checks path distinctness and label/user agreement against the manifest.
pub fn validate_pairs(manifest: &DatasetManifest, pairs: &[PairRecord]) -> Result<()> {
    let lookup = manifest.lookup();
    for p in pairs {
        if p.ref_path == p.target_path {
            return Err(Error::validation(format!("pair {} compares an image with itself", p.pair_id)));
        }
        let user = |path: &str| {
            lookup
                .get(path)
                .map(|e| e.user_id.as_str())
                .ok_or_else(|| Error::validation(format!("pair {}: {path} not in manifest", p.pair_id)))
        };
        if Label::from_users(user(&p.ref_path)?, user(&p.target_path)?) != p.label {
            return Err(Error::validation(format!("pair {} is mislabeled", p.pair_id)));
        }
    }
    Ok(())
}

/// Draws `k` distinct indices from `0..total`.
fn sample_indices(total: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, total, k).into_vec()
}

/// All same-user pairs among the test users, plus the same number of
/// cross-user pairs drawn uniformly without replacement from every test
/// user (single-signature users contribute negatives only).
pub fn generate_pairs(manifest: &DatasetManifest, test_users: &[String], neg_seed: u64) -> Result<Vec<PairRecord>> {
    if test_users.is_empty() {
        return Err(Error::validation("test user set is empty"));
    }
    let wanted: BTreeSet<&str> = test_users.iter().map(String::as_str).collect();
    let by_user = manifest.by_user();
    let sigs: Vec<&ManifestEntry> = by_user
        .iter()
        .filter(|(u, _)| wanted.contains(*u))
        .flat_map(|(_, v)| v.iter().copied())
        .collect();

    let mut pairs = Vec::new();
    for (_, entries) in by_user.iter().filter(|(u, _)| wanted.contains(*u)) {
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                pairs.push(PairRecord {
                    pair_id: format!("pos-{:05}", pairs.len()),
                    ref_path: entries[i].path.clone(),
                    target_path: entries[j].path.clone(),
                    label: Label::Match,
                    setup: Setup::Tobacco,
                });
            }
        }
    }
    let n_pos = pairs.len();
    if n_pos == 0 {
        return Err(Error::validation("no test user has two or more signatures"));
    }

    // unordered cross-user pairs (i < j) over the sorted signature list
    let n = sigs.len();
    let total_pairs = n * (n - 1) / 2;
    let same_user: usize = by_user
        .iter()
        .filter(|(u, _)| wanted.contains(*u))
        .map(|(_, v)| v.len() * (v.len() - 1) / 2)
        .sum();
    let n_cross = total_pairs - same_user;
    if n_cross < n_pos {
        return Err(Error::validation(format!(
            "only {n_cross} cross-user pairs available for {n_pos} negatives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let chosen: Vec<(usize, usize)> = if n_cross <= 4_000_000 {
        let mut cross = Vec::with_capacity(n_cross);
        for i in 0..n {
            for j in i + 1..n {
                if sigs[i].user_id != sigs[j].user_id {
                    cross.push((i, j));
                }
            }
        }
        let mut idx = sample_indices(cross.len(), n_pos, &mut rng);
        idx.sort_unstable();
        idx.into_iter().map(|k| cross[k]).collect()
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n_pos);
        while out.len() < n_pos {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b || sigs[a].user_id == sigs[b].user_id {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out.sort_unstable();
        out
    };
    for (k, (i, j)) in chosen.into_iter().enumerate() {
        pairs.push(PairRecord {
            pair_id: format!("neg-{k:05}"),
            ref_path: sigs[i].path.clone(),
            target_path: sigs[j].path.clone(),
            label: Label::Mismatch,
            setup: Setup::Tobacco,
        });
    }
    Ok(pairs)
}

/// Reference-vs-target pairs for the S1 (unstamped) or S3 (stamped) pools:
/// every same-user (reference, target) combination plus `n_negatives`
/// cross-user combinations (default: as many as positives).
pub fn generate_reference_pairs(
    manifest: &DatasetManifest,
    test_users: &[String],
    target_source: Source,
    n_negatives: Option<usize>,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    let setup = match target_source {
        Source::TargetUnstamped => Setup::S1,
        Source::TargetStamped => Setup::S3,
        other => {
            return Err(Error::validation(format!(
                "target source must be a target pool, got {other}"
            )))
        }
    };
    let wanted: BTreeSet<&str> = test_users.iter().map(String::as_str).collect();
    let by_user = manifest.by_user();
    let mut refs = Vec::new();
    let mut targets = Vec::new();
    for (u, entries) in by_user.iter().filter(|(u, _)| wanted.contains(*u)) {
        for e in entries {
            if e.source == Source::Reference {
                refs.push((*u, e));
            } else if e.source == target_source {
                targets.push((*u, e));
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::validation(format!(
            "manifest has no {target_source} signatures for the test users"
        )));
    }
    let tag = if setup == Setup::S1 { "unstamped" } else { "stamped" };
    let mut pairs = Vec::new();
    let mut cross = Vec::new();
    for (ru, r) in &refs {
        for (tu, t) in &targets {
            if ru == tu {
                pairs.push(PairRecord {
                    pair_id: format!("{tag}-pos-{:05}", pairs.len()),
                    ref_path: r.path.clone(),
                    target_path: t.path.clone(),
                    label: Label::Match,
                    setup,
                });
            } else {
                cross.push((r.path.clone(), t.path.clone()));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::validation("no same-user reference/target combinations"));
    }
    let k = n_negatives.unwrap_or(pairs.len());
    if k > cross.len() {
        return Err(Error::validation(format!(
            "only {} cross-user combinations available for {k} negatives",
            cross.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(cross.len(), k, &mut rng);
    idx.sort_unstable();
    for (n, i) in idx.into_iter().enumerate() {
        let (r, t) = cross[i].clone();
        pairs.push(PairRecord {
            pair_id: format!("{tag}-neg-{n:05}"),
            ref_path: r,
            target_path: t,
            label: Label::Mismatch,
            setup,
        });
    }
    Ok(pairs)
}

/// Something that maps a signature to a cleaned signature.
pub trait ImageCleaner: Sync {
    /// Stable identifier used for the on-disk cache.
    fn cache_key(&self) -> String;
    fn clean_image(&self, img: &SignatureImage) -> Result<SignatureImage>;
}

fn cached_clean(
    cleaner: &dyn ImageCleaner,
    path: &str,
    cache_dir: &Path,
    memo: &mut HashMap<String, String>,
) -> Result<String> {
    if let Some(p) = memo.get(path) {
        return Ok(p.clone());
    }
    let digest = hex::encode(Sha256::digest(path.as_bytes()));
    let out = cache_dir.join(cleaner.cache_key()).join(format!("{}.png", &digest[..24]));
    if !out.exists() {
        let img = load_signature(Path::new(path), Polarity::Original)?;
        let mut cleaned = cleaner.clean_image(&img)?;
        cleaned.cleaned = true;
        save_signature(&cleaned, &out)?;
    }
    let s = out.to_string_lossy().into_owned();
    memo.insert(path.to_string(), s.clone());
    Ok(s)
}

/// Routes a reference/target pair pool into one of the five setups. Pairs
/// whose target is not from the setup's target pool are dropped; sides the
/// setup cleans are replaced by cached cleaned images under `cache_dir`.
pub fn assemble_setup(
    manifest: &DatasetManifest,
    pairs: &[PairRecord],
    setup: Setup,
    cleaner: Option<&dyn ImageCleaner>,
    cache_dir: &Path,
) -> Result<Vec<PairRecord>> {
    let Some(target_source) = setup.target_source() else {
        return Err(Error::validation("assemble_setup handles S1..S5 only"));
    };
    if setup.needs_cleaner() && cleaner.is_none() {
        return Err(Error::validation(format!("setup {setup} requires a cleaner")));
    }
    let lookup = manifest.lookup();
    let source_of = |p: &str| lookup.get(p).map(|e| e.source);
    let selected: Vec<&PairRecord> = pairs
        .iter()
        .filter(|p| source_of(&p.target_path) == Some(target_source))
        .collect();
    if selected.is_empty() {
        return Err(Error::validation(format!(
            "setup {setup} needs {target_source} targets but the pair pool has none"
        )));
    }
    let mut memo = HashMap::new();
    let mut out = Vec::with_capacity(selected.len());
    for p in selected {
        let mut q = p.clone();
        q.setup = setup;
        if let Some(c) = cleaner {
            if setup.cleans_reference() {
                q.ref_path = cached_clean(c, &p.ref_path, cache_dir, &mut memo)?;
            }
            if setup.cleans_target() {
                q.target_path = cached_clean(c, &p.target_path, cache_dir, &mut memo)?;
            }
        }
        out.push(q);
    }
    Ok(out)
}

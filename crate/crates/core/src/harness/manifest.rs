use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;

pub const MANIFEST_HEADER: [&str; 4] = ["clip_id", "path", "label", "split"];
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    /// Zero-based fold index; written as `fold-k`.
    Fold(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
            Split::Fold(k) => write!(f, "fold-{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => s
                .strip_prefix("fold-")
                .and_then(|k| k.parse().ok())
                .map(Split::Fold)
                .ok_or_else(|| HarnessError::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub label: String,
    pub split: Option<Split>,
}

/// Clip list with labels. `class_names` is the sorted set of labels; a class
/// index is a position in that list.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, HarnessError> {
        if entries.is_empty() {
            return Err(HarnessError::Manifest("no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.clip_id.is_empty() {
                return Err(HarnessError::Manifest("empty clip id".into()));
            }
            if e.label.is_empty() {
                return Err(HarnessError::Manifest(format!("clip {:?} has no label", e.clip_id)));
            }
            if !seen.insert(e.clip_id.as_str()) {
                return Err(HarnessError::Manifest(format!("duplicate clip id {:?}", e.clip_id)));
            }
        }
        let class_names = entries
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self { entries, class_names })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Class index of every entry.
    pub fn labels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.class_index(&e.label).expect("labels come from entries"))
            .collect()
    }

    /// Entry indices grouped by class, in manifest order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (i, y) in self.labels().into_iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].split == Some(split)).collect()
    }

    /// Train/test index pairs implied by the split column: one pair for a
    /// train/test manifest, one per fold for a k-fold manifest.
    pub fn folds(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>, HarnessError> {
        let splits: BTreeSet<Option<Split>> = self.entries.iter().map(|e| e.split).collect();
        if splits.contains(&None) {
            return Err(HarnessError::SplitSpec("manifest has entries without a split".into()));
        }
        let fold_ids: Vec<usize> = splits
            .iter()
            .filter_map(|s| match s {
                Some(Split::Fold(k)) => Some(*k),
                _ => None,
            })
            .collect();
        if fold_ids.is_empty() {
            let (train, test) = (self.indices_in(Split::Train), self.indices_in(Split::Test));
            if train.is_empty() || test.is_empty() {
                return Err(HarnessError::SplitSpec("need both train and test entries".into()));
            }
            return Ok(vec![(train, test)]);
        }
        if fold_ids.len() != splits.len() || fold_ids.len() < 2 {
            return Err(HarnessError::SplitSpec(
                "k-fold manifests need at least two folds and no train/test entries".into(),
            ));
        }
        Ok(fold_ids
            .iter()
            .map(|&k| {
                let (test, train): (Vec<usize>, Vec<usize>) =
                    (0..self.len()).partition(|&i| self.entries[i].split == Some(Split::Fold(k)));
                (train, test)
            })
            .collect())
    }
}

/// Reads a manifest CSV; relative clip paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, HarnessError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = std::fs::File::open(path)?;
    let mut m = read_manifest_from(file)?;
    for e in &mut m.entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(m)
}

pub fn read_manifest_from<R: std::io::Read>(reader: R) -> Result<DatasetManifest, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(HarnessError::Manifest(format!(
            "header must be {:?}, found {:?}",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let split = match &rec[3] {
            "" => None,
            s => Some(s.parse()?),
        };
        entries.push(ManifestEntry {
            clip_id: rec[0].to_string(),
            path: PathBuf::from(&rec[1]),
            label: rec[2].to_string(),
            split,
        });
    }
    DatasetManifest::new(entries)
}

pub fn write_manifest_to<W: std::io::Write>(writer: W, m: &DatasetManifest) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for e in &m.entries {
        let split = e.split.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([e.clip_id.as_str(), &e.path.to_string_lossy(), &e.label, &split])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<(), HarnessError> {
    write_manifest_to(std::fs::File::create(path)?, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    Holdout { train_fraction: f64 },
    KFold { k: usize },
    /// Use the split column as given.
    Predefined,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Holdout { train_fraction } => write!(f, "holdout:{train_fraction}"),
            SplitMode::KFold { k } => write!(f, "kfold:{k}"),
            SplitMode::Predefined => f.write_str("manifest"),
        }
    }
}

impl FromStr for SplitMode {
    type Err = HarnessError;

    /// `holdout[:fraction]`, `kfold[:k]` or `manifest`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::SplitSpec(format!("{s:?} (expected holdout[:f], kfold[:k] or manifest)"));
        let (kind, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        let mode = match kind {
            "holdout" => SplitMode::Holdout {
                train_fraction: arg.map_or(Ok(DEFAULT_TRAIN_FRACTION), |a| a.parse().map_err(|_| bad()))?,
            },
            "kfold" => SplitMode::KFold {
                k: arg.map_or(Ok(DEFAULT_FOLDS), |a| a.parse().map_err(|_| bad()))?,
            },
            "manifest" if arg.is_none() => SplitMode::Predefined,
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl SplitMode {
    pub fn validate(&self) -> Result<(), HarnessError> {
        match *self {
            SplitMode::Holdout { train_fraction } if !(train_fraction > 0.0 && train_fraction < 1.0) => Err(
                HarnessError::SplitSpec(format!("train fraction {train_fraction} outside (0, 1)")),
            ),
            SplitMode::KFold { k } if k < 2 => Err(HarnessError::SplitSpec(format!("k = {k}, need at least 2"))),
            _ => Ok(()),
        }
    }
}

/// Assigns stratified splits. Each class is shuffled with a seeded generator;
/// holdout sends `round(fraction * n_c)` examples of class `c` to training,
/// k-fold deals the shuffled examples to folds in turn.
pub fn make_splits(manifest: &DatasetManifest, mode: SplitMode, seed: u64) -> Result<DatasetManifest, HarnessError> {
    mode.validate()?;
    let mut out = manifest.clone();
    if mode == SplitMode::Predefined {
        out.folds()?;
        return Ok(out);
    }
    let needed = match mode {
        SplitMode::KFold { k } => k,
        _ => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut idx) in manifest.indices_by_class().into_iter().enumerate() {
        if idx.len() < needed {
            return Err(HarnessError::TooFewExamples {
                class: manifest.class_names[class].clone(),
                count: idx.len(),
                needed,
            });
        }
        idx.shuffle(&mut rng);
        match mode {
            SplitMode::Holdout { train_fraction } => {
                let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
                for (pos, &i) in idx.iter().enumerate() {
                    out.entries[i].split = Some(if pos < n_train { Split::Train } else { Split::Test });
                }
            }
            SplitMode::KFold { k } => {
                for (pos, &i) in idx.iter().enumerate() {
                    out.entries[i].split = Some(Split::Fold(pos % k));
                }
            }
            SplitMode::Predefined => unreachable!(),
        }
    }
    Ok(out)
}

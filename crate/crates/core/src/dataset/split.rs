use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Parameters of the train / subject-dependent / subject-independent split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub sid_subject_count: usize,
    pub sd2_subject_count: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            sid_subject_count: 10,
            sd2_subject_count: 10,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Pair ids per split, plus the spec that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub spec: SplitSpec,
    pub train: BTreeSet<String>,
    pub sd_test_1: BTreeSet<String>,
    pub sd_test_2: BTreeSet<String>,
    pub sid_test: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[serde(rename = "sd_test_1")]
    SdTest1,
    #[serde(rename = "sd_test_2")]
    SdTest2,
    SidTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::SdTest1,
        SplitName::SdTest2,
        SplitName::SidTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::SdTest1 => "sd_test_1",
            SplitName::SdTest2 => "sd_test_2",
            SplitName::SidTest => "sid_test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown split `{s}` (expected train, sd_test_1, sd_test_2 or sid_test)"
                ))
            })
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of a subject's `n` pairs that go to training.
///
/// `floor(fraction * n)` (with a small tolerance so that products such as
/// `0.29 * 100` are not rounded down by representation error), but at least
/// one, so every subject-dependent test subject is also a training subject.
/// A subject with a single pair contributes it to training only.
pub fn train_count(n: usize, fraction: f64) -> usize {
    if n <= 1 {
        return n;
    }
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

impl SplitAssignment {
    pub fn get(&self, name: SplitName) -> &BTreeSet<String> {
        match name {
            SplitName::Train => &self.train,
            SplitName::SdTest1 => &self.sd_test_1,
            SplitName::SdTest2 => &self.sd_test_2,
            SplitName::SidTest => &self.sid_test,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Subjects present in a split.
    pub fn subjects<'m>(
        &self,
        name: SplitName,
        manifest: &'m DatasetManifest,
    ) -> BTreeSet<&'m str> {
        let ids = self.get(name);
        manifest
            .entries
            .iter()
            .filter(|e| ids.contains(&e.pair_id))
            .map(|e| e.subject_id.as_str())
            .collect()
    }
}

/// Deterministic split of `manifest` according to `spec`.
///
/// 1. Subjects are sorted, shuffled with a ChaCha8 stream seeded by
///    `spec.seed`, and the first `sid_subject_count` form the
///    subject-independent set (all of their pairs).
/// 2. Every other subject, in sorted order, has its sorted pair ids shuffled
///    with the same stream; the first [`train_count`] go to training and the
///    rest to subject-dependent test set 1.
/// 3. Test set 2 is `sd2_subject_count` subjects of test set 1 drawn with the
///    same stream, keeping all of their test-set-1 pairs.
pub fn build_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<SplitAssignment> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Split(format!(
            "train_fraction {} outside [0, 1]",
            spec.train_fraction
        )));
    }
    if spec.sid_subject_count > 0
        && spec.sd2_subject_count > 0
        && spec.sid_subject_count != spec.sd2_subject_count
    {
        return Err(Error::Split(format!(
            "sd_test_2 subject count {} must equal subject-independent count {}",
            spec.sd2_subject_count, spec.sid_subject_count
        )));
    }
    let mut by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_subject
            .entry(e.subject_id.as_str())
            .or_default()
            .push(e.pair_id.as_str());
    }
    let needed = spec.sid_subject_count + spec.sd2_subject_count;
    if by_subject.len() < needed {
        return Err(Error::Split(format!(
            "{} subjects available, {needed} required",
            by_subject.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<&str> = by_subject.keys().copied().collect();
    order.shuffle(&mut rng);
    let sid_subjects: BTreeSet<&str> = order[..spec.sid_subject_count].iter().copied().collect();

    let mut out = SplitAssignment {
        spec: spec.clone(),
        train: BTreeSet::new(),
        sd_test_1: BTreeSet::new(),
        sd_test_2: BTreeSet::new(),
        sid_test: BTreeSet::new(),
    };
    let mut sd1_by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (subject, pairs) in &mut by_subject {
        pairs.sort_unstable();
        if sid_subjects.contains(subject) {
            out.sid_test.extend(pairs.iter().map(|p| p.to_string()));
            continue;
        }
        pairs.shuffle(&mut rng);
        let k = train_count(pairs.len(), spec.train_fraction);
        out.train.extend(pairs[..k].iter().map(|p| p.to_string()));
        if k < pairs.len() {
            out.sd_test_1
                .extend(pairs[k..].iter().map(|p| p.to_string()));
            sd1_by_subject.insert(subject, pairs[k..].to_vec());
        }
    }

    if spec.sd2_subject_count > sd1_by_subject.len() {
        return Err(Error::Split(format!(
            "sd_test_2 needs {} subjects but sd_test_1 has {}",
            spec.sd2_subject_count,
            sd1_by_subject.len()
        )));
    }
    let mut sd1_subjects: Vec<&str> = sd1_by_subject.keys().copied().collect();
    sd1_subjects.shuffle(&mut rng);
    for subject in &sd1_subjects[..spec.sd2_subject_count] {
        out.sd_test_2
            .extend(sd1_by_subject[subject].iter().map(|p| p.to_string()));
    }
    Ok(out)
}

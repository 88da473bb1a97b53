//! Train/validation/test splits.
//!
//! Named policies reproduce the published subject/sentence layouts of the
//! vertex datasets. Test-B holds unseen subjects, and each of its entries is
//! repeated once per training-subject condition, which is how those test sets
//! are counted.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SplitEntry {
    pub subject: String,
    pub sentence: String,
    /// Training subject used as the style condition (test-B only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

impl SplitEntry {
    fn plain(subject: &str, sentence: &str) -> Self {
        Self {
            subject: subject.to_string(),
            sentence: sentence.to_string(),
            condition: None,
        }
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.subject, &self.sentence)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DatasetSplit {
    pub train: Vec<SplitEntry>,
    pub val: Vec<SplitEntry>,
    pub test_a: Vec<SplitEntry>,
    pub test_b: Vec<SplitEntry>,
}

impl DatasetSplit {
    /// Subjects that appear in the training set, sorted. Their order defines
    /// the one-hot style index.
    pub fn train_subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.train.iter().map(|e| e.subject.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Checks that no (subject, sentence) pair is shared between parts and
    /// that test-B subjects are unseen in training.
    pub fn check_disjoint(&self) -> Result<()> {
        let parts = [
            ("train", &self.train),
            ("val", &self.val),
            ("test_a", &self.test_a),
            ("test_b", &self.test_b),
        ];
        for (i, (na, a)) in parts.iter().enumerate() {
            let ka: BTreeSet<(&str, &str)> = a.iter().map(SplitEntry::key).collect();
            for (nb, b) in parts.iter().skip(i + 1) {
                if let Some(e) = b.iter().find(|e| ka.contains(&e.key())) {
                    return Err(Error::Validation(format!(
                        "{}/{} appears in both {na} and {nb}",
                        e.subject, e.sentence
                    )));
                }
            }
        }
        let train_subjects: BTreeSet<&str> = self.train.iter().map(|e| e.subject.as_str()).collect();
        if let Some(e) = self.test_b.iter().find(|e| train_subjects.contains(e.subject.as_str())) {
            return Err(Error::Validation(format!(
                "test_b subject {} is also a training subject",
                e.subject
            )));
        }
        Ok(())
    }
}

/// Subject and sentence layout of a published split.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectLayout {
    pub train_subjects: Vec<String>,
    /// Subjects for validation; `None` means the training subjects.
    pub val_subjects: Option<Vec<String>>,
    pub unseen_subjects: Vec<String>,
    pub train_sentences: RangeInclusive<u32>,
    pub val_sentences: RangeInclusive<u32>,
    pub test_a_sentences: Option<RangeInclusive<u32>>,
    pub test_b_sentences: RangeInclusive<u32>,
    /// Keep only sentence ids that start with `e` (emotional takes) when the
    /// dataset contains any.
    pub emotional_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitPolicy {
    Biwi,
    Vocaset,
    /// Seen/unseen subjects; `None` takes the first 9 (sorted) as seen and the next 4 as unseen.
    Multiface(Option<(Vec<String>, Vec<String>)>),
    Ratio { train: u32, val: u32, test: u32 },
    Custom(SubjectLayout),
}

impl fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitPolicy::Biwi => write!(f, "biwi"),
            SplitPolicy::Vocaset => write!(f, "vocaset"),
            SplitPolicy::Multiface(_) => write!(f, "multiface"),
            SplitPolicy::Ratio { train, val, test } => write!(f, "ratio-{train}-{val}-{test}"),
            SplitPolicy::Custom(_) => write!(f, "custom"),
        }
    }
}

impl FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biwi" => Ok(SplitPolicy::Biwi),
            "vocaset" => Ok(SplitPolicy::Vocaset),
            "multiface" => Ok(SplitPolicy::Multiface(None)),
            other => {
                let parts: Vec<&str> = other.strip_prefix("ratio-").unwrap_or("").split('-').collect();
                if let [a, b, c] = parts.as_slice() {
                    if let (Ok(train), Ok(val), Ok(test)) = (a.parse(), b.parse(), c.parse()) {
                        if train + val + test == 100 {
                            return Ok(SplitPolicy::Ratio { train, val, test });
                        }
                    }
                }
                Err(Error::Config(format!("unknown split policy `{other}`")))
            }
        }
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl SplitPolicy {
    pub fn ratio_80_10_10() -> Self {
        SplitPolicy::Ratio {
            train: 80,
            val: 10,
            test: 10,
        }
    }

    fn layout(&self, subjects: &BTreeSet<&str>) -> Result<Option<SubjectLayout>> {
        Ok(Some(match self {
            SplitPolicy::Biwi => SubjectLayout {
                train_subjects: names(&["F2", "F3", "F4", "M3", "M4", "M5"]),
                val_subjects: None,
                unseen_subjects: names(&["F1", "F5", "F6", "F7", "F8", "M1", "M2", "M6"]),
                train_sentences: 1..=32,
                val_sentences: 33..=36,
                test_a_sentences: Some(37..=40),
                test_b_sentences: 37..=40,
                emotional_only: true,
            },
            SplitPolicy::Vocaset => SubjectLayout {
                train_subjects: names(&[
                    "FaceTalk_170728_03272_TA",
                    "FaceTalk_170904_00128_TA",
                    "FaceTalk_170725_00137_TA",
                    "FaceTalk_170915_00223_TA",
                    "FaceTalk_170811_03274_TA",
                    "FaceTalk_170913_03279_TA",
                    "FaceTalk_170904_03276_TA",
                    "FaceTalk_170912_03278_TA",
                ]),
                val_subjects: Some(names(&["FaceTalk_170811_03275_TA", "FaceTalk_170908_03277_TA"])),
                unseen_subjects: names(&["FaceTalk_170809_00138_TA", "FaceTalk_170731_00024_TA"]),
                train_sentences: 1..=40,
                val_sentences: 21..=40,
                test_a_sentences: None,
                test_b_sentences: 21..=40,
                emotional_only: false,
            },
            SplitPolicy::Multiface(explicit) => {
                let (seen, unseen) = match explicit {
                    Some((seen, unseen)) => (seen.clone(), unseen.clone()),
                    None => {
                        if subjects.len() < 13 {
                            return Err(Error::Config(format!(
                                "multiface policy needs 13 subjects, dataset has {}",
                                subjects.len()
                            )));
                        }
                        let all: Vec<String> = subjects.iter().map(|s| s.to_string()).collect();
                        (all[..9].to_vec(), all[9..13].to_vec())
                    }
                };
                SubjectLayout {
                    train_subjects: seen,
                    val_subjects: None,
                    unseen_subjects: unseen,
                    train_sentences: 1..=40,
                    val_sentences: 41..=45,
                    test_a_sentences: Some(46..=50),
                    test_b_sentences: 46..=50,
                    emotional_only: false,
                }
            }
            SplitPolicy::Ratio { .. } => return Ok(None),
            SplitPolicy::Custom(layout) => layout.clone(),
        }))
    }
}

/// Trailing decimal digits of a sentence id (`e07` -> 7, `sentence12` -> 12).
pub fn sentence_number(sentence: &str) -> Option<u32> {
    let digits: String = sentence
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Splits `(subject, sentence)` pairs according to `policy`.
pub fn make_split<'a, I>(dataset: I, policy: &SplitPolicy) -> Result<DatasetSplit>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut items: Vec<(&str, &str)> = dataset.into_iter().collect();
    items.sort_unstable();
    items.dedup();
    let subjects: BTreeSet<&str> = items.iter().map(|(s, _)| *s).collect();

    let layout = match policy.layout(&subjects)? {
        Some(layout) => layout,
        None => {
            let SplitPolicy::Ratio { train, val, .. } = policy else {
                unreachable!("only ratio policies have no subject layout")
            };
            let n = items.len();
            let n_train = n * *train as usize / 100;
            let n_val = n * *val as usize / 100;
            let entry = |&(s, t): &(&str, &str)| SplitEntry::plain(s, t);
            return Ok(DatasetSplit {
                train: items[..n_train].iter().map(entry).collect(),
                val: items[n_train..n_train + n_val].iter().map(entry).collect(),
                test_a: items[n_train + n_val..].iter().map(entry).collect(),
                test_b: Vec::new(),
            });
        }
    };

    let val_subjects = layout
        .val_subjects
        .clone()
        .unwrap_or_else(|| layout.train_subjects.clone());
    for s in layout
        .train_subjects
        .iter()
        .chain(&val_subjects)
        .chain(&layout.unseen_subjects)
    {
        if !subjects.contains(s.as_str()) {
            return Err(Error::Config(format!(
                "split policy `{policy}` references subject `{s}` absent from the dataset"
            )));
        }
    }

    let has_emotional = items.iter().any(|(_, t)| t.starts_with('e'));
    let usable: Vec<(&str, &str, u32)> = items
        .iter()
        .filter(|(_, t)| !(layout.emotional_only && has_emotional) || t.starts_with('e'))
        .filter_map(|&(s, t)| sentence_number(t).map(|k| (s, t, k)))
        .collect();

    let pick = |subs: &[String], range: &RangeInclusive<u32>| -> Vec<SplitEntry> {
        usable
            .iter()
            .filter(|(s, _, k)| subs.iter().any(|x| x == s) && range.contains(k))
            .map(|&(s, t, _)| SplitEntry::plain(s, t))
            .collect()
    };

    let train = pick(&layout.train_subjects, &layout.train_sentences);
    let val = pick(&val_subjects, &layout.val_sentences);
    let test_a = layout
        .test_a_sentences
        .as_ref()
        .map(|r| pick(&layout.train_subjects, r))
        .unwrap_or_default();
    let mut conditions = layout.train_subjects.clone();
    conditions.sort();
    let test_b = pick(&layout.unseen_subjects, &layout.test_b_sentences)
        .into_iter()
        .flat_map(|e| {
            conditions.iter().map(move |c| SplitEntry {
                condition: Some(c.clone()),
                ..e.clone()
            })
        })
        .collect();

    let split = DatasetSplit {
        train,
        val,
        test_a,
        test_b,
    };
    split.check_disjoint()?;
    Ok(split)
}

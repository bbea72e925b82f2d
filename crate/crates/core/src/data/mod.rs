//! Synthetic-family data generation, similarity filtering, splits and
//! token-budget batching.

mod batch;
mod generate;
mod identity;
mod tsv;

pub use batch::{batch_loss_mask, build_loss_mask, make_batches, shuffled_indices, Batch};
pub use generate::{generate_families, FamilyGenConfig};
pub use identity::{sequence_identity, similarity_filter};
pub use tsv::{read_samples_tsv, read_split_manifest, write_samples_tsv, write_split_manifest};

use crate::fold::{RnaSequence, SecondaryStructure};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Dataset-side knobs: token budget, shuffle pool, loss masking rate and
/// length bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub batch_token_size: usize,
    pub shuffle_pool_size: usize,
    /// Fraction of unpaired cells dropped from each step's loss.
    pub random_ignore_mat: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            batch_token_size: 500,
            shuffle_pool_size: 100,
            random_ignore_mat: 0.5,
            min_len: 10,
            max_len: 500,
        }
    }
}

#[derive(Debug)]
pub enum DataError {
    Config { message: String },
    Io(std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { message } => write!(f, "data config: {message}"),
            Self::Io(e) => write!(f, "I/O error: {e}"),
            Self::Parse { line, message } => write!(f, "dataset line {line}: {message}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// A consensus sequence and members derived from it by mutation.
#[derive(Debug, Clone)]
pub struct Family {
    pub family_id: String,
    pub consensus: RnaSequence,
    pub members: Vec<RnaSequence>,
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seq: RnaSequence,
    pub structure: SecondaryStructure,
    pub family_id: String,
    pub split: String,
}

/// Train/valid/test partition plus the family-to-split assignment it was
/// built from.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest: BTreeMap<String, String>,
}

impl DatasetSplit {
    /// No family id may appear in more than one split.
    pub fn is_family_exclusive(&self) -> bool {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, samples) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for s in samples {
                match seen.get(s.family_id.as_str()) {
                    Some(&other) if other != split => return false,
                    _ => {
                        seen.insert(&s.family_id, split);
                    }
                }
            }
        }
        true
    }
}

/// Assign whole families to splits: `n_valid` families to validation,
/// `n_test` to testing, the rest to training.
pub fn split_by_family(
    families: &[Family],
    fold: impl Fn(&RnaSequence) -> SecondaryStructure,
    n_valid: usize,
    n_test: usize,
    rng: &mut StreamRng,
) -> Result<DatasetSplit, DataError> {
    if n_valid + n_test > families.len() {
        return Err(DataError::Config {
            message: format!(
                "cannot reserve {n_valid} validation + {n_test} test families out of {}",
                families.len()
            ),
        });
    }
    // Fisher-Yates over family order
    let mut order: Vec<usize> = (0..families.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.uniform_range(0, i as u64) as usize;
        order.swap(i, j);
    }
    let mut split = DatasetSplit::default();
    for (rank, &fi) in order.iter().enumerate() {
        let family = &families[fi];
        let split_name = if rank < n_valid {
            "valid"
        } else if rank < n_valid + n_test {
            "test"
        } else {
            "train"
        };
        split
            .manifest
            .insert(family.family_id.clone(), split_name.to_string());
        let bucket = match split_name {
            "valid" => &mut split.valid,
            "test" => &mut split.test,
            _ => &mut split.train,
        };
        for member in &family.members {
            bucket.push(Sample {
                structure: fold(member),
                seq: member.clone(),
                family_id: family.family_id.clone(),
                split: split_name.to_string(),
            });
        }
    }
    Ok(split)
}

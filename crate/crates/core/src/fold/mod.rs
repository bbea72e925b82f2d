//! Ground-truth structure generation and interchange formats.
//!
//! The folding oracle is a maximum-canonical-pairing dynamic program with a
//! minimum hairpin loop, standing in for a thermodynamic folder behind the
//! single [`fold_mfe`] entry point. An exhaustive enumerator double-checks it
//! on small inputs.

mod brute;
mod dotbracket;
mod fasta;
mod nussinov;

pub use brute::brute_force_max_pairs;
pub use dotbracket::{from_dot_bracket, to_dot_bracket};
pub use fasta::{read_dot_bracket_file, read_fasta, write_dot_bracket_file, write_fasta, DbRecord};
pub use nussinov::fold_mfe;

use std::collections::BTreeSet;
use std::fmt;

/// Default minimum number of unpaired bases inside a hairpin loop.
pub const MIN_LOOP: usize = 3;

/// Nucleotide alphabet size (A, C, G, U, N).
pub const VOCAB_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldError {
    EmptySequence { id: String },
    InvalidBase { id: String, position: usize, byte: u8 },
    SequenceTooLong { len: usize, limit: usize },
    InvalidPair { i: usize, j: usize, length: usize },
    UnknownChar { position: usize, ch: char },
    Unbalanced { position: usize, ch: char },
    UnclosedBracket { position: usize, ch: char },
    TooManyTiers { needed: usize },
    SharedBase { i: usize, j: usize },
    Fasta { line: usize, message: String },
}

impl fmt::Display for FoldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptySequence { id } => write!(f, "sequence '{id}' is empty"),
            Self::InvalidBase { id, position, byte } => write!(
                f,
                "sequence '{id}': invalid base {:?} at position {position}",
                *byte as char
            ),
            Self::SequenceTooLong { len, limit } => {
                write!(f, "sequence length {len} exceeds limit {limit}")
            }
            Self::InvalidPair { i, j, length } => {
                write!(f, "pair ({i}, {j}) invalid for length {length}")
            }
            Self::UnknownChar { position, ch } => {
                write!(f, "unknown structure character '{ch}' at position {position}")
            }
            Self::Unbalanced { position, ch } => {
                write!(f, "unbalanced closing '{ch}' at position {position}")
            }
            Self::UnclosedBracket { position, ch } => {
                write!(f, "unclosed '{ch}' opened at position {position}")
            }
            Self::TooManyTiers { needed } => {
                write!(f, "structure needs {needed} bracket tiers, more than supported")
            }
            Self::SharedBase { i, j } => {
                write!(f, "pair ({i}, {j}) reuses a base already paired; not representable in dot-bracket")
            }
            Self::Fasta { line, message } => write!(f, "FASTA line {line}: {message}"),
        }
    }
}

impl std::error::Error for FoldError {}

/// Validated nucleotide string over {A, C, G, U, N}, uppercase canonical form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RnaSequence {
    id: String,
    bases: String,
}

impl RnaSequence {
    pub fn new(id: impl Into<String>, bases: &str) -> Result<Self, FoldError> {
        let id = id.into();
        if bases.is_empty() {
            return Err(FoldError::EmptySequence { id });
        }
        let mut canon = String::with_capacity(bases.len());
        for (position, byte) in bases.bytes().enumerate() {
            let up = byte.to_ascii_uppercase();
            match up {
                b'A' | b'C' | b'G' | b'U' | b'N' => canon.push(up as char),
                // accept DNA-style input
                b'T' => canon.push('U'),
                _ => return Err(FoldError::InvalidBase { id, position, byte }),
            }
        }
        Ok(Self { id, bases: canon })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bases(&self) -> &str {
        &self.bases
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty sequences
    }

    /// Token ids used by the model: A=0, C=1, G=2, U=3, N=4.
    pub fn token_ids(&self) -> Vec<u32> {
        self.bases
            .bytes()
            .map(|b| match b {
                b'A' => 0,
                b'C' => 1,
                b'G' => 2,
                b'U' => 3,
                _ => 4,
            })
            .collect()
    }
}

/// Whether two bases can form a canonical (Watson-Crick or wobble) pair.
/// N never pairs.
pub fn can_pair(a: u8, b: u8) -> bool {
    matches!(
        (a, b),
        (b'A', b'U') | (b'U', b'A') | (b'G', b'C') | (b'C', b'G') | (b'G', b'U') | (b'U', b'G')
    )
}

/// A set of base pairs (i, j) with i < j over a sequence of a given length.
///
/// Oracle outputs satisfy the matching constraint (each index in at most one
/// pair); decoded model predictions may not, so the type itself only
/// enforces index validity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecondaryStructure {
    length: usize,
    pairs: BTreeSet<(usize, usize)>,
}

impl SecondaryStructure {
    pub fn new(
        length: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, FoldError> {
        let mut set = BTreeSet::new();
        for (i, j) in pairs {
            if i >= j || j >= length {
                return Err(FoldError::InvalidPair { i, j, length });
            }
            set.insert((i, j));
        }
        Ok(Self { length, pairs: set })
    }

    pub fn empty(length: usize) -> Self {
        Self {
            length,
            pairs: BTreeSet::new(),
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.pairs
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// True when each base participates in at most one pair.
    pub fn is_matching(&self) -> bool {
        let mut seen = vec![false; self.length];
        for &(i, j) in &self.pairs {
            if seen[i] || seen[j] {
                return false;
            }
            seen[i] = true;
            seen[j] = true;
        }
        true
    }

    /// True when no two pairs cross (pseudoknot-free).
    pub fn is_nested(&self) -> bool {
        let pairs: Vec<_> = self.pairs.iter().copied().collect();
        for (idx, &(a, b)) in pairs.iter().enumerate() {
            for &(c, d) in &pairs[idx + 1..] {
                if (a < c && c < b && b < d) || (c < a && a < d && d < b) {
                    return false;
                }
            }
        }
        true
    }

    /// Smallest hairpin loop over all pairs, if any pair exists.
    pub fn min_loop_size(&self) -> Option<usize> {
        self.pairs.iter().map(|&(i, j)| j - i - 1).min()
    }

    pub fn to_pair_matrix(&self) -> PairMatrix {
        let mut m = PairMatrix::zeros(self.length);
        for &(i, j) in &self.pairs {
            m.set(i, j);
        }
        m
    }

    pub fn from_pair_matrix(m: &PairMatrix) -> Self {
        let mut pairs = BTreeSet::new();
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                if m.get(i, j) {
                    pairs.insert((i, j));
                }
            }
        }
        Self {
            length: m.len(),
            pairs,
        }
    }
}

/// Symmetric binary adjacency matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMatrix {
    length: usize,
    data: Vec<u8>,
}

impl PairMatrix {
    pub fn zeros(length: usize) -> Self {
        Self {
            length,
            data: vec![0; length * length],
        }
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.length + j] != 0
    }

    /// Sets the (i, j) and (j, i) cells; the diagonal stays zero.
    pub fn set(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        self.data[i * self.length + j] = 1;
        self.data[j * self.length + i] = 1;
    }

    pub fn cells(&self) -> &[u8] {
        &self.data
    }
}

//! Dot-bracket structure notation with pseudoknot bracket tiers.

use super::{FoldError, SecondaryStructure};

const OPENERS: [char; 30] = [
    '(', '[', '{', '<', 'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O',
    'P', 'Q', 'R', 'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z',
];
const CLOSERS: [char; 30] = [
    ')', ']', '}', '>', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o',
    'p', 'q', 'r', 's', 't', 'u', 'v', 'w', 'x', 'y', 'z',
];

/// Renders pairs as brackets. Nested pairs share tier 0; crossing pairs are
/// pushed to higher tiers greedily in (i, j) order, which makes the
/// assignment deterministic. A base can carry only one bracket character, so
/// structures where a base sits in two pairs are not representable and are
/// rejected.
pub fn to_dot_bracket(s: &SecondaryStructure) -> Result<String, FoldError> {
    let mut used = vec![false; s.length()];
    for &(i, j) in s.pairs() {
        if used[i] || used[j] {
            return Err(FoldError::SharedBase { i, j });
        }
        used[i] = true;
        used[j] = true;
    }
    let mut tiers: Vec<Vec<(usize, usize)>> = Vec::new();
    for &(i, j) in s.pairs() {
        let mut placed = false;
        for tier in tiers.iter_mut() {
            if tier.iter().all(|&(a, b)| !crossing((a, b), (i, j))) {
                tier.push((i, j));
                placed = true;
                break;
            }
        }
        if !placed {
            if tiers.len() == OPENERS.len() {
                return Err(FoldError::TooManyTiers {
                    needed: tiers.len() + 1,
                });
            }
            tiers.push(vec![(i, j)]);
        }
    }
    let mut out = vec!['.'; s.length()];
    for (t, tier) in tiers.iter().enumerate() {
        for &(i, j) in tier {
            out[i] = OPENERS[t];
            out[j] = CLOSERS[t];
        }
    }
    Ok(out.into_iter().collect())
}

fn crossing(p: (usize, usize), q: (usize, usize)) -> bool {
    let (a, b) = p;
    let (c, d) = q;
    (a < c && c < b && b < d) || (c < a && a < d && d < b)
}

/// Parses dot-bracket notation; each bracket family is matched with its own
/// stack, so pseudoknot tiers read back correctly.
pub fn from_dot_bracket(db: &str) -> Result<SecondaryStructure, FoldError> {
    let mut stacks: Vec<Vec<usize>> = vec![Vec::new(); OPENERS.len()];
    let mut pairs = Vec::new();
    let length = db.chars().count();
    for (position, ch) in db.chars().enumerate() {
        if ch == '.' || ch == '-' || ch == '_' {
            continue;
        }
        if let Some(t) = OPENERS.iter().position(|&o| o == ch) {
            stacks[t].push(position);
        } else if let Some(t) = CLOSERS.iter().position(|&c| c == ch) {
            match stacks[t].pop() {
                Some(open) => pairs.push((open, position)),
                None => return Err(FoldError::Unbalanced { position, ch }),
            }
        } else {
            return Err(FoldError::UnknownChar { position, ch });
        }
    }
    for (t, stack) in stacks.iter().enumerate() {
        if let Some(&position) = stack.last() {
            return Err(FoldError::UnclosedBracket {
                position,
                ch: OPENERS[t],
            });
        }
    }
    SecondaryStructure::new(length, pairs)
}

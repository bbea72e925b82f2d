//! Synthetic family generation by consensus mutation.

use super::{DataError, Family};
use crate::fold::RnaSequence;
use crate::rng::StreamRng;

const BASES: [u8; 4] = [b'A', b'C', b'G', b'U'];

#[derive(Debug, Clone)]
pub struct FamilyGenConfig {
    pub n_families: usize,
    pub members_per_family: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-position substitution probability to a different base.
    pub mutation_rate: f64,
    /// Optional length mixture: this fraction of families draws its
    /// consensus length from [min_len, short_cutoff], the rest from
    /// (short_cutoff, max_len].
    pub short_fraction: Option<f64>,
    pub short_cutoff: Option<usize>,
}

impl FamilyGenConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.min_len < 10 {
            return Err(DataError::Config {
                message: format!("min_len {} below the minimum of 10", self.min_len),
            });
        }
        if self.min_len > self.max_len {
            return Err(DataError::Config {
                message: format!("empty length range [{}, {}]", self.min_len, self.max_len),
            });
        }
        if !(0.0..=0.3).contains(&self.mutation_rate) {
            return Err(DataError::Config {
                message: format!("mutation_rate {} outside [0, 0.3]", self.mutation_rate),
            });
        }
        match (self.short_fraction, self.short_cutoff) {
            (None, None) => {}
            (Some(f), Some(c)) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(DataError::Config {
                        message: format!("short_fraction {f} outside [0, 1]"),
                    });
                }
                if c < self.min_len || c >= self.max_len {
                    return Err(DataError::Config {
                        message: format!(
                            "short_cutoff {c} outside ({}, {})",
                            self.min_len, self.max_len
                        ),
                    });
                }
            }
            _ => {
                return Err(DataError::Config {
                    message: "short_fraction and short_cutoff must be set together".into(),
                })
            }
        }
        Ok(())
    }
}

/// Sample families: a uniform-random consensus per family, members derived
/// by i.i.d. point substitutions plus up to two indels. Member lengths stay
/// within 10% of the consensus length. Deterministic under the seed.
pub fn generate_families(
    cfg: &FamilyGenConfig,
    rng: &mut StreamRng,
) -> Result<Vec<Family>, DataError> {
    cfg.validate()?;
    let mut families = Vec::with_capacity(cfg.n_families);
    for fi in 0..cfg.n_families {
        let mut frng = rng.split_index("family", fi as u64);
        let len = consensus_length(cfg, &mut frng);
        let consensus_bases: String = (0..len)
            .map(|_| BASES[frng.uniform_range(0, 3) as usize] as char)
            .collect();
        let family_id = format!("F{fi:05}");
        let consensus = RnaSequence::new(format!("{family_id}_consensus"), &consensus_bases)
            .expect("generated bases are valid");
        let mut members = Vec::with_capacity(cfg.members_per_family);
        for mi in 0..cfg.members_per_family {
            let mut mrng = frng.split_index("member", mi as u64);
            let bases = mutate(&consensus_bases, cfg.mutation_rate, &mut mrng);
            let id = format!("{family_id}_m{mi:04}");
            members.push(RnaSequence::new(id, &bases).expect("mutations keep the alphabet"));
        }
        families.push(Family {
            family_id,
            consensus,
            members,
        });
    }
    Ok(families)
}

fn consensus_length(cfg: &FamilyGenConfig, rng: &mut StreamRng) -> usize {
    match (cfg.short_fraction, cfg.short_cutoff) {
        (Some(frac), Some(cutoff)) => {
            if rng.uniform_f64() < frac {
                rng.uniform_range(cfg.min_len as u64, cutoff as u64) as usize
            } else {
                rng.uniform_range(cutoff as u64 + 1, cfg.max_len as u64) as usize
            }
        }
        _ => rng.uniform_range(cfg.min_len as u64, cfg.max_len as u64) as usize,
    }
}

/// Point substitutions at `rate` (always to a different base), then up to
/// two indels, capped so the length never drifts more than 10% from the
/// consensus.
fn mutate(consensus: &str, rate: f64, rng: &mut StreamRng) -> String {
    let mut bases: Vec<u8> = consensus
        .bytes()
        .map(|b| {
            if rng.uniform_f64() < rate {
                substitute(b, rng)
            } else {
                b
            }
        })
        .collect();
    let len = consensus.len();
    let max_indels = 2.min(len / 10);
    let n_indels = if max_indels > 0 {
        rng.uniform_range(0, max_indels as u64) as usize
    } else {
        0
    };
    for _ in 0..n_indels {
        let insert = rng.uniform_range(0, 1) == 1;
        if insert {
            let pos = rng.uniform_range(0, bases.len() as u64) as usize;
            let base = BASES[rng.uniform_range(0, 3) as usize];
            bases.insert(pos, base);
        } else if bases.len() > 1 {
            let pos = rng.uniform_range(0, bases.len() as u64 - 1) as usize;
            bases.remove(pos);
        }
    }
    String::from_utf8(bases).expect("ascii bases")
}

fn substitute(base: u8, rng: &mut StreamRng) -> u8 {
    let choices: Vec<u8> = BASES.iter().copied().filter(|&b| b != base).collect();
    choices[rng.uniform_range(0, choices.len() as u64 - 1) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sequence_identity;

    fn base_cfg() -> FamilyGenConfig {
        FamilyGenConfig {
            n_families: 4,
            members_per_family: 5,
            min_len: 20,
            max_len: 40,
            mutation_rate: 0.1,
            short_fraction: None,
            short_cutoff: None,
        }
    }

    #[test]
    fn zero_mutation_rate_copies_consensus() {
        let cfg = FamilyGenConfig {
            mutation_rate: 0.0,
            ..base_cfg()
        };
        let fams = generate_families(&cfg, &mut StreamRng::from_seed(1)).unwrap();
        for f in &fams {
            for m in &f.members {
                // indels still apply; identity must be >= 1 - 2/len
                let id = sequence_identity(m, &f.consensus);
                assert!(id >= 1.0 - 2.0 / f.consensus.len() as f64);
            }
        }
    }

    #[test]
    fn no_families_is_empty() {
        let cfg = FamilyGenConfig {
            n_families: 0,
            ..base_cfg()
        };
        assert!(generate_families(&cfg, &mut StreamRng::from_seed(1))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn member_lengths_stay_within_ten_percent() {
        let cfg = FamilyGenConfig {
            n_families: 20,
            members_per_family: 10,
            ..base_cfg()
        };
        let fams = generate_families(&cfg, &mut StreamRng::from_seed(2)).unwrap();
        for f in &fams {
            let c = f.consensus.len() as f64;
            for m in &f.members {
                let dev = (m.len() as f64 - c).abs() / c;
                assert!(dev <= 0.10 + 1e-9, "member length {} vs consensus {}", m.len(), c);
            }
        }
    }

    #[test]
    fn mean_identity_matches_binomial_expectation() {
        // rate 0.1 with other-base substitutions puts per-position identity
        // at 0.9; indels subtract about 1/len on average
        let cfg = FamilyGenConfig {
            n_families: 100,
            members_per_family: 10,
            min_len: 80,
            max_len: 100,
            mutation_rate: 0.1,
            short_fraction: None,
            short_cutoff: None,
        };
        let fams = generate_families(&cfg, &mut StreamRng::from_seed(3)).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for f in &fams {
            for m in &f.members {
                sum += sequence_identity(m, &f.consensus);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert_eq!(count, 1000);
        assert!((0.88..=0.92).contains(&mean), "mean identity {mean}");
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = base_cfg();
        let a = generate_families(&cfg, &mut StreamRng::from_seed(9)).unwrap();
        let b = generate_families(&cfg, &mut StreamRng::from_seed(9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.consensus, y.consensus);
            assert_eq!(x.members, y.members);
        }
    }

    #[test]
    fn length_mixture_respected() {
        let cfg = FamilyGenConfig {
            n_families: 200,
            members_per_family: 1,
            min_len: 20,
            max_len: 60,
            mutation_rate: 0.0,
            short_fraction: Some(0.75),
            short_cutoff: Some(30),
        };
        let fams = generate_families(&cfg, &mut StreamRng::from_seed(4)).unwrap();
        let short = fams.iter().filter(|f| f.consensus.len() <= 30).count();
        let frac = short as f64 / fams.len() as f64;
        assert!((0.6..=0.9).contains(&frac), "short fraction {frac}");
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = FamilyGenConfig {
            min_len: 50,
            max_len: 40,
            ..base_cfg()
        };
        assert!(generate_families(&cfg, &mut StreamRng::from_seed(1)).is_err());
        let cfg = FamilyGenConfig {
            mutation_rate: 0.5,
            ..base_cfg()
        };
        assert!(generate_families(&cfg, &mut StreamRng::from_seed(1)).is_err());
        let cfg = FamilyGenConfig {
            min_len: 5,
            ..base_cfg()
        };
        assert!(generate_families(&cfg, &mut StreamRng::from_seed(1)).is_err());
    }
}

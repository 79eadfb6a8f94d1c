//! Seeded synthetic logs with Zipf-distributed variant frequencies.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log::{SimpleEventLog, TraceVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: u64,
    pub variants: usize,
    /// Exponent `s` of the masses `k^-s`, `k = 1..=variants`.
    pub zipf_skew: f64,
    /// Number of distinct activity labels.
    pub activities: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { cases: 500, variants: 5, zipf_skew: 1.0, activities: 8, min_length: 3, max_length: 7, seed: 0 }
    }
}

/// Splits `cases` over `variants` Zipf ranks by largest remainder, with at
/// least one case per rank. Ties in the remainder go to the lower rank.
pub fn zipf_counts(cases: u64, variants: usize, skew: f64) -> Result<Vec<u64>> {
    if variants == 0 || cases < variants as u64 {
        return Err(Error::InvalidParameter(format!("cannot spread {cases} cases over {variants} variants")));
    }
    if !(skew >= 0.0) || !skew.is_finite() {
        return Err(Error::InvalidParameter(format!("zipf skew {skew} must be non-negative")));
    }
    let weights: Vec<f64> = (1..=variants).map(|k| (k as f64).powf(-skew)).collect();
    let total: f64 = weights.iter().sum();
    let free = cases - variants as u64;
    let exact: Vec<f64> = weights.iter().map(|w| w / total * free as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let mut order: Vec<usize> = (0..variants).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = free - counts.iter().sum::<u64>();
    for &i in order.iter().take(short as usize) {
        counts[i] += 1;
    }
    Ok(counts.into_iter().map(|c| c + 1).collect())
}

/// Log of `cases` cases over `variants` distinct random variants; the
/// k-th variant drawn receives the k-th Zipf count.
pub fn synthetic_log(config: &SynthConfig) -> Result<SimpleEventLog> {
    if config.activities == 0 || config.min_length == 0 || config.min_length > config.max_length {
        return Err(Error::InvalidParameter("need activities >= 1 and 1 <= min_length <= max_length".into()));
    }
    let space: f64 = (config.min_length..=config.max_length)
        .map(|l| (config.activities as f64).powi(l as i32))
        .sum();
    if space < config.variants as f64 {
        return Err(Error::InvalidParameter(format!("only {space} distinct variants exist")));
    }
    let counts = zipf_counts(config.cases, config.variants, config.zipf_skew)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = BTreeSet::new();
    let mut log = SimpleEventLog::new();
    for count in counts {
        let variant = loop {
            let len = rng.random_range(config.min_length..=config.max_length);
            let v = TraceVariant::new((0..len).map(|_| format!("act_{}", rng.random_range(0..config.activities))));
            if seen.insert(v.clone()) {
                break v;
            }
        };
        log.add(variant, count);
    }
    Ok(log)
}

//! Filtered link-prediction metrics: mean reciprocal rank and Hits@k.
//!
//! Each test triplet is ranked twice — once against every tail replacement,
//! once against every head replacement — with candidates that form a *known*
//! true triplet removed from the ranking (the standard filtered protocol).
//! Rank ties are broken by entity index so results are deterministic.

use std::collections::{BTreeMap, HashSet};

use crate::{Error, Result};

use super::{stored_score, KgModel, NodeRef, StoredTriplet};

/// Filtered ranking quality over a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMetrics {
    /// Mean reciprocal rank over both corruption directions.
    pub mrr: f64,
    /// Fraction of ranking instances with rank ≤ k, per requested k.
    pub hits: BTreeMap<usize, f64>,
}

/// Computes filtered MRR and Hits@k for `test` triplets against the model's
/// full entity universe. `known` lists every true triplet (train + test);
/// corruptions contained in it are excluded from rankings.
pub fn filtered_link_metrics(
    model: &KgModel,
    test: &[StoredTriplet],
    known: &[StoredTriplet],
    ks: &[usize],
) -> Result<LinkMetrics> {
    if test.is_empty() {
        return Err(Error::Eval("cannot evaluate an empty test split".into()));
    }
    let known: HashSet<StoredTriplet> = known.iter().copied().collect();
    let n_entities = model.entities.len();

    let mut reciprocal_sum = 0.0;
    let mut hit_counts: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut instances = 0usize;
    let record = |rank: usize,
                      reciprocal_sum: &mut f64,
                      hit_counts: &mut BTreeMap<usize, usize>| {
        *reciprocal_sum += 1.0 / rank as f64;
        for (&k, count) in hit_counts.iter_mut() {
            if rank <= k {
                *count += 1;
            }
        }
    };

    for t in test {
        // Tail replacement: rank the true tail among all entities.
        let true_score = stored_score(&model.params, t);
        let mut rank = 1usize;
        for v in 0..n_entities {
            if v == t.tail {
                continue;
            }
            let candidate = StoredTriplet { tail: v, ..*t };
            if known.contains(&candidate) {
                continue;
            }
            let s = stored_score(&model.params, &candidate);
            if s < true_score || (s == true_score && v < t.tail) {
                rank += 1;
            }
        }
        record(rank, &mut reciprocal_sum, &mut hit_counts);
        instances += 1;

        // Head replacement: composite heads are ranked against every single
        // entity; a composite true head breaks score ties after the singles.
        let true_key = match t.head {
            NodeRef::Single(i) => i,
            NodeRef::Pair { .. } => usize::MAX,
        };
        let mut rank = 1usize;
        for v in 0..n_entities {
            let candidate = StoredTriplet { head: NodeRef::Single(v), ..*t };
            if candidate.head == t.head {
                continue;
            }
            if known.contains(&candidate) {
                continue;
            }
            let s = stored_score(&model.params, &candidate);
            if s < true_score || (s == true_score && v < true_key) {
                rank += 1;
            }
        }
        record(rank, &mut reciprocal_sum, &mut hit_counts);
        instances += 1;
    }

    Ok(LinkMetrics {
        mrr: reciprocal_sum / instances as f64,
        hits: hit_counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / instances as f64))
            .collect(),
    })
}

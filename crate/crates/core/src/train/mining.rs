use std::collections::BTreeMap;

use rand::Rng;

use super::loss::embed;
use super::trainer::TrainingSample;
use crate::descriptor::{sq_dist, AffineHead};
use crate::error::{Error, Result};

/// Indices into a sample slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

fn group_by_class(samples: &[TrainingSample]) -> BTreeMap<&str, Vec<usize>> {
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        classes.entry(s.class_id.as_str()).or_default().push(i);
    }
    classes
}

/// Draws `count` random triplets.
///
/// The query is uniform over samples whose class has a second member, the
/// positive uniform over the other members of that class and the negative
/// uniform over every sample of any other class.
pub fn sample_triplets<R: Rng>(
    samples: &[TrainingSample],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let classes = group_by_class(samples);
    if classes.len() < 2 {
        return Err(Error::InsufficientClasses(classes.len()));
    }
    let anchors: Vec<usize> = classes
        .values()
        .filter(|members| members.len() >= 2)
        .flatten()
        .copied()
        .collect();
    if anchors.is_empty() {
        return Err(Error::InsufficientPositives);
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let query = anchors[rng.random_range(0..anchors.len())];
        let class = samples[query].class_id.as_str();
        let members = &classes[class];
        let mut pick = rng.random_range(0..members.len() - 1);
        if members[pick] == query {
            pick = members.len() - 1;
        }
        let positive = members[pick];
        let r = rng.random_range(0..samples.len() - members.len());
        let negative = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id != class)
            .nth(r)
            .map(|(i, _)| i)
            .expect("negative index in range");
        out.push(Triplet {
            query,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Batch-hard mining: for every anchor in `batch` (indices into `samples`),
/// the farthest same-class sample and the nearest other-class sample under
/// the current head. Anchors without a positive or a negative are skipped.
/// Ties go to the lower batch position.
pub fn batch_hard_mine(
    samples: &[TrainingSample],
    batch: &[usize],
    head: &AffineHead,
) -> Result<Vec<Triplet>> {
    let n_classes = {
        let mut c: Vec<&str> = batch.iter().map(|&i| samples[i].class_id.as_str()).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    if n_classes < 2 {
        return Err(Error::InsufficientClasses(n_classes));
    }
    let emb: Vec<Vec<f64>> = batch
        .iter()
        .map(|&i| embed(head, samples[i].input.values()).map(|e| e.unit))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for (a, &anchor) in batch.iter().enumerate() {
        let class = &samples[anchor].class_id;
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for (b, &other) in batch.iter().enumerate() {
            if a == b {
                continue;
            }
            let d = sq_dist(&emb[a], &emb[b]);
            if samples[other].class_id == *class {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((b, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((b, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) {
            out.push(Triplet {
                query: anchor,
                positive: batch[p],
                negative: batch[n],
            });
        }
    }
    Ok(out)
}

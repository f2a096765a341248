use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draw `min(s, n_c)` indices per class without replacement.
///
/// Returns indices into `labels`, grouped by class in ascending class order
/// and in draw order within a class.
pub fn few_shot_sample(labels: &[usize], s: usize, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("few-shot source split"));
    }
    if s == 0 {
        return Err(Error::Config("few-shot sample size must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < s {
            log::info!("class {class} holds {} examples, fewer than {s}", idx.len());
        }
        idx.shuffle(&mut rng);
        out.extend(idx.into_iter().take(s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_is_s_times_c() {
        let labels: Vec<usize> = (0..700).map(|i| i % 7).collect();
        let got = few_shot_sample(&labels, 16, 3).unwrap();
        assert_eq!(got.len(), 112);
        for c in 0..7 {
            assert_eq!(got.iter().filter(|&&i| labels[i] == c).count(), 16);
        }
        let mut uniq = got.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 112);
    }

    #[test]
    fn shortfall_takes_everything() {
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 300]);
        let got = few_shot_sample(&labels, 128, 0).unwrap();
        assert_eq!(got.iter().filter(|&&i| labels[i] == 0).count(), 100);
        assert_eq!(got.iter().filter(|&&i| labels[i] == 1).count(), 128);
    }

    #[test]
    fn seeded_and_checked() {
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        assert_eq!(few_shot_sample(&labels, 5, 9).unwrap(), few_shot_sample(&labels, 5, 9).unwrap());
        assert_ne!(few_shot_sample(&labels, 5, 9).unwrap(), few_shot_sample(&labels, 5, 10).unwrap());
        assert!(few_shot_sample(&[], 5, 0).is_err());
        assert!(few_shot_sample(&labels, 0, 0).is_err());
    }
}

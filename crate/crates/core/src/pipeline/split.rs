//! Seeded, label-stratified train/validation/test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{roles, PipelineError};
use crate::datagen::sub_seed;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits sample indices `0..labels.len()`.
///
/// Each class is shuffled, its members get fractional ranks `(j + 0.5) / n_class`, and
/// all samples are merged by rank; cutting the merged order at `round(f_train * n)`
/// and `round(f_val * n)` keeps every part's class mix within one sample of the
/// global mix. Each part is returned in ascending index order.
pub fn split(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<Split, PipelineError> {
    if labels.is_empty() {
        return Err(PipelineError::Config("cannot split an empty dataset".into()));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PipelineError::Config(format!("invalid split fractions {fractions:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, roles::SPLIT, 0));
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = labels.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |r: std::ops::Range<usize>| {
        let mut v: Vec<usize> = keyed[r].iter().map(|k| k.2).collect();
        v.sort_unstable();
        v
    };
    let s = Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    };
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let pos = part.iter().filter(|&&i| labels[i] == 1).count();
        if !part.is_empty() && (pos == 0 || pos == part.len()) {
            log::warn!("{name} split has {} samples but only one class", part.len());
        }
    }
    Ok(s)
}

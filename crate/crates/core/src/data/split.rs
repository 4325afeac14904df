use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` sliced into `k` contiguous test blocks; the
/// first `n % k` blocks get one extra index. Index lists are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = perm[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = perm[..start]
            .iter()
            .chain(&perm[start + size..])
            .copied()
            .collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

/// Splits `rows` into `(train, validation)` with `fraction` of them (at least
/// one, at most all but one) held out by a seeded shuffle.
pub fn carve_validation(rows: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if rows.len() < 2 {
        return Err(Error::Data("need at least 2 rows to carve a validation split".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let mut perm = rows.to_vec();
    perm.shuffle(&mut rng::rng(seed));
    let n_val = ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len() - 1);
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_partition(n: usize, k: usize, seed: u64) {
        let folds = kfold_split(n, k, seed).unwrap();
        assert_eq!(folds.len(), k);
        let mut seen = vec![false; n];
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(max - min <= 1);
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), n);
            for &i in &f.test {
                assert!(!seen[i], "index {i} in two test sets");
                seen[i] = true;
            }
            assert!(f.train.iter().all(|i| f.test.binary_search(i).is_err()));
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn ten_singletons() {
        let folds = kfold_split(10, 10, 0).unwrap();
        let mut all: Vec<usize> = folds
            .iter()
            .map(|f| {
                assert_eq!(f.test.len(), 1);
                f.test[0]
            })
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_sizes() {
        let folds = kfold_split(10, 3, 5).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn errors() {
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 9).unwrap());
        assert_ne!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 10).unwrap());
    }

    #[test]
    fn partition_exhaustive() {
        for n in 2..=200 {
            for k in 2..=n {
                check_partition(n, k, (n * 1000 + k) as u64);
            }
        }
    }

    #[test]
    fn validation_carve() {
        let rows: Vec<usize> = (100..200).collect();
        let (train, val) = carve_validation(&rows, 0.1, 3).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
        let mut all = [train, val].concat();
        all.sort_unstable();
        assert_eq!(all, rows);
    }
}

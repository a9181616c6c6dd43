use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A bijection on `0..n`, stored as the image of each index.
///
/// Applied to rows, output row `i` is input row `self[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(index: Vec<usize>) -> Result<Self> {
        let n = index.len();
        if n == 0 {
            return Err(Error::Permutation("empty index".into()));
        }
        let mut seen = vec![false; n];
        for &i in &index {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Permutation(format!(
                    "{index:?} is not a bijection on 0..{n}"
                )));
            }
        }
        Ok(Self(index))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Uniformly random bijection (Fisher-Yates).
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Self(v)
    }

    /// `q` with `q[p[i]] = i`.
    pub fn inverse(&self) -> Self {
        let mut q = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            q[p] = i;
        }
        Self(q)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_bijections() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
        assert!(Permutation::new(vec![]).is_err());
    }

    #[test]
    fn inverse_examples() {
        let id = Permutation::new(vec![0, 1, 2]).unwrap();
        assert_eq!(id.inverse(), id);
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
    }

    #[test]
    fn random_is_seeded_bijection() {
        let a = Permutation::random(196, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Permutation::random(196, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(Permutation::new(a.as_slice().to_vec()).is_ok());
        assert_eq!(Permutation::random(1, &mut ChaCha8Rng::seed_from_u64(0)).as_slice(), &[0]);
        assert_eq!(a.inverse().inverse(), a);
    }
}

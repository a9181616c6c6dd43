//! Shape arithmetic shared by the broadcasting kernels.

use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into a tensor of shape
/// `src` that broadcasts onto it. Returns `None` when the map is the identity.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    // stride per output axis in source coordinates, zero on broadcast axes
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                src_strides[i - offset]
            }
        })
        .collect();
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes("t", &[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn bias_index_map() {
        let idx = broadcast_index(&[3], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
        let idx = broadcast_index(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
        assert!(broadcast_index(&[2, 3], &[2, 3]).is_none());
    }
}

use std::collections::HashSet;

use crate::error::Result;
use crate::slicing::eligible_starts;

/// Number of distinct sub-networks a weight matrix samples from when its
/// input side (`n` units, slices of `w1`) and/or output side (`m` units,
/// slices of `w2`) are sliced: `(n−w1+1)·(m−w2+1)` over the sliced sides.
pub fn architecture_count(input: Option<(usize, usize)>, output: Option<(usize, usize)>) -> Result<u64> {
    let mut count = 1u64;
    for (m, w) in input.into_iter().chain(output) {
        count *= eligible_starts(m, w)?.count() as u64;
    }
    Ok(count)
}

/// Counts distinct keep-masks of an `m × n` weight matrix by enumerating
/// every pair of eligible slice starts. `None` leaves a side unsliced.
pub fn enumerate_distinct_masks(n: usize, w1: Option<usize>, m: usize, w2: Option<usize>) -> Result<usize> {
    let cols: Vec<Vec<bool>> = side_masks(n, w1)?;
    let rows: Vec<Vec<bool>> = side_masks(m, w2)?;
    let words = (n * m).div_ceil(64);
    let mut seen = HashSet::new();
    for r in &rows {
        for c in &cols {
            let mut bits = vec![0u64; words];
            for (i, &ri) in r.iter().enumerate() {
                for (j, &cj) in c.iter().enumerate() {
                    if ri && cj {
                        let k = i * n + j;
                        bits[k / 64] |= 1 << (k % 64);
                    }
                }
            }
            seen.insert(bits);
        }
    }
    Ok(seen.len())
}

fn side_masks(m: usize, w: Option<usize>) -> Result<Vec<Vec<bool>>> {
    match w {
        None => Ok(vec![vec![true; m]]),
        Some(w) => Ok(eligible_starts(m, w)?.map(|s| (0..m).map(|j| j >= s && j < s + w).collect()).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(architecture_count(None, Some((10, 6))).unwrap(), 5);
        assert_eq!(architecture_count(Some((10, 6)), Some((8, 4))).unwrap(), 25);
        assert_eq!(architecture_count(Some((7, 7)), Some((5, 5))).unwrap(), 1);
        assert_eq!(enumerate_distinct_masks(10, Some(6), 8, Some(4)).unwrap(), 25);
        assert_eq!(enumerate_distinct_masks(10, None, 10, Some(6)).unwrap(), 5);
    }
}

//! Set partitions in restricted-growth-string form.
//!
//! Partitions of `{0..k-1}` index both the basis of the equivariant linear
//! layers and the equivalence classes of the higher-order attention. The
//! canonical ordering everywhere is lexicographic over restricted-growth
//! strings.

use crate::error::{Error, Result};

/// A set partition of `{0..k-1}`. `rgs[i]` is the block of element `i`;
/// block ids appear in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SetPartition {
    rgs: Vec<u8>,
    block_count: usize,
}

impl SetPartition {
    pub fn from_rgs(rgs: Vec<u8>) -> Result<Self> {
        let mut max_seen: i32 = -1;
        for &v in &rgs {
            if v as i32 > max_seen + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{rgs:?} is not a restricted-growth string"
                )));
            }
            max_seen = max_seen.max(v as i32);
        }
        if rgs.is_empty() {
            return Err(Error::InvalidArgument("empty partition".into()));
        }
        Ok(SetPartition { rgs, block_count: (max_seen + 1) as usize })
    }

    pub fn len(&self) -> usize {
        self.rgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgs.is_empty()
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn block_of(&self, element: usize) -> usize {
        self.rgs[element] as usize
    }

    pub fn rgs(&self) -> &[u8] {
        &self.rgs
    }

    /// Elements of each block, in ascending order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.block_count];
        for (e, &b) in self.rgs.iter().enumerate() {
            blocks[b as usize].push(e);
        }
        blocks
    }
}

/// Number of set partitions of a `k`-element set, via the Bell triangle.
pub fn bell_number(k: usize) -> usize {
    let mut row = vec![1usize];
    for _ in 0..k {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &v in &row {
            next.push(next.last().unwrap() + v);
        }
        row = next;
    }
    row[0]
}

/// All set partitions of `{0..k-1}` in lexicographic restricted-growth
/// order. `k` is capped at 6; larger combined orders are out of scope.
pub fn enumerate_partitions(k: usize) -> Result<Vec<SetPartition>> {
    if k == 0 || k > 6 {
        return Err(Error::InvalidArgument(format!(
            "partition order {k} out of supported range 1..=6"
        )));
    }
    let mut out = Vec::with_capacity(bell_number(k));
    let mut rgs = vec![0u8; k];
    loop {
        out.push(SetPartition::from_rgs(rgs.clone()).expect("rgs by construction"));
        // Next restricted-growth string in lexicographic order.
        let mut pos = k;
        loop {
            if pos <= 1 {
                return Ok(out);
            }
            pos -= 1;
            let prefix_max = rgs[..pos].iter().copied().max().unwrap_or(0);
            if rgs[pos] <= prefix_max {
                rgs[pos] += 1;
                for v in rgs[pos + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            rgs[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force count: assign each element to a block id bounded by the
    /// restricted-growth condition.
    fn brute_count(k: usize) -> usize {
        fn rec(rgs: &mut Vec<u8>, k: usize) -> usize {
            if rgs.len() == k {
                return 1;
            }
            let max = rgs.iter().copied().max().map(|m| m + 1).unwrap_or(0);
            let mut total = 0;
            for b in 0..=max {
                rgs.push(b);
                total += rec(rgs, k);
                rgs.pop();
            }
            total
        }
        rec(&mut Vec::new(), k)
    }

    #[test]
    fn counts_match_brute_force() {
        let expect = [1usize, 2, 5, 15, 52, 203];
        for k in 1..=6 {
            assert_eq!(brute_count(k), expect[k - 1]);
            assert_eq!(enumerate_partitions(k).unwrap().len(), expect[k - 1]);
            assert_eq!(bell_number(k), expect[k - 1]);
        }
    }

    #[test]
    fn order_is_lexicographic_and_unique() {
        let parts = enumerate_partitions(4).unwrap();
        for w in parts.windows(2) {
            assert!(w[0].rgs() < w[1].rgs());
        }
    }

    #[test]
    fn first_and_last_partitions() {
        let parts = enumerate_partitions(3).unwrap();
        assert_eq!(parts.first().unwrap().rgs(), &[0, 0, 0]);
        assert_eq!(parts.last().unwrap().rgs(), &[0, 1, 2]);
        assert_eq!(parts[0].block_count(), 1);
        assert_eq!(parts.last().unwrap().block_count(), 3);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(enumerate_partitions(0).is_err());
        assert!(enumerate_partitions(7).is_err());
    }

    #[test]
    fn blocks_recover_membership() {
        let p = SetPartition::from_rgs(vec![0, 1, 0, 2, 1]).unwrap();
        assert_eq!(p.blocks(), vec![vec![0, 2], vec![1, 4], vec![3]]);
    }

    #[test]
    fn invalid_rgs_rejected() {
        assert!(SetPartition::from_rgs(vec![0, 2]).is_err());
        assert!(SetPartition::from_rgs(vec![1]).is_err());
    }
}

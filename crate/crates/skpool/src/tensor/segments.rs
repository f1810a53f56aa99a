//! Row-to-local-group mapping that drives every pooled operation.

use crate::error::{Error, Result};

/// Maps each row index of an `N`-row tensor to one of `M` local groups.
///
/// Construction validates the two segment invariants: every group id is in
/// range, and every group in `0..M` is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    group_of: Vec<usize>,
    num_groups: usize,
}

impl Segments {
    pub fn new(group_of: Vec<usize>, num_groups: usize) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::InvalidSegments("no rows to group".into()));
        }
        if num_groups == 0 {
            return Err(Error::InvalidSegments("zero groups".into()));
        }
        let mut seen = vec![false; num_groups];
        for (row, &g) in group_of.iter().enumerate() {
            if g >= num_groups {
                return Err(Error::InvalidSegments(format!(
                    "row {row} maps to group {g}, but only {num_groups} groups exist"
                )));
            }
            seen[g] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidSegments(format!("group {empty} is empty")));
        }
        Ok(Segments {
            group_of,
            num_groups,
        })
    }

    /// All rows in one group: global max-pooling.
    pub fn single(num_rows: usize) -> Self {
        assert!(num_rows > 0, "cannot group zero rows");
        Segments {
            group_of: vec![0; num_rows],
            num_groups: 1,
        }
    }

    /// Each row its own group: pooling becomes the identity on rows.
    pub fn singletons(num_rows: usize) -> Self {
        assert!(num_rows > 0, "cannot group zero rows");
        Segments {
            group_of: (0..num_rows).collect(),
            num_groups: num_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }
}

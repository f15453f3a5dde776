use std::sync::Arc;

/// Partition of consecutive tensor rows into groups (one group per example).
///
/// Token-level tensors stack the tokens of every utterance in a batch; the
/// segments record where each utterance starts and ends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Arc<Vec<usize>>,
}

impl Segments {
    /// Builds segments from group lengths. Every length must be positive.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        assert!(lengths.iter().all(|&l| l > 0), "empty segment");
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets: Arc::new(offsets) }
    }

    /// Every row is its own group.
    pub fn identity(rows: usize) -> Self {
        Segments { offsets: Arc::new((0..=rows).collect()) }
    }

    /// All rows form one group.
    pub fn single(rows: usize) -> Self {
        Segments::from_lengths(&[rows])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn is_identity(&self) -> bool {
        self.count() == self.total_rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_follow_lengths() {
        let s = Segments::from_lengths(&[2, 1, 3]);
        assert_eq!(s.count(), 3);
        assert_eq!(s.total_rows(), 6);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0..2, 2..3, 3..6]);
        assert_eq!(s.len_of(2), 3);
        assert!(!s.is_identity());
    }

    #[test]
    fn identity_and_single() {
        assert!(Segments::identity(4).is_identity());
        assert_eq!(Segments::identity(4), Segments::from_lengths(&[1, 1, 1, 1]));
        assert_eq!(Segments::single(5).range(0), 0..5);
    }

    #[test]
    #[should_panic(expected = "empty segment")]
    fn zero_length_panics() {
        Segments::from_lengths(&[2, 0]);
    }
}

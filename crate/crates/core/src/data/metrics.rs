use crate::data::vocab::SPACE;
use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, two-row DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Words of a transcript: split on the space grapheme, empty pieces dropped.
pub fn words(text: &str) -> Vec<&str> {
    text.split(SPACE).filter(|w| !w.is_empty()).collect()
}

/// Edit count and reference length, summable over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub edits: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn chars(hyp: &str, reference: &str) -> Self {
        let h: Vec<char> = hyp.chars().collect();
        let r: Vec<char> = reference.chars().collect();
        Self { edits: edit_distance(&h, &r), ref_len: r.len() }
    }

    pub fn words(hyp: &str, reference: &str) -> Self {
        let r = words(reference);
        Self { edits: edit_distance(&words(hyp), &r), ref_len: r.len() }
    }

    /// `edits / ref_len * 100`.
    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Empty("reference"));
        }
        Ok(self.edits as f64 / self.ref_len as f64 * 100.0)
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.edits += rhs.edits;
        self.ref_len += rhs.ref_len;
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = Self::default();
        for c in iter {
            total += c;
        }
        total
    }
}

/// Character error rate in percent.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    ErrorCounts::chars(hyp, reference).rate()
}

/// Word error rate in percent, words split on the space grapheme.
pub fn wer(hyp: &str, reference: &str) -> Result<f64> {
    ErrorCounts::words(hyp, reference).rate()
}

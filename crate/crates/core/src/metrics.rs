//! Recognition scoring: edit-distance alignment for CER/WER and the
//! frame-level latency metric of the chunked encoder.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Counts from a minimal edit-distance alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentStats {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub reference_len: usize,
}

impl AlignmentStats {
    pub fn distance(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    /// Error rate is undefined for an empty reference.
    EmptyReference,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyReference => write!(f, "error rate undefined: empty reference"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Levenshtein alignment with unit costs.
///
/// The distance is unique; for reproducible alignment dumps, backtrace ties
/// prefer substitution over insertion over deletion.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentStats {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + cost)
                .min(dp[idx(i, j - 1)] + 1)
                .min(dp[idx(i - 1, j)] + 1);
        }
    }

    let mut stats = AlignmentStats {
        insertions: 0,
        deletions: 0,
        substitutions: 0,
        reference_len: n,
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[idx(i - 1, j - 1)] + cost == here {
                if cost == 1 {
                    stats.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[idx(i, j - 1)] + 1 == here {
            stats.insertions += 1;
            j -= 1;
            continue;
        }
        stats.deletions += 1;
        i -= 1;
    }
    debug_assert_eq!(stats.distance(), dp[idx(n, m)]);
    stats
}

/// (insertions + deletions + substitutions) / reference length.
///
/// The same formula serves WER (word tokens) and CER (character tokens) and
/// may exceed 1 when the hypothesis is much longer than the reference.
pub fn error_rate(stats: &AlignmentStats) -> Result<f64, MetricsError> {
    if stats.reference_len == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(stats.distance() as f64 / stats.reference_len as f64)
}

/// Word tokens: lowercase, then split on whitespace.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(String::from).collect()
}

/// Character tokens: every non-space character, spaces removed.
pub fn char_tokens(text: &str) -> Vec<char> {
    text.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect()
}

/// Frame-level latency of a chunked encoder, in milliseconds.
///
/// The maximum is `chunk_size * downsample * hop_ms` (the last frame of a
/// chunk waits for the whole chunk); per-frame latency ranges over
/// `[0, max]`, so the chunk average is half the maximum.
pub fn frame_latency(chunk_size: usize, frontend_downsample: usize, hop_ms: f64) -> (f64, f64) {
    debug_assert!(chunk_size > 0 && frontend_downsample > 0 && hop_ms > 0.0);
    let max = chunk_size as f64 * frontend_downsample as f64 * hop_ms;
    (max, max / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_align_clean() {
        let s = edit_alignment(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(
            s,
            AlignmentStats { insertions: 0, deletions: 0, substitutions: 0, reference_len: 3 }
        );
        assert_eq!(error_rate(&s).unwrap(), 0.0);
    }

    #[test]
    fn single_word_substitution() {
        let r = word_tokens("the cat");
        let h = word_tokens("the bat");
        let s = edit_alignment(&r, &h);
        assert_eq!(s.substitutions, 1);
        assert_eq!(error_rate(&s).unwrap(), 0.5);
    }

    #[test]
    fn error_rate_may_exceed_one() {
        let r = word_tokens("a");
        let h = word_tokens("a b c");
        let s = edit_alignment(&r, &h);
        assert_eq!(s.insertions, 2);
        assert_eq!(error_rate(&s).unwrap(), 2.0);
    }

    #[test]
    fn empty_reference_is_rejected() {
        let s = edit_alignment::<char>(&[], &['a']);
        assert_eq!(error_rate(&s), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn latency_formula() {
        assert_eq!(frame_latency(32, 4, 10.0), (1280.0, 640.0));
        assert_eq!(frame_latency(1, 4, 10.0), (40.0, 20.0));
        assert_eq!(frame_latency(8, 4, 10.0), (320.0, 160.0));
    }

    #[test]
    fn char_tokens_drop_spaces() {
        assert_eq!(char_tokens("a b"), vec!['a', 'b']);
    }
}

//! Edit-distance oracle: an independent memoized recursion checked against
//! the DP alignment on random pairs.

use std::collections::HashMap;

use mmasr_core::metrics::{edit_alignment, error_rate};
use mmasr_core::rng::Rng;

/// Memoized top-down Levenshtein, written independently of the DP version.
fn oracle_distance(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            let sub = go(a, b, i + 1, j + 1, memo);
            let del = go(a, b, i + 1, j, memo);
            let ins = go(a, b, i, j + 1, memo);
            1 + sub.min(del).min(ins)
        };
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, memo)
}

#[test]
fn alignment_distance_matches_memoized_oracle_on_1000_pairs() {
    let mut rng = Rng::new(0xED17);
    for _ in 0..1000 {
        let alphabet = 1 + rng.below(5) as u8;
        let la = rng.below(13);
        let lb = rng.below(13);
        let a: Vec<u8> = (0..la).map(|_| rng.below(alphabet as usize) as u8).collect();
        let b: Vec<u8> = (0..lb).map(|_| rng.below(alphabet as usize) as u8).collect();
        let stats = edit_alignment(&a, &b);
        let want = oracle_distance(&a, &b, &mut HashMap::new());
        assert_eq!(stats.distance(), want, "a={a:?} b={b:?}");
    }
}

#[test]
fn cer_and_wer_agree_on_identical_tokenizations() {
    let reference = "the cat sat";
    let hypothesis = "the cat sat";
    let w = edit_alignment(
        &mmasr_core::metrics::word_tokens(reference),
        &mmasr_core::metrics::word_tokens(hypothesis),
    );
    let c = edit_alignment(
        &mmasr_core::metrics::char_tokens(reference),
        &mmasr_core::metrics::char_tokens(hypothesis),
    );
    assert_eq!(error_rate(&w).unwrap(), error_rate(&c).unwrap());
}

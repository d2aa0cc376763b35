//! Text overlap and readability metrics.
//!
//! Tokenization: lowercase, then maximal runs of alphanumeric characters;
//! whitespace and punctuation only separate tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate total for `n`-grams.
pub fn clipped_precision_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let total = candidate.len().saturating_sub(n - 1);
    let matched = cand
        .iter()
        .map(|(g, c)| {
            let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            (*c).min(max_ref)
        })
        .sum();
    (matched, total)
}

/// BLEU-4 with uniform weights and the closest-length brevity penalty
/// (ties to the shorter reference). For n ≥ 2 a zero match count gives
/// precision `1 / (total + 1)`; unigram precision is never smoothed.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(EvalError::Invalid("BLEU needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = clipped_precision_counts(candidate, references, n);
        let p = if n == 1 {
            m as f64 / t as f64
        } else if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += 0.25 * p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// LCS-based overlap; empty inputs score zero.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeL {
    if candidate.is_empty() || reference.is_empty() {
        return RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    let f1 = if l == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    RougeL { precision, recall, f1 }
}

/// Vowel groups (`aeiouy`) in the letters of `word`, minus one for a
/// final silent `e` (not after a consonant in `-le`), at least 1.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word.to_lowercase().chars().filter(|c| c.is_alphabetic()).collect();
    if w.is_empty() {
        return 1;
    }
    let vowel = |c: char| "aeiouy".contains(c);
    let mut groups = 0;
    let mut prev = false;
    for &c in &w {
        let v = vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    let silent_e = n >= 2 && w[n - 1] == 'e' && !(w[n - 2] == 'l' && n >= 3 && !vowel(w[n - 3])) && !vowel(w[n - 2]);
    if silent_e && groups > 1 {
        groups -= 1;
    }
    groups.max(1)
}

pub fn flesch_kincaid_from_counts(words: usize, sentences: usize, syllables: usize) -> f64 {
    0.39 * (words as f64 / sentences as f64) + 11.8 * (syllables as f64 / words as f64) - 15.59
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCounts {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
}

/// Words are whitespace-separated chunks with an alphanumeric character;
/// sentences are runs of `.`, `!` or `?` that end a word, with an
/// unterminated tail counted as one more sentence.
pub fn text_counts(text: &str) -> TextCounts {
    let mut words = 0;
    let mut sentences = 0;
    let mut syl = 0;
    let mut open = false;
    for chunk in text.split_whitespace() {
        if !chunk.chars().any(char::is_alphanumeric) {
            continue;
        }
        words += 1;
        syl += syllables(chunk);
        open = true;
        if chunk.trim_end_matches(['"', '\'', ')', ']']).ends_with(['.', '!', '?']) {
            sentences += 1;
            open = false;
        }
    }
    if open {
        sentences += 1;
    }
    TextCounts {
        words,
        sentences,
        syllables: syl,
    }
}

pub fn flesch_kincaid(text: &str) -> Result<f64> {
    let c = text_counts(text);
    if c.words == 0 {
        return Err(EvalError::Empty);
    }
    Ok(flesch_kincaid_from_counts(c.words, c.sentences, c.syllables))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_rule() {
        assert_eq!(toks("Elevated T_kitchen, timestep 10–30!"), ["elevated", "t", "kitchen", "timestep", "10", "30"]);
        assert!(toks(" ,.; ").is_empty());
    }

    #[test]
    fn bleu_identity_and_errors() {
        let c = toks("the model detected elevated load between steps");
        assert!((bleu4(&c, std::slice::from_ref(&c)).unwrap() - 1.0).abs() < 1e-15);
        assert!(bleu4(&c, &[]).is_err());
        assert!(bleu4(&[], &[c]).is_err());
    }

    #[test]
    fn bleu_ten_token_hand_case() {
        let c = toks("the cat sat on the mat with a red hat");
        let r = toks("the cat is on the mat with the red hat");
        // Clipped matches by hand: 8/10 unigrams, 5/9 bigrams
        // (the cat, on the, the mat, mat with, red hat), 2/8 trigrams
        // (on the mat, the mat with), 1/7 four-grams (on the mat with).
        assert_eq!(clipped_precision_counts(&c, std::slice::from_ref(&r), 1), (8, 10));
        assert_eq!(clipped_precision_counts(&c, std::slice::from_ref(&r), 2), (5, 9));
        assert_eq!(clipped_precision_counts(&c, std::slice::from_ref(&r), 3), (2, 8));
        assert_eq!(clipped_precision_counts(&c, std::slice::from_ref(&r), 4), (1, 7));
        let oracle = (0.8f64 * (5.0 / 9.0) * 0.25 * (1.0 / 7.0)).powf(0.25);
        assert!((bleu4(&c, &[r]).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn smoothing_keeps_zero_four_gram_overlap_positive() {
        let c = toks("a b c d x e f g h");
        let r = toks("a b c y d e f z g h");
        assert_eq!(clipped_precision_counts(&c, std::slice::from_ref(&r), 4).0, 0);
        assert!(bleu4(&c, &[r]).unwrap() > 0.0);
    }

    #[test]
    fn brevity_penalty() {
        let r = toks("a b c d e f g h");
        let c = toks("a b c d");
        assert!((bleu4(&c, &[r]).unwrap() - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let r = rouge_l(&toks("a b c d"), &toks("a c d e"));
        assert_eq!(lcs_len(&toks("a b c d"), &toks("a c d e")), 3);
        assert!((r.recall - 0.75).abs() < 1e-12 && (r.precision - 0.75).abs() < 1e-12 && (r.f1 - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")).f1, 0.0);
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).f1, 1.0);
    }

    #[test]
    fn syllable_heuristic() {
        let cases = [("cat", 1), ("make", 1), ("table", 2), ("reading", 2), ("elevated", 4), ("the", 1), ("sequence", 2), ("10", 1)];
        for (w, n) in cases {
            assert_eq!(syllables(w), n, "{w}");
        }
    }

    #[test]
    fn flesch_kincaid_cases() {
        assert!((flesch_kincaid_from_counts(10, 1, 13) - 3.65).abs() < 1e-9);
        assert!(flesch_kincaid_from_counts(20, 1, 26) > flesch_kincaid_from_counts(10, 1, 13));
        let text = "The cat sat. The dog ran far away!";
        assert_eq!(text_counts(text), TextCounts { words: 8, sentences: 2, syllables: 9 });
        assert_eq!(flesch_kincaid(text).unwrap(), flesch_kincaid(text).unwrap());
        assert!(flesch_kincaid("  ").is_err());
    }
}

//! Byte-level corpus handling and the deterministic sample-text generator
//! used for desk runs and tests.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Token;
use crate::numkernel::rng::SplitMix64;

/// Reads a file as raw bytes and chunks it into token windows of at most
/// `window` tokens, in file order; a short tail chunk is kept. The byte
/// tokenizer is lossless: concatenating the windows restores the file.
pub fn ingest_corpus(path: &Path, window: usize) -> Result<Vec<Vec<Token>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_to_windows(&bytes, window))
}

pub fn bytes_to_windows(bytes: &[u8], window: usize) -> Vec<Vec<Token>> {
    assert!(window > 0, "window must be positive");
    bytes
        .chunks(window)
        .map(|c| c.iter().map(|&b| b as Token).collect())
        .collect()
}

pub fn windows_to_bytes(windows: &[Vec<Token>]) -> Vec<u8> {
    windows
        .iter()
        .flatten()
        .map(|&t| t as u8)
        .collect()
}

const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "it", "that", "for", "as", "with", "on",
    "was", "be", "by", "at", "from", "or", "an",
];

const ONSETS: &[&str] = &[
    "b", "br", "c", "ch", "cl", "d", "dr", "f", "fl", "g", "gr", "h", "j", "k", "l", "m",
    "n", "p", "pl", "pr", "qu", "r", "s", "sh", "sl", "sn", "st", "str", "t", "th", "tr",
    "v", "w",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"];
const CODAS: &[&str] = &[
    "", "n", "r", "s", "t", "l", "ck", "nd", "rn", "st", "ry", "ple", "ter", "tion",
];

fn build_vocab(rng: &mut SplitMix64, size: usize) -> Vec<String> {
    let mut vocab = Vec::with_capacity(size);
    let mut seen = std::collections::HashSet::new();
    while vocab.len() < size {
        let mut w = String::new();
        let syllables = 1 + rng.below(2);
        for _ in 0..=syllables {
            w.push_str(ONSETS[rng.below(ONSETS.len())]);
            w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
        }
        w.push_str(CODAS[rng.below(CODAS.len())]);
        if w.len() >= 3 && w.len() <= 12 && seen.insert(w.clone()) {
            vocab.push(w);
        }
    }
    vocab
}

fn zipf_table(n: usize) -> Vec<f64> {
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    for r in 0..n {
        total += 1.0 / (r as f64 + 3.0).powf(1.1);
        cum.push(total);
    }
    for c in &mut cum {
        *c /= total;
    }
    cum
}

fn sample_zipf(rng: &mut SplitMix64, cum: &[f64]) -> usize {
    let u = rng.next_f32() as f64;
    cum.partition_point(|&c| c < u).min(cum.len() - 1)
}

/// Deterministic synthetic prose: a Zipf-weighted invented vocabulary plus
/// per-document topic words that recur throughout the document, giving the
/// text genuine long-range structure for a byte-level model to exploit.
pub fn synth_corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = SplitMix64::new(seed);
    let vocab = build_vocab(&mut rng, 400);
    let cum = zipf_table(vocab.len());
    let mut out = String::with_capacity(target_bytes + 256);

    while out.len() < target_bytes {
        let topics: Vec<&str> = (0..3).map(|_| vocab[sample_zipf(&mut rng, &cum)].as_str()).collect();
        out.push_str("== ");
        out.push_str(topics[0]);
        out.push(' ');
        out.push_str(topics[1]);
        out.push_str(" ==\n");
        let sentences = 6 + rng.below(9);
        for s in 0..sentences {
            let words = 6 + rng.below(7);
            for w in 0..words {
                let pick = rng.next_f32();
                let word = if pick < 0.28 {
                    topics[rng.below(topics.len())]
                } else if pick < 0.55 {
                    FUNCTION_WORDS[rng.below(FUNCTION_WORDS.len())]
                } else {
                    vocab[sample_zipf(&mut rng, &cum)].as_str()
                };
                if w == 0 {
                    let mut chars = word.chars();
                    if let Some(c) = chars.next() {
                        out.push(c.to_ascii_uppercase());
                        out.push_str(chars.as_str());
                    }
                } else {
                    out.push_str(word);
                }
                if w + 1 < words {
                    out.push(' ');
                }
            }
            out.push('.');
            if s % 2 == 1 {
                out.push('\n');
            } else {
                out.push(' ');
            }
        }
        out.push_str("\n\n");
        if out.len() > target_bytes.saturating_mul(2) {
            break;
        }
    }
    out.truncate(target_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_zero_chunks() {
        assert!(bytes_to_windows(&[], 256).is_empty());
    }

    #[test]
    fn one_byte_file_yields_one_short_chunk() {
        let w = bytes_to_windows(&[65], 256);
        assert_eq!(w, vec![vec![65u32]]);
    }

    #[test]
    fn kilobyte_chunks_round_trip_byte_exact() {
        let bytes: Vec<u8> = (0..1024).map(|i| (i % 251) as u8).collect();
        let w = bytes_to_windows(&bytes, 256);
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|c| c.len() == 256));
        assert_eq!(windows_to_bytes(&w), bytes);
    }

    #[test]
    fn ingest_reads_files() {
        let dir = std::env::temp_dir().join("adore-corpus-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.txt");
        std::fs::write(&path, b"hello world").unwrap();
        let w = ingest_corpus(&path, 4).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(windows_to_bytes(&w), b"hello world");
    }

    #[test]
    fn synth_corpus_is_deterministic_ascii_and_sized() {
        let a = synth_corpus(9, 4096);
        let b = synth_corpus(9, 4096);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4096);
        assert!(a.is_ascii());
        // different seeds differ
        assert_ne!(a, synth_corpus(10, 4096));
    }
}

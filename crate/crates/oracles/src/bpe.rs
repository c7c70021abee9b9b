//! Brute-force BPE: recount every adjacent pair over every word at each step.

use std::collections::{BTreeMap, BTreeSet};

/// End-of-word symbol; must match the codec's internal marker so that
/// lexicographic tie-breaks agree.
pub const EOW: &str = "\u{E000}";
const RESERVED: usize = 5;

fn split_word(w: &str) -> Vec<String> {
    let mut syms: Vec<String> = w.chars().map(String::from).collect();
    syms.push(EOW.to_string());
    syms
}

fn merge_word(syms: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Word frequencies from whitespace-split lines.
pub fn word_freqs<S: AsRef<str>>(lines: &[S]) -> BTreeMap<String, u64> {
    let mut freqs = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *freqs.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    freqs
}

/// Learned merge list for `target_size` types (5 reserved types included).
pub fn learn_merges(freqs: &BTreeMap<String, u64>, target_size: usize) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, u64)> = freqs.iter().map(|(w, &n)| (split_word(w), n)).collect();
    let mut types: BTreeSet<String> = freqs.keys().flat_map(|w| w.chars().map(String::from)).collect();
    let mut merges = Vec::new();

    while RESERVED + types.len() < target_size {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                let concat_a = format!("{}{}", pa.0, pa.1);
                let concat_b = format!("{}{}", pb.0, pb.1);
                ca.cmp(cb)
                    .then_with(|| concat_b.cmp(&concat_a))
                    .then_with(|| pb.0.cmp(&pa.0))
            });
        let Some(((left, right), _)) = best else {
            break;
        };
        for (syms, _) in words.iter_mut() {
            *syms = merge_word(syms, &left, &right);
        }
        types.insert(format!("{left}{right}"));
        merges.push((left, right));
    }
    merges
}

/// Segment one word by replaying `merges` in order.
pub fn segment_word(word: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut syms = split_word(word);
    for (l, r) in merges {
        syms = merge_word(&syms, l, r);
    }
    syms
}

/// Segment a sentence; pieces keep the end-of-word marker.
pub fn segment(sentence: &str, merges: &[(String, String)]) -> Vec<String> {
    sentence
        .split_whitespace()
        .flat_map(|w| segment_word(w, merges))
        .collect()
}

/// Join pieces back into text, rendering end-of-word markers as spaces.
pub fn detokenize(pieces: &[String]) -> String {
    pieces.concat().replace(EOW, " ").trim_end().to_string()
}

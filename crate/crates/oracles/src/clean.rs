//! Naive cleaning filter: plain string comparisons, linear scans, no hashing.
//!
//! Text normalization is passed in as closures so the oracle checks the
//! filter logic (order, thresholds, first-occurrence dedup) on its own.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub input: u64,
    pub empty: u64,
    pub len: u64,
    pub ratio: u64,
    pub nonascii: u64,
    pub url: u64,
    pub overlap: u64,
    pub dup: u64,
    pub kept: u64,
}

pub struct Thresholds {
    pub max_ratio: f64,
    pub max_len: usize,
    pub nonascii_max_frac: f64,
}

fn has_url(normalized: &str) -> bool {
    normalized.contains("://") || normalized.split(' ').any(|t| t.starts_with("www."))
}

/// Returns kept (src, tgt) in canonical form plus counters.
pub fn brute_force_clean(
    pairs: &[(String, String)],
    heldout: &[(String, String)],
    th: &Thresholds,
    normalize: impl Fn(&str) -> String,
    canonical: impl Fn(&str) -> String,
) -> (Vec<(String, String)>, Counts) {
    let held_src: Vec<String> = heldout.iter().map(|(s, _)| canonical(s)).collect();
    let held_tgt: Vec<String> = heldout.iter().map(|(_, t)| canonical(t)).collect();
    let mut kept: Vec<(String, String)> = Vec::new();
    let mut c = Counts::default();

    for (src, tgt) in pairs {
        c.input += 1;
        let (ns, nt) = (normalize(src), normalize(tgt));
        let (cs, ct) = (canonical(src), canonical(tgt));
        let ls = if cs.is_empty() { 0 } else { cs.split(' ').count() };
        let lt = if ct.is_empty() { 0 } else { ct.split(' ').count() };
        if ls == 0 || lt == 0 {
            c.empty += 1;
            continue;
        }
        if ls > th.max_len || lt > th.max_len {
            c.len += 1;
            continue;
        }
        if ls.max(lt) as f64 / ls.min(lt) as f64 > th.max_ratio {
            c.ratio += 1;
            continue;
        }
        let visible: Vec<char> = nt.chars().filter(|ch| !ch.is_whitespace()).collect();
        let non_ascii = visible.iter().filter(|ch| !ch.is_ascii()).count();
        if non_ascii as f64 > th.nonascii_max_frac * visible.len() as f64 {
            c.nonascii += 1;
            continue;
        }
        if has_url(&ns) || has_url(&nt) {
            c.url += 1;
            continue;
        }
        if held_src.contains(&cs) || held_tgt.contains(&ct) {
            c.overlap += 1;
            continue;
        }
        if kept.iter().any(|(ks, kt)| *ks == cs && *kt == ct) {
            c.dup += 1;
            continue;
        }
        c.kept += 1;
        kept.push((cs, ct));
    }
    (kept, c)
}

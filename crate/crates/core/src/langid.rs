//! ISO 639-3 language identity.
//!
//! Heterogeneous language labels (three-letter codes, two-letter ISO 639-1
//! codes, English names, region-tagged forms such as `en-US`) are resolved
//! against a bundled registry snapshot.
//!
//! Lookup order for a trimmed token:
//!
//! 1. exact (case-sensitive) match on any key,
//! 2. case-insensitive match, preferring three-letter codes, then two-letter
//!    codes, then names,
//! 3. if both fail and the token carries a `_` or `-` subtag, the subtag is
//!    stripped and the lookup retried. The stripped suffix is reported
//!    through [`Normalized::stripped`] and logged.
//!
//! Exact matches win so that names which collide with another row's code
//! (`Ari` vs `ari`) still resolve to their own row.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const REGISTRY_TSV: &str = include_str!("../data/iso639-3.tsv");

/// Version tag of the bundled registry snapshot, recorded in signatures.
pub const REGISTRY_VERSION: &str = "iso639-3/pycountry-26.2.16";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum LangError {
    #[error("unknown language: {0:?}")]
    UnknownLanguage(String),
    #[error("malformed language pair {0:?}: expected `xxx-yyy`")]
    MalformedPair(String),
}

/// A validated ISO 639-3 code with its English reference name.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LangCode {
    code: &'static str,
    name: &'static str,
}

impl LangCode {
    pub fn code(&self) -> &'static str {
        self.code
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Two-letter ISO 639-1 code, where one exists.
    pub fn code1(&self) -> Option<&'static str> {
        let reg = registry();
        reg.exact.get(self.code).and_then(|&i| reg.rows[i].code1)
    }
}

impl fmt::Debug for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LangCode({}, {:?})", self.code, self.name)
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code)
    }
}

impl FromStr for LangCode {
    type Err = LangError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_lang(s)
    }
}

impl Serialize for LangCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code)
    }
}

impl<'de> Deserialize<'de> for LangCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        normalize_lang(&raw).map_err(serde::de::Error::custom)
    }
}

/// One row of the bundled registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryRow {
    pub code3: &'static str,
    pub code1: Option<&'static str>,
    pub name: &'static str,
}

impl RegistryRow {
    pub fn lang(&self) -> LangCode {
        LangCode {
            code: self.code3,
            name: self.name,
        }
    }
}

/// Result of a normalization, with any region/script subtag that had to be
/// dropped to find a match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub lang: LangCode,
    pub stripped: Option<String>,
}

struct Registry {
    rows: Vec<RegistryRow>,
    exact: HashMap<&'static str, usize>,
    by_code3: HashMap<String, usize>,
    by_code1: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
}

impl Registry {
    fn parse(text: &'static str) -> Registry {
        let mut rows = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(code3), Some(code1), Some(name)) = (cols.next(), cols.next(), cols.next()) else {
                panic!("bundled registry row is malformed: {line:?}");
            };
            rows.push(RegistryRow {
                code3,
                code1: (!code1.is_empty()).then_some(code1),
                name,
            });
        }

        let mut reg = Registry {
            exact: HashMap::with_capacity(rows.len() * 3),
            by_code3: HashMap::with_capacity(rows.len()),
            by_code1: HashMap::new(),
            by_name: HashMap::with_capacity(rows.len()),
            rows: Vec::new(),
        };
        for (i, row) in rows.iter().enumerate() {
            reg.exact.insert(row.code3, i);
            reg.exact.insert(row.name, i);
            reg.by_code3.insert(fold(row.code3), i);
            reg.by_name.insert(fold(row.name), i);
            if let Some(c1) = row.code1 {
                reg.exact.insert(c1, i);
                reg.by_code1.insert(fold(c1), i);
            }
        }
        reg.rows = rows;
        reg
    }

    fn lookup(&self, token: &str) -> Option<&RegistryRow> {
        if let Some(&i) = self.exact.get(token) {
            return Some(&self.rows[i]);
        }
        let key = fold(token);
        self.by_code3
            .get(&key)
            .or_else(|| self.by_code1.get(&key))
            .or_else(|| self.by_name.get(&key))
            .map(|&i| &self.rows[i])
    }
}

fn fold(s: &str) -> String {
    s.to_lowercase()
}

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| Registry::parse(REGISTRY_TSV))
}

/// All rows of the bundled registry, in code order.
pub fn registry_rows() -> &'static [RegistryRow] {
    &registry().rows
}

/// Resolve `raw` to its canonical [`LangCode`], reporting any stripped subtag.
pub fn normalize_lang_detailed(raw: &str) -> Result<Normalized, LangError> {
    let token = raw.trim();
    if token.is_empty() {
        return Err(LangError::UnknownLanguage(raw.to_string()));
    }
    let reg = registry();
    if let Some(row) = reg.lookup(token) {
        return Ok(Normalized {
            lang: row.lang(),
            stripped: None,
        });
    }
    if let Some(pos) = token.find(['_', '-']) {
        let (head, tail) = token.split_at(pos);
        if let Some(row) = reg.lookup(head) {
            let suffix = tail[1..].to_string();
            log::warn!("language {raw:?}: subtag {suffix:?} dropped, mapped to {}", row.code3);
            return Ok(Normalized {
                lang: row.lang(),
                stripped: Some(suffix),
            });
        }
    }
    Err(LangError::UnknownLanguage(raw.to_string()))
}

/// Resolve a language code or name to its ISO 639-3 [`LangCode`].
pub fn normalize_lang(raw: &str) -> Result<LangCode, LangError> {
    normalize_lang_detailed(raw).map(|n| n.lang)
}

/// An ordered (source, target) language pair, written `xxx-yyy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LangPair {
    pub src: LangCode,
    pub tgt: LangCode,
}

impl LangPair {
    pub fn new(src: LangCode, tgt: LangCode) -> Self {
        Self { src, tgt }
    }

    pub fn reversed(&self) -> Self {
        Self {
            src: self.tgt,
            tgt: self.src,
        }
    }

    /// True if `other` names the same two languages in either direction.
    pub fn matches_either_way(&self, other: &LangPair) -> bool {
        self == other || *self == other.reversed()
    }
}

impl fmt::Display for LangPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src.code, self.tgt.code)
    }
}

impl FromStr for LangPair {
    type Err = LangError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pair(s)
    }
}

impl Serialize for LangPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LangPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        parse_pair(&raw).map_err(serde::de::Error::custom)
    }
}

/// Parse `xxx-yyy` into a [`LangPair`]; both sides go through [`normalize_lang`].
pub fn parse_pair(raw: &str) -> Result<LangPair, LangError> {
    let trimmed = raw.trim();
    let mut parts = trimmed.split('-');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok(LangPair::new(normalize_lang(a)?, normalize_lang(b)?))
        }
        _ => Err(LangError::MalformedPair(raw.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn english_by_code() {
        let l = normalize_lang("eng").unwrap();
        assert_eq!(l.code(), "eng");
        assert_eq!(l.name(), "English");
        assert_eq!(l.code1(), Some("en"));
        assert_eq!(normalize_lang("aab").unwrap().code1(), None);
        assert_eq!(normalize_lang(l.code()).unwrap(), l);
    }

    #[test]
    fn german_by_all_keys() {
        for raw in ["deu", "de", "German", "german", " GERMAN ", "DE"] {
            assert_eq!(normalize_lang(raw).unwrap().code(), "deu", "{raw}");
        }
    }

    #[test]
    fn region_subtags_are_stripped() {
        let n = normalize_lang_detailed("en-US").unwrap();
        assert_eq!(n.lang.code(), "eng");
        assert_eq!(n.stripped.as_deref(), Some("US"));
        assert_eq!(normalize_lang("en_GB").unwrap().code(), "eng");
        assert_eq!(normalize_lang("zh-Hant").unwrap().code(), "zho");
    }

    #[test]
    fn hyphenated_names_are_not_stripped() {
        assert_eq!(normalize_lang("Alumu-Tesu").unwrap().code(), "aab");
    }

    #[test]
    fn name_colliding_with_code_resolves_by_case() {
        // "Ari" is the name of aac, while "ari" is the code of Arikara.
        assert_eq!(normalize_lang("Ari").unwrap().code(), "aac");
        assert_eq!(normalize_lang("ari").unwrap().code(), "ari");
        assert_eq!(normalize_lang("ARI").unwrap().code(), "ari");
    }

    #[test]
    fn unknown_and_empty() {
        assert_eq!(
            normalize_lang("klingonese"),
            Err(LangError::UnknownLanguage("klingonese".into()))
        );
        assert!(normalize_lang("   ").is_err());
        // no fuzzy matching
        assert!(normalize_lang("Englsh").is_err());
    }

    #[test]
    fn pairs() {
        let p = parse_pair("deu-eng").unwrap();
        assert_eq!((p.src.code(), p.tgt.code()), ("deu", "eng"));
        let p = parse_pair("de-en").unwrap();
        assert_eq!(p.to_string(), "deu-eng");
        assert_eq!(parse_pair("eng-eng").unwrap().to_string(), "eng-eng");
        assert!(matches!(parse_pair("deu"), Err(LangError::MalformedPair(_))));
        assert!(matches!(parse_pair("en-US-deu"), Err(LangError::MalformedPair(_))));
        assert!(matches!(parse_pair("-eng"), Err(LangError::MalformedPair(_))));
        assert!(matches!(parse_pair("xqq-eng"), Err(LangError::UnknownLanguage(_))));
    }

    #[test]
    fn registry_is_complete_and_unique() {
        let rows = registry_rows();
        assert!(rows.len() > 7800);
        let mut seen = std::collections::HashSet::new();
        for r in rows {
            assert!(r.code3.len() == 3 && r.code3.bytes().all(|b| b.is_ascii_lowercase()));
            assert!(seen.insert(r.code3));
        }
    }
}

//! Canonical numeral extraction and grounding.
//!
//! Every component that needs "the numbers in this text" goes through
//! [`extract_numerals`], so observations, think blocks and insight proofs
//! are compared on identical terms.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// A numeral as written: its value and the number of decimals it was written
/// with. Percentages keep their written magnitude (`12.5%` -> 12.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Numeral {
    pub value: f64,
    pub decimals: u8,
    pub percent: bool,
}

/// Total-ordered f64 used as a set key.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for Num {}
impl PartialOrd for Num {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Num {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn numeral_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?%?").expect("numeral regex")
    })
}

/// ISO dates and `obs:N` evidence references.
fn masked_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d{4}-\d{2}-\d{2}\b|\bobs:\d+\b").expect("mask regex"))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_calendar_date(digits: &str) -> bool {
    if digits.len() != 8 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let year: u32 = digits[0..4].parse().unwrap_or(0);
    let month: u32 = digits[4..6].parse().unwrap_or(0);
    let day: u32 = digits[6..8].parse().unwrap_or(0);
    (1900..=2100).contains(&year) && (1..=12).contains(&month) && (1..=31).contains(&day)
}

/// Extracts numerals from free text.
///
/// Recognises signed decimals, thousands-separated numbers and percentages.
/// Skips `YYYYMMDD` dates, ISO dates, bare four-digit years and digits glued
/// to identifiers (`S001`, `top3`, `v2_x`) and `obs:N` references.
pub fn extract_numerals(text: &str) -> Vec<Numeral> {
    // Blank out ISO dates so their parts are not read as signed numbers.
    let masked = masked_regex().replace_all(text, |caps: &regex::Captures| " ".repeat(caps[0].len()));
    let masked = masked.as_ref();
    let mut out = Vec::new();
    for m in numeral_regex().find_iter(masked) {
        let token = m.as_str();
        let before = masked[..m.start()].chars().next_back();
        let after = masked[m.end()..].chars().next();
        if before.is_some_and(|c| is_word_char(c) || c == '.') {
            continue;
        }
        // A leading sign glued to a word (`a-1`) is an operator, not a sign.
        if after.is_some_and(is_word_char) {
            continue;
        }
        let percent = token.ends_with('%');
        let body = token.trim_end_matches('%');
        let unsigned = body.trim_start_matches(['-', '+']);
        let plain = unsigned.replace(',', "");
        let (int_part, frac_part) = plain.split_once('.').unwrap_or((&plain, ""));
        if !percent && frac_part.is_empty() && !unsigned.contains(',') {
            if is_calendar_date(int_part) {
                continue;
            }
            if int_part.len() == 4 && body == unsigned {
                if let Ok(year) = int_part.parse::<u32>() {
                    if (1900..=2100).contains(&year) {
                        continue;
                    }
                }
            }
        }
        let Ok(mut value) = plain.parse::<f64>() else { continue };
        if body.starts_with('-') {
            value = -value;
        }
        out.push(Numeral {
            value,
            decimals: frac_part.len().min(12) as u8,
            percent,
        });
    }
    out
}

/// Set of observed numbers against which agent claims are checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingIndex {
    values: BTreeSet<Num>,
}

impl GroundingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut idx = Self::new();
        idx.extend(values);
        idx
    }

    pub fn insert(&mut self, value: f64) {
        if value.is_finite() {
            self.values.insert(Num(value.abs()));
        }
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for v in values {
            self.insert(v);
        }
    }

    pub fn union_with(&mut self, other: &GroundingIndex) {
        self.values.extend(other.values.iter().copied());
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|n| n.0)
    }

    pub fn is_superset(&self, other: &GroundingIndex) -> bool {
        self.values.is_superset(&other.values)
    }

    /// True when some observed value rounds to the numeral at the precision
    /// it was written with. Sign is ignored: "fell 12.5" matches -12.5.
    pub fn grounds(&self, numeral: &Numeral) -> bool {
        let target = numeral.value.abs();
        let scale = 10f64.powi(numeral.decimals as i32);
        let half = 0.5 / scale;
        let lo = Num(target - half * 1.000001);
        let hi = Num(target + half * 1.000001);
        let want = (target * scale).round();
        self.values
            .range(lo..=hi)
            .any(|g| (g.0 * scale).round() == want)
    }
}

/// Numerals found in a JSON value: numbers directly, strings via the
/// extractor.
pub fn json_numerals(value: &serde_json::Value, out: &mut Vec<f64>) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.push(f);
            }
        }
        serde_json::Value::String(s) => out.extend(extract_numerals(s).into_iter().map(|n| n.value)),
        serde_json::Value::Array(items) => items.iter().for_each(|v| json_numerals(v, out)),
        serde_json::Value::Object(map) => map.values().for_each(|v| json_numerals(v, out)),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(text: &str) -> Vec<f64> {
        extract_numerals(text).into_iter().map(|n| n.value).collect()
    }

    #[test]
    fn percent_and_thousands() {
        assert_eq!(values("GMV fell 12.5% to 45,000"), vec![12.5, 45000.0]);
        let n = extract_numerals("12.5%");
        assert!(n[0].percent);
        assert_eq!(n[0].decimals, 1);
    }

    #[test]
    fn dates_and_years_excluded() {
        assert!(values("between 20251010 and 20251110").is_empty());
        assert!(values("in 2025 the trend").is_empty());
        assert!(values("on 2025-10-01").is_empty());
        assert!(values("").is_empty());
    }

    #[test]
    fn identifiers_are_not_numerals() {
        assert!(values("shop S001 and top3 and B02").is_empty());
        assert_eq!(values("share 0.59 (obs:7)"), vec![0.59]);
        assert_eq!(values("delta -1234.5, share 0.8."), vec![-1234.5, 0.8]);
    }

    #[test]
    fn grounding_at_written_precision() {
        let idx = GroundingIndex::from_values([15.23, 45000.0, -1234.56]);
        let n = |s: &str| extract_numerals(s)[0];
        assert!(idx.grounds(&n("15.2")));
        assert!(idx.grounds(&n("15.23")));
        assert!(!idx.grounds(&n("15.3")));
        assert!(idx.grounds(&n("45,000")));
        assert!(idx.grounds(&n("1234.6")));
        assert!(idx.grounds(&n("-1234.56")));
        assert!(!idx.grounds(&n("45001")));
    }

    #[test]
    fn set_semantics() {
        let idx = GroundingIndex::from_values([1.0, 1.0, 2.0]);
        assert_eq!(idx.len(), 2);
    }
}

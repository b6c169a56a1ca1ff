use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::query::{Compare, DslQuery, Scalar};
use crate::catalog::{Catalog, NameKind, Resolution, ResolutionStatus, Violation, ViolationKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub corrected_dsl: DslQuery,
    pub notices: Vec<String>,
    pub violations: Vec<Violation>,
}

impl CalibrationReport {
    pub fn is_executable(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Calibrator<'a> {
    catalog: &'a Catalog,
    notices: Vec<String>,
    corrected: BTreeSet<String>,
}

impl Calibrator<'_> {
    fn take(&mut self, token: &str, r: Resolution) -> String {
        if r.status == ResolutionStatus::Corrected && self.corrected.insert(token.to_string()) {
            if let Some(note) = r.note {
                self.notices.push(note);
            }
        }
        r.canonical_name
    }

    fn resolve(&mut self, token: &str, kind: NameKind) -> String {
        let r = self.catalog.resolve_name(token, kind);
        self.take(token, r)
    }

    /// Order columns may name a metric, a dimension, or a compare column
    /// such as `gmv_wow_pct`.
    fn resolve_order_column(&mut self, token: &str) -> String {
        for suffix in compare_suffixes() {
            if let Some(base) = token.strip_suffix(&suffix) {
                let r = self.catalog.resolve_name(base, NameKind::Metric);
                if r.status != ResolutionStatus::Unknown {
                    let canonical = format!("{}{suffix}", r.canonical_name);
                    let note = r.note.map(|_| format!("Input '{token}' aligned to '{canonical}' (compare column)."));
                    return self.take(
                        token,
                        Resolution {
                            canonical_name: canonical,
                            status: r.status,
                            note,
                        },
                    );
                }
            }
        }
        let r = self.catalog.resolve_name(token, NameKind::Metric);
        if r.status != ResolutionStatus::Unknown {
            return self.take(token, r);
        }
        self.resolve(token, NameKind::Dimension)
    }
}

pub(crate) fn compare_suffixes() -> Vec<String> {
    let mut out = Vec::new();
    for c in [Compare::Wow, Compare::Yoy] {
        out.push(format!("_{}_pct", c.as_str()));
        out.push(format!("_{}", c.as_str()));
    }
    out
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// Maps every name in `query` onto the catalog's canonical vocabulary and
/// records corrections and boundary violations. Never fails: a query with
/// violations is returned as data and refused at execution.
pub fn calibrate(query: &DslQuery, catalog: &Catalog) -> (DslQuery, CalibrationReport) {
    let mut cal = Calibrator {
        catalog,
        notices: Vec::new(),
        corrected: BTreeSet::new(),
    };
    let mut q = query.clone();
    q.metric = dedup(query.metric.iter().map(|m| cal.resolve(m, NameKind::Metric)).collect());
    q.dimension = dedup(query.dimension.iter().map(|d| cal.resolve(d, NameKind::Dimension)).collect());

    let mut filter_columns = Vec::new();
    if let Some(filter) = q.filter.as_mut() {
        for cond in filter.leaves_mut() {
            let token = cond.column.clone();
            cond.column = cal.resolve(&token, NameKind::FilterColumn);
            filter_columns.push(cond.column.clone());
            let Some(values) = catalog.dimension(&cond.column).and_then(|d| d.enum_values.as_ref()) else {
                continue;
            };
            for p in cond.params.iter_mut() {
                let Scalar::Text(text) = p else { continue };
                if values.contains(text) {
                    continue;
                }
                if let Some(v) = values.iter().find(|v| v.eq_ignore_ascii_case(text)) {
                    if cal.corrected.insert(format!("{}={text}", cond.column)) {
                        cal.notices
                            .push(format!("Value '{text}' of '{}' aligned to '{v}'.", cond.column));
                    }
                    *text = v.clone();
                }
            }
        }
    }

    for ob in q.order_by.iter_mut() {
        let token = ob.column.clone();
        ob.column = cal.resolve_order_column(&token);
    }

    let mut dims: Vec<String> = q.dimension.clone();
    for c in filter_columns {
        if !dims.contains(&c) {
            dims.push(c);
        }
    }
    let mut violations = catalog.check_compatibility(&q.metric, &dims);
    let selectable: BTreeSet<&str> = q.metric.iter().chain(q.dimension.iter()).map(String::as_str).collect();
    for ob in &q.order_by {
        let base = compare_suffixes()
            .iter()
            .find_map(|s| ob.column.strip_suffix(s.as_str()))
            .filter(|b| catalog.metric(b).is_some())
            .unwrap_or(&ob.column);
        if !selectable.contains(base) && catalog.metric(base).is_none() && catalog.dimension(base).is_none() {
            violations.push(Violation {
                kind: ViolationKind::UnknownDimension,
                detail: format!("orderBy column '{}' does not exist in the semantic layer", ob.column),
            });
        }
    }

    let report = CalibrationReport {
        corrected_dsl: q.clone(),
        notices: cal.notices,
        violations,
    };
    (q, report)
}

//! Semantic catalog: metrics, dimensions, aliases and metric/dimension
//! compatibility.
//!
//! The catalog is the single arbiter of which names exist. It is loaded from
//! a TOML file (see `data/default_catalog.toml` for the shipped example),
//! validated once, and then immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The shipped default catalog. Illustrative, not a copy of any real
/// production metric inventory.
pub const DEFAULT_CATALOG_TOML: &str = include_str!("../data/default_catalog.toml");

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("catalog parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate name `{0}` in catalog")]
    DuplicateName(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid entry `{name}`: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("cannot read catalog file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Theme {
    Traffic,
    Transaction,
    Interaction,
    Marketing,
    Merchant,
}

impl Theme {
    pub const ALL: [Theme; 5] = [
        Theme::Traffic,
        Theme::Transaction,
        Theme::Interaction,
        Theme::Marketing,
        Theme::Merchant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Theme::Traffic => "Traffic",
            Theme::Transaction => "Transaction",
            Theme::Interaction => "Interaction",
            Theme::Marketing => "Marketing",
            Theme::Merchant => "Merchant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    CountDistinct,
    Ratio { numerator: String, denominator: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grain {
    Shop,
    Brand,
    District,
    City,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDef {
    pub canonical_name: String,
    pub display_name: String,
    pub theme: Theme,
    pub aggregation: Aggregation,
    /// `table.column` for base metrics; the output label for ratio metrics.
    pub source_column: String,
    pub grains: BTreeSet<Grain>,
    pub ads_available: bool,
}

impl MetricDef {
    /// Physical `(table, column)` of a base metric, `None` for ratios or
    /// unqualified columns.
    pub fn physical_source(&self) -> Option<(&str, &str)> {
        if matches!(self.aggregation, Aggregation::Ratio { .. }) {
            return None;
        }
        self.source_column.split_once('.')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrainClass {
    Temporal,
    Entity,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionDef {
    pub canonical_name: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    pub source_table: String,
    pub grain_class: GrainClass,
}

impl DimensionDef {
    /// Physical column: the snake_case form of the canonical name
    /// (`isWeek` -> `is_week`).
    pub fn column(&self) -> String {
        snake_case(&self.canonical_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameKind {
    Metric,
    Dimension,
    FilterColumn,
}

impl fmt::Display for NameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NameKind::Metric => "metric",
            NameKind::Dimension => "dimension",
            NameKind::FilterColumn => "filter column",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AliasRule {
    pub alias: String,
    pub canonical_name: String,
    pub kind: NameKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncompatiblePair {
    pub metric: String,
    pub dimension: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityMatrix {
    pub incompatible_pairs: BTreeSet<(String, String)>,
}

impl CompatibilityMatrix {
    pub fn is_incompatible(&self, metric: &str, dimension: &str) -> bool {
        self.incompatible_pairs
            .contains(&(metric.to_string(), dimension.to_string()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    #[serde(default)]
    metrics: Vec<MetricDef>,
    #[serde(default)]
    dimensions: Vec<DimensionDef>,
    #[serde(default)]
    aliases: Vec<AliasRule>,
    #[serde(default)]
    incompatible_pairs: Vec<IncompatiblePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    Exact,
    Corrected,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    /// The canonical name, or the input token unchanged when unknown.
    pub canonical_name: String,
    pub status: ResolutionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownMetric,
    UnknownDimension,
    IncompatiblePair,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::UnknownMetric => "unknown_metric",
            ViolationKind::UnknownDimension => "unknown_dimension",
            ViolationKind::IncompatiblePair => "incompatible_pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// A validated, immutable semantic catalog.
#[derive(Debug, Clone)]
pub struct Catalog {
    metrics: Vec<MetricDef>,
    dimensions: Vec<DimensionDef>,
    aliases: Vec<AliasRule>,
    compatibility: CompatibilityMatrix,
    metric_index: HashMap<String, usize>,
    dimension_index: HashMap<String, usize>,
    // lowercase canonical name -> canonical name
    folded_metrics: HashMap<String, String>,
    folded_dimensions: HashMap<String, String>,
    // (kind, lowercase alias) -> canonical name
    alias_index: HashMap<(NameKind, String), String>,
}

impl Catalog {
    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CatalogError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn default_catalog() -> Self {
        Self::from_toml_str(DEFAULT_CATALOG_TOML).expect("shipped default catalog is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CatalogError> {
        if text.trim().is_empty() {
            return Err(CatalogError::Parse {
                line: 1,
                message: "empty catalog file".into(),
            });
        }
        let file: CatalogFile = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            CatalogError::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        if file.metrics.is_empty() {
            return Err(CatalogError::Parse {
                line: 1,
                message: "catalog declares no metrics".into(),
            });
        }
        Self::from_parts(file.metrics, file.dimensions, file.aliases, file.incompatible_pairs)
    }

    pub fn from_parts(
        metrics: Vec<MetricDef>,
        dimensions: Vec<DimensionDef>,
        aliases: Vec<AliasRule>,
        incompatible_pairs: Vec<IncompatiblePair>,
    ) -> Result<Self, CatalogError> {
        let mut metric_index = HashMap::new();
        let mut dimension_index = HashMap::new();
        let mut folded_metrics = HashMap::new();
        let mut folded_dimensions = HashMap::new();
        let mut folded_all = BTreeSet::new();

        for (i, m) in metrics.iter().enumerate() {
            if m.canonical_name.trim().is_empty() {
                return Err(invalid(&m.canonical_name, "empty canonical_name"));
            }
            if !folded_all.insert(m.canonical_name.to_lowercase()) {
                return Err(CatalogError::DuplicateName(m.canonical_name.clone()));
            }
            if m.grains.is_empty() {
                return Err(invalid(&m.canonical_name, "grains must be non-empty"));
            }
            metric_index.insert(m.canonical_name.clone(), i);
            folded_metrics.insert(m.canonical_name.to_lowercase(), m.canonical_name.clone());
        }
        for (i, d) in dimensions.iter().enumerate() {
            if d.canonical_name.trim().is_empty() {
                return Err(invalid(&d.canonical_name, "empty canonical_name"));
            }
            if !folded_all.insert(d.canonical_name.to_lowercase()) {
                return Err(CatalogError::DuplicateName(d.canonical_name.clone()));
            }
            if let Some(values) = &d.enum_values {
                if values.is_empty() {
                    return Err(invalid(&d.canonical_name, "enum_values present but empty"));
                }
                let distinct: BTreeSet<_> = values.iter().collect();
                if distinct.len() != values.len() {
                    return Err(invalid(&d.canonical_name, "enum_values contain duplicates"));
                }
            }
            dimension_index.insert(d.canonical_name.clone(), i);
            folded_dimensions.insert(d.canonical_name.to_lowercase(), d.canonical_name.clone());
        }

        for m in &metrics {
            if let Aggregation::Ratio { numerator, denominator } = &m.aggregation {
                for part in [numerator, denominator] {
                    let Some(&j) = metric_index.get(part) else {
                        return Err(CatalogError::DanglingReference(format!(
                            "ratio metric `{}` references unknown metric `{part}`",
                            m.canonical_name
                        )));
                    };
                    if matches!(metrics[j].aggregation, Aggregation::Ratio { .. }) {
                        return Err(invalid(
                            &m.canonical_name,
                            "ratio parts must be sum or count_distinct metrics",
                        ));
                    }
                }
                let tables: BTreeSet<_> = [numerator, denominator]
                    .iter()
                    .map(|p| metrics[metric_index[p.as_str()]].physical_source().map(|(t, _)| t.to_string()))
                    .collect();
                if tables.len() != 1 {
                    return Err(invalid(&m.canonical_name, "ratio parts must share one fact table"));
                }
            }
        }

        let mut alias_index = HashMap::new();
        for a in &aliases {
            if a.alias == a.canonical_name {
                return Err(invalid(&a.alias, "alias equals its canonical name"));
            }
            let exists = match a.kind {
                NameKind::Metric => metric_index.contains_key(&a.canonical_name),
                NameKind::Dimension | NameKind::FilterColumn => dimension_index.contains_key(&a.canonical_name),
            };
            if !exists {
                return Err(CatalogError::DanglingReference(format!(
                    "alias `{}` points at unknown {} `{}`",
                    a.alias, a.kind, a.canonical_name
                )));
            }
            if alias_index
                .insert((a.kind, a.alias.to_lowercase()), a.canonical_name.clone())
                .is_some()
            {
                return Err(CatalogError::DuplicateName(format!("{} alias `{}`", a.kind, a.alias)));
            }
        }

        let mut compatibility = CompatibilityMatrix::default();
        for p in incompatible_pairs {
            if !metric_index.contains_key(&p.metric) {
                return Err(CatalogError::DanglingReference(format!(
                    "incompatible pair names unknown metric `{}`",
                    p.metric
                )));
            }
            if !dimension_index.contains_key(&p.dimension) {
                return Err(CatalogError::DanglingReference(format!(
                    "incompatible pair names unknown dimension `{}`",
                    p.dimension
                )));
            }
            compatibility.incompatible_pairs.insert((p.metric, p.dimension));
        }

        Ok(Self {
            metrics,
            dimensions,
            aliases,
            compatibility,
            metric_index,
            dimension_index,
            folded_metrics,
            folded_dimensions,
            alias_index,
        })
    }

    /// Pads the catalog with name-only, physically unmounted entries until it
    /// holds at least `metric_target` metrics and `dimension_target`
    /// dimensions. Used to stress boundary handling at production-like
    /// catalog sizes.
    pub fn with_filler(self, metric_target: usize, dimension_target: usize) -> Self {
        let mut metrics = self.metrics;
        let mut dimensions = self.dimensions;
        let mut i = 0;
        while metrics.len() < metric_target {
            i += 1;
            metrics.push(MetricDef {
                canonical_name: format!("fillerMetric{i:03}"),
                display_name: format!("Filler metric {i:03}"),
                theme: Theme::ALL[i % Theme::ALL.len()],
                aggregation: Aggregation::Sum,
                source_column: format!("unmounted.filler_metric_{i:03}"),
                grains: [Grain::Shop].into_iter().collect(),
                ads_available: false,
            });
        }
        let mut j = 0;
        while dimensions.len() < dimension_target {
            j += 1;
            dimensions.push(DimensionDef {
                canonical_name: format!("fillerDim{j:03}"),
                display_name: format!("Filler dimension {j:03}"),
                enum_values: None,
                source_table: "unmounted".into(),
                grain_class: GrainClass::Attribute,
            });
        }
        let pairs = self
            .compatibility
            .incompatible_pairs
            .into_iter()
            .map(|(metric, dimension)| IncompatiblePair { metric, dimension })
            .collect();
        Self::from_parts(metrics, dimensions, self.aliases, pairs).expect("filler names never collide")
    }

    pub fn metrics(&self) -> &[MetricDef] {
        &self.metrics
    }

    pub fn dimensions(&self) -> &[DimensionDef] {
        &self.dimensions
    }

    pub fn aliases(&self) -> &[AliasRule] {
        &self.aliases
    }

    pub fn compatibility(&self) -> &CompatibilityMatrix {
        &self.compatibility
    }

    pub fn metric(&self, name: &str) -> Option<&MetricDef> {
        self.metric_index.get(name).map(|&i| &self.metrics[i])
    }

    pub fn dimension(&self, name: &str) -> Option<&DimensionDef> {
        self.dimension_index.get(name).map(|&i| &self.dimensions[i])
    }

    /// Maps a raw token onto a canonical name.
    ///
    /// Matching is exact-string and case-insensitive: canonical names first,
    /// then aliases of the requested kind. Filter columns fall back to the
    /// dimension namespace.
    pub fn resolve_name(&self, token: &str, kind: NameKind) -> Resolution {
        let exact = match kind {
            NameKind::Metric => self.metric_index.contains_key(token),
            NameKind::Dimension | NameKind::FilterColumn => self.dimension_index.contains_key(token),
        };
        if exact {
            return Resolution {
                canonical_name: token.to_string(),
                status: ResolutionStatus::Exact,
                note: None,
            };
        }
        let folded = token.trim().to_lowercase();
        let found = match kind {
            NameKind::Metric => self
                .folded_metrics
                .get(&folded)
                .or_else(|| self.alias_index.get(&(NameKind::Metric, folded.clone()))),
            NameKind::Dimension => self
                .folded_dimensions
                .get(&folded)
                .or_else(|| self.alias_index.get(&(NameKind::Dimension, folded.clone()))),
            NameKind::FilterColumn => self
                .alias_index
                .get(&(NameKind::FilterColumn, folded.clone()))
                .or_else(|| self.folded_dimensions.get(&folded))
                .or_else(|| self.alias_index.get(&(NameKind::Dimension, folded.clone()))),
        };
        match found {
            Some(canonical) => {
                let note = match kind {
                    NameKind::Metric => format!("Input '{token}' aligned to '{canonical}' (metric)."),
                    _ => {
                        let class = self
                            .dimension(canonical)
                            .map(|d| match d.grain_class {
                                GrainClass::Temporal => "temporal",
                                GrainClass::Entity => "entity",
                                GrainClass::Attribute => "attribute",
                            })
                            .unwrap_or("attribute");
                        format!("Input '{token}' aligned to '{canonical}' ({class} {kind}).")
                    }
                };
                Resolution {
                    canonical_name: canonical.clone(),
                    status: ResolutionStatus::Corrected,
                    note: Some(note),
                }
            }
            None => Resolution {
                canonical_name: token.to_string(),
                status: ResolutionStatus::Unknown,
                note: None,
            },
        }
    }

    /// Reports unknown names and declared-incompatible metric/dimension
    /// pairs. Inputs may be canonical names or raw tokens.
    pub fn check_compatibility(&self, metrics: &[String], dimensions: &[String]) -> Vec<Violation> {
        let mut violations = Vec::new();
        let mut known_metrics = Vec::new();
        for m in metrics {
            let r = self.resolve_name(m, NameKind::Metric);
            if r.status == ResolutionStatus::Unknown {
                violations.push(Violation {
                    kind: ViolationKind::UnknownMetric,
                    detail: format!("metric '{m}' does not exist in the semantic layer"),
                });
            } else {
                known_metrics.push(r.canonical_name);
            }
        }
        let mut known_dims = Vec::new();
        for d in dimensions {
            let r = self.resolve_name(d, NameKind::Dimension);
            if r.status == ResolutionStatus::Unknown {
                violations.push(Violation {
                    kind: ViolationKind::UnknownDimension,
                    detail: format!("dimension '{d}' does not exist in the semantic layer"),
                });
            } else {
                known_dims.push(r.canonical_name);
            }
        }
        for m in &known_metrics {
            for d in &known_dims {
                if self.compatibility.is_incompatible(m, d) {
                    violations.push(Violation {
                        kind: ViolationKind::IncompatiblePair,
                        detail: format!("metric '{m}' cannot be analysed by dimension '{d}'"),
                    });
                }
            }
        }
        violations
    }

    /// Metrics grouped by theme, in catalog order.
    pub fn metrics_by_theme(&self) -> BTreeMap<Theme, Vec<&MetricDef>> {
        let mut out: BTreeMap<Theme, Vec<&MetricDef>> = BTreeMap::new();
        for m in &self.metrics {
            out.entry(m.theme).or_default().push(m);
        }
        out
    }
}

fn invalid(name: &str, reason: &str) -> CatalogError {
    CatalogError::InvalidEntry {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

/// `isWeek` -> `is_week`, `netGMV` -> `net_gmv`, `ds` -> `ds`.
pub fn snake_case(name: &str) -> String {
    let chars: Vec<char> = name.chars().collect();
    let mut out = String::with_capacity(name.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_uppercase() {
            let prev_lower = i > 0 && (chars[i - 1].is_ascii_lowercase() || chars[i - 1].is_ascii_digit());
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
            let prev_upper = i > 0 && chars[i - 1].is_ascii_uppercase();
            if i > 0 && (prev_lower || (prev_upper && next_lower)) {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

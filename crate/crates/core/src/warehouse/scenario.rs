//! Anomaly scenarios and their planted ground truth.
//!
//! A scenario changes one physical measure inside a target segment and a
//! date window. The change is split across the segments of a cause
//! dimension: the top segment receives a fixed majority of the effect and
//! the remainder is spread over the other segments in proportion to their
//! baseline. Shares are measured on the realised data, so they are exact
//! for scaled measures and empirical for thinned ones.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::{stream_rng, WarehouseData, TAG_SCENARIO};
use super::{parse_ds, WarehouseError};

/// Share of the effect assigned to the top cause segment.
const TOP_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    GmvDrop,
    TrafficDrop,
    ConversionDrop,
    PriceShift,
    LogisticsDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactTable {
    Trd,
    Log,
}

impl Effect {
    /// Catalog metric carrying the effect.
    pub fn metric(self) -> &'static str {
        match self {
            Effect::GmvDrop => "netGMV",
            Effect::TrafficDrop => "exposeCnt",
            Effect::ConversionDrop => "payCnt",
            Effect::PriceShift => "discountAmt",
            Effect::LogisticsDelay => "deliveryMinutes",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Effect::LogisticsDelay => Direction::Up,
            _ => Direction::Down,
        }
    }

    fn default_cause(self) -> (&'static str, &'static str) {
        match self {
            Effect::GmvDrop => ("userLevel", "new"),
            Effect::TrafficDrop => ("trafficSource", "search"),
            Effect::ConversionDrop => ("trafficSource", "feed"),
            Effect::PriceShift => ("orderChannel", "miniprogram"),
            Effect::LogisticsDelay => ("deliveryType", "express"),
        }
    }

    fn table(self) -> FactTable {
        match self {
            Effect::TrafficDrop | Effect::ConversionDrop => FactTable::Log,
            _ => FactTable::Trd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Shop,
    Brand,
    District,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub kind: TargetKind,
    /// Identifier or display name (`S003` or `Green Basket`).
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario_id: String,
    pub effect: Effect,
    pub target: Target,
    /// Inclusive `["YYYYMMDD", "YYYYMMDD"]`.
    pub window: [String; 2],
    pub magnitude: f64,
    /// Free text; `dimension=segment` selects the cause segment explicitly.
    pub cause_label: String,
}

impl Scenario {
    pub(crate) fn validate(&self, first: NaiveDate, last: NaiveDate) -> Result<(), WarehouseError> {
        let err = |reason: String| WarehouseError::Scenario {
            id: self.scenario_id.clone(),
            reason,
        };
        if !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(err(format!("magnitude {} outside (0, 1]", self.magnitude)));
        }
        let (Some(a), Some(b)) = (parse_ds(&self.window[0]), parse_ds(&self.window[1])) else {
            return Err(err("window dates must be YYYYMMDD".into()));
        };
        if a > b || a < first || b > last {
            return Err(err(format!("window {}..{} outside generated range", self.window[0], self.window[1])));
        }
        let (dim, _) = self.cause()?;
        let allowed = match self.effect.table() {
            FactTable::Trd => TRD_CAUSE_DIMS.contains(&dim.as_str()),
            FactTable::Log => LOG_CAUSE_DIMS.contains(&dim.as_str()),
        };
        if !allowed {
            return Err(err(format!("dimension `{dim}` cannot carry a {:?} effect", self.effect)));
        }
        Ok(())
    }

    /// The `(dimension, segment)` receiving the dominant share.
    pub fn cause(&self) -> Result<(String, String), WarehouseError> {
        if let Some((d, s)) = self.cause_label.split_once('=') {
            let (d, s) = (d.trim(), s.trim());
            if d.is_empty() || s.is_empty() {
                return Err(WarehouseError::Scenario {
                    id: self.scenario_id.clone(),
                    reason: format!("malformed cause_label `{}`", self.cause_label),
                });
            }
            return Ok((d.to_string(), s.to_string()));
        }
        let (d, s) = self.effect.default_cause();
        Ok((d.to_string(), s.to_string()))
    }
}

const TRD_CAUSE_DIMS: [&str; 6] = ["userLevel", "gender", "ageBand", "userCity", "orderChannel", "deliveryType"];
const LOG_CAUSE_DIMS: [&str; 5] = ["userLevel", "gender", "ageBand", "userCity", "trafficSource"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCause {
    pub metric: String,
    pub dimension: String,
    pub segment: String,
    pub direction: Direction,
    pub share_of_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario_id: String,
    /// Sorted by descending share.
    pub planted_causes: Vec<PlantedCause>,
}

impl GroundTruth {
    pub fn top_cause(&self) -> Option<&PlantedCause> {
        self.planted_causes.first()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let sum: f64 = self.planted_causes.iter().map(|c| c.share_of_effect).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("shares sum to {sum}"));
        }
        let dominant = self.planted_causes.iter().filter(|c| c.share_of_effect >= 0.5).count();
        if dominant != 1 || self.planted_causes[0].share_of_effect < 0.5 {
            return Err("exactly the top cause must carry share >= 0.5".into());
        }
        Ok(())
    }
}

fn segment_of(data: &WarehouseData, dim: &str, user: usize, trd_attr: Option<(&str, &str)>, source: Option<&str>) -> Option<String> {
    let u = &data.users[user];
    let v = match dim {
        "userLevel" => u.level,
        "gender" => u.gender,
        "ageBand" => u.age_band,
        "userCity" => u.city,
        "orderChannel" => trd_attr?.0,
        "deliveryType" => trd_attr?.1,
        "trafficSource" => source?,
        _ => return None,
    };
    Some(v.to_string())
}

fn target_matches(data: &WarehouseData, target: &Target, shop: usize) -> bool {
    let s = &data.shops[shop];
    match target.kind {
        TargetKind::Shop => s.id == target.value || s.name == target.value,
        TargetKind::Brand => s.brand_id == target.value || s.brand_name == target.value,
        TargetKind::District => s.district == target.value,
    }
}

const LATE_EXPRESS: f64 = 38.0;
const LATE_STANDARD: f64 = 60.0;

/// Plants `scenario` into `data` and returns its realised ground truth.
pub(crate) fn apply(
    scenario: &Scenario,
    index: u64,
    seed: u64,
    data: &mut WarehouseData,
) -> Result<GroundTruth, WarehouseError> {
    let err = |reason: String| WarehouseError::Scenario {
        id: scenario.scenario_id.clone(),
        reason,
    };
    let (dim, top_segment) = scenario.cause()?;
    let lo = parse_ds(&scenario.window[0]).ok_or_else(|| err("bad window".into()))?;
    let hi = parse_ds(&scenario.window[1]).ok_or_else(|| err("bad window".into()))?;
    let in_window: Vec<bool> = data.dates.iter().map(|d| *d >= lo && *d <= hi).collect();
    let effect = scenario.effect;

    // Rows in scope with their segment label.
    let mut scoped: Vec<(usize, String)> = Vec::new();
    match effect.table() {
        FactTable::Trd => {
            for (i, r) in data.trd.iter().enumerate() {
                if in_window[r.day] && target_matches(data, &scenario.target, r.shop) {
                    let seg = segment_of(data, &dim, r.user, Some((r.order_channel, r.delivery_type)), None)
                        .ok_or_else(|| err(format!("dimension `{dim}` not available on dws_trd")))?;
                    scoped.push((i, seg));
                }
            }
        }
        FactTable::Log => {
            for (i, r) in data.log.iter().enumerate() {
                if in_window[r.day] && target_matches(data, &scenario.target, r.shop) {
                    let seg = segment_of(data, &dim, r.user, None, Some(r.traffic_source))
                        .ok_or_else(|| err(format!("dimension `{dim}` not available on dws_log")))?;
                    scoped.push((i, seg));
                }
            }
        }
    }

    let measure = |data: &WarehouseData, i: usize| -> f64 {
        match effect {
            Effect::GmvDrop => data.trd[i].net_gmv,
            Effect::PriceShift => data.trd[i].discount_amt,
            Effect::LogisticsDelay => data.trd[i].delivery_minutes,
            Effect::TrafficDrop => data.log[i].expose_cnt as f64,
            Effect::ConversionDrop => data.log[i].pay_cnt as f64,
        }
    };

    let mut baseline: BTreeMap<String, f64> = BTreeMap::new();
    for (i, seg) in &scoped {
        *baseline.entry(seg.clone()).or_default() += measure(data, *i);
    }
    let total: f64 = baseline.values().sum();
    if total <= 0.0 {
        return Err(err("target has no baseline activity in the window".into()));
    }
    let top_base = baseline.get(&top_segment).copied().unwrap_or(0.0);
    if top_base <= 0.0 {
        return Err(err(format!("segment {dim}={top_segment} has no baseline activity")));
    }
    let others_base = total - top_base;
    let effect_total = scenario.magnitude * total;
    let mut top_share = if others_base > 0.0 { TOP_SHARE } else { 1.0 };
    if effect.direction() == Direction::Down {
        top_share = top_share.min(top_base / effect_total);
    }
    if top_share < 0.5 {
        return Err(err(format!(
            "magnitude {} too large for segment {dim}={top_segment}",
            scenario.magnitude
        )));
    }
    // Fraction of each segment's baseline to remove (or add).
    let rate: BTreeMap<String, f64> = baseline
        .iter()
        .map(|(seg, &base)| {
            let planned = if *seg == top_segment {
                top_share * effect_total
            } else {
                (1.0 - top_share) * effect_total * base / others_base
            };
            let r = if base > 0.0 { planned / base } else { 0.0 };
            (seg.clone(), r)
        })
        .collect();

    let mut realised: BTreeMap<String, f64> = BTreeMap::new();
    match effect {
        Effect::GmvDrop | Effect::PriceShift | Effect::LogisticsDelay => {
            for (i, seg) in &scoped {
                let r = rate[seg];
                let row = &mut data.trd[*i];
                let before = match effect {
                    Effect::GmvDrop => row.net_gmv,
                    Effect::PriceShift => row.discount_amt,
                    _ => row.delivery_minutes,
                };
                match effect {
                    Effect::GmvDrop => row.net_gmv *= 1.0 - r,
                    Effect::PriceShift => {
                        row.discount_amt *= 1.0 - r;
                        row.subsidy_amt *= 1.0 - r;
                        row.net_gmv = row.gross_gmv - row.discount_amt;
                    }
                    _ => {
                        row.delivery_minutes *= 1.0 + r;
                        let late_at = if row.delivery_type == "express" { LATE_EXPRESS } else { LATE_STANDARD };
                        row.is_late = i64::from(row.delivery_minutes > late_at);
                    }
                }
                let after = match effect {
                    Effect::GmvDrop => row.net_gmv,
                    Effect::PriceShift => row.discount_amt,
                    _ => row.delivery_minutes,
                };
                *realised.entry(seg.clone()).or_default() += (after - before).abs();
            }
        }
        Effect::TrafficDrop => {
            let mut drop = vec![false; data.log.len()];
            for (i, seg) in &scoped {
                let mut rng = stream_rng(seed, TAG_SCENARIO, index, *i as u64);
                if rng.random::<f64>() < rate[seg] {
                    drop[*i] = true;
                    *realised.entry(seg.clone()).or_default() += data.log[*i].expose_cnt as f64;
                }
            }
            let mut k = 0;
            data.log.retain(|_| {
                let keep = !drop[k];
                k += 1;
                keep
            });
        }
        Effect::ConversionDrop => {
            for (i, seg) in &scoped {
                if data.log[*i].pay_cnt == 0 {
                    continue;
                }
                let mut rng = stream_rng(seed, TAG_SCENARIO, index, *i as u64);
                if rng.random::<f64>() < rate[seg] {
                    *realised.entry(seg.clone()).or_default() += data.log[*i].pay_cnt as f64;
                    data.log[*i].pay_cnt = 0;
                }
            }
        }
    }

    let realised_total: f64 = realised.values().sum();
    if realised_total <= 0.0 {
        return Err(err("scenario produced no measurable change".into()));
    }
    let mut causes: Vec<PlantedCause> = realised
        .into_iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(segment, v)| PlantedCause {
            metric: effect.metric().to_string(),
            dimension: dim.clone(),
            segment,
            direction: effect.direction(),
            share_of_effect: v / realised_total,
        })
        .collect();
    causes.sort_by(|a, b| b.share_of_effect.total_cmp(&a.share_of_effect).then(a.segment.cmp(&b.segment)));
    let truth = GroundTruth {
        scenario_id: scenario.scenario_id.clone(),
        planted_causes: causes,
    };
    truth.check_invariants().map_err(err)?;
    if truth.planted_causes[0].segment != top_segment {
        return Err(err("realised effect is not dominated by the planted segment".into()));
    }
    Ok(truth)
}

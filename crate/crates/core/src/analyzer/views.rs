use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalyzeError, Aggregate, AnalyzerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowCategory {
    #[serde(rename = "self")]
    SelfTime,
    Wait,
    Library,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub label: String,
    pub category: RowCategory,
    pub cycles: u64,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentView {
    pub component: String,
    pub total_cycles: u64,
    pub total_seconds: f64,
    pub rows: Vec<ViewRow>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRow {
    pub symbol: String,
    pub count: u64,
    pub cycles: u64,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiView {
    pub library: String,
    pub total_cycles: u64,
    pub total_seconds: f64,
    pub rows: Vec<ApiRow>,
    pub diagnostics: Vec<String>,
}

/// Shares of `values` in percent with one decimal, rounded by largest
/// remainder so they add up to exactly 100.0 (or all 0 for a zero total).
pub fn percentages(values: &[u64]) -> Vec<f64> {
    let total: u128 = values.iter().map(|&v| v as u128).sum();
    if total == 0 {
        return vec![0.0; values.len()];
    }
    let mut tenths: Vec<u128> = Vec::with_capacity(values.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let scaled = v as u128 * 1000;
        tenths.push(scaled / total);
        rems.push((scaled % total, i));
    }
    let missing = 1000 - tenths.iter().sum::<u128>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(missing as usize) {
        tenths[i] += 1;
    }
    tenths.into_iter().map(|t| t as f64 / 10.0).collect()
}

/// Attributed time of calls into `lib` from other components.
pub fn library_total(agg: &Aggregate, lib: &str) -> u64 {
    agg.rows
        .iter()
        .filter(|(k, r)| r.owner.as_deref() == Some(lib) && k.caller != lib)
        .fold(0u64, |a, (_, r)| a.saturating_add(r.totals.attributed_cycles))
}

const UNRESOLVED: &str = "<unresolved>";

/// Split a component's time into Self, Wait and one row per callee library.
/// Calls a component makes into itself are nested in its own time and are
/// not listed.
pub fn component_view(agg: &Aggregate, cfg: &AnalyzerConfig, component: &str) -> Result<ComponentView, AnalyzeError> {
    let path = agg.find_image(component)?;
    let is_app = agg.main_image.as_deref() == Some(path.as_str());

    let mut wait = 0u64;
    let mut libs: BTreeMap<String, u64> = BTreeMap::new();
    for (k, r) in agg.rows.iter().filter(|(k, _)| k.caller == path) {
        let t = r.totals.attributed_cycles;
        if cfg.is_wait(&k.symbol) {
            wait = wait.saturating_add(t);
            continue;
        }
        let owner = r.owner.as_deref().unwrap_or(UNRESOLVED);
        if owner == path {
            continue;
        }
        let e = libs.entry(owner.to_string()).or_default();
        *e = e.saturating_add(t);
    }

    let mut diagnostics = Vec::new();
    let measured = if is_app { agg.process_total() } else { library_total(agg, &path) };
    let outside = libs.values().fold(wait, |a, &v| a.saturating_add(v));
    if measured < outside {
        diagnostics.push(format!(
            "callee time {outside} exceeds component total {measured}; Self clamped to 0"
        ));
    }
    let total = measured.max(outside);
    let self_cycles = total - outside;

    let mut callees: Vec<(String, u64)> = libs.into_iter().collect();
    callees.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut rows = vec![
        ViewRow { label: "Self".into(), category: RowCategory::SelfTime, cycles: self_cycles, seconds: 0.0, percent: 0.0 },
        ViewRow { label: "Wait".into(), category: RowCategory::Wait, cycles: wait, seconds: 0.0, percent: 0.0 },
    ];
    rows.extend(callees.into_iter().map(|(label, cycles)| ViewRow {
        label,
        category: RowCategory::Library,
        cycles,
        seconds: 0.0,
        percent: 0.0,
    }));
    let pct = percentages(&rows.iter().map(|r| r.cycles).collect::<Vec<_>>());
    for (r, p) in rows.iter_mut().zip(pct) {
        r.percent = p;
        r.seconds = agg.seconds(r.cycles);
    }
    if total == 0 {
        diagnostics.push("component has no recorded time".into());
    }
    Ok(ComponentView { component: path, total_cycles: total, total_seconds: agg.seconds(total), rows, diagnostics })
}

/// Per-API split of a library's time, summed over every calling component.
pub fn api_view(agg: &Aggregate, library: &str) -> Result<ApiView, AnalyzeError> {
    let path = agg.find_image(library)?;
    let mut per: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (k, r) in &agg.rows {
        if r.owner.as_deref() != Some(path.as_str()) || k.caller == path {
            continue;
        }
        let e = per.entry(k.symbol.as_str()).or_default();
        e.0 = e.0.saturating_add(r.totals.count);
        e.1 = e.1.saturating_add(r.totals.attributed_cycles);
    }
    let mut list: Vec<(&str, (u64, u64))> = per.into_iter().collect();
    list.sort_by(|a, b| b.1 .1.cmp(&a.1 .1).then_with(|| a.0.cmp(b.0)));
    let pct = percentages(&list.iter().map(|(_, (_, c))| *c).collect::<Vec<_>>());
    let total = list.iter().fold(0u64, |a, (_, (_, c))| a.saturating_add(*c));
    let rows: Vec<ApiRow> = list
        .into_iter()
        .zip(pct)
        .map(|((s, (count, cycles)), percent)| ApiRow {
            symbol: s.to_string(),
            count,
            cycles,
            seconds: agg.seconds(cycles),
            percent,
        })
        .collect();
    let mut diagnostics = Vec::new();
    if rows.is_empty() {
        diagnostics.push(format!("no calls into {path} were recorded"));
    }
    Ok(ApiView { library: path, total_cycles: total, total_seconds: agg.seconds(total), rows, diagnostics })
}

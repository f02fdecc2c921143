use std::collections::BTreeSet;
use std::process::ExitCode;

use anyhow::{Context, Result};
use xflow_core::analyzer::{
    api_view, basename, component_view, imbalance_report, load_dir, merge, render, Aggregate, AnalyzerConfig,
    ElfOwners, Format, Report, RowCategory,
};

use crate::{OutputFormat, ReportArgs, View};

fn main_image(agg: &Aggregate) -> Result<String> {
    agg.main_image.clone().context("no ledger names the main executable; pass --image")
}

/// Library receiving the most time from the application, if any.
fn largest_callee(agg: &Aggregate, cfg: &AnalyzerConfig) -> Result<Option<String>> {
    let v = component_view(agg, cfg, &main_image(agg)?)?;
    Ok(v.rows
        .into_iter()
        .filter(|r| r.category == RowCategory::Library && r.cycles > 0 && agg.images.contains(&r.label))
        .map(|r| r.label)
        .next())
}

fn reports(agg: &Aggregate, cfg: &AnalyzerConfig, a: &ReportArgs) -> Result<Vec<Report>> {
    let mut out = Vec::new();
    match a.view {
        None => {
            let app = main_image(agg)?;
            out.push(Report::Component(component_view(agg, cfg, a.image.as_deref().unwrap_or(&app))?));
            if let Some(lib) = largest_callee(agg, cfg)? {
                out.push(Report::Api(api_view(agg, &lib)?));
            }
        }
        Some(View::Component) => {
            let c = match &a.image {
                Some(i) => i.clone(),
                None => main_image(agg)?,
            };
            out.push(Report::Component(component_view(agg, cfg, &c)?));
        }
        Some(View::Api) => {
            let lib = match &a.image {
                Some(i) => i.clone(),
                None => largest_callee(agg, cfg)?.context("the application calls no library; pass --image")?,
            };
            out.push(Report::Api(api_view(agg, &lib)?));
        }
        Some(View::Imbalance) => out.push(Report::Imbalance(imbalance_report(agg, cfg.imbalance_threshold))),
    }
    Ok(out)
}

pub fn report(a: &ReportArgs) -> Result<ExitCode> {
    let (inputs, load_warnings) = load_dir(&a.out)?;
    let mut cfg = AnalyzerConfig::default();
    if let Some(t) = a.threshold {
        cfg.imbalance_threshold = t;
    }
    let agg = merge(&inputs, &cfg, &ElfOwners::new());
    let rendered = render(
        &reports(&agg, &cfg, a)?,
        match a.format {
            OutputFormat::Text => Format::Text,
            OutputFormat::Json => Format::Json,
        },
    );
    print!("{rendered}");

    let pids: BTreeSet<u32> = inputs.iter().map(|i| i.pid).collect();
    if pids.len() > 1 {
        eprintln!("xflow: note: merged ledgers of {} processes", pids.len());
    }
    // Diagnostics the agent recorded while running.
    if let Ok(dir) = std::fs::read_dir(&a.out) {
        let mut names: Vec<_> = dir
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "warnings"))
            .collect();
        names.sort();
        for p in names {
            if let Ok(text) = std::fs::read_to_string(&p) {
                for l in text.lines().filter(|l| !l.is_empty()) {
                    eprintln!("xflow: agent: {}: {l}", basename(&p.to_string_lossy()));
                }
            }
        }
    }
    let partial: Vec<_> = load_warnings.iter().chain(&agg.warnings).collect();
    for w in &partial {
        eprintln!("xflow: warning: {w}");
    }
    Ok(if partial.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

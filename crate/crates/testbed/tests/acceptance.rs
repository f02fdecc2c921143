//! Acceptance checks, run serially so timing-sensitive ones do not compete
//! for the CPU. Prints one PASS/FAIL line per check; exits non-zero if any
//! check fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use xflow_core::analyzer::{
    self, api_view, component_view, imbalance_report, merge, render, AnalyzerConfig, Document, ElfOwners, Format,
    LedgerInput, NoOwners, Report, RowCategory, DEFAULT_IMBALANCE_THRESHOLD,
};
use xflow_core::{LedgerFile, LedgerRow, SiteKind};
use xflow_testbed::{
    count, fixture_dir, key, median, oracle_per_thread, oracle_totals, per_thread, run, totals, Launch, Run, SKIPPED,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok_run(bin: &str, args: &[&str], launch: &Launch) -> Result<Run, String> {
    let r = run(bin, args, launch);
    ensure!(r.success(), "{bin} {args:?} exited with {}: {}", r.output.status, r.stderr().trim());
    Ok(r)
}

fn expect_counts(r: &Run, what: &str, want: &[(&str, &str, u64)]) -> Result<(), String> {
    let l = r.ledgers();
    for &(caller, symbol, n) in want {
        let got = count(&l, caller, symbol);
        ensure!(got == n, "{what}: {caller} -> {symbol} counted {got}, expected {n}");
    }
    Ok(())
}

fn field_u64(r: &Run, k: &str) -> Result<u64, String> {
    r.field(k).and_then(|v| v.parse().ok()).ok_or_else(|| format!("no {k}= in output: {}", r.stdout()))
}

fn basic_expectations(me: &str, n: u64) -> Vec<(&str, &'static str, u64)> {
    vec![
        (me, "fx_noop", n),
        (me, "fx_add", n),
        (me, "fx_b_work", 1),
        (me, "fx_b_chain", n),
        (me, "oracle_record", 3 * n + 1),
        ("libfxb.so", "fx_noop", n),
        ("libfxb.so", "fx_mid", n),
        ("libfxa.so", "fx_d_leaf", n),
    ]
}

fn exact_counting() -> Outcome {
    let start = Instant::now();
    let n = 1000u64;
    let ns = n.to_string();
    let t = Launch::traced();

    let r = ok_run("fx_driver", &["basic", &ns], &t)?;
    expect_counts(&r, "lazy", &basic_expectations("fx_driver", n))?;

    let r = ok_run("fx_eager", &["basic", &ns], &t)?;
    expect_counts(&r, "eager", &basic_expectations("fx_eager", n))?;
    let r = ok_run("fx_driver", &["basic", &ns], &t.clone().env("LD_BIND_NOW", "1"))?;
    expect_counts(&r, "LD_BIND_NOW", &basic_expectations("fx_driver", n))?;

    let r = ok_run("fx_nplt", &[&ns], &t)?;
    expect_counts(&r, "dyn-got", &[("fx_nplt", "fx_noop", n), ("fx_nplt", "fx_add", n)])?;

    let r = ok_run("fx_driver", &["dlsym", &ns], &t)?;
    expect_counts(&r, "dlsym", &[("fx_driver", "fx_c_work", n)])?;

    let r = ok_run("fx_driver", &["tail", &ns], &t)?;
    expect_counts(
        &r,
        "tail-jump",
        &[("fx_driver", "tj_api1", n), ("libtj1.so", "tj_api2", n), ("libtj2.so", "tj_api3", n)],
    )?;

    let r = ok_run("fx_driver", &["threads", "4", "250"], &t)?;
    expect_counts(&r, "threads", &[("fx_driver", "fx_noop", 1000), ("fx_driver", "fx_add", 1000)])?;
    let pt = per_thread(&r.ledgers(), "fx_add");
    ensure!(pt == vec![250; 4], "threads: per-thread fx_add counts {pt:?}");

    let r = ok_run("fx_driver", &["abnormal", "100"], &t)?;
    expect_counts(&r, "abnormal", &[("fx_driver", "fx_noop", 300), ("fx_driver", "fx_exit", 1)])?;
    let pt = per_thread(&r.ledgers(), "fx_noop");
    ensure!(pt == vec![100; 3], "abnormal: per-thread fx_noop counts {pt:?}");

    let el = start.elapsed();
    ensure!(el < Duration::from_secs(60), "suite took {el:?}");
    Ok(format!("8 fixture runs exact, {:.1}s", el.as_secs_f64()))
}

fn oracle_equivalence() -> Outcome {
    let o = Launch::traced().with_oracle();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("fx_driver", vec!["basic", "1000"]),
        ("fx_driver", vec!["dlsym", "1000"]),
        ("fx_driver", vec!["tail", "1000"]),
        ("fx_driver", vec!["threads", "4", "250"]),
        ("fx_nplt", vec!["1000"]),
        ("fx_driver", vec!["oracle", "2000"]),
    ];
    let mut keys = 0;
    let mut worst = 0.0f64;
    for (bin, args) in &runs {
        let r = ok_run(bin, args, &o)?;
        let ev = r.oracle();
        ensure!(ev.len() <= 100_000, "{args:?}: {} oracle events", ev.len());
        ensure!(!ev.is_empty(), "{args:?}: empty oracle log");
        let l = r.ledgers();
        let got = totals(&l);
        for (k, (n, _)) in oracle_totals(&ev) {
            let c = got.get(&k).map_or(0, |t| t.count);
            ensure!(c == n, "{args:?}: {k:?} folded {c}, oracle {n}");
            keys += 1;
        }
        if args[0] == "threads" {
            let (a, b) = (per_thread(&l, "fx_add"), oracle_per_thread(&ev, "fx_add"));
            ensure!(a == b, "per-thread fx_add {a:?} vs oracle {b:?}");
        }
        if args[0] == "oracle" {
            // Duration comparison on calls long enough that the bracket's own
            // cost is negligible.
            let k = key("fx_driver", "fx_spin");
            let raw = got[&k].raw_cycles as f64;
            let want = oracle_totals(&ev)[&k].1 as f64;
            let rel = (raw - want).abs() / want;
            ensure!(rel <= 0.01, "fx_spin raw {raw} vs oracle {want}: {:.3}%", rel * 100.0);
            worst = worst.max(rel);
        }
    }
    Ok(format!("{keys} (caller, API) rows equal; fx_spin raw within {:.3}%", worst * 100.0))
}

fn relation_awareness() -> Outcome {
    let r = ok_run("fx_driver", &["basic", "700"], &Launch::traced().with_oracle())?;
    let ev = oracle_totals(&r.oracle());
    let agg = merge(&r.ledgers(), &AnalyzerConfig::default(), &ElfOwners::new());
    let rows: Vec<_> = agg.rows.iter().filter(|(k, _)| k.symbol == "fx_noop").collect();
    ensure!(rows.len() == 2, "expected two fx_noop rows, got {}", rows.len());
    let mut seen = Vec::new();
    for (k, row) in rows {
        let caller = analyzer::basename(&k.caller);
        let want = ev.get(&key(caller, "fx_noop")).map_or(0, |e| e.0);
        ensure!(row.totals.count == want, "{caller}: {} vs oracle {want}", row.totals.count);
        let owner = row.owner.as_deref().map(analyzer::basename);
        ensure!(owner == Some("libfxa.so"), "{caller}: owner {owner:?}");
        seen.push(format!("{caller}={want}"));
    }
    seen.sort();
    ensure!(seen == ["fx_driver=700", "libfxb.so=700"], "{seen:?}");
    Ok(format!("fx_noop rows {}", seen.join(", ")))
}

fn per_call_overhead() -> Outcome {
    let args = ["bench", "100", "100000"];
    let base = field_u64(&ok_run("fx_driver", &args, &Launch::plain())?, "median_ps")? as f64;
    let timed = field_u64(&ok_run("fx_driver", &args, &Launch::traced())?, "median_ps")? as f64;
    let gated =
        field_u64(&ok_run("fx_driver", &args, &Launch::traced().env("XFLOW_TIMING_RATE", "1000000000"))?, "median_ps")?
            as f64;
    let timed_ns = (timed - base) / 1000.0;
    let gated_ns = (gated - base) / 1000.0;
    let detail = format!("timed {timed_ns:.1} ns, gated {gated_ns:.1} ns per call (baseline {:.2} ns)", base / 1000.0);
    ensure!(timed_ns <= 200.0 && gated_ns <= 80.0, "{detail}");
    Ok(detail)
}

fn ledger_sizes(r: &Run) -> Vec<u64> {
    let mut v: Vec<u64> = r
        .ledger_names()
        .iter()
        .filter(|n| n.ends_with(".tsv"))
        .filter_map(|n| std::fs::metadata(r.out_dir().join(n)).ok())
        .map(|m| m.len())
        .collect();
    v.sort_unstable();
    v
}

fn memory_flatness() -> Outcome {
    let t = Launch::traced();
    let small = ok_run("fx_driver", &["loop", "1000"], &t)?;
    let large = ok_run("fx_driver", &["loop", "100000000"], &t)?;
    let (a, b) = (field_u64(&small, "rss_kb")? as i64, field_u64(&large, "rss_kb")? as i64);
    let (sa, sb) = (ledger_sizes(&small), ledger_sizes(&large));
    ensure!(!sa.is_empty() && sa == sb, "ledger sizes differ: {sa:?} vs {sb:?}");
    ensure!(count(&large.ledgers(), "fx_driver", "fx_noop") == 100_000_000, "large run count wrong");
    ensure!(b - a <= 2048, "RSS grew {} KB", b - a);
    Ok(format!("RSS {a} KB -> {b} KB, ledger {sa:?} bytes both"))
}

fn per_api_memory() -> Outcome {
    let mut over = Vec::new();
    let mut sites = Vec::new();
    for n in [10usize, 1000] {
        let bin = format!("fx_wide{n}");
        let plain = ok_run(&bin, &[], &Launch::plain())?;
        let traced = ok_run(&bin, &[], &Launch::traced())?;
        ensure!(plain.field("sum") == traced.field("sum"), "{bin}: outputs differ");
        over.push(field_u64(&traced, "rss_kb")? as i64 - field_u64(&plain, "rss_kb")? as i64);
        let l = traced.ledgers();
        sites.push(l.iter().flat_map(|x| x.file.rows.iter()).filter(|r| r.symbol.starts_with("w_")).count() as i64);
    }
    ensure!(sites == [10, 1000], "wide sites {sites:?}");
    let per_site = (over[1] - over[0]) as f64 * 1024.0 / (sites[1] - sites[0]) as f64;
    let detail = format!("overhead {} KB / {} KB, {per_site:.0} bytes per site", over[0], over[1]);
    ensure!(per_site <= 4096.0, "{detail}");
    Ok(detail)
}

fn attribution() -> Outcome {
    let r = ok_run("fx_driver", &["attr", "200", "200000"], &Launch::traced())?;
    let l = r.ledgers();
    ensure!(l.len() == 4, "{} ledgers", l.len());
    let t = totals(&l);
    let par = t[&key("fx_driver", "fx_spin")];
    ensure!(par.count == 800, "fx_spin count {}", par.count);
    let want = par.raw_cycles as f64 / 4.0;
    let rel = (par.attributed_cycles as f64 - want) / want;
    let ser = t[&key("fx_driver", "fx_spin_serial")];
    ensure!(ser.count == 200 && ser.raw_cycles > 0, "serial rows {ser:?}");
    ensure!(ser.attributed_cycles == ser.raw_cycles, "serial attributed {} != raw {}", ser.attributed_cycles, ser.raw_cycles);
    ensure!(rel.abs() <= 0.15, "parallel attributed off raw/4 by {:.2}%", rel * 100.0);
    Ok(format!("parallel attributed = raw/4 {:+.2}%, serial attributed == raw", rel * 100.0))
}

fn timing_accuracy() -> Outcome {
    let r = ok_run("fx_driver", &["timing", "1000", "1000"], &Launch::traced())?;
    let out = r.stdout();
    let hz: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("hz ").and_then(|v| v.trim().parse().ok()))
        .ok_or("no hz line")?;
    ensure!(hz > 0.0, "hz {hz}");
    let mut ms: Vec<f64> = out
        .lines()
        .filter_map(|l| l.strip_prefix("sample ").and_then(|v| v.trim().parse::<f64>().ok()))
        .map(|c| c / hz * 1e3)
        .collect();
    ensure!(ms.len() >= 1000, "{} samples", ms.len());
    let m = median(&mut ms);
    ensure!((m - 1.0).abs() <= 0.1, "median {m:.4} ms");
    Ok(format!("median {m:.4} ms over 1000 samples at {:.3} GHz", hz / 1e9))
}

fn transparency() -> Outcome {
    let plain = ok_run("fx_driver", &["hash"], &Launch::plain())?;
    let traced = ok_run("fx_driver", &["hash"], &Launch::traced())?;
    ensure!(plain.stdout() == traced.stdout(), "hash output differs:\n{}\nvs\n{}", plain.stdout(), traced.stdout());
    ensure!(count(&traced.ledgers(), "fx_driver", "fx_hash") == 16, "fx_hash count");

    let t = Launch::traced();
    let r = ok_run("fx_driver", &["tail", "500"], &t)?;
    expect_counts(&r, "tail", &[("fx_driver", "tj_api1", 500), ("libtj2.so", "tj_api3", 500)])?;
    let r = ok_run("fx_driver", &["abnormal", "50"], &t)?;
    expect_counts(&r, "abnormal", &[("fx_driver", "fx_noop", 150), ("fx_driver", "fx_exit", 1)])?;
    let r = ok_run("fx_driver", &["longjmp", "80"], &t)?;
    expect_counts(&r, "longjmp", &[("fx_driver", "fx_bail", 80)])?;
    ensure!(r.field("depth").as_deref() == Some("0"), "shadow depth after longjmp {:?}", r.field("depth"));
    Ok(format!("{} hash lines identical; tail, exit and longjmp fixtures clean", plain.stdout().lines().count()))
}

const IMAGES: [&str; 4] = ["/opt/app/bin/app", "/opt/app/lib/libsolver.so", "/usr/lib/libm.so.6", "/usr/lib/libc.so.6"];
const SYMBOLS: [(&str, u32); 6] =
    [("solve", 1), ("sqrt", 2), ("memcpy", 3), ("pthread_cond_wait", 3), ("pthread_join", 3), ("helper", 1)];

fn ledger_strategy() -> impl Strategy<Value = LedgerInput> {
    let row = (0u32..3, 0usize..SYMBOLS.len(), 0u64..1000, 0u64..1_000_000_000);
    (1u32..4, 0u32..6, 0u64..8, 0u64..20_000_000_000, prop::collection::vec(row, 0..12)).prop_map(
        |(pid, ordinal, group, total, rows)| {
            let mut file = LedgerFile {
                ordinal,
                group,
                hz: 2_000_000_000,
                total_cycles: total,
                images: IMAGES.iter().enumerate().map(|(i, p)| (i as u32, p.to_string())).collect(),
                rows: Vec::new(),
            };
            for (site, (caller, s, count, attributed)) in rows.into_iter().enumerate() {
                let (symbol, callee) = SYMBOLS[s];
                file.rows.push(LedgerRow {
                    site: site as u32,
                    caller_image: caller,
                    symbol: symbol.to_string(),
                    kind: SiteKind::PltLazy,
                    count,
                    timed_count: count,
                    raw_cycles: attributed.saturating_mul(2),
                    attributed_cycles: attributed,
                    callee_image: Some(callee),
                });
            }
            LedgerInput { name: xflow_core::format::file_name(pid, ordinal), pid, file }
        },
    )
}

fn check_views(inputs: &[LedgerInput], shuffled: &[LedgerInput]) -> Result<(), TestCaseError> {
    let cfg = AnalyzerConfig::default();
    let agg = merge(inputs, &cfg, &NoOwners);
    prop_assert_eq!(&agg, &merge(shuffled, &cfg, &NoOwners));
    let mut reports = Vec::new();
    for c in IMAGES {
        let v = component_view(&agg, &cfg, c).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let parts = v.rows.iter().fold(0u64, |a, r| a + r.cycles);
        prop_assert_eq!(parts, v.total_cycles);
        prop_assert_eq!(v.rows[0].category, RowCategory::SelfTime);
        prop_assert_eq!(v.rows[1].category, RowCategory::Wait);
        reports.push(Report::Component(v));
    }
    for lib in &IMAGES[1..] {
        reports.push(Report::Api(api_view(&agg, lib).map_err(|e| TestCaseError::fail(e.to_string()))?));
    }
    let doc = Document::parse(&render(&reports, Format::Json)).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for r in &doc.reports {
        let (total, pct): (u64, f64) = match r {
            Report::Component(v) => (v.total_cycles, v.rows.iter().map(|x| x.percent).sum()),
            Report::Api(v) => (v.total_cycles, v.rows.iter().map(|x| x.percent).sum()),
            Report::Imbalance(_) => continue,
        };
        if total > 0 {
            prop_assert!((pct - 100.0).abs() <= 0.1, "percentages sum to {}", pct);
        }
    }
    Ok(())
}

fn view_conservation() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() });
    let strat = prop::collection::vec(ledger_strategy(), 1..8)
        .prop_map(|mut v| {
            // One ledger per (pid, ordinal).
            let mut seen = std::collections::BTreeSet::new();
            v.retain(|l| seen.insert((l.pid, l.file.ordinal)));
            v
        })
        .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    let cases = std::cell::Cell::new(0u32);
    runner
        .run(&strat, |(a, b)| {
            cases.set(cases.get() + 1);
            check_views(&a, &b)
        })
        .map_err(|e| e.to_string())?;
    let cases = cases.get();
    ensure!(cases >= 100, "only {cases} cases ran");
    Ok(format!("{cases} random ledger sets and permutations"))
}

fn imbalance_of(heavy: &str, light: &str) -> Result<analyzer::ImbalanceReport, String> {
    let r = ok_run("fx_driver", &["imbalance", heavy, light], &Launch::traced())?;
    let agg = merge(&r.ledgers(), &AnalyzerConfig::default(), &ElfOwners::new());
    Ok(imbalance_report(&agg, DEFAULT_IMBALANCE_THRESHOLD))
}

fn imbalance_detection() -> Outcome {
    let skewed = imbalance_of("480", "30")?;
    ensure!(skewed.groups.len() >= 2, "groups {:?}", skewed.groups);
    ensure!(
        skewed.flagged && (12.0..=20.0).contains(&skewed.ratio),
        "16:1 fixture ratio {:.2} flagged={}",
        skewed.ratio,
        skewed.flagged
    );
    let even = imbalance_of("120", "120")?;
    ensure!(!even.flagged, "balanced fixture flagged with ratio {:.2}", even.ratio);
    Ok(format!("16:1 fixture ratio {:.2} flagged; balanced ratio {:.2} not flagged", skewed.ratio, even.ratio))
}

fn string_tree_case() -> Outcome {
    let r = ok_run("fx_strtree", &[], &Launch::traced())?;
    let agg = merge(&r.ledgers(), &AnalyzerConfig::default(), &ElfOwners::new());
    let v = api_view(&agg, "libstdc++").map_err(|e| e.to_string())?;
    let top = v.rows.first().ok_or("empty API view")?;
    ensure!(
        top.symbol.contains("compare") && top.symbol.contains("basic_string"),
        "top API is {} ({} calls)",
        top.symbol,
        top.count
    );
    Ok(format!("top libstdc++ API {} ({} calls, {:.1}%)", top.symbol, top.count, top.percent))
}

fn main() {
    let native = fixture_dir().is_some();
    let checks: [(&str, bool, fn() -> Outcome); 12] = [
        ("exact counting", true, exact_counting),
        ("oracle equivalence", true, oracle_equivalence),
        ("relation awareness", true, relation_awareness),
        ("per-invocation overhead", true, per_call_overhead),
        ("memory flatness", true, memory_flatness),
        ("per-API memory", true, per_api_memory),
        ("attribution rule", true, attribution),
        ("timing accuracy", true, timing_accuracy),
        ("transparency", true, transparency),
        ("view conservation", false, view_conservation),
        ("imbalance detection", true, imbalance_detection),
        ("string tree case", true, string_tree_case),
    ];
    let mut failed = 0;
    let mut results = BTreeMap::new();
    for (i, (name, needs_fixtures, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if *needs_fixtures && !native {
            println!("SKIP {n:>2} {name}: {SKIPPED}");
            continue;
        }
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        match &res {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {e} [{secs:.1}s]");
            }
        }
        results.insert(n, res.is_ok());
    }
    println!("acceptance: {} passed, {failed} failed", results.values().filter(|&&ok| ok).count());
    if failed > 0 {
        std::process::exit(1);
    }
}

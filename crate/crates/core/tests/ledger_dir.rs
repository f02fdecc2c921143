use xflow_core::analyzer::{load_dir, merge, AnalyzeError, AnalyzerConfig, NoOwners};
use xflow_core::format::file_name;
use xflow_core::{LedgerFile, LedgerRow, SiteKind};

fn ledger(ordinal: u32, count: u64) -> LedgerFile {
    LedgerFile {
        ordinal,
        group: 0x1000 + ordinal as u64,
        hz: 3_000_000_000,
        total_cycles: 9_000_000,
        images: vec![(0, "/usr/bin/app".into()), (1, "/usr/lib/libz.so.1".into())],
        rows: vec![LedgerRow {
            site: 0,
            caller_image: 0,
            symbol: "inflate".into(),
            kind: SiteKind::PltLazy,
            count,
            timed_count: count,
            raw_cycles: 4000 * count,
            attributed_cycles: 2000 * count,
            callee_image: Some(1),
        }],
    }
}

#[test]
fn directory_round_trip_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    for (ord, n) in [(0, 5), (1, 7), (2, 11)] {
        std::fs::write(dir.path().join(file_name(42, ord)), ledger(ord, n).to_text()).unwrap();
    }
    // Ignored: unrelated files and snapshot folders.
    std::fs::write(dir.path().join("xflow.42.warnings"), "note\n").unwrap();
    std::fs::create_dir(dir.path().join("snapshot-0001")).unwrap();
    std::fs::write(dir.path().join("snapshot-0001").join(file_name(42, 0)), ledger(0, 1).to_text()).unwrap();

    let (inputs, warnings) = load_dir(dir.path()).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(inputs.len(), 3);
    assert_eq!(inputs[1].file, ledger(1, 7));

    let agg = merge(&inputs, &AnalyzerConfig::default(), &NoOwners);
    let t = agg.grand_totals();
    assert_eq!(t.count, 23);
    assert_eq!(t.attributed_cycles, 2000 * 23);
    let row = agg.rows.values().next().unwrap();
    assert_eq!(row.owner.as_deref(), Some("/usr/lib/libz.so.1"));
    assert_eq!(agg.hz, 3_000_000_000);
    assert_eq!(agg.main_image.as_deref(), Some("/usr/bin/app"));
}

#[test]
fn damaged_files_become_warnings() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(file_name(1, 0)), ledger(0, 3).to_text()).unwrap();
    std::fs::write(dir.path().join(file_name(1, 1)), "garbage").unwrap();
    let mut text = ledger(2, 4).to_text();
    text.push_str("this row is broken\n");
    std::fs::write(dir.path().join(file_name(1, 2)), text).unwrap();

    let (inputs, warnings) = load_dir(dir.path()).unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(warnings.len(), 2, "{warnings:?}");
    assert!(warnings.iter().any(|w| w.starts_with(&file_name(1, 1))));
}

#[test]
fn empty_directory_has_no_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dir(dir.path()), Err(AnalyzeError::NoLedgers(_))));
}

use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use xflow_bench::{inputs, ledger};
use xflow_core::analyzer::{api_view, component_view, merge, AnalyzerConfig, NoOwners};
use xflow_core::codegen::{emit_entry, EntryParams};
use xflow_core::ledger::{SiteSlot, ThreadLedger, ThreadMeta};
use xflow_core::shadow::{EnterAction, ShadowFrame, ShadowStack};
use xflow_core::LedgerFile;

fn fold(c: &mut Criterion) {
    let mut g = c.benchmark_group("fold");
    g.throughput(Throughput::Elements(1));
    let mut slot = SiteSlot::default();
    g.bench_function("slot_timed", |b| b.iter(|| slot.fold(Some(black_box(1234)), black_box(4), 1)));
    g.bench_function("slot_untimed", |b| b.iter(|| slot.fold(None, black_box(1), 1)));
    let mut l = ThreadLedger::new(ThreadMeta::default());
    let mut site = 0u32;
    g.bench_function("ledger_1k_sites", |b| {
        b.iter(|| {
            site = (site + 7) % 1000;
            l.fold(site, Some(500), 2, 1)
        })
    });
    g.finish();
}

fn shadow(c: &mut Criterion) {
    let mut frames = vec![ShadowFrame::default(); 64];
    let mut depth = 0usize;
    c.bench_function("shadow/enter_exit", |b| {
        b.iter(|| {
            let mut s = ShadowStack::new(&mut frames, &mut depth);
            let a = s.enter(3, 0x7ff0_0000, 0x40_1000, 100, |_, _| false);
            debug_assert_eq!(a, EnterAction::Push);
            black_box(s.exit(3, 250))
        })
    });
}

fn codegen(c: &mut Criterion) {
    let p = EntryParams {
        site: 17,
        entry_addr: 0x7f00_0000_1000,
        ctx_tls_offset: -64,
        timing_rate: 1,
        resolved_cell: 0x7f00_0100_0000,
        resolver: Some((5, 0x7f00_0100_0008)),
        common_enter: 0x7f00_0000_0000,
        common_exit: 0x7f00_0000_0080,
    };
    c.bench_function("codegen/emit_entry", |b| b.iter(|| emit_entry(black_box(&p)).unwrap()));
}

fn format(c: &mut Criterion) {
    let mut g = c.benchmark_group("format");
    let f = ledger(0, 1000);
    let text = f.to_text();
    g.throughput(Throughput::Bytes(text.len() as u64));
    g.bench_function("to_text_1k_rows", |b| b.iter(|| black_box(&f).to_text()));
    g.bench_function("parse_1k_rows", |b| b.iter(|| LedgerFile::parse(black_box(&text)).unwrap()));
    g.finish();
}

fn analyze(c: &mut Criterion) {
    let cfg = AnalyzerConfig::default();
    let ins = inputs(16, 500);
    c.bench_function("merge/16x500", |b| b.iter(|| merge(black_box(&ins), &cfg, &NoOwners)));
    let agg = merge(&ins, &cfg, &NoOwners);
    c.bench_function("views/component_and_api", |b| {
        b.iter(|| {
            let v = component_view(&agg, &cfg, "libpart0.so").unwrap();
            let a = api_view(&agg, "libpart1.so").unwrap();
            (v, a)
        })
    });
}

criterion_group!(benches, fold, shadow, codegen, format, analyze);
criterion_main!(benches);

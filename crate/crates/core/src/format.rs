//! The per-thread ledger file: a small line-oriented TSV document.
//!
//! ```text
//! XFLOW	1
//! #tid	0
//! #group	0000000000000000
//! #hz	00000000002995200000
//! #total_cycles	00000000000123456789
//! #image	0	/usr/bin/app
//! 3	0	puts	plt-lazy	00000000000000000002	...	[callee image id]
//! ```
//!
//! Counters are zero-padded to a fixed width so the size of a file depends
//! only on which sites were touched, never on how often.

use std::fmt::Write as _;

use crate::site::{ImageId, SiteId, SiteKind};

pub const MAGIC: &str = "XFLOW";
pub const VERSION: u32 = 1;
const NUM_WIDTH: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub site: SiteId,
    pub caller_image: ImageId,
    pub symbol: String,
    pub kind: SiteKind,
    pub count: u64,
    pub timed_count: u64,
    pub raw_cycles: u64,
    pub attributed_cycles: u64,
    /// Image defining the resolved target, when the runtime knew it.
    pub callee_image: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LedgerFile {
    pub ordinal: u32,
    pub group: u64,
    pub hz: u64,
    pub total_cycles: u64,
    pub images: Vec<(ImageId, String)>,
    pub rows: Vec<LedgerRow>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("missing or bad magic line")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(String),
    #[error("line {line}: {reason}")]
    Header { line: usize, reason: String },
}

/// A data row that could not be parsed; the rest of the file is still usable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub reason: String,
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl LedgerFile {
    pub fn image_path(&self, id: ImageId) -> Option<&str> {
        self.images.iter().find(|(i, _)| *i == id).map(|(_, p)| p.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(256 + self.images.len() * 64 + self.rows.len() * 160);
        let w = NUM_WIDTH;
        // Writing into a String cannot fail.
        let _ = writeln!(out, "{MAGIC}\t{VERSION}");
        let _ = writeln!(out, "#tid\t{}", self.ordinal);
        let _ = writeln!(out, "#group\t{:016x}", self.group);
        let _ = writeln!(out, "#hz\t{:0w$}", self.hz);
        let _ = writeln!(out, "#total_cycles\t{:0w$}", self.total_cycles);
        for (id, path) in &self.images {
            let _ = writeln!(out, "#image\t{id}\t{}", clean(path));
        }
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{:0w$}\t{:0w$}\t{:0w$}\t{:0w$}",
                r.site,
                r.caller_image,
                clean(&r.symbol),
                r.kind,
                r.count,
                r.timed_count,
                r.raw_cycles,
                r.attributed_cycles
            );
            if let Some(c) = r.callee_image {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Parse a ledger file. Header problems are fatal; malformed data rows
    /// are skipped and reported.
    pub fn parse(text: &str) -> Result<(Self, Vec<RowError>), FormatError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(FormatError::BadMagic)?;
        let (magic, version) = first.split_once('\t').ok_or(FormatError::BadMagic)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if version.trim() != VERSION.to_string() {
            return Err(FormatError::Version(version.to_string()));
        }

        let mut file = LedgerFile::default();
        let mut errors = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let hdr = |reason: &str| FormatError::Header { line: lineno, reason: reason.to_string() };
                let (key, val) = h.split_once('\t').ok_or_else(|| hdr("header without value"))?;
                match key {
                    "tid" => file.ordinal = val.parse().map_err(|_| hdr("bad tid"))?,
                    "group" => file.group = u64::from_str_radix(val, 16).map_err(|_| hdr("bad group"))?,
                    "hz" => file.hz = val.parse().map_err(|_| hdr("bad hz"))?,
                    "total_cycles" => file.total_cycles = val.parse().map_err(|_| hdr("bad total_cycles"))?,
                    "image" => {
                        let (id, path) = val.split_once('\t').ok_or_else(|| hdr("bad image line"))?;
                        file.images.push((id.parse().map_err(|_| hdr("bad image id"))?, path.to_string()));
                    }
                    // Unknown headers are ignored for forward compatibility.
                    _ => {}
                }
                continue;
            }
            match parse_row(line) {
                Ok(r) => file.rows.push(r),
                Err(reason) => errors.push(RowError { line: lineno, reason }),
            }
        }
        Ok((file, errors))
    }
}

fn parse_row(line: &str) -> Result<LedgerRow, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 && f.len() != 9 {
        return Err(format!("expected 8 or 9 fields, found {}", f.len()));
    }
    let num = |i: usize, what: &str| -> Result<u64, String> {
        f[i].parse::<u64>().map_err(|_| format!("bad {what} {:?}", f[i]))
    };
    let row = LedgerRow {
        site: num(0, "site")?.try_into().map_err(|_| "site out of range".to_string())?,
        caller_image: num(1, "caller")?.try_into().map_err(|_| "caller out of range".to_string())?,
        symbol: f[2].to_string(),
        kind: f[3].parse().map_err(|e: crate::site::UnknownKind| e.to_string())?,
        count: num(4, "count")?,
        timed_count: num(5, "timed_count")?,
        raw_cycles: num(6, "raw_cycles")?,
        attributed_cycles: num(7, "attributed_cycles")?,
        callee_image: match f.get(8) {
            Some(_) => Some(num(8, "callee")?.try_into().map_err(|_| "callee out of range".to_string())?),
            None => None,
        },
    };
    if row.timed_count > row.count {
        return Err("timed_count exceeds count".into());
    }
    Ok(row)
}

/// `xflow.<pid>.<ordinal>.tsv`
pub fn file_name(pid: u32, ordinal: u32) -> String {
    format!("xflow.{pid}.{ordinal}.tsv")
}

pub fn parse_file_name(name: &str) -> Option<(u32, u32)> {
    let rest = name.strip_prefix("xflow.")?;
    let rest = rest.strip_suffix(".tsv").or_else(|| rest.strip_suffix(".tsv.retry"))?;
    let (pid, ord) = rest.split_once('.')?;
    Some((pid.parse().ok()?, ord.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> LedgerFile {
        LedgerFile {
            ordinal: 2,
            group: 0x55aa_0000_1234,
            hz: 2_995_200_000,
            total_cycles: 123_456_789,
            images: vec![(0, "/usr/bin/app".into()), (1, "/lib/libc.so.6".into())],
            rows: vec![
                LedgerRow {
                    site: 3,
                    caller_image: 0,
                    symbol: "puts".into(),
                    kind: SiteKind::PltLazy,
                    count: 2,
                    timed_count: 2,
                    raw_cycles: 900,
                    attributed_cycles: 450,
                    callee_image: Some(1),
                },
                LedgerRow {
                    site: 9,
                    caller_image: 1,
                    symbol: "malloc".into(),
                    kind: SiteKind::DynGot,
                    count: 1,
                    timed_count: 0,
                    raw_cycles: 0,
                    attributed_cycles: 0,
                    callee_image: None,
                },
            ],
        }
    }

    #[test]
    fn exact_layout() {
        let text = sample().to_text();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "XFLOW\t1");
        assert_eq!(lines[1], "#tid\t2");
        assert_eq!(lines[2], "#group\t000055aa00001234");
        assert_eq!(lines[3], "#hz\t00000000002995200000");
        assert_eq!(lines[5], "#image\t0\t/usr/bin/app");
        assert!(lines[7].starts_with("3\t0\tputs\tplt-lazy\t00000000000000000002\t"));
        assert!(lines[7].ends_with("\t1"));
        assert_eq!(lines[8].split('\t').count(), 8);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let (g, errs) = LedgerFile::parse(&f.to_text()).unwrap();
        assert!(errs.is_empty());
        assert_eq!(f, g);
    }

    #[test]
    fn header_only() {
        let f = LedgerFile { ordinal: 1, ..Default::default() };
        let (g, _) = LedgerFile::parse(&f.to_text()).unwrap();
        assert!(g.rows.is_empty());
        assert_eq!(g.ordinal, 1);
    }

    #[test]
    fn size_independent_of_counts() {
        let mut a = sample();
        let b = sample();
        for r in &mut a.rows {
            r.count = 100_000_000;
            r.raw_cycles = 1 << 60;
        }
        assert_eq!(a.to_text().len(), b.to_text().len());
    }

    #[test]
    fn rejects_versions_and_skips_rows() {
        assert_eq!(LedgerFile::parse("XFLOW\t2\n"), Err(FormatError::Version("2".into())));
        assert_eq!(LedgerFile::parse("NOPE\t1\n"), Err(FormatError::BadMagic));
        assert_eq!(LedgerFile::parse(""), Err(FormatError::BadMagic));
        let text = "XFLOW\t1\n#tid\t0\n1\t0\tf\tplt-lazy\t1\t1\t1\t1\ngarbage\n2\t0\tg\tbogus\t1\t0\t0\t0\n";
        let (f, errs) = LedgerFile::parse(text).unwrap();
        assert_eq!(f.rows.len(), 1);
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), [4, 5]);
        assert!(LedgerFile::parse("XFLOW\t1\n#tid\tx\n").is_err());
    }

    #[test]
    fn names() {
        assert_eq!(file_name(42, 3), "xflow.42.3.tsv");
        assert_eq!(parse_file_name("xflow.42.3.tsv"), Some((42, 3)));
        assert_eq!(parse_file_name("xflow.42.3.tsv.retry"), Some((42, 3)));
        assert_eq!(parse_file_name("other.tsv"), None);
    }

    proptest! {
        #[test]
        fn any_rows_round_trip(rows in proptest::collection::vec(
            (0u32..1000, 0u32..8, "[a-zA-Z_][a-zA-Z0-9_]{0,20}", 0u32..4, any::<u64>(), any::<u64>(), any::<u64>(), proptest::option::of(0u32..8)),
            0..30,
        )) {
            let f = LedgerFile {
                ordinal: 7,
                group: 1,
                hz: 1,
                total_cycles: 1,
                images: vec![(0, "/a".into())],
                rows: rows.into_iter().map(|(site, caller, symbol, k, c, raw, attr, callee)| LedgerRow {
                    site, caller_image: caller, symbol, kind: SiteKind::from_code(k).unwrap(),
                    count: c, timed_count: c / 2, raw_cycles: raw, attributed_cycles: attr, callee_image: callee,
                }).collect(),
            };
            let (g, errs) = LedgerFile::parse(&f.to_text()).unwrap();
            prop_assert!(errs.is_empty());
            prop_assert_eq!(f, g);
        }
    }
}

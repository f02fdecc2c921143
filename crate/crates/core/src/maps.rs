//! Parser for the kernel's per-process memory map listing (`/proc/<pid>/maps`).

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
    pub shared: bool,
}

impl Perms {
    /// `PROT_*` bits for mprotect.
    pub fn prot(self) -> i32 {
        (self.read as i32) | ((self.write as i32) << 1) | ((self.exec as i32) << 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEntry {
    pub start: u64,
    pub end: u64,
    pub perms: Perms,
    pub offset: u64,
    pub inode: u64,
    pub path: Option<String>,
}

impl MapEntry {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("maps line {line}: {reason}")]
pub struct MapsError {
    pub line: usize,
    pub reason: &'static str,
}

pub fn parse_line(line: &str, lineno: usize) -> Result<MapEntry, MapsError> {
    let err = |reason| MapsError { line: lineno, reason };
    let mut fields = line.splitn(6, ' ');
    let range = fields.next().ok_or(err("missing range"))?;
    let perms = fields.next().ok_or(err("missing perms"))?;
    let offset = fields.next().ok_or(err("missing offset"))?;
    let _dev = fields.next().ok_or(err("missing device"))?;
    let inode = fields.next().ok_or(err("missing inode"))?;
    let path = fields.next().map(str::trim).filter(|p| !p.is_empty()).map(str::to_string);

    let (lo, hi) = range.split_once('-').ok_or(err("bad range"))?;
    let start = u64::from_str_radix(lo, 16).map_err(|_| err("bad start"))?;
    let end = u64::from_str_radix(hi, 16).map_err(|_| err("bad end"))?;
    let p = perms.as_bytes();
    if p.len() != 4 {
        return Err(err("bad perms"));
    }
    Ok(MapEntry {
        start,
        end,
        perms: Perms {
            read: p[0] == b'r',
            write: p[1] == b'w',
            exec: p[2] == b'x',
            shared: p[3] == b's',
        },
        offset: u64::from_str_radix(offset, 16).map_err(|_| err("bad offset"))?,
        inode: inode.parse().map_err(|_| err("bad inode"))?,
        path,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryMap {
    pub entries: Vec<MapEntry>,
}

impl MemoryMap {
    pub fn parse(text: &str) -> Result<Self, MapsError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_line(l, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }

    pub fn region_of(&self, addr: u64) -> Option<&MapEntry> {
        // Entries are sorted by address in the kernel listing.
        let i = self.entries.partition_point(|e| e.end <= addr);
        self.entries.get(i).filter(|e| e.contains(addr))
    }

    pub fn is_executable(&self, addr: u64) -> bool {
        self.region_of(addr).is_some_and(|e| e.perms.exec)
    }

    /// File-backed objects in first-appearance order, one per path.
    pub fn images(&self) -> Vec<MappedImage> {
        let mut out: Vec<MappedImage> = Vec::new();
        for e in &self.entries {
            let Some(path) = e.path.as_deref() else { continue };
            if !path.starts_with('/') {
                continue;
            }
            match out.iter_mut().find(|m| m.path == path) {
                Some(m) => {
                    m.start = m.start.min(e.start);
                    m.end = m.end.max(e.end);
                    if e.offset == 0 {
                        m.offset0_start = Some(m.offset0_start.map_or(e.start, |s| s.min(e.start)));
                    }
                }
                None => out.push(MappedImage {
                    path: path.to_string(),
                    start: e.start,
                    end: e.end,
                    offset0_start: (e.offset == 0).then_some(e.start),
                }),
            }
        }
        out
    }
}

/// Address range covered by all mappings of one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedImage {
    pub path: String,
    pub start: u64,
    pub end: u64,
    /// Start of the mapping of file offset 0, where the ELF header lives.
    pub offset0_start: Option<u64>,
}

impl MappedImage {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    /// Load bias given the first PT_LOAD vaddr of the file.
    pub fn bias(&self, first_load_vaddr: u64) -> Option<u64> {
        self.offset0_start.map(|s| s.wrapping_sub(first_load_vaddr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Function,
    Data,
}

/// Classify a resolved `.rela.dyn` cell value: functions live in executable
/// mappings; anything else, including unmapped and null, is data.
pub fn classify_dyn_entry(map: &MemoryMap, cell_value: u64) -> CellClass {
    if cell_value != 0 && map.is_executable(cell_value) {
        CellClass::Function
    } else {
        CellClass::Data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
55d0c0a00000-55d0c0a01000 r--p 00000000 08:01 1311 /usr/bin/demo
55d0c0a01000-55d0c0a02000 r-xp 00001000 08:01 1311 /usr/bin/demo
55d0c0a03000-55d0c0a04000 rw-p 00002000 08:01 1311 /usr/bin/demo
55d0c1000000-55d0c1021000 rw-p 00000000 00:00 0          [heap]
7f0000000000-7f0000028000 r--p 00000000 08:01 99 /usr/lib/x86_64-linux-gnu/libc.so.6
7f0000028000-7f00001bd000 r-xp 00028000 08:01 99 /usr/lib/x86_64-linux-gnu/libc.so.6
7f00001bd000-7f0000215000 r--p 001bd000 08:01 99 /usr/lib/x86_64-linux-gnu/libc.so.6
7f0000400000-7f0000401000 r-xp 00000000 00:00 0
7ffd00000000-7ffd00002000 r-xp 00000000 00:00 0                          [vdso]
7ffd00010000-7ffd00011000 r--p 00000000 08:01 5 /tmp/with space.so
";

    #[test]
    fn parses_sample() {
        let m = MemoryMap::parse(SAMPLE).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(m.entries[3].path.as_deref(), Some("[heap]"));
        assert_eq!(m.entries[7].path, None);
        assert_eq!(m.entries[9].path.as_deref(), Some("/tmp/with space.so"));
        assert!(m.entries[1].perms.exec);
        assert_eq!(m.entries[1].perms.prot(), 5);
        let imgs = m.images();
        let paths: Vec<_> = imgs.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, ["/usr/bin/demo", "/usr/lib/x86_64-linux-gnu/libc.so.6", "/tmp/with space.so"]);
        assert_eq!(imgs[0].start, 0x55d0c0a00000);
        assert_eq!(imgs[0].end, 0x55d0c0a04000);
        assert_eq!(imgs[0].bias(0), Some(0x55d0c0a00000));
    }

    #[test]
    fn classify() {
        let m = MemoryMap::parse(SAMPLE).unwrap();
        assert_eq!(classify_dyn_entry(&m, 0x7f0000030000), CellClass::Function);
        assert_eq!(classify_dyn_entry(&m, 0x7f00001c0000), CellClass::Data);
        assert_eq!(classify_dyn_entry(&m, 0x55d0c1000010), CellClass::Data);
        assert_eq!(classify_dyn_entry(&m, 0), CellClass::Data);
        assert_eq!(classify_dyn_entry(&m, 0x1234), CellClass::Data);
        assert_eq!(classify_dyn_entry(&m, 0x7f0000400010), CellClass::Function);
    }

    #[test]
    fn bad_lines() {
        assert!(MemoryMap::parse("zz-10 r-xp 0 0 0").is_err());
        assert!(MemoryMap::parse("10-20 rx 0 00:00 0").is_err());
        assert_eq!(MemoryMap::parse("10-20").unwrap_err().line, 1);
    }

    #[test]
    fn reads_own_maps() {
        let text = std::fs::read_to_string("/proc/self/maps").unwrap();
        let m = MemoryMap::parse(&text).unwrap();
        let f = reads_own_maps as fn() as usize as u64;
        assert_eq!(classify_dyn_entry(&m, f), CellClass::Function);
        let exe = std::env::current_exe().unwrap();
        assert!(m.images().iter().any(|i| i.path == exe.to_str().unwrap() && i.contains(f)));
    }
}

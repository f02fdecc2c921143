//! Minimal ELF64 little-endian reader: enough of the section table, program
//! headers, dynamic symbols and relocations to plan PLT and GOT interception.

use std::collections::{BTreeMap, HashMap};

pub const ET_EXEC: u16 = 2;
pub const ET_DYN: u16 = 3;
pub const EM_X86_64: u16 = 62;

pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;

pub const SHT_NOBITS: u32 = 8;
pub const SHT_RELA: u32 = 4;

pub const STT_OBJECT: u8 = 1;
pub const STT_FUNC: u8 = 2;
pub const STT_TLS: u8 = 6;
pub const STT_GNU_IFUNC: u8 = 10;

pub const R_X86_64_64: u32 = 1;
pub const R_X86_64_GLOB_DAT: u32 = 6;
pub const R_X86_64_JUMP_SLOT: u32 = 7;
pub const R_X86_64_IRELATIVE: u32 = 37;

pub const DT_NULL: i64 = 0;
pub const DT_BIND_NOW: i64 = 24;
pub const DT_FLAGS: i64 = 30;
pub const DT_FLAGS_1: i64 = 0x6fff_fffb;
pub const DF_BIND_NOW: u64 = 0x8;
pub const DF_1_NOW: u64 = 0x1;

pub const PLT_ENTRY_SIZE: u64 = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ElfError {
    #[error("not an ELF file")]
    BadMagic,
    #[error("unsupported ELF: {0}")]
    Unsupported(&'static str),
    #[error("truncated {what} at offset {offset:#x}")]
    Truncated { what: &'static str, offset: u64 },
    #[error("malformed {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, ElfError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub kind: u32,
    pub flags: u64,
    pub addr: u64,
    pub offset: u64,
    pub size: u64,
    pub link: u32,
    pub entsize: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: u32,
    pub flags: u32,
    pub offset: u64,
    pub vaddr: u64,
    pub filesz: u64,
    pub memsz: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rela {
    pub offset: u64,
    pub sym: u32,
    pub kind: u32,
    pub addend: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynSym {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub kind: u8,
    pub bind: u8,
    pub shndx: u16,
}

impl DynSym {
    pub fn is_defined(&self) -> bool {
        self.shndx != 0
    }

    pub fn is_function(&self) -> bool {
        matches!(self.kind, STT_FUNC | STT_GNU_IFUNC)
    }
}

/// Section roles the interceptor cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionRole {
    Plt,
    PltSec,
    PltGot,
    GotPlt,
    Got,
    RelaPlt,
    RelaDyn,
    Text,
}

impl SectionRole {
    pub const ALL: [SectionRole; 8] = [
        Self::Plt,
        Self::PltSec,
        Self::PltGot,
        Self::GotPlt,
        Self::Got,
        Self::RelaPlt,
        Self::RelaDyn,
        Self::Text,
    ];

    pub fn section_name(self) -> &'static str {
        match self {
            Self::Plt => ".plt",
            Self::PltSec => ".plt.sec",
            Self::PltGot => ".plt.got",
            Self::GotPlt => ".got.plt",
            Self::Got => ".got",
            Self::RelaPlt => ".rela.plt",
            Self::RelaDyn => ".rela.dyn",
            Self::Text => ".text",
        }
    }
}

fn rd<const N: usize>(data: &[u8], off: u64, what: &'static str) -> Result<[u8; N]> {
    let start = usize::try_from(off).map_err(|_| ElfError::Truncated { what, offset: off })?;
    data.get(start..start.wrapping_add(N))
        .and_then(|s| s.try_into().ok())
        .ok_or(ElfError::Truncated { what, offset: off })
}

fn u16_at(d: &[u8], off: u64, what: &'static str) -> Result<u16> {
    rd::<2>(d, off, what).map(u16::from_le_bytes)
}

fn u32_at(d: &[u8], off: u64, what: &'static str) -> Result<u32> {
    rd::<4>(d, off, what).map(u32::from_le_bytes)
}

fn u64_at(d: &[u8], off: u64, what: &'static str) -> Result<u64> {
    rd::<8>(d, off, what).map(u64::from_le_bytes)
}

fn cstr_at(table: &[u8], off: u32) -> Result<String> {
    let rest = table
        .get(off as usize..)
        .ok_or_else(|| ElfError::Malformed(format!("string offset {off:#x}")))?;
    let end = rest.iter().position(|&b| b == 0).unwrap_or(rest.len());
    Ok(String::from_utf8_lossy(&rest[..end]).into_owned())
}

pub struct Elf<'a> {
    data: &'a [u8],
    pub elf_type: u16,
    pub machine: u16,
    pub entry: u64,
    pub sections: Vec<Section>,
    pub segments: Vec<Segment>,
}

impl<'a> Elf<'a> {
    pub fn parse(data: &'a [u8]) -> Result<Self> {
        if data.len() < 64 || &data[..4] != b"\x7fELF" {
            return Err(ElfError::BadMagic);
        }
        if data[4] != 2 {
            return Err(ElfError::Unsupported("not ELF64"));
        }
        if data[5] != 1 {
            return Err(ElfError::Unsupported("not little-endian"));
        }
        let elf_type = u16_at(data, 16, "e_type")?;
        let machine = u16_at(data, 18, "e_machine")?;
        let entry = u64_at(data, 24, "e_entry")?;
        let phoff = u64_at(data, 32, "e_phoff")?;
        let shoff = u64_at(data, 40, "e_shoff")?;
        let phentsize = u16_at(data, 54, "e_phentsize")? as u64;
        let phnum = u16_at(data, 56, "e_phnum")? as u64;
        let shentsize = u16_at(data, 58, "e_shentsize")? as u64;
        let shnum = u16_at(data, 60, "e_shnum")? as u64;
        let shstrndx = u16_at(data, 62, "e_shstrndx")? as u64;

        let mut segments = Vec::with_capacity(phnum as usize);
        if phnum > 0 && phentsize < 56 {
            return Err(ElfError::Malformed("program header size".into()));
        }
        for i in 0..phnum {
            let b = phoff + i * phentsize;
            segments.push(Segment {
                kind: u32_at(data, b, "p_type")?,
                flags: u32_at(data, b + 4, "p_flags")?,
                offset: u64_at(data, b + 8, "p_offset")?,
                vaddr: u64_at(data, b + 16, "p_vaddr")?,
                filesz: u64_at(data, b + 32, "p_filesz")?,
                memsz: u64_at(data, b + 40, "p_memsz")?,
            });
        }

        let mut raw = Vec::with_capacity(shnum as usize);
        if shnum > 0 && shentsize < 64 {
            return Err(ElfError::Malformed("section header size".into()));
        }
        for i in 0..shnum {
            let b = shoff + i * shentsize;
            raw.push((
                u32_at(data, b, "sh_name")?,
                Section {
                    name: String::new(),
                    kind: u32_at(data, b + 4, "sh_type")?,
                    flags: u64_at(data, b + 8, "sh_flags")?,
                    addr: u64_at(data, b + 16, "sh_addr")?,
                    offset: u64_at(data, b + 24, "sh_offset")?,
                    size: u64_at(data, b + 32, "sh_size")?,
                    link: u32_at(data, b + 40, "sh_link")?,
                    entsize: u64_at(data, b + 56, "sh_entsize")?,
                },
            ));
        }
        let mut sections = Vec::with_capacity(raw.len());
        if !raw.is_empty() {
            let names = raw
                .get(shstrndx as usize)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| ElfError::Malformed("e_shstrndx".into()))?;
            let table = bytes_of(data, &names)?;
            for (name_off, mut s) in raw {
                s.name = cstr_at(table, name_off)?;
                sections.push(s);
            }
        }

        Ok(Self { data, elf_type, machine, entry, sections, segments })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn section_data(&self, s: &Section) -> Result<&'a [u8]> {
        bytes_of(self.data, s)
    }

    /// Link-time (address, size) of every present section role.
    pub fn section_map(&self) -> BTreeMap<SectionRole, (u64, u64)> {
        SectionRole::ALL
            .into_iter()
            .filter_map(|r| self.section(r.section_name()).map(|s| (r, (s.addr, s.size))))
            .collect()
    }

    /// Virtual address of the first PT_LOAD segment, rounded down to a page.
    pub fn first_load_vaddr(&self) -> Option<u64> {
        self.segments
            .iter()
            .find(|p| p.kind == PT_LOAD)
            .map(|p| p.vaddr & !0xfff)
    }

    pub fn dynsyms(&self) -> Result<Vec<DynSym>> {
        let Some(symtab) = self.section(".dynsym") else {
            return Ok(Vec::new());
        };
        let strtab = self
            .sections
            .get(symtab.link as usize)
            .ok_or_else(|| ElfError::Malformed(".dynsym link".into()))?;
        let strs = self.section_data(strtab)?;
        let data = self.section_data(symtab)?;
        let ent = if symtab.entsize == 0 { 24 } else { symtab.entsize };
        let mut out = Vec::with_capacity(data.len() / ent as usize);
        for i in 0..(data.len() as u64 / ent) {
            let b = i * ent;
            let info = data[(b + 4) as usize];
            out.push(DynSym {
                name: cstr_at(strs, u32_at(data, b, "st_name")?)?,
                kind: info & 0xf,
                bind: info >> 4,
                shndx: u16_at(data, b + 6, "st_shndx")?,
                value: u64_at(data, b + 8, "st_value")?,
                size: u64_at(data, b + 16, "st_size")?,
            });
        }
        Ok(out)
    }

    pub fn relocations(&self, section: &str) -> Result<Vec<Rela>> {
        let Some(s) = self.section(section) else {
            return Ok(Vec::new());
        };
        if s.kind != SHT_RELA {
            return Err(ElfError::Malformed(format!("{section} is not SHT_RELA")));
        }
        let data = self.section_data(s)?;
        let ent = if s.entsize == 0 { 24 } else { s.entsize };
        if !(data.len() as u64).is_multiple_of(ent) {
            return Err(ElfError::Malformed(format!("{section} size")));
        }
        let mut out = Vec::with_capacity(data.len() / ent as usize);
        for i in 0..(data.len() as u64 / ent) {
            let b = i * ent;
            let info = u64_at(data, b + 8, "r_info")?;
            out.push(Rela {
                offset: u64_at(data, b, "r_offset")?,
                sym: (info >> 32) as u32,
                kind: info as u32,
                addend: u64_at(data, b + 16, "r_addend")? as i64,
            });
        }
        Ok(out)
    }

    pub fn dynamic(&self) -> Result<Vec<(i64, u64)>> {
        let Some(s) = self.section(".dynamic") else {
            return Ok(Vec::new());
        };
        let data = self.section_data(s)?;
        let mut out = Vec::new();
        for b in (0..data.len() as u64 / 16).map(|i| i * 16) {
            let tag = u64_at(data, b, "d_tag")? as i64;
            if tag == DT_NULL {
                break;
            }
            out.push((tag, u64_at(data, b + 8, "d_val")?));
        }
        Ok(out)
    }

    /// Whether the image itself requests immediate binding.
    pub fn binds_now(&self) -> Result<bool> {
        Ok(self.dynamic()?.iter().any(|&(tag, val)| match tag {
            DT_BIND_NOW => true,
            DT_FLAGS => val & DF_BIND_NOW != 0,
            DT_FLAGS_1 => val & DF_1_NOW != 0,
            _ => false,
        }))
    }
}

fn bytes_of<'a>(data: &'a [u8], s: &Section) -> Result<&'a [u8]> {
    if s.kind == SHT_NOBITS {
        return Ok(&[]);
    }
    let end = s.offset.checked_add(s.size).ok_or_else(|| ElfError::Malformed(s.name.clone()))?;
    data.get(s.offset as usize..end as usize)
        .ok_or(ElfError::Truncated { what: "section contents", offset: s.offset })
}

/// Decode the indirect jump of one PLT stub (`[endbr64] [bnd] jmp *rel32(%rip)`)
/// and return the GOT cell it reads, in the same address space as `slot_addr`.
pub fn decode_plt_jump(bytes: &[u8], slot_addr: u64) -> Option<u64> {
    let mut i = 0usize;
    if bytes.starts_with(&[0xf3, 0x0f, 0x1e, 0xfa]) {
        i += 4;
    }
    if bytes.get(i) == Some(&0xf2) {
        i += 1;
    }
    if bytes.get(i..i + 2)? != [0xff, 0x25] {
        return None;
    }
    let rel = i32::from_le_bytes(bytes.get(i + 2..i + 6)?.try_into().ok()?);
    Some(slot_addr.wrapping_add((i + 6) as u64).wrapping_add(rel as i64 as u64))
}

/// A `.rela.plt` site, all addresses link-time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PltSitePlan {
    pub symbol: String,
    pub reloc_index: u32,
    pub got_cell: u64,
    /// The stub whose first bytes get replaced; `None` when no stub reads
    /// this cell (the site is then left alone).
    pub stub: Option<u64>,
}

/// A `.rela.dyn` GLOB_DAT cell that may hold a function address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GotSitePlan {
    pub symbol: String,
    pub got_cell: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SitePlan {
    /// Start of `.plt`, where lazy resolution enters.
    pub plt0: Option<u64>,
    /// Range holding the lazy stubs an unresolved GOT cell points into.
    pub plt_range: Option<(u64, u64)>,
    pub plt: Vec<PltSitePlan>,
    pub got: Vec<GotSitePlan>,
    pub binds_now: bool,
    pub warnings: Vec<String>,
}

/// Work out which PLT stubs and GOT cells of `elf` are interceptable.
/// `skip` filters symbols that must never be intercepted.
pub fn plan_sites(elf: &Elf<'_>, skip: impl Fn(&str) -> bool) -> Result<SitePlan> {
    let syms = elf.dynsyms()?;
    let sym = |idx: u32| -> Result<&DynSym> {
        syms.get(idx as usize)
            .ok_or_else(|| ElfError::Malformed(format!("symbol index {idx}")))
    };
    let mut plan = SitePlan { binds_now: elf.binds_now()?, ..Default::default() };

    let plt = elf.section(".plt");
    plan.plt0 = plt.map(|s| s.addr);
    plan.plt_range = plt.map(|s| (s.addr, s.addr + s.size));

    // Map each GOT cell read by a call stub to the stub's address.
    let mut stub_of_cell: HashMap<u64, u64> = HashMap::new();
    let (stubs, first) = match (elf.section(".plt.sec"), plt) {
        (Some(sec), _) => (Some(sec), 0),
        (None, Some(p)) => (Some(p), PLT_ENTRY_SIZE),
        (None, None) => (None, 0),
    };
    if let Some(s) = stubs {
        let bytes = elf.section_data(s)?;
        let mut off = first;
        while off + PLT_ENTRY_SIZE <= s.size {
            let slot = &bytes[off as usize..(off + PLT_ENTRY_SIZE) as usize];
            if let Some(cell) = decode_plt_jump(slot, s.addr + off) {
                stub_of_cell.entry(cell).or_insert(s.addr + off);
            }
            off += PLT_ENTRY_SIZE;
        }
    }

    for (index, r) in elf.relocations(".rela.plt")?.iter().enumerate() {
        if r.kind != R_X86_64_JUMP_SLOT {
            continue;
        }
        let name = &sym(r.sym)?.name;
        if skip(name) {
            continue;
        }
        let stub = stub_of_cell.get(&r.offset).copied();
        if stub.is_none() {
            plan.warnings.push(format!("no PLT stub reads the cell of {name}"));
        }
        plan.plt.push(PltSitePlan {
            symbol: name.clone(),
            reloc_index: index as u32,
            got_cell: r.offset,
            stub,
        });
    }

    let got = elf.section(".got");
    for r in elf.relocations(".rela.dyn")? {
        if r.kind != R_X86_64_GLOB_DAT || r.sym == 0 {
            continue;
        }
        let in_got = got.is_some_and(|g| r.offset >= g.addr && r.offset + 8 <= g.addr + g.size);
        if !in_got {
            continue;
        }
        let s = sym(r.sym)?;
        if matches!(s.kind, STT_OBJECT | STT_TLS) || skip(&s.name) {
            continue;
        }
        plan.got.push(GotSitePlan { symbol: s.name.clone(), got_cell: r.offset });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_ibt_and_plain_stubs() {
        // endbr64; bnd jmp *0x2fe2(%rip); nop
        let ibt = [0xf3, 0x0f, 0x1e, 0xfa, 0xf2, 0xff, 0x25, 0xe2, 0x2f, 0, 0, 0x0f, 0x1f, 0x44, 0, 0];
        assert_eq!(decode_plt_jump(&ibt, 0x1060), Some(0x1060 + 11 + 0x2fe2));
        // jmp *0x2fe2(%rip); push $0; jmp plt0
        let plain = [0xff, 0x25, 0xe2, 0x2f, 0, 0, 0x68, 0, 0, 0, 0, 0xe9, 0xe0, 0xff, 0xff, 0xff];
        assert_eq!(decode_plt_jump(&plain, 0x1020), Some(0x1020 + 6 + 0x2fe2));
        // lazy IBT .plt entry: endbr64; push; bnd jmp rel32
        let lazy = [0xf3, 0x0f, 0x1e, 0xfa, 0x68, 0, 0, 0, 0, 0xf2, 0xe9, 0, 0, 0, 0, 0x90];
        assert_eq!(decode_plt_jump(&lazy, 0), None);
        // negative displacement
        let back = [0xff, 0x25, 0xfa, 0xff, 0xff, 0xff];
        assert_eq!(decode_plt_jump(&back, 0x1000), Some(0x1000));
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(Elf::parse(b"hello").err(), Some(ElfError::BadMagic));
        let mut hdr = vec![0u8; 64];
        hdr[..4].copy_from_slice(b"\x7fELF");
        hdr[4] = 1;
        assert!(matches!(Elf::parse(&hdr), Err(ElfError::Unsupported(_))));
        hdr[4] = 2;
        hdr[5] = 1;
        // One section header pointing past the end.
        hdr[40..48].copy_from_slice(&4096u64.to_le_bytes());
        hdr[58..60].copy_from_slice(&64u16.to_le_bytes());
        hdr[60..62].copy_from_slice(&1u16.to_le_bytes());
        assert!(matches!(Elf::parse(&hdr), Err(ElfError::Truncated { .. })));
    }

    #[test]
    fn parses_own_test_binary() {
        let exe = std::env::current_exe().unwrap();
        let data = std::fs::read(exe).unwrap();
        let elf = Elf::parse(&data).unwrap();
        assert_eq!(elf.machine, EM_X86_64);
        assert!(elf.section(".text").is_some());
        assert!(elf.first_load_vaddr().is_some());
        let plan = plan_sites(&elf, crate::site::never_intercept).unwrap();
        for p in &plan.plt {
            assert!(!crate::site::never_intercept(&p.symbol));
        }
    }
}

//! Image discovery, site planning and hook installation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::ptr;

use xflow_core::codegen::decode_plt_patch;
use xflow_core::elf::{plan_sites, Elf, SitePlan};
use xflow_core::maps::{classify_dyn_entry, CellClass, MemoryMap};
use xflow_core::site::never_intercept;
use xflow_core::{ApiSite, ImageId, LoadedImage, SiteId, SiteKind};

use crate::patch::{self, PatchRecord};
use crate::table::{ShadowTable, SiteSpec};

/// Everything the install lock protects.
#[derive(Default)]
pub struct Registry {
    pub images: Vec<LoadedImage>,
    /// Indexed by site id; always as long as the table's used count.
    pub sites: Vec<ApiSite>,
    pub patches: Vec<PatchRecord>,
    /// (real address, caller image) of each dlsym site.
    pub dlsym_sites: HashMap<(u64, ImageId), SiteId>,
    pub ldso_exports: HashSet<String>,
    pub map: MemoryMap,
    pub warnings: Vec<String>,
}

/// Process facts the scanner needs.
pub struct ScanEnv<'a> {
    pub table: &'a ShadowTable,
    pub deny: &'a [String],
    /// LD_BIND_NOW is set for the process.
    pub bind_now: bool,
    /// Any address inside the agent image.
    pub agent_addr: u64,
    /// Any address inside the dynamic linker image.
    pub linker_addr: u64,
    /// Any address inside the main executable.
    pub exe_addr: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScanStats {
    pub images: usize,
    pub sites: usize,
}

pub fn read_maps() -> io::Result<MemoryMap> {
    let text = std::fs::read_to_string("/proc/self/maps")?;
    MemoryMap::parse(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

impl Registry {
    pub fn image_of(&self, addr: u64) -> Option<&LoadedImage> {
        self.images.iter().rev().find(|i| i.contains(addr))
    }

    pub fn warn(&mut self, msg: String) {
        self.warnings.push(msg);
    }

    /// Discover images mapped since the last scan, then plan and hook them.
    pub fn scan(&mut self, env: &ScanEnv<'_>) -> io::Result<ScanStats> {
        self.map = read_maps()?;
        let mut mapped = self.map.images();
        // The main executable is always image 0.
        if self.images.is_empty() {
            if let Some(i) = mapped.iter().position(|m| m.contains(env.exe_addr)) {
                let exe = mapped.remove(i);
                mapped.insert(0, exe);
            }
        }

        // Planning skips whatever the dynamic linker exports, so read its
        // symbols before any other image.
        if self.ldso_exports.is_empty() && env.linker_addr != 0 {
            if let Some(m) = mapped.iter().find(|m| m.contains(env.linker_addr)) {
                if let Ok(data) = std::fs::read(&m.path) {
                    if let Ok(syms) = Elf::parse(&data).and_then(|e| e.dynsyms()) {
                        self.ldso_exports.extend(syms.into_iter().filter(|s| s.is_defined()).map(|s| s.name));
                    }
                }
            }
        }

        let mut stats = ScanStats::default();
        for m in mapped {
            if self.images.iter().any(|i| i.path == m.path && i.start == m.start) {
                continue;
            }
            let has_code = self
                .map
                .entries
                .iter()
                .any(|e| e.perms.exec && e.path.as_deref() == Some(m.path.as_str()) && m.contains(e.start));
            if !has_code {
                continue;
            }
            let id = self.images.len() as ImageId;
            let mut img = LoadedImage {
                id,
                path: m.path.clone(),
                base: 0,
                sections: BTreeMap::new(),
                start: m.start,
                end: m.end,
                is_agent: m.contains(env.agent_addr),
                is_linker: env.linker_addr != 0 && m.contains(env.linker_addr),
            };
            let skip = img.is_agent || img.is_linker || env.deny.iter().any(|d| img.path.contains(d.as_str()));
            if img.is_agent {
                self.images.push(img);
                continue;
            }
            let data = match std::fs::read(&m.path) {
                Ok(d) => d,
                Err(e) => {
                    self.warn(format!("{}: cannot read image: {e}", m.path));
                    continue;
                }
            };
            let elf = match Elf::parse(&data) {
                Ok(elf) => elf,
                Err(e) => {
                    self.warn(format!("{}: not instrumented: {e}", m.path));
                    continue;
                }
            };
            let Some(bias) = elf.first_load_vaddr().and_then(|v| m.bias(v)) else {
                self.warn(format!("{}: cannot determine load address", m.path));
                continue;
            };
            img.base = bias;
            img.sections = elf.section_map().into_iter().map(|(r, (a, n))| (r, (a.wrapping_add(bias), n))).collect();
            let misplaced = img.misplaced_sections();
            if !misplaced.is_empty() {
                self.warn(format!("{}: sections outside the mapping: {misplaced:?}", img.path));
            }
            self.images.push(img);
            if skip {
                continue;
            }
            stats.images += 1;
            let exports = &self.ldso_exports;
            match plan_sites(&elf, |s| never_intercept(s) || exports.contains(s)) {
                Ok(plan) => stats.sites += self.install(env, id, plan),
                Err(e) => {
                    let path = self.images[id as usize].path.clone();
                    self.warn(format!("{path}: relocations skipped: {e}"));
                }
            }
        }
        Ok(stats)
    }

    fn install(&mut self, env: &ScanEnv<'_>, id: ImageId, plan: SitePlan) -> usize {
        let img = self.images[id as usize].clone();
        let bias = img.base;
        for w in plan.warnings {
            self.warn(format!("{}: {w}", img.path));
        }
        let kind = if env.bind_now || plan.binds_now { SiteKind::PltEager } else { SiteKind::PltLazy };
        let lazy = plan.plt_range.map_or((0, 0), |(a, b)| (a.wrapping_add(bias), b.wrapping_add(bias)));
        let plt0 = plan.plt0.map(|a| a.wrapping_add(bias));

        let mut specs = Vec::new();
        let mut meta = Vec::new();
        for p in &plan.plt {
            let Some(stub) = p.stub.map(|s| s.wrapping_add(bias)) else { continue };
            let cell = p.got_cell.wrapping_add(bias);
            // SAFETY: the stub is inside a mapped executable section.
            let head = unsafe { std::slice::from_raw_parts(stub as *const u8, 16) };
            if decode_plt_patch(head).is_some_and(|t| env.table.contains(t)) {
                continue;
            }
            // SAFETY: GOT cells are aligned and mapped.
            let cur = unsafe { ptr::read_volatile(cell as *const u64) };
            let resolved = if cur != 0 && !(lazy.0..lazy.1).contains(&cur) && !env.table.contains(cur) { cur } else { 0 };
            specs.push(SiteSpec {
                caller: id,
                kind,
                resolved,
                got_cell: cell,
                lazy,
                resolver: plt0.map(|p0| (p.reloc_index, p0)),
            });
            meta.push((p.symbol.clone(), kind, Some(stub), cell));
        }
        for g in &plan.got {
            let cell = g.got_cell.wrapping_add(bias);
            // SAFETY: as above.
            let cur = unsafe { ptr::read_volatile(cell as *const u64) };
            if env.table.contains(cur) || classify_dyn_entry(&self.map, cur) != CellClass::Function {
                continue;
            }
            if self.image_of(cur).is_some_and(|i| i.is_agent || i.is_linker) {
                continue;
            }
            specs.push(SiteSpec { caller: id, kind: SiteKind::DynGot, resolved: cur, got_cell: 0, lazy: (0, 0), resolver: None });
            meta.push((g.symbol.clone(), SiteKind::DynGot, None, cell));
        }
        if specs.is_empty() {
            return 0;
        }
        let first = match env.table.allocate(&specs) {
            Ok(f) => f,
            Err(e) => {
                self.warn(format!("{}: not instrumented: {e}", img.path));
                return 0;
            }
        };
        let mut plt_writes = Vec::new();
        let mut got_writes = Vec::new();
        for (i, (symbol, kind, stub, cell)) in meta.into_iter().enumerate() {
            let site = first + i as SiteId;
            let entry = env.table.entry_addr(site);
            match stub {
                Some(s) => plt_writes.push((site, s, entry)),
                None => got_writes.push((site, cell, entry)),
            }
            self.sites.push(ApiSite {
                id: site,
                caller_image: id,
                symbol,
                kind,
                plt_entry_addr: stub,
                got_cell_addr: Some(cell),
            });
        }
        for (records, err) in [patch::patch_plt(&self.map, &plt_writes), patch::patch_got(&self.map, &got_writes)] {
            if let Some(e) = err {
                self.warn(format!("{}: patch failed, calls not intercepted: {e}", img.path));
            }
            self.patches.extend(records);
        }
        specs.len()
    }

    /// Tab-separated site list: image, symbol, kind, PLT stub, GOT cell.
    pub fn site_dump(&self) -> String {
        let mut out = String::new();
        for s in &self.sites {
            let path = self.images.get(s.caller_image as usize).map_or("?", |i| i.path.as_str());
            out.push_str(&format!(
                "{path}\t{}\t{}\t{:#x}\t{:#x}\n",
                s.symbol,
                s.kind,
                s.plt_entry_addr.unwrap_or(0),
                s.got_cell_addr.unwrap_or(0)
            ));
        }
        out
    }

    /// Sites a fresh plan of the already-known images would produce, keyed
    /// the same way as installed sites. Used to check that planning is
    /// idempotent.
    pub fn replan_keys(&self, env: &ScanEnv<'_>) -> io::Result<Vec<(ImageId, String, u64)>> {
        let mut keys = Vec::new();
        for img in &self.images {
            if img.is_agent || img.is_linker || env.deny.iter().any(|d| img.path.contains(d.as_str())) {
                continue;
            }
            let data = std::fs::read(&img.path)?;
            let elf = Elf::parse(&data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let plan = plan_sites(&elf, |s| never_intercept(s) || self.ldso_exports.contains(s))
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            for p in plan.plt.iter().filter(|p| p.stub.is_some()) {
                keys.push((img.id, p.symbol.clone(), p.got_cell.wrapping_add(img.base)));
            }
            for g in &plan.got {
                let cell = g.got_cell.wrapping_add(img.base);
                // Installed cells hold entry addresses; those count as functions.
                let cur = unsafe { ptr::read_volatile(cell as *const u64) };
                let func = env.table.contains(cur)
                    || (classify_dyn_entry(&self.map, cur) == CellClass::Function
                        && !self.image_of(cur).is_some_and(|i| i.is_agent || i.is_linker));
                if func {
                    keys.push((img.id, g.symbol.clone(), cell));
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn installed_keys(&self) -> Vec<(ImageId, String, u64)> {
        let mut keys: Vec<_> = self
            .sites
            .iter()
            .filter(|s| s.kind != SiteKind::Dlsym)
            .filter_map(|s| Some((s.caller_image, s.symbol.clone(), s.got_cell_addr?)))
            .collect();
        keys.sort();
        keys
    }
}

//! Interceptable call sites and the rules for which symbols are never touched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::elf::SectionRole;

/// Dense per-run handle of a loaded image. The main executable is always 0.
pub type ImageId = u32;

/// Dense per-run handle of an [`ApiSite`]; also the ledger slot index.
pub type SiteId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    PltLazy,
    PltEager,
    DynGot,
    Dlsym,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [Self::PltLazy, Self::PltEager, Self::DynGot, Self::Dlsym];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PltLazy => "plt-lazy",
            Self::PltEager => "plt-eager",
            Self::DynGot => "dyn-got",
            Self::Dlsym => "dlsym",
        }
    }

    /// Stored in the shadow table's data record so the runtime can tell
    /// whether an unresolved cell may fall back to the lazy resolver.
    pub fn code(self) -> u32 {
        match self {
            Self::PltLazy => 0,
            Self::PltEager => 1,
            Self::DynGot => 2,
            Self::Dlsym => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn has_resolver(self) -> bool {
        matches!(self, Self::PltLazy | Self::PltEager)
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown site kind {0:?}")]
pub struct UnknownKind(pub String);

impl FromStr for SiteKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

/// One interceptable linkage point owned by a caller image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ApiSite {
    pub id: SiteId,
    pub caller_image: ImageId,
    pub symbol: String,
    pub kind: SiteKind,
    /// Runtime address of the PLT slot that was patched, for PLT kinds.
    pub plt_entry_addr: Option<u64>,
    /// Runtime address of the GOT cell backing the site (PLT and dyn-GOT kinds).
    pub got_cell_addr: Option<u64>,
}

/// One mapped executable or shared object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedImage {
    pub id: ImageId,
    pub path: String,
    /// Load bias: runtime address minus link-time address.
    pub base: u64,
    /// Runtime (address, size) of each present section role.
    pub sections: BTreeMap<SectionRole, (u64, u64)>,
    /// Lowest and one-past-highest mapped address.
    pub start: u64,
    pub end: u64,
    pub is_agent: bool,
    pub is_linker: bool,
}

impl LoadedImage {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn section(&self, role: SectionRole) -> Option<(u64, u64)> {
        self.sections.get(&role).copied()
    }

    /// Sections that fall outside the mapped range, which would indicate a
    /// wrong load bias.
    pub fn misplaced_sections(&self) -> Vec<SectionRole> {
        self.sections
            .iter()
            .filter(|(_, &(a, n))| !(self.contains(a) && (n == 0 || a + n <= self.end)))
            .map(|(r, _)| *r)
            .collect()
    }
}

// Functions that never return to their caller. Intercepting them leaves a
// shadow frame behind and, for the unwinder entry points, hands the unwinder a
// return address that has no unwind info.
const NORETURN: &[&str] = &[
    "exit",
    "_exit",
    "_Exit",
    "abort",
    "quick_exit",
    "thrd_exit",
    "pthread_exit",
    "longjmp",
    "_longjmp",
    "siglongjmp",
    "__longjmp_chk",
    "setcontext",
    "__stack_chk_fail",
    "__assert_fail",
    "__assert_perror_fail",
    "__fortify_fail",
    "__chk_fail",
    "__libc_fatal",
    "err",
    "errx",
    "verr",
    "verrx",
    "__libc_start_main",
];

// Functions that may return more than once, or whose callee inspects the
// caller's frame.
const RETURNS_TWICE: &[&str] = &[
    "setjmp",
    "_setjmp",
    "sigsetjmp",
    "__sigsetjmp",
    "vfork",
    "getcontext",
    "swapcontext",
    "savectx",
    "__tls_get_addr",
];

const UNWINDER: &[&str] = &[
    "__cxa_throw",
    "__cxa_rethrow",
    "__cxa_bad_cast",
    "__cxa_bad_typeid",
    "__cxa_pure_virtual",
    "__cxa_deleted_virtual",
    "__cxa_call_unexpected",
    "__cxa_throw_bad_array_new_length",
    "_ZSt9terminatev",
    "_ZSt17rethrow_exceptionNSt15__exception_ptr13exception_ptrE",
];

/// True for symbols the interceptor must leave alone regardless of image.
pub fn never_intercept(symbol: &str) -> bool {
    if symbol.is_empty() {
        return true;
    }
    if symbol.starts_with("_Unwind_") {
        return true;
    }
    // std::__throw_length_error and friends
    if symbol.starts_with("_ZSt") && symbol.contains("__throw_") {
        return true;
    }
    NORETURN.contains(&symbol) || RETURNS_TWICE.contains(&symbol) || UNWINDER.contains(&symbol)
}

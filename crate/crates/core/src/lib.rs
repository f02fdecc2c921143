//! Core of the xflow cross-flow profiler: ELF inspection and site planning,
//! shadow-table code generation, the shadow-stack state machine, folding,
//! the ledger file format and the offline analyzer.
//!
//! Everything here is ordinary safe Rust with no process-global state, so the
//! in-process agent, the CLI and the tests share one implementation.

pub mod analyzer;
pub mod codegen;
pub mod config;
pub mod elf;
pub mod format;
pub mod ledger;
pub mod maps;
pub mod shadow;
pub mod site;
pub mod timing;

pub use analyzer::{Aggregate, AnalyzerConfig, ApiView, ComponentView, ImbalanceReport, Report};
pub use format::{LedgerFile, LedgerRow};
pub use ledger::{SiteSlot, ThreadLedger, ThreadMeta};
pub use shadow::{ShadowFrame, ShadowStack};
pub use site::{ApiSite, ImageId, LoadedImage, SiteId, SiteKind};

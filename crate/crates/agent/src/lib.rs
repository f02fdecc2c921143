//! The preload agent: plans and hooks every loaded image, keeps per-thread
//! ledgers and writes them out at thread and process exit.

#![cfg_attr(test, allow(dead_code))]

mod context;
mod hot;
mod images;
mod lock;
mod patch;
mod persist;
mod probe;
mod real;
mod runtime;
mod signal;
mod table;
#[cfg(not(test))]
mod wrappers;

#[cfg(not(test))]
extern "C" fn agent_init() {
    runtime::init();
}

#[cfg(not(test))]
extern "C" fn agent_fini() {
    runtime::finish();
}

#[cfg(not(test))]
#[used]
#[unsafe(link_section = ".init_array")]
static INIT: extern "C" fn() = agent_init;

#[cfg(not(test))]
#[used]
#[unsafe(link_section = ".fini_array")]
static FINI: extern "C" fn() = agent_fini;

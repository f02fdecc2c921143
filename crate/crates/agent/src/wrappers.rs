//! The functions the agent exports in place of the C library's: dlopen and
//! dlsym for new images and runtime-resolved functions, pthread_create for
//! thread attachment.
//!
//! The C library looks at the return address of dlopen and dlsym to decide
//! which object is calling. The wrappers hand that decision back to the real
//! caller by returning through a `ret` byte inside the caller's own code.

use std::arch::naked_asm;
use std::ffi::{c_char, c_int, c_void, CStr};
use std::sync::atomic::Ordering;

use xflow_core::maps::{classify_dyn_entry, CellClass};
use xflow_core::SiteKind;

use crate::context::{self, Guard};
use crate::hot::TABLE;
use crate::images::read_maps;
use crate::real::{self, StartFn};
use crate::runtime::{self, Runtime};
use crate::table::SiteSpec;

/// Call `f(a0, a1)` so that `f` sees `gadget` as its return address. The
/// gadget must be a `ret` instruction; it returns into this helper.
#[unsafe(naked)]
unsafe extern "C" fn call_via(a0: usize, a1: usize, gadget: usize, f: usize) -> usize {
    naked_asm!(
        "push rbp",
        "mov rbp, rsp",
        "and rsp, -16",
        "sub rsp, 8",
        "lea rax, [rip + 2f]",
        "push rax",
        "push rdx",
        "jmp rcx",
        "2:",
        "mov rsp, rbp",
        "pop rbp",
        "ret",
    )
}

/// A `ret` byte in the same code page as `addr`.
unsafe fn ret_near(addr: u64) -> Option<u64> {
    let page = addr & !0xfff;
    let at = |a: u64| std::ptr::read_volatile(a as *const u8) == 0xc3;
    (addr..page + 0x1000).find(|&a| at(a)).or_else(|| (page..addr).rev().find(|&a| at(a)))
}

/// Return address of the code that called the wrapper. Calls routed through
/// a timed entry arrive from its post segment; the real one is in the top
/// shadow frame.
fn real_caller(ret: u64) -> u64 {
    let t = TABLE.load(Ordering::Acquire);
    // SAFETY: the table is never freed once published.
    if t.is_null() || !unsafe { &*t }.contains_code(ret) {
        return ret;
    }
    let ctx = context::current();
    if ctx.is_null() {
        return ret;
    }
    // SAFETY: the context belongs to this thread.
    unsafe { &*ctx }.frames().last().map_or(ret, |f| f.real_return_addr)
}

unsafe fn forward(f: usize, a0: usize, a1: usize, caller: u64) -> usize {
    if caller != 0 {
        if let Some(g) = ret_near(caller) {
            return call_via(a0, a1, g as usize, f);
        }
    }
    let f: unsafe extern "C" fn(usize, usize) -> usize = std::mem::transmute(f);
    f(a0, a1)
}

#[unsafe(no_mangle)]
#[unsafe(naked)]
pub unsafe extern "C" fn dlopen(path: *const c_char, flags: c_int) -> *mut c_void {
    naked_asm!("mov rdx, [rsp]", "jmp {imp}", imp = sym dlopen_impl)
}

unsafe extern "C" fn dlopen_impl(path: *const c_char, flags: c_int, ret: u64) -> *mut c_void {
    let caller = real_caller(ret);
    let h = forward(real::dlopen() as usize, path as usize, flags as usize, caller) as *mut c_void;
    if !h.is_null() {
        if let Some(rt) = runtime::get() {
            rt.rescan();
        }
    }
    h
}

#[unsafe(no_mangle)]
#[unsafe(naked)]
pub unsafe extern "C" fn dlsym(handle: *mut c_void, name: *const c_char) -> *mut c_void {
    naked_asm!("mov rdx, [rsp]", "jmp {imp}", imp = sym dlsym_impl)
}

unsafe extern "C" fn dlsym_impl(handle: *mut c_void, name: *const c_char, ret: u64) -> *mut c_void {
    let caller = real_caller(ret);
    let addr = forward(real::dlsym() as usize, handle as usize, name as usize, caller) as *mut c_void;
    if addr.is_null() || name.is_null() {
        return addr;
    }
    let Some(rt) = runtime::get() else { return addr };
    let name = CStr::from_ptr(name).to_string_lossy();
    match wrap_dlsym(rt, addr as u64, caller, &name) {
        Some(entry) => entry as *mut c_void,
        None => addr,
    }
}

/// The entry a dlsym caller should get instead of `addr`, if any.
fn wrap_dlsym(rt: &Runtime, addr: u64, caller: u64, name: &str) -> Option<u64> {
    let _g = Guard::new();
    if rt.table.contains(addr) {
        return None;
    }
    let mut reg = rt.registry.lock();
    let denied = |p: &str| rt.cfg.deny.iter().any(|d| p.contains(d.as_str()));
    let img = reg.image_of(caller)?;
    if img.is_agent || img.is_linker || denied(&img.path) {
        return None;
    }
    let caller_id = img.id;
    if let Some(t) = reg.image_of(addr) {
        if t.is_agent || t.is_linker || denied(&t.path) {
            return None;
        }
    }
    if let Some(&site) = reg.dlsym_sites.get(&(addr, caller_id)) {
        return Some(rt.table.entry_addr(site));
    }
    if reg.map.region_of(addr).is_none() {
        if let Ok(m) = read_maps() {
            reg.map = m;
        }
    }
    if classify_dyn_entry(&reg.map, addr) != CellClass::Function {
        return None;
    }
    let spec = SiteSpec {
        caller: caller_id,
        kind: SiteKind::Dlsym,
        resolved: addr,
        got_cell: 0,
        lazy: (0, 0),
        resolver: None,
    };
    let site = match rt.table.allocate(&[spec]) {
        Ok(s) => s,
        Err(e) => {
            reg.warn(format!("dlsym {name}: not intercepted: {e}"));
            return None;
        }
    };
    reg.sites.push(xflow_core::ApiSite {
        id: site,
        caller_image: caller_id,
        symbol: name.to_string(),
        kind: SiteKind::Dlsym,
        plt_entry_addr: None,
        got_cell_addr: None,
    });
    reg.dlsym_sites.insert((addr, caller_id), site);
    Some(rt.table.entry_addr(site))
}

struct StartArgs {
    start: StartFn,
    arg: *mut c_void,
}

extern "C-unwind" fn thread_start(p: *mut c_void) -> *mut c_void {
    // SAFETY: boxed by pthread_create below and handed over exactly once.
    let a = unsafe { Box::from_raw(p as *mut StartArgs) };
    let (start, arg) = (a.start, a.arg);
    drop(a);
    runtime::attach_thread(start as usize as u64);
    start(arg)
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn pthread_create(
    thread: *mut libc::pthread_t,
    attr: *const libc::pthread_attr_t,
    start: StartFn,
    arg: *mut c_void,
) -> c_int {
    let real = real::pthread_create();
    if runtime::get().is_none() {
        return real(thread, attr, start, arg);
    }
    let boxed = {
        let _g = Guard::new();
        Box::into_raw(Box::new(StartArgs { start, arg }))
    };
    let rc = real(thread, attr, thread_start, boxed as *mut c_void);
    if rc != 0 {
        let _g = Guard::new();
        drop(Box::from_raw(boxed));
    }
    rc
}

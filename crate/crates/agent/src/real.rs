//! The C library's own versions of the functions the agent exports.

use std::ffi::{c_char, c_int, c_void, CStr};
use std::sync::atomic::{AtomicUsize, Ordering};

pub type DlopenFn = unsafe extern "C" fn(*const c_char, c_int) -> *mut c_void;
pub type DlsymFn = unsafe extern "C" fn(*mut c_void, *const c_char) -> *mut c_void;
pub type StartFn = extern "C-unwind" fn(*mut c_void) -> *mut c_void;
pub type PthreadCreateFn =
    unsafe extern "C" fn(*mut libc::pthread_t, *const libc::pthread_attr_t, StartFn, *mut c_void) -> c_int;

const VERSIONS: [&CStr; 2] = [c"GLIBC_2.34", c"GLIBC_2.2.5"];

fn lookup(cache: &AtomicUsize, name: &CStr) -> usize {
    let cached = cache.load(Ordering::Relaxed);
    if cached != 0 {
        return cached;
    }
    for v in VERSIONS {
        // SAFETY: both strings are NUL-terminated; dlvsym is not wrapped.
        let p = unsafe { libc::dlvsym(libc::RTLD_NEXT, name.as_ptr(), v.as_ptr()) };
        if !p.is_null() {
            cache.store(p as usize, Ordering::Relaxed);
            return p as usize;
        }
    }
    crate::hot::fatal(b"xflow: cannot locate the C library's dynamic-loading functions\n");
}

static DLOPEN: AtomicUsize = AtomicUsize::new(0);
static DLSYM: AtomicUsize = AtomicUsize::new(0);
static PTHREAD_CREATE: AtomicUsize = AtomicUsize::new(0);

pub fn dlopen() -> DlopenFn {
    // SAFETY: the address is the C library's dlopen.
    unsafe { std::mem::transmute::<usize, DlopenFn>(lookup(&DLOPEN, c"dlopen")) }
}

pub fn dlsym() -> DlsymFn {
    // SAFETY: the address is the C library's dlsym.
    unsafe { std::mem::transmute::<usize, DlsymFn>(lookup(&DLSYM, c"dlsym")) }
}

pub fn pthread_create() -> PthreadCreateFn {
    // SAFETY: the address is the C library's pthread_create.
    unsafe { std::mem::transmute::<usize, PthreadCreateFn>(lookup(&PTHREAD_CREATE, c"pthread_create")) }
}

/// Addresses of the real functions, for mapping a site that resolved to an
/// agent wrapper back to the library that implements it.
pub fn wrapped_targets() -> [(&'static str, u64); 3] {
    [
        ("dlopen", dlopen() as usize as u64),
        ("dlsym", dlsym() as usize as u64),
        ("pthread_create", pthread_create() as usize as u64),
    ]
}

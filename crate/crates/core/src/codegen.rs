//! x86-64 machine code for shadow-table entries, the two shared stubs they
//! dispatch into, and the PLT patch that redirects a stub to an entry.
//!
//! Entry layout, per site:
//!
//! ```text
//! A  mov r11, fs:[ctx]        ; thread context, null before/after the thread is traced
//!    test r11, r11
//!    jz .direct
//! B  mov r11, [r11]           ; ctx->slots
//!    add qword [r11+site*40], 1
//!    dec dword [r11+site*40+32]   ; only when timing rate > 1
//!    jns .direct
//!    mov dword [r11+site*40+32], rate-1
//! C  mov r11d, site
//!    jmp common_enter         ; returns into the target with [rsp] swapped
//! .direct:
//!    mov r11, [rip+resolved]
//!    test r11, r11
//!    jz .resolve
//!    jmp r11
//! .resolve:
//!    push reloc_index
//!    jmp [rip+plt0]
//! D  push site                ; real API returns here
//!    jmp common_exit
//! ```

use std::ops::Range;

/// Bytes reserved per entry; entries are laid out at `code_base + site * ENTRY_SIZE`.
pub const ENTRY_SIZE: usize = 160;

/// Segment sizes (A, B, C, D) of the published reference layout.
pub const REFERENCE_SEGMENTS: [usize; 4] = [20, 45, 31, 38];

/// Size of one per-thread ledger slot; the generated counter update indexes by it.
pub const SLOT_STRIDE: u32 = 40;
/// Offset of the timing-gate countdown inside a slot.
pub const GATE_OFFSET: u32 = 32;

/// Length of the PLT patch sequence.
pub const PLT_PATCH_LEN: usize = 13;

const INT3: u8 = 0xcc;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodegenError {
    #[error("displacement from {from:#x} to {to:#x} does not fit in 32 bits")]
    OutOfRange { from: u64, to: u64 },
    #[error("ledger offset for site {0} does not fit in 32 bits")]
    SiteTooLarge(u32),
    #[error("generated entry is {0} bytes, budget is {ENTRY_SIZE}")]
    OverBudget(usize),
}

fn rel32(from_end: u64, to: u64) -> Result<[u8; 4], CodegenError> {
    let d = to.wrapping_sub(from_end) as i64;
    i32::try_from(d)
        .map(i32::to_le_bytes)
        .map_err(|_| CodegenError::OutOfRange { from: from_end, to })
}

struct Asm {
    buf: Vec<u8>,
    base: u64,
}

impl Asm {
    fn new(base: u64) -> Self {
        Self { buf: Vec::with_capacity(ENTRY_SIZE), base }
    }

    fn pos(&self) -> usize {
        self.buf.len()
    }

    fn here(&self) -> u64 {
        self.base + self.buf.len() as u64
    }

    fn emit(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// `opcode` followed by a rip-relative or branch rel32 to `target`.
    fn with_rel32(&mut self, opcode: &[u8], target: u64, trailing: usize) -> Result<(), CodegenError> {
        self.emit(opcode);
        let end = self.here() + 4 + trailing as u64;
        let r = rel32(end, target)?;
        self.emit(&r);
        Ok(())
    }

    /// Emit `opcode rel32` with a placeholder; returns the patch position.
    fn forward32(&mut self, opcode: &[u8]) -> usize {
        self.emit(opcode);
        let at = self.pos();
        self.emit(&[0; 4]);
        at
    }

    fn bind32(&mut self, at: usize) {
        let d = (self.pos() - (at + 4)) as i32;
        self.buf[at..at + 4].copy_from_slice(&d.to_le_bytes());
    }

    fn forward8(&mut self, opcode: u8) -> usize {
        self.emit(&[opcode, 0]);
        self.pos() - 1
    }

    fn bind8(&mut self, at: usize) {
        self.buf[at] = (self.pos() - (at + 1)) as u8;
    }

    fn mov_r11_fs(&mut self, off: i32) {
        self.emit(&[0x64, 0x4c, 0x8b, 0x1c, 0x25]);
        self.emit(&off.to_le_bytes());
    }

    fn mov_rdi_fs(&mut self, off: i32) {
        self.emit(&[0x64, 0x48, 0x8b, 0x3c, 0x25]);
        self.emit(&off.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryParams {
    pub site: u32,
    /// Runtime address the block will live at.
    pub entry_addr: u64,
    /// Offset of the thread-context pointer from the thread pointer.
    pub ctx_tls_offset: i32,
    pub timing_rate: u32,
    /// Address of the cell holding the real target (0 while unresolved).
    pub resolved_cell: u64,
    /// Lazy-resolution handshake: (relocation index, cell holding PLT0).
    /// `None` for sites that never go through the resolver.
    pub resolver: Option<(u32, u64)>,
    pub common_enter: u64,
    pub common_exit: u64,
}

/// Byte ranges of the four segments inside a generated entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryLayout {
    pub tls_check: Range<usize>,
    pub count_gate: Range<usize>,
    pub invoke: Range<usize>,
    pub post: Range<usize>,
    pub direct: usize,
    pub resolve: usize,
}

impl EntryLayout {
    pub fn len(&self) -> usize {
        self.post.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_sizes(&self) -> [usize; 4] {
        [self.tls_check.len(), self.count_gate.len(), self.invoke.len(), self.post.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryCode {
    /// Exactly [`ENTRY_SIZE`] bytes; the tail is int3 padding.
    pub bytes: Vec<u8>,
    pub layout: EntryLayout,
}

pub fn emit_entry(p: &EntryParams) -> Result<EntryCode, CodegenError> {
    let slot = p.site.checked_mul(SLOT_STRIDE).ok_or(CodegenError::SiteTooLarge(p.site))?;
    let gate = slot.checked_add(GATE_OFFSET).ok_or(CodegenError::SiteTooLarge(p.site))?;
    if gate > i32::MAX as u32 {
        return Err(CodegenError::SiteTooLarge(p.site));
    }
    let mut a = Asm::new(p.entry_addr);

    // A: thread context
    a.mov_r11_fs(p.ctx_tls_offset);
    a.emit(&[0x4d, 0x85, 0xdb]);
    let to_direct_a = a.forward32(&[0x0f, 0x84]);
    let tls_check = 0..a.pos();

    // B: count, then the timing gate
    a.emit(&[0x4d, 0x8b, 0x1b]);
    a.emit(&[0x49, 0x83, 0x83]);
    a.emit(&slot.to_le_bytes());
    a.emit(&[0x01]);
    let mut to_direct_b = None;
    if p.timing_rate > 1 {
        a.emit(&[0x41, 0xff, 0x8b]);
        a.emit(&gate.to_le_bytes());
        to_direct_b = Some(a.forward32(&[0x0f, 0x89]));
        a.emit(&[0x41, 0xc7, 0x83]);
        a.emit(&gate.to_le_bytes());
        a.emit(&(p.timing_rate - 1).to_le_bytes());
    }
    let count_gate = tls_check.end..a.pos();

    // C: timed dispatch, direct call, resolver handshake
    a.emit(&[0x41, 0xbb]);
    a.emit(&p.site.to_le_bytes());
    a.with_rel32(&[0xe9], p.common_enter, 0)?;
    let direct = a.pos();
    a.bind32(to_direct_a);
    if let Some(at) = to_direct_b {
        a.bind32(at);
    }
    a.with_rel32(&[0x4c, 0x8b, 0x1d], p.resolved_cell, 0)?;
    a.emit(&[0x4d, 0x85, 0xdb]);
    let to_resolve = a.forward8(0x74);
    a.emit(&[0x41, 0xff, 0xe3]);
    let resolve = a.pos();
    a.bind8(to_resolve);
    match p.resolver {
        Some((index, plt0_cell)) => {
            a.emit(&[0x68]);
            a.emit(&index.to_le_bytes());
            a.with_rel32(&[0xff, 0x25], plt0_cell, 0)?;
        }
        // Nothing to fall back on: trap rather than jump to null.
        None => a.emit(&[0x0f, 0x0b]),
    }
    let invoke = count_gate.end..a.pos();

    // D: post-invocation
    a.emit(&[0x68]);
    a.emit(&p.site.to_le_bytes());
    a.with_rel32(&[0xe9], p.common_exit, 0)?;
    let post = invoke.end..a.pos();

    if a.pos() > ENTRY_SIZE {
        return Err(CodegenError::OverBudget(a.pos()));
    }
    let mut bytes = a.buf;
    bytes.resize(ENTRY_SIZE, INT3);
    Ok(EntryCode { bytes, layout: EntryLayout { tls_check, count_gate, invoke, post, direct, resolve } })
}

/// Layout of entries for a given timing rate; identical for every site.
pub fn entry_layout(timing_rate: u32, with_resolver: bool) -> EntryLayout {
    let p = EntryParams {
        site: 0,
        entry_addr: 0x1000_0000,
        ctx_tls_offset: 0,
        timing_rate,
        resolved_cell: 0x1000_0000,
        resolver: with_resolver.then_some((0, 0x1000_0000)),
        common_enter: 0x1000_0000,
        common_exit: 0x1000_0000,
    };
    emit_entry(&p).expect("layout probe is in range").layout
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubParams {
    pub base: u64,
    pub ctx_tls_offset: i32,
    /// Cells holding the addresses of the runtime's enter/exit handlers.
    pub on_enter_cell: u64,
    pub on_exit_cell: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubCode {
    pub bytes: Vec<u8>,
    pub enter: usize,
    pub exit: usize,
}

/// Bytes between `rsp` after the register saves in `common_enter` and the
/// caller's return-address slot: 8 saved GPRs + 128 bytes of xmm + 8 pad.
pub const ENTER_FRAME: i32 = 8 * 8 + 136;

/// The shared enter/exit stubs.
///
/// `common_enter` runs with r11d = site id and the caller's return address
/// at `[rsp]`. It saves every argument register, calls
/// `on_enter(ctx, site, &return_slot) -> target`, restores and jumps to the
/// target. `on_enter` may rewrite the return slot so the callee returns into
/// the entry's post segment.
///
/// `common_exit` runs with the site id pushed on top of the stack. It saves
/// the return registers, calls `on_exit(ctx, site) -> real return address`,
/// stores that over the pushed id and returns through it.
pub fn emit_common_stubs(p: &StubParams) -> Result<StubCode, CodegenError> {
    let mut a = Asm::new(p.base);

    let enter = a.pos();
    // push rdi, rsi, rdx, rcx, r8, r9, rax, r10
    a.emit(&[0x57, 0x56, 0x52, 0x51, 0x41, 0x50, 0x41, 0x51, 0x50, 0x41, 0x52]);
    // sub rsp, 136 (keeps the call site 16-byte aligned)
    a.emit(&[0x48, 0x81, 0xec, 0x88, 0x00, 0x00, 0x00]);
    for x in 0..8u8 {
        movdqu(&mut a, true, x);
    }
    a.mov_rdi_fs(p.ctx_tls_offset);
    a.emit(&[0x44, 0x89, 0xde]); // mov esi, r11d
    a.emit(&[0x48, 0x8d, 0x94, 0x24]); // lea rdx, [rsp+ENTER_FRAME]
    a.emit(&ENTER_FRAME.to_le_bytes());
    a.with_rel32(&[0xff, 0x15], p.on_enter_cell, 0)?;
    a.emit(&[0x49, 0x89, 0xc3]); // mov r11, rax
    for x in 0..8u8 {
        movdqu(&mut a, false, x);
    }
    a.emit(&[0x48, 0x81, 0xc4, 0x88, 0x00, 0x00, 0x00]);
    // pop r10, rax, r9, r8, rcx, rdx, rsi, rdi
    a.emit(&[0x41, 0x5a, 0x58, 0x41, 0x59, 0x41, 0x58, 0x59, 0x5a, 0x5e, 0x5f]);
    a.emit(&[0x41, 0xff, 0xe3]);

    while !a.pos().is_multiple_of(16) {
        a.emit(&[INT3]);
    }
    let exit = a.pos();
    a.emit(&[0x50, 0x52]); // push rax, rdx
    a.emit(&[0x48, 0x83, 0xec, 0x28]); // sub rsp, 40
    movdqu(&mut a, true, 0);
    movdqu(&mut a, true, 1);
    a.mov_rdi_fs(p.ctx_tls_offset);
    a.emit(&[0x8b, 0x74, 0x24, 0x38]); // mov esi, [rsp+56]
    a.with_rel32(&[0xff, 0x15], p.on_exit_cell, 0)?;
    a.emit(&[0x48, 0x89, 0x44, 0x24, 0x38]); // mov [rsp+56], rax
    movdqu(&mut a, false, 0);
    movdqu(&mut a, false, 1);
    a.emit(&[0x48, 0x83, 0xc4, 0x28]);
    a.emit(&[0x5a, 0x58]); // pop rdx, rax
    a.emit(&[0xc3]);

    Ok(StubCode { bytes: a.buf, enter, exit })
}

/// movdqu between xmm`x` and `[rsp + 16*x]`.
fn movdqu(a: &mut Asm, store: bool, x: u8) {
    a.emit(&[0xf3, 0x0f, if store { 0x7f } else { 0x6f }]);
    if x == 0 {
        a.emit(&[0x04, 0x24]);
    } else {
        a.emit(&[0x44 | (x << 3), 0x24, x * 16]);
    }
}

/// `movabs r11, target; jmp r11`
pub fn plt_patch(target: u64) -> [u8; PLT_PATCH_LEN] {
    let mut b = [0u8; PLT_PATCH_LEN];
    b[0] = 0x49;
    b[1] = 0xbb;
    b[2..10].copy_from_slice(&target.to_le_bytes());
    b[10..].copy_from_slice(&[0x41, 0xff, 0xe3]);
    b
}

/// Inverse of [`plt_patch`], for detecting already-patched stubs.
pub fn decode_plt_patch(bytes: &[u8]) -> Option<u64> {
    if bytes.len() < PLT_PATCH_LEN || bytes[..2] != [0x49, 0xbb] || bytes[10..13] != [0x41, 0xff, 0xe3] {
        return None;
    }
    Some(u64::from_le_bytes(bytes[2..10].try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rate: u32) -> EntryParams {
        EntryParams {
            site: 7,
            entry_addr: 0x7f00_0010_0000,
            ctx_tls_offset: -0x40,
            timing_rate: rate,
            resolved_cell: 0x7f00_0000_1000,
            resolver: Some((3, 0x7f00_0000_1008)),
            common_enter: 0x7f00_000f_0000,
            common_exit: 0x7f00_000f_0080,
        }
    }

    #[test]
    fn fits_budget() {
        for rate in [1, 2, 1000] {
            let e = emit_entry(&params(rate)).unwrap();
            assert_eq!(e.bytes.len(), ENTRY_SIZE);
            assert!(e.layout.len() <= ENTRY_SIZE);
            let [a, b, c, d] = e.layout.segment_sizes();
            assert_eq!(a + b + c + d, e.layout.len());
            assert!(e.bytes[e.layout.len()..].iter().all(|&x| x == INT3));
        }
        assert!(REFERENCE_SEGMENTS.iter().sum::<usize>() <= ENTRY_SIZE);
    }

    #[test]
    fn segment_a_exact_bytes() {
        let e = emit_entry(&params(1)).unwrap();
        assert_eq!(&e.bytes[..9], &[0x64, 0x4c, 0x8b, 0x1c, 0x25, 0xc0, 0xff, 0xff, 0xff]);
        assert_eq!(&e.bytes[9..12], &[0x4d, 0x85, 0xdb]);
        // jz lands on .direct
        let rel = i32::from_le_bytes(e.bytes[14..18].try_into().unwrap());
        assert_eq!(18 + rel as usize, e.layout.direct);
        // ledger offset of site 7
        let slot = &e.bytes[e.layout.count_gate.start + 6..e.layout.count_gate.start + 10];
        assert_eq!(u32::from_le_bytes(slot.try_into().unwrap()), 7 * SLOT_STRIDE);
    }

    #[test]
    fn rip_relative_targets() {
        let p = params(4);
        let e = emit_entry(&p).unwrap();
        let at = |off: usize, len: usize| -> u64 {
            let rel = i32::from_le_bytes(e.bytes[off..off + 4].try_into().unwrap());
            (p.entry_addr + (off - (len - 4)) as u64 + len as u64).wrapping_add(rel as i64 as u64)
        };
        // mov r11, [rip+resolved]
        assert_eq!(at(e.layout.direct + 3, 7), p.resolved_cell);
        // jmp [rip+plt0]
        assert_eq!(at(e.layout.resolve + 7, 6), 0x7f00_0000_1008);
        assert_eq!(e.bytes[e.layout.resolve], 0x68);
        assert_eq!(&e.bytes[e.layout.resolve + 1..e.layout.resolve + 5], &3u32.to_le_bytes());
        // jmp common_exit
        assert_eq!(at(e.layout.post.start + 6, 5), p.common_exit);
        // the gate reload writes rate-1
        let cg = &e.bytes[e.layout.count_gate.clone()];
        assert_eq!(&cg[cg.len() - 4..], &3u32.to_le_bytes());
    }

    #[test]
    fn no_resolver_traps() {
        let mut p = params(1);
        p.resolver = None;
        let e = emit_entry(&p).unwrap();
        assert_eq!(&e.bytes[e.layout.resolve..e.layout.resolve + 2], &[0x0f, 0x0b]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(emit_entry(&params(3)).unwrap(), emit_entry(&params(3)).unwrap());
        assert_eq!(entry_layout(3, true), emit_entry(&params(3)).unwrap().layout);
    }

    #[test]
    fn range_errors() {
        let mut p = params(1);
        p.resolved_cell = 0x10;
        assert!(matches!(emit_entry(&p), Err(CodegenError::OutOfRange { .. })));
        let mut p = params(1);
        p.site = u32::MAX / 8;
        assert_eq!(emit_entry(&p), Err(CodegenError::SiteTooLarge(u32::MAX / 8)));
    }

    #[test]
    fn stubs() {
        let s = emit_common_stubs(&StubParams {
            base: 0x7f00_0000_2000,
            ctx_tls_offset: -8,
            on_enter_cell: 0x7f00_0000_0000,
            on_exit_cell: 0x7f00_0000_0008,
        })
        .unwrap();
        assert_eq!(s.enter, 0);
        assert_eq!(s.exit % 16, 0);
        assert_eq!(*s.bytes.last().unwrap(), 0xc3);
        // xmm7 saved at [rsp+112]
        assert!(s.bytes.windows(6).any(|w| w == [0xf3, 0x0f, 0x7f, 0x7c, 0x24, 0x70]));
    }

    #[test]
    fn patch_round_trip() {
        let b = plt_patch(0x1122_3344_5566_7788);
        assert_eq!(b.len(), PLT_PATCH_LEN);
        assert!(PLT_PATCH_LEN <= crate::elf::PLT_ENTRY_SIZE as usize);
        assert_eq!(decode_plt_patch(&b), Some(0x1122_3344_5566_7788));
        assert_eq!(decode_plt_patch(&[0xff, 0x25, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]), None);
    }
}

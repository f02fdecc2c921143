//! Per-thread shadow stack of in-flight intercepted calls.
//!
//! The storage is caller-provided so the runtime can back it with memory that
//! is never reallocated on the hot path.

use crate::site::SiteId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(C)]
pub struct ShadowFrame {
    pub site: SiteId,
    pub _pad: u32,
    pub real_return_addr: u64,
    /// Stack address of the return-address slot this frame swapped.
    pub return_slot: u64,
    pub start_cycles: u64,
}

/// A frame closed early because its API tail-jumped into another one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Closed {
    pub site: SiteId,
    pub duration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnterAction {
    /// Frame pushed: the caller must write the post address into the slot.
    Push,
    /// The top frame tail-jumped into this call; it was closed and replaced.
    /// The slot already holds a post address and is rewritten to this site's.
    TailReplace(Closed),
    /// No room for another frame: count only, leave the slot untouched.
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitResult {
    pub real_return_addr: u64,
    /// Duration of the popped frame, `None` when it was untimed.
    pub closed: Option<Closed>,
    /// The popped frame did not belong to the exiting site.
    pub mismatch: bool,
}

pub struct ShadowStack<'a> {
    frames: &'a mut [ShadowFrame],
    depth: &'a mut usize,
}

impl<'a> ShadowStack<'a> {
    pub fn new(frames: &'a mut [ShadowFrame], depth: &'a mut usize) -> Self {
        debug_assert!(*depth <= frames.len());
        Self { frames, depth }
    }

    pub fn depth(&self) -> usize {
        *self.depth
    }

    pub fn top(&self) -> Option<&ShadowFrame> {
        self.depth.checked_sub(1).map(|i| &self.frames[i])
    }

    pub fn frames(&self) -> &[ShadowFrame] {
        &self.frames[..*self.depth]
    }

    /// Handle an intercepted call about to enter `site`.
    ///
    /// `slot` is the stack address of the return address, `ret` its current
    /// value, and `is_post(site, addr)` tells whether `addr` is the post
    /// segment of `site`'s entry.
    pub fn enter(
        &mut self,
        site: SiteId,
        slot: u64,
        ret: u64,
        now: u64,
        is_post: impl Fn(SiteId, u64) -> bool,
    ) -> EnterAction {
        // Frames below the current stack pointer were skipped by longjmp,
        // exceptions or a no-return call and will never see their post segment.
        while let Some(top) = self.top() {
            if top.return_slot < slot {
                *self.depth -= 1;
            } else {
                break;
            }
        }
        if let Some(top) = self.top().copied() {
            if top.return_slot == slot {
                *self.depth -= 1;
                if is_post(top.site, ret) {
                    let closed = Closed { site: top.site, duration: duration(top.start_cycles, now) };
                    self.push_frame(site, top.real_return_addr, slot, now);
                    return EnterAction::TailReplace(closed);
                }
            }
        }
        if *self.depth == self.frames.len() {
            return EnterAction::Overflow;
        }
        self.push_frame(site, ret, slot, now);
        EnterAction::Push
    }

    fn push_frame(&mut self, site: SiteId, real_return_addr: u64, return_slot: u64, start: u64) {
        self.frames[*self.depth] =
            ShadowFrame { site, _pad: 0, real_return_addr, return_slot, start_cycles: start };
        *self.depth += 1;
    }

    /// Pop the frame of a returning call. `None` only when the stack is empty,
    /// which means the return address is lost.
    pub fn exit(&mut self, site: SiteId, now: u64) -> Option<ExitResult> {
        let top = *self.top()?;
        *self.depth -= 1;
        let closed = (top.start_cycles != 0)
            .then(|| Closed { site: top.site, duration: duration(top.start_cycles, now) });
        Some(ExitResult { real_return_addr: top.real_return_addr, closed, mismatch: top.site != site })
    }

    /// Drop every frame (fork child, context reset).
    pub fn clear(&mut self) {
        *self.depth = 0;
    }
}

fn duration(start: u64, end: u64) -> u64 {
    if start == 0 {
        0
    } else {
        end.saturating_sub(start)
    }
}

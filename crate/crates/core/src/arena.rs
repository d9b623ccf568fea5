//! Stack-discipline activation arena with byte-level accounting.
//!
//! Storage holds full-precision scalars, but every allocation is charged
//! `len * elem_bytes` against the byte capacity, so the cursor tracks what
//! the buffers would occupy on the target device.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ElemKind;

/// Handle to one live allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    depth: usize,
    offset: usize,
    len: usize,
}

impl Frame {
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ArenaStats {
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
}

#[derive(Debug)]
pub struct Arena<T> {
    capacity_bytes: u64,
    elem: ElemKind,
    cursor_bytes: u64,
    high_water_bytes: u64,
    window_peak_bytes: u64,
    stats: ArenaStats,
    frames: Vec<Frame>,
    storage: Vec<T>,
}

impl<T: Scalar> Arena<T> {
    pub fn new(capacity_bytes: u64, elem: ElemKind) -> Self {
        Self {
            capacity_bytes,
            elem,
            cursor_bytes: 0,
            high_water_bytes: 0,
            window_peak_bytes: 0,
            stats: ArenaStats::default(),
            frames: Vec::new(),
            storage: Vec::new(),
        }
    }

    /// An arena with no effective limit, for measuring footprints.
    pub fn unbounded(elem: ElemKind) -> Self {
        Self::new(u64::MAX, elem)
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn elem(&self) -> ElemKind {
        self.elem
    }

    pub fn cursor_bytes(&self) -> u64 {
        self.cursor_bytes
    }

    pub fn high_water_bytes(&self) -> u64 {
        self.high_water_bytes
    }

    pub fn stats(&self) -> ArenaStats {
        self.stats
    }

    pub fn live_frames(&self) -> usize {
        self.frames.len()
    }

    /// Restart the per-window peak at the current cursor.
    pub fn begin_window(&mut self) {
        self.window_peak_bytes = self.cursor_bytes;
    }

    /// Highest cursor since the last [`Arena::begin_window`].
    pub fn window_peak_bytes(&self) -> u64 {
        self.window_peak_bytes
    }

    fn bytes_for(&self, len: usize) -> Option<u64> {
        (len as u64).checked_mul(self.elem.bytes())
    }

    fn offset_elems(&self) -> usize {
        self.frames.last().map_or(0, |f| f.offset + f.len)
    }

    /// Zero-filled allocation of `len` elements on top of the stack.
    /// On overflow the arena is left unchanged.
    pub fn alloc(&mut self, len: usize) -> Result<Frame> {
        let overflow = |arena: &Self| Error::ArenaOverflow {
            requested: arena.bytes_for(len).unwrap_or(u64::MAX),
            cursor: arena.cursor_bytes,
            capacity: arena.capacity_bytes,
        };
        let bytes = self.bytes_for(len).ok_or_else(|| overflow(self))?;
        let end = self.cursor_bytes.checked_add(bytes).ok_or_else(|| overflow(self))?;
        if end > self.capacity_bytes {
            return Err(overflow(self));
        }
        let frame = Frame {
            depth: self.frames.len(),
            offset: self.offset_elems(),
            len,
        };
        let needed = frame.offset + len;
        if self.storage.len() < needed {
            self.storage.resize(needed, T::zero());
        }
        self.storage[frame.offset..needed].fill(T::zero());
        self.frames.push(frame);
        self.cursor_bytes = end;
        self.high_water_bytes = self.high_water_bytes.max(end);
        self.window_peak_bytes = self.window_peak_bytes.max(end);
        self.stats.allocated_bytes += bytes;
        Ok(frame)
    }

    fn check_live(&self, frame: Frame) -> Result<()> {
        if self.frames.get(frame.depth) != Some(&frame) {
            return Err(Error::ArenaMisuse(format!("frame {frame:?} is not live")));
        }
        Ok(())
    }

    /// Release the most recent allocation.
    pub fn free(&mut self, frame: Frame) -> Result<()> {
        self.check_live(frame)?;
        if frame.depth + 1 != self.frames.len() {
            return Err(Error::ArenaMisuse(format!(
                "only the top frame may be freed (frame at depth {} of {})",
                frame.depth,
                self.frames.len()
            )));
        }
        self.frames.pop();
        let bytes = frame.len as u64 * self.elem.bytes();
        self.cursor_bytes -= bytes;
        self.stats.freed_bytes += bytes;
        Ok(())
    }

    /// Release the frame directly under the top and slide the top frame's
    /// contents down into its place. Returns the relocated top frame.
    pub fn free_under_top(&mut self, under: Frame, top: Frame) -> Result<Frame> {
        self.check_live(under)?;
        self.check_live(top)?;
        let n = self.frames.len();
        if top.depth + 1 != n || under.depth + 2 != n {
            return Err(Error::ArenaMisuse(
                "free_under_top needs the two topmost frames".into(),
            ));
        }
        self.storage
            .copy_within(top.offset..top.offset + top.len, under.offset);
        self.frames.truncate(under.depth);
        let moved = Frame {
            depth: under.depth,
            offset: under.offset,
            len: top.len,
        };
        self.frames.push(moved);
        let bytes = under.len as u64 * self.elem.bytes();
        self.cursor_bytes -= bytes;
        self.stats.freed_bytes += bytes;
        Ok(moved)
    }

    pub fn slice(&self, frame: Frame) -> Result<&[T]> {
        self.check_live(frame)?;
        Ok(&self.storage[frame.offset..frame.offset + frame.len])
    }

    pub fn slice_mut(&mut self, frame: Frame) -> Result<&mut [T]> {
        self.check_live(frame)?;
        Ok(&mut self.storage[frame.offset..frame.offset + frame.len])
    }

    /// Disjoint mutable views of several live frames, given bottom to top.
    pub fn slices_mut<const N: usize>(&mut self, frames: [Frame; N]) -> Result<[&mut [T]; N]> {
        for pair in frames.windows(2) {
            if pair[0].depth >= pair[1].depth {
                return Err(Error::ArenaMisuse("frames must be listed bottom to top".into()));
            }
        }
        for &f in &frames {
            self.check_live(f)?;
        }
        let mut rest: &mut [T] = &mut self.storage;
        let mut consumed = 0;
        let mut views = Vec::with_capacity(N);
        for f in frames {
            let tail = std::mem::take(&mut rest);
            let (_, tail) = tail.split_at_mut(f.offset - consumed);
            let (head, tail) = tail.split_at_mut(f.len);
            views.push(head);
            rest = tail;
            consumed = f.offset + f.len;
        }
        Ok(views
            .try_into()
            .unwrap_or_else(|_| unreachable!("exactly N views were pushed")))
    }
}

//! Thread-local instrumentation counters.
//!
//! The cost model is validated against live runs: every decoder attention
//! block reports how many score-matrix elements it materialized, and every
//! layer-stack forward bumps a pass counter (which is how the demonstration
//! bank's "a cache hit performs zero forward passes" contract is observed).
//! Counters are thread-local so concurrent tests do not interfere.

use std::cell::Cell;

thread_local! {
    static LM_ATTN_ELEMENTS: Cell<u64> = const { Cell::new(0) };
    static VISION_ATTN_ELEMENTS: Cell<u64> = const { Cell::new(0) };
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static IMAGE_ENCODES: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of all counters for delta measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    /// Score-matrix elements computed by decoder self-attention.
    pub lm_attn_elements: u64,
    /// Score-matrix elements computed by the vision cross-attention.
    pub vision_attn_elements: u64,
    /// Number of `forward_layers` invocations.
    pub forward_passes: u64,
    /// Number of image encodes.
    pub image_encodes: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        lm_attn_elements: LM_ATTN_ELEMENTS.get(),
        vision_attn_elements: VISION_ATTN_ELEMENTS.get(),
        forward_passes: FORWARD_PASSES.get(),
        image_encodes: IMAGE_ENCODES.get(),
    }
}

/// Difference since an earlier snapshot.
pub fn since(earlier: Counters) -> Counters {
    let now = snapshot();
    Counters {
        lm_attn_elements: now.lm_attn_elements - earlier.lm_attn_elements,
        vision_attn_elements: now.vision_attn_elements - earlier.vision_attn_elements,
        forward_passes: now.forward_passes - earlier.forward_passes,
        image_encodes: now.image_encodes - earlier.image_encodes,
    }
}

pub fn reset() {
    LM_ATTN_ELEMENTS.set(0);
    VISION_ATTN_ELEMENTS.set(0);
    FORWARD_PASSES.set(0);
    IMAGE_ENCODES.set(0);
}

pub(crate) fn add_lm_attn_elements(n: u64) {
    LM_ATTN_ELEMENTS.set(LM_ATTN_ELEMENTS.get() + n);
}

pub(crate) fn add_vision_attn_elements(n: u64) {
    VISION_ATTN_ELEMENTS.set(VISION_ATTN_ELEMENTS.get() + n);
}

pub(crate) fn add_forward_pass() {
    FORWARD_PASSES.set(FORWARD_PASSES.get() + 1);
}

pub(crate) fn add_image_encode() {
    IMAGE_ENCODES.set(IMAGE_ENCODES.get() + 1);
}

//! Thread-local cost accounting.
//!
//! Every [`Tensor`](crate::tensor::Tensor) registers its payload size on
//! creation and releases it on drop, so the live byte count is exact for the
//! current thread. Graph construction and backward passes are counted here
//! too; the adaptation engines read these counters to prove they never
//! touched the target model's gradient.

use std::cell::Cell;

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
    static GRAPH_NODES: Cell<u64> = const { Cell::new(0) };
    static EAGER_OPS: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK_BYTES.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    LIVE_BYTES.with(|live| live.set(live.get().saturating_sub(bytes)));
}

pub(crate) fn count_graph_node() {
    GRAPH_NODES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_eager_op() {
    EAGER_OPS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_backward() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}

pub fn live_bytes() -> usize {
    LIVE_BYTES.with(Cell::get)
}

/// Monotone counters at one point in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub graph_nodes: u64,
    pub eager_ops: u64,
    pub backward_passes: u64,
}

impl Counts {
    pub fn now() -> Self {
        Counts {
            graph_nodes: GRAPH_NODES.with(Cell::get),
            eager_ops: EAGER_OPS.with(Cell::get),
            backward_passes: BACKWARD_PASSES.with(Cell::get),
        }
    }

    pub fn since(self, earlier: Counts) -> Counts {
        Counts {
            graph_nodes: self.graph_nodes - earlier.graph_nodes,
            eager_ops: self.eager_ops - earlier.eager_ops,
            backward_passes: self.backward_passes - earlier.backward_passes,
        }
    }
}

/// Measures the peak number of bytes allocated on top of what was live when
/// the probe started.
pub struct AllocProbe {
    base: usize,
}

impl AllocProbe {
    pub fn start() -> Self {
        let base = live_bytes();
        PEAK_BYTES.with(|p| p.set(base));
        AllocProbe { base }
    }

    pub fn peak_transient(&self) -> usize {
        PEAK_BYTES.with(Cell::get).saturating_sub(self.base)
    }
}

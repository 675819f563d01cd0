//! Flat parameter vector with a named-segment index.
//!
//! Every layer owns a contiguous, non-overlapping slice of one `Vec<f64>`;
//! the index maps layer names to (offset, length). Gradient vectors share
//! the same layout, which is also what the checkpoint format serializes.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named slice of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub off: usize,
    pub len: usize,
}

/// How a segment is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Zeros: biases and output heads.
    Zero,
    /// Uniform(−a, a) with a = 1/√fan_in.
    Uniform { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct SegmentEntry {
    pub name: String,
    pub off: usize,
    pub len: usize,
    pub init: Init,
}

/// Ordered, disjoint, covering map from layer names to vector slices.
#[derive(Debug, Clone)]
pub struct SegmentIndex {
    entries: Vec<SegmentEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl SegmentIndex {
    pub fn entries(&self) -> &[SegmentEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn seg(&self, name: &str) -> Seg {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter segment: {name}"));
        let e = &self.entries[idx];
        Seg { off: e.off, len: e.len }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

/// Accumulates segment registrations in a fixed order.
#[derive(Debug, Default)]
pub struct SegmentBuilder {
    entries: Vec<SegmentEntry>,
    total: usize,
}

impl SegmentBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, len: usize, init: Init) {
        let name = name.into();
        assert!(len > 0, "segment {name} must be non-empty");
        self.entries.push(SegmentEntry { name, off: self.total, len, init });
        self.total += len;
    }

    pub fn build(self) -> SegmentIndex {
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let prev = by_name.insert(e.name.clone(), i);
            assert!(prev.is_none(), "duplicate segment name: {}", e.name);
        }
        SegmentIndex { entries: self.entries, by_name, total: self.total }
    }
}

/// Model parameters: the segment index plus the flat value vector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    index: SegmentIndex,
    values: Vec<f64>,
}

impl ModelParams {
    /// Zeroed parameters over the given layout.
    pub fn zeros(index: SegmentIndex) -> Self {
        let values = vec![0.0; index.total_len()];
        ModelParams { index, values }
    }

    /// Initialized parameters: each segment filled per its `Init`, drawing
    /// from `rng` in registration order.
    pub fn init(index: SegmentIndex, rng: &mut ChaCha8Rng) -> Self {
        let mut values = vec![0.0; index.total_len()];
        for e in index.entries() {
            match e.init {
                Init::Zero => {}
                Init::Uniform { fan_in } => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    for v in &mut values[e.off..e.off + e.len] {
                        *v = rng.random_range(-a..a);
                    }
                }
            }
        }
        ModelParams { index, values }
    }

    /// Rebuilds params from a saved layout and payload; lengths must agree.
    pub fn from_parts(index: SegmentIndex, values: Vec<f64>) -> Self {
        assert_eq!(index.total_len(), values.len(), "parameter payload length mismatch");
        ModelParams { index, values }
    }

    pub fn index(&self) -> &SegmentIndex {
        &self.index
    }

    pub fn seg(&self, name: &str) -> Seg {
        self.index.seg(name)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fresh zeroed gradient buffer of matching layout.
    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_INIT};

    #[test]
    fn segments_are_disjoint_and_covering() {
        let mut b = SegmentBuilder::new();
        b.register("a.w", 10, Init::Uniform { fan_in: 5 });
        b.register("a.b", 2, Init::Zero);
        b.register("b.w", 7, Init::Uniform { fan_in: 7 });
        let idx = b.build();
        assert_eq!(idx.total_len(), 19);
        let mut covered = vec![false; 19];
        for e in idx.entries() {
            for i in e.off..e.off + e.len {
                assert!(!covered[i], "overlap at {i}");
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert_eq!(idx.seg("a.b"), Seg { off: 10, len: 2 });
    }

    #[test]
    #[should_panic(expected = "duplicate segment")]
    fn duplicate_names_rejected() {
        let mut b = SegmentBuilder::new();
        b.register("x", 1, Init::Zero);
        b.register("x", 1, Init::Zero);
        let _ = b.build();
    }

    #[test]
    fn init_respects_kinds_and_is_deterministic() {
        let mut b = SegmentBuilder::new();
        b.register("w", 100, Init::Uniform { fan_in: 25 });
        b.register("b", 10, Init::Zero);
        let idx = b.build();
        let mut rng = substream(5, STREAM_INIT);
        let p = ModelParams::init(idx.clone(), &mut rng);
        let w = &p.values()[0..100];
        assert!(w.iter().any(|&v| v != 0.0));
        assert!(w.iter().all(|&v| v.abs() <= 0.2));
        assert!(p.values()[100..].iter().all(|&v| v == 0.0));

        let mut rng2 = substream(5, STREAM_INIT);
        let p2 = ModelParams::init(idx, &mut rng2);
        assert_eq!(p.values(), p2.values());
    }
}

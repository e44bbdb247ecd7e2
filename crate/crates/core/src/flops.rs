//! Multiply-accumulate bookkeeping for attention layers.
//!
//! Kernels executed on a [`crate::tensor::Tape`] add their MAC counts to the
//! tape's [`MacCounter`] under whichever [`Section`] is currently selected;
//! the analytic counts in [`crate::attention`] produce the same
//! [`FlopsReport`] without executing anything.

use serde::{Serialize, Serializer};
use std::ops::{Add, AddAssign};

/// The sub-step a MAC is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Section {
    QkvProj,
    /// `q·kᵀ` in vanilla attention, `t·kᵀ` in mediator attention.
    KeyScores,
    /// `A·v` in vanilla attention, `A_tk·v` in mediator attention.
    ValueAggregate,
    /// `q·tᵀ` (mediator attention only).
    QueryScores,
    /// `A_qt·v_med` (mediator attention only).
    MediatorAggregate,
    Pooling,
    DwConv,
    OutProj,
    /// Anything outside the attention layer (MLP, embeddings, heads).
    Other,
}

const SECTIONS: [Section; 9] = [
    Section::QkvProj,
    Section::KeyScores,
    Section::ValueAggregate,
    Section::QueryScores,
    Section::MediatorAggregate,
    Section::Pooling,
    Section::DwConv,
    Section::OutProj,
    Section::Other,
];

fn slot(section: Section) -> usize {
    SECTIONS.iter().position(|&s| s == section).unwrap()
}

/// Per-invocation accumulator. Never shared: each tape owns one.
#[derive(Clone, Debug)]
pub struct MacCounter {
    current: Section,
    counts: [u64; 9],
}

impl Default for MacCounter {
    fn default() -> Self {
        MacCounter {
            current: Section::Other,
            counts: [0; 9],
        }
    }
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Selects the section subsequent MACs are charged to.
    pub fn enter(&mut self, section: Section) {
        self.current = section;
    }

    pub fn current(&self) -> Section {
        self.current
    }

    pub fn add(&mut self, macs: u64) {
        self.counts[slot(self.current)] += macs;
    }

    pub fn add_to(&mut self, section: Section, macs: u64) {
        self.counts[slot(section)] += macs;
    }

    pub fn get(&self, section: Section) -> u64 {
        self.counts[slot(section)]
    }

    /// Attention-layer counts; `Section::Other` is excluded.
    pub fn report(&self) -> FlopsReport {
        FlopsReport {
            qkv_proj: self.get(Section::QkvProj),
            key_scores: self.get(Section::KeyScores),
            value_aggregate: self.get(Section::ValueAggregate),
            query_scores: self.get(Section::QueryScores),
            mediator_aggregate: self.get(Section::MediatorAggregate),
            pooling: self.get(Section::Pooling),
            dwconv: self.get(Section::DwConv),
            out_proj: self.get(Section::OutProj),
        }
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

/// Itemized attention MAC counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub qkv_proj: u64,
    pub key_scores: u64,
    pub value_aggregate: u64,
    pub query_scores: u64,
    pub mediator_aggregate: u64,
    /// Additions performed by mediator pooling, counted one MAC each.
    pub pooling: u64,
    pub dwconv: u64,
    pub out_proj: u64,
}

impl FlopsReport {
    /// MACs of the query/key/mediator interaction matmuls.
    pub fn interaction(&self) -> u64 {
        self.key_scores + self.value_aggregate + self.query_scores + self.mediator_aggregate
    }

    pub fn total_macs(&self) -> u64 {
        self.qkv_proj + self.interaction() + self.pooling + self.dwconv + self.out_proj
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn scaled(&self, k: u64) -> FlopsReport {
        FlopsReport {
            qkv_proj: self.qkv_proj * k,
            key_scores: self.key_scores * k,
            value_aggregate: self.value_aggregate * k,
            query_scores: self.query_scores * k,
            mediator_aggregate: self.mediator_aggregate * k,
            pooling: self.pooling * k,
            dwconv: self.dwconv * k,
            out_proj: self.out_proj * k,
        }
    }

    /// Pretty JSON with the fixed key order `qkv_proj, interaction, pooling,
    /// dwconv, out_proj, total_macs, total_flops`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl Serialize for FlopsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("FlopsReport", 7)?;
        st.serialize_field("qkv_proj", &self.qkv_proj)?;
        st.serialize_field("interaction", &self.interaction())?;
        st.serialize_field("pooling", &self.pooling)?;
        st.serialize_field("dwconv", &self.dwconv)?;
        st.serialize_field("out_proj", &self.out_proj)?;
        st.serialize_field("total_macs", &self.total_macs())?;
        st.serialize_field("total_flops", &self.total_flops())?;
        st.end()
    }
}

impl Add for FlopsReport {
    type Output = FlopsReport;

    fn add(mut self, rhs: FlopsReport) -> FlopsReport {
        self += rhs;
        self
    }
}

impl AddAssign for FlopsReport {
    fn add_assign(&mut self, rhs: FlopsReport) {
        self.qkv_proj += rhs.qkv_proj;
        self.key_scores += rhs.key_scores;
        self.value_aggregate += rhs.value_aggregate;
        self.query_scores += rhs.query_scores;
        self.mediator_aggregate += rhs.mediator_aggregate;
        self.pooling += rhs.pooling;
        self.dwconv += rhs.dwconv;
        self.out_proj += rhs.out_proj;
    }
}

impl std::iter::Sum for FlopsReport {
    fn sum<I: Iterator<Item = FlopsReport>>(iter: I) -> FlopsReport {
        iter.fold(FlopsReport::default(), Add::add)
    }
}

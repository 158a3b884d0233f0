//! Per-thread multiply-add and memory accounting.
//!
//! A measurement session is opened with [`measure`] and lives on the calling
//! thread only, so concurrent forward passes on other threads never see each
//! other's counts. Outside a session every hook is a cheap no-op.
//!
//! Kernels report multiply-adds through the session under the current
//! [`OpClass`] and the current dotted section label (for example
//! `cmiu2.imca.attn_rgb`).

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use serde::Serialize;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    /// Q/K/V and output projections.
    Projection,
    /// The two matrix products of the (patch-wise) spatial attention.
    SpatialCore,
    /// The two matrix products of the channel attention.
    ChannelCore,
    Conv,
    Other,
}

/// One view-mixed attention invocation, with the extents the closed-form
/// cost formulas need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttentionCall {
    pub label: String,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeEvent {
    pub label: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

/// Softmax matrices captured from one attention invocation, one per head.
#[derive(Debug, Clone)]
pub struct CapturedMaps {
    pub label: String,
    /// Row-stochastic (N/p²)×(N/p²) spatial weights.
    pub spatial: Vec<Tensor>,
    /// Row-stochastic (D/N_h)×(D/N_h) channel weights.
    pub channel: Vec<Tensor>,
    /// Patch grid (rows, cols) of the spatial maps.
    pub patch_grid: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct Tally {
    pub macs: BTreeMap<(String, OpClass), u64>,
    pub mem: BTreeMap<(String, OpClass), u64>,
    pub shapes: Vec<ShapeEvent>,
    pub attention_calls: Vec<AttentionCall>,
    pub captures: Vec<CapturedMaps>,
}

impl Tally {
    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn macs_of(&self, class: OpClass) -> u64 {
        self.macs.iter().filter(|((_, c), _)| *c == class).map(|(_, v)| v).sum()
    }

    pub fn total_mem(&self) -> u64 {
        self.mem.values().sum()
    }

    /// Sums over every label starting with `prefix` (a whole dotted segment).
    pub fn macs_under(&self, prefix: &str, class: OpClass) -> u64 {
        self.macs
            .iter()
            .filter(|((label, c), _)| *c == class && label_under(label, prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn mem_under(&self, prefix: &str) -> u64 {
        self.mem
            .iter()
            .filter(|((label, _), _)| label_under(label, prefix))
            .map(|(_, v)| v)
            .sum()
    }
}

fn label_under(label: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || label == prefix
        || (label.starts_with(prefix) && label.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[derive(Debug, Default)]
struct Session {
    labels: Vec<String>,
    class: Vec<OpClass>,
    capture: Option<String>,
    tally: Tally,
}

impl Session {
    fn label(&self) -> String {
        if self.labels.is_empty() {
            "root".to_string()
        } else {
            self.labels.join(".")
        }
    }
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static SESSION: RefCell<Option<Session>> = const { RefCell::new(None) };
}

/// Runs `f` with a fresh counting session on this thread and returns the tally.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Tally) {
    measure_capturing(None, f)
}

/// Like [`measure`], additionally capturing attention maps from every
/// invocation whose section label equals `capture`.
pub fn measure_capturing<R>(capture: Option<&str>, f: impl FnOnce() -> R) -> (R, Tally) {
    let fresh = Session {
        capture: capture.map(str::to_string),
        ..Session::default()
    };
    let outer = SESSION.with(|s| s.borrow_mut().replace(fresh));
    let was_active = ACTIVE.with(|a| a.replace(true));
    let out = f();
    ACTIVE.with(|a| a.set(was_active));
    let session = SESSION.with(|s| {
        let mut slot = s.borrow_mut();
        let done = slot.take();
        *slot = outer;
        done
    });
    (out, session.map(|s| s.tally).unwrap_or_default())
}

#[inline]
fn active() -> bool {
    ACTIVE.with(Cell::get)
}

fn with_session(f: impl FnOnce(&mut Session)) {
    SESSION.with(|s| {
        if let Some(session) = s.borrow_mut().as_mut() {
            f(session);
        }
    });
}

/// Runs `f` inside a named section. Section names nest with `.`.
pub(crate) fn section<R>(name: &str, f: impl FnOnce() -> R) -> R {
    if !active() {
        return f();
    }
    with_session(|s| s.labels.push(name.to_string()));
    let out = f();
    with_session(|s| {
        s.labels.pop();
    });
    out
}

/// Attributes every multiply-add inside `f` to `class`.
pub(crate) fn with_class<R>(class: OpClass, f: impl FnOnce() -> R) -> R {
    if !active() {
        return f();
    }
    with_session(|s| s.class.push(class));
    let out = f();
    with_session(|s| {
        s.class.pop();
    });
    out
}

#[inline]
pub(crate) fn add_macs(count: u64, default: OpClass) {
    if !active() {
        return;
    }
    with_session(|s| {
        let class = s.class.last().copied().unwrap_or(default);
        let key = (s.label(), class);
        *s.tally.macs.entry(key).or_default() += count;
    });
}

pub(crate) fn add_mem(class: OpClass, elements: u64) {
    if !active() {
        return;
    }
    with_session(|s| {
        let key = (s.label(), class);
        *s.tally.mem.entry(key).or_default() += elements;
    });
}

pub(crate) fn trace_shape(input: &[usize], output: &[usize]) {
    if !active() {
        return;
    }
    with_session(|s| {
        let label = s.label();
        s.tally.shapes.push(ShapeEvent {
            label,
            input: input.to_vec(),
            output: output.to_vec(),
        });
    });
}

pub(crate) fn log_attention(tokens: usize, dim: usize, heads: usize, patch: usize) {
    if !active() {
        return;
    }
    with_session(|s| {
        let label = s.label();
        s.tally.attention_calls.push(AttentionCall {
            label,
            tokens,
            dim,
            heads,
            patch,
        });
    });
}

/// True when the current section is the capture target.
pub(crate) fn capturing() -> bool {
    if !active() {
        return false;
    }
    let mut hit = false;
    with_session(|s| hit = s.capture.as_deref() == Some(s.label().as_str()));
    hit
}

pub(crate) fn push_capture(spatial: Vec<Tensor>, channel: Vec<Tensor>, patch_grid: (usize, usize)) {
    with_session(|s| {
        let label = s.label();
        s.tally.captures.push(CapturedMaps {
            label,
            spatial,
            channel,
            patch_grid,
        });
    });
}

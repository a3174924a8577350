use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ClockValue, Modulus, NodeId, NodeSet, Params};
use crate::enmasse::TimestampRecord;
use crate::{Error, Result};

/// An `n x n` matrix of registers, indexed `(writer, reader)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterMatrix<T> {
    n: usize,
    cells: Vec<T>,
}

impl<T: Clone> RegisterMatrix<T> {
    pub fn filled(n: usize, value: T) -> Self {
        RegisterMatrix { n, cells: alloc::vec![value; n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(NodeId, NodeId) -> T) -> Self {
        let mut cells = Vec::with_capacity(n * n);
        for w in 0..n {
            for r in 0..n {
                cells.push(f(w, r));
            }
        }
        RegisterMatrix { n, cells }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, writer: NodeId, reader: NodeId) -> &T {
        &self.cells[writer * self.n + reader]
    }

    pub fn set(&mut self, writer: NodeId, reader: NodeId, value: T) {
        self.cells[writer * self.n + reader] = value;
    }

    pub fn set_row(&mut self, writer: NodeId, value: &T) {
        for cell in self.row_mut(writer) {
            *cell = value.clone();
        }
    }

    pub fn row(&self, writer: NodeId) -> &[T] {
        &self.cells[writer * self.n..(writer + 1) * self.n]
    }

    fn row_mut(&mut self, writer: NodeId) -> &mut [T] {
        &mut self.cells[writer * self.n..(writer + 1) * self.n]
    }

    /// Cells read by `reader`, in writer order.
    pub fn column(&self, reader: NodeId) -> impl Iterator<Item = &T> + '_ {
        (0..self.n).map(move |w| self.get(w, reader))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultStatus {
    NonFaulty,
    Byzantine,
}

/// Published and local state of the timestamp layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseState {
    pub registers: RegisterMatrix<TimestampRecord>,
    pub locals: Vec<TimestampRecord>,
}

/// Full global state: registers, node-local state and fault status.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    /// Clock registers. Contents are raw integers; readers reduce them mod k.
    pub clock: RegisterMatrix<i64>,
    /// Local `my_val` of every node, arbitrary until the node's first step.
    pub my_val: Vec<i64>,
    /// Present when the timestamp layer runs.
    pub enmasse: Option<EnMasseState>,
    pub fault: Vec<FaultStatus>,
    pub captures_remaining: usize,
}

impl Configuration {
    /// All clock registers and local values set to `value`, no timestamp layer.
    pub fn uniform(params: &Params, value: i64, faulty: NodeSet) -> Configuration {
        let n = params.n;
        Configuration {
            clock: RegisterMatrix::filled(n, value),
            my_val: alloc::vec![value; n],
            enmasse: None,
            fault: (0..n)
                .map(|p| if faulty.contains(p) { FaultStatus::Byzantine } else { FaultStatus::NonFaulty })
                .collect(),
            captures_remaining: params.f.saturating_sub(faulty.len()),
        }
    }

    pub fn n(&self) -> usize {
        self.my_val.len()
    }

    pub fn is_faulty(&self, p: NodeId) -> bool {
        self.fault[p] == FaultStatus::Byzantine
    }

    pub fn faulty_set(&self) -> NodeSet {
        (0..self.n()).filter(|&p| self.is_faulty(p)).collect()
    }

    pub fn honest_set(&self) -> NodeSet {
        NodeSet::full(self.n()).difference(self.faulty_set())
    }

    /// Copy of this configuration with the given nodes marked Byzantine.
    /// Checkers use it to evaluate a configuration against the set of nodes
    /// that stay non-faulty for a whole run.
    pub fn with_faulty(&self, faulty: NodeSet) -> Configuration {
        let mut c = self.clone();
        c.set_faulty_view(faulty);
        c
    }

    pub(crate) fn set_faulty_view(&mut self, faulty: NodeSet) {
        for p in 0..self.n() {
            self.fault[p] = if faulty.contains(p) { FaultStatus::Byzantine } else { FaultStatus::NonFaulty };
        }
    }

    /// Register column of `reader`, reduced mod k.
    pub fn read_column(&self, reader: NodeId, m: Modulus) -> Vec<ClockValue> {
        self.clock.column(reader).map(|&raw| m.reduce(raw)).collect()
    }

    pub fn clock_value(&self, p: NodeId, m: Modulus) -> ClockValue {
        m.reduce(self.my_val[p])
    }

    /// Every node in `nodes` has its current `my_val` in all of its write
    /// registers (compared mod k). Holds for a non-faulty node from its first
    /// step after the last transient fault onward.
    pub fn registers_consistent(&self, nodes: NodeSet, m: Modulus) -> bool {
        nodes.iter().all(|q| {
            let own = m.reduce(self.my_val[q]);
            self.clock.row(q).iter().all(|&raw| m.reduce(raw) == own)
        })
    }

    /// Structural checks and the fault-budget invariant.
    pub fn validate(&self, params: &Params) -> Result<()> {
        let n = params.n;
        if self.clock.n() != n || self.my_val.len() != n || self.fault.len() != n {
            return Err(Error::Parameter(format!("configuration is not sized for n={n}")));
        }
        if self.faulty_set().len() + self.captures_remaining > params.f {
            return Err(Error::Parameter(format!(
                "{} Byzantine nodes plus {} remaining captures exceed f={}",
                self.faulty_set().len(),
                self.captures_remaining,
                params.f
            )));
        }
        if let Some(em) = &self.enmasse {
            if em.registers.n() != n || em.locals.len() != n {
                return Err(Error::Parameter("timestamp state is not sized for n".into()));
            }
        }
        Ok(())
    }
}

/// One elementary change to a configuration. A step's delta is the list of
/// changes it made, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Change {
    ClockRow { writer: NodeId, value: i64 },
    ClockCell { writer: NodeId, reader: NodeId, value: i64 },
    ClockCells { writer: NodeId, readers: NodeSet, value: i64 },
    MyVal { node: NodeId, value: i64 },
    RecordRow { writer: NodeId, record: TimestampRecord },
    RecordCell { writer: NodeId, reader: NodeId, record: TimestampRecord },
    RecordCells { writer: NodeId, readers: NodeSet, record: TimestampRecord },
    LocalRecord { node: NodeId, record: TimestampRecord },
    Capture { node: NodeId },
}

impl Change {
    pub fn apply(&self, c: &mut Configuration) -> Result<()> {
        let n = c.n();
        let check = |p: NodeId| {
            if p < n {
                Ok(())
            } else {
                Err(Error::Trace(format!("node {p} out of range")))
            }
        };
        match self {
            Change::ClockRow { writer, value } => {
                check(*writer)?;
                c.clock.set_row(*writer, value);
            }
            Change::ClockCell { writer, reader, value } => {
                check(*writer)?;
                check(*reader)?;
                c.clock.set(*writer, *reader, *value);
            }
            Change::ClockCells { writer, readers, value } => {
                check(*writer)?;
                for r in readers.iter() {
                    check(r)?;
                    c.clock.set(*writer, r, *value);
                }
            }
            Change::MyVal { node, value } => {
                check(*node)?;
                c.my_val[*node] = *value;
            }
            Change::RecordRow { writer, record } => {
                check(*writer)?;
                enmasse_mut(c)?.registers.set_row(*writer, record);
            }
            Change::RecordCell { writer, reader, record } => {
                check(*writer)?;
                check(*reader)?;
                enmasse_mut(c)?.registers.set(*writer, *reader, record.clone());
            }
            Change::RecordCells { writer, readers, record } => {
                check(*writer)?;
                let em = enmasse_mut(c)?;
                for r in readers.iter() {
                    check(r)?;
                    em.registers.set(*writer, r, record.clone());
                }
            }
            Change::LocalRecord { node, record } => {
                check(*node)?;
                enmasse_mut(c)?.locals[*node] = record.clone();
            }
            Change::Capture { node } => {
                check(*node)?;
                if c.fault[*node] == FaultStatus::NonFaulty {
                    c.fault[*node] = FaultStatus::Byzantine;
                    c.captures_remaining = c.captures_remaining.saturating_sub(1);
                }
            }
        }
        Ok(())
    }
}

fn enmasse_mut(c: &mut Configuration) -> Result<&mut EnMasseState> {
    c.enmasse
        .as_mut()
        .ok_or_else(|| Error::Trace("record change without timestamp state".into()))
}

/// Applies changes to a configuration while recording them as a delta.
pub struct ConfigWriter<'a> {
    config: &'a mut Configuration,
    changes: Vec<Change>,
}

impl<'a> ConfigWriter<'a> {
    pub fn new(config: &'a mut Configuration) -> Self {
        ConfigWriter { config, changes: Vec::new() }
    }

    pub fn config(&self) -> &Configuration {
        self.config
    }

    pub fn push(&mut self, change: Change) {
        change.apply(self.config).expect("writer changes are in range");
        self.changes.push(change);
    }

    pub fn write_clock_row(&mut self, writer: NodeId, value: i64) {
        self.push(Change::ClockRow { writer, value });
    }

    pub fn write_clock_cell(&mut self, writer: NodeId, reader: NodeId, value: i64) {
        self.push(Change::ClockCell { writer, reader, value });
    }

    pub fn set_my_val(&mut self, node: NodeId, value: i64) {
        self.push(Change::MyVal { node, value });
    }

    pub fn into_delta(self) -> Vec<Change> {
        self.changes
    }
}

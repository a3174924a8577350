//! Line-delimited JSON traces: a header line, the initial configuration,
//! then one event per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use clocksync_core::kernel::{Configuration, RunTrace, StepEvent, TraceHeader, TRACE_FORMAT, TRACE_VERSION};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{io_err, HarnessError, Result};

fn line<T: Serialize>(out: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

pub fn write_trace(out: &mut impl Write, trace: &RunTrace) -> std::io::Result<()> {
    line(out, &trace.header)?;
    line(out, trace.initial())?;
    for e in trace.events() {
        line(out, e)?;
    }
    Ok(())
}

pub fn trace_bytes(trace: &RunTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace).expect("writing to memory");
    buf
}

pub fn save_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_trace(&mut out, trace).and_then(|_| out.flush()).map_err(io_err(path))
}

fn parse<T: DeserializeOwned>(text: &str, n: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| HarnessError::Trace { line: n, message: e.to_string() })
}

/// Reads a trace and replays its deltas.
pub fn read_trace(input: impl BufRead) -> Result<RunTrace> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((i, l)) => l
                .map(|l| Some((i + 1, l)))
                .map_err(|e| HarnessError::Trace { line: i + 1, message: format!("{what}: {e}") }),
        }
    };
    let missing = |line, what: &str| HarnessError::Trace { line, message: format!("missing {what}") };
    let (n, text) = next("header")?.ok_or_else(|| missing(1, "header"))?;
    let header: TraceHeader = parse(&text, n)?;
    if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
        return Err(HarnessError::Trace {
            line: 1,
            message: format!("unsupported trace format {} v{}", header.format, header.version),
        });
    }
    let (n, text) = next("initial configuration")?.ok_or_else(|| missing(2, "initial configuration"))?;
    let initial: Configuration = parse(&text, n)?;
    initial.validate(&header.params)?;
    let mut trace = RunTrace::new(header, initial);
    while let Some((n, text)) = next("event")? {
        if text.trim().is_empty() {
            continue;
        }
        let e: StepEvent = parse(&text, n)?;
        trace.push(e).map_err(|e| HarnessError::Trace { line: n, message: e.to_string() })?;
    }
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<RunTrace> {
    let file = File::open(path).map_err(io_err(path))?;
    read_trace(BufReader::new(file))
}

//! CSV reporting.
//!
//! Columns, in order: workload, operation, app_tom, tom_tps, cache,
//! switchless, iters, warmup, median_ns, median_cycles, ci_low_ns,
//! ci_high_ns, overhead. `median_cycles` is empty without a cycle counter;
//! `overhead` is the median relative to the LPC/LPC row of the same
//! workload, operation, cache and switchless setting, empty when the table
//! has no such row.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub workload: String,
    pub operation: String,
    pub app_tom: String,
    pub tom_tps: String,
    pub cache: String,
    pub switchless: String,
    pub iters: u64,
    pub warmup: u64,
    pub median_ns: f64,
    pub median_cycles: Option<f64>,
    pub ci_low_ns: f64,
    pub ci_high_ns: f64,
    pub overhead: Option<f64>,
}

impl Row {
    pub fn is_integrated(&self) -> bool {
        self.app_tom == "lpc" && self.tom_tps == "lpc"
    }

    fn same_measurement(&self, other: &Row) -> bool {
        self.workload == other.workload && self.operation == other.operation && self.cache == other.cache
    }
}

/// Fills in `overhead` for every row that has an LPC/LPC reference. The
/// switchless toggle has no effect without a TEE, so the reference is taken
/// with the toggle off when available.
pub fn fill_overhead(rows: &mut [Row]) {
    let refs: Vec<Row> = rows.iter().filter(|r| r.is_integrated()).cloned().collect();
    for row in rows.iter_mut() {
        let reference =
            refs.iter().filter(|r| r.same_measurement(row)).min_by_key(|r| (r.switchless != row.switchless) as u8);
        row.overhead = reference.map(|r| row.median_ns / r.median_ns);
    }
}

pub fn write_csv(rows: &[Row], out: impl Write) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<Row>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

/// Plot data: one line per row, `label median ci_low ci_high`, for gnuplot
/// style error bars.
pub fn plot_data(rows: &[Row]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{}/{}/{}/{}{} {} {} {}\n",
                r.workload,
                r.operation,
                r.app_tom,
                r.tom_tps,
                if r.cache == "on" { "+cache" } else { "" },
                r.median_ns,
                r.ci_low_ns,
                r.ci_high_ns
            )
        })
        .collect()
}

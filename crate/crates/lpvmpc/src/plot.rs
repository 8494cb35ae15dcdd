//! Emits a matplotlib script that plots an exported CSV log.

use std::path::Path;

use crate::error::{Error, Result};
use crate::log::ClosedLoopLog;

/// Column names the generated script reads; all of them are CSV header entries.
pub fn plotted_columns(log: &ClosedLoopLog) -> Vec<String> {
    let header = log.csv_header();
    let keep = |h: &String| {
        let group = h.split('.').next().unwrap_or("");
        matches!(group, "y" | "u" | "rho") || h == "k" || h == "solve_time[s]"
    };
    header.into_iter().filter(keep).collect()
}

fn py_str(s: &str) -> String {
    format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
}

fn py_list<'a>(items: impl IntoIterator<Item = &'a String>) -> String {
    let v: Vec<String> = items.into_iter().map(|s| py_str(s)).collect();
    format!("[{}]", v.join(", "))
}

/// Script text; `csv_name` is the CSV file name relative to the script.
pub fn script(log: &ClosedLoopLog, csv_name: &str) -> String {
    let cols = plotted_columns(log);
    let of = |g: &str| cols.iter().filter(|c| c.starts_with(&format!("{g}."))).collect::<Vec<_>>();
    let (ys, us, rhos) = (of("y"), of("u"), of("rho"));
    let ts = log.meta.sample_time;
    let refs: Vec<String> = log
        .meta
        .references
        .iter()
        .map(|(k, y)| format!("({k}, [{}])", y.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!(
        r#"#!/usr/bin/env python3
# Closed-loop plot for scenario {scenario}, arm {arm}.
import csv
import os

import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
CSV = os.path.join(HERE, {csv})
COLUMNS = {columns}
OUTPUTS = {ys}
INPUTS = {us}
SCHEDULING = {rhos}
REFERENCES = [{refs}]
TS = {ts:?}

with open(CSV, newline="") as f:
    rows = list(csv.DictReader(f))
missing = [c for c in COLUMNS if c not in rows[0]]
if missing:
    raise SystemExit("columns missing from %s: %s" % (CSV, missing))
data = {{c: [float(r[c]) for r in rows] for c in COLUMNS}}
t = [k * TS for k in data["k"]]


def reference(i):
    out = []
    for k in data["k"]:
        val = REFERENCES[0][1][i]
        for start, y in REFERENCES:
            if start <= k:
                val = y[i]
        out.append(val)
    return out


n = len(OUTPUTS) + 3
fig, axes = plt.subplots(n, 1, sharex=True, figsize=(8, 2.2 * n))
for i, col in enumerate(OUTPUTS):
    axes[i].plot(t, data[col], label=col)
    axes[i].plot(t, reference(i), "--", label="reference")
    axes[i].legend(loc="best")
ax = axes[len(OUTPUTS)]
for col in INPUTS:
    ax.step(t, data[col], where="post", label=col)
ax.legend(loc="best")
ax = axes[len(OUTPUTS) + 1]
for col in SCHEDULING:
    ax.plot(t, data[col], label=col)
ax.set_ylabel("rho")
ax = axes[len(OUTPUTS) + 2]
ax.plot(t, [1e3 * v for v in data["solve_time[s]"]])
ax.set_ylabel("t_c [ms]")
axes[-1].set_xlabel("time [s]")
fig.tight_layout()
fig.savefig(os.path.join(HERE, {png}), dpi=120)
"#,
        scenario = log.meta.scenario,
        arm = log.meta.arm,
        csv = py_str(csv_name),
        columns = py_list(&cols),
        ys = py_list(ys),
        us = py_list(us),
        rhos = py_list(rhos),
        refs = refs.join(", "),
        png = py_str(&format!("{}.png", csv_name.trim_end_matches(".csv"))),
    )
}

pub fn write_script(log: &ClosedLoopLog, csv_name: &str, path: &Path) -> Result<()> {
    std::fs::write(path, script(log, csv_name)).map_err(|e| Error::io(path, e))
}

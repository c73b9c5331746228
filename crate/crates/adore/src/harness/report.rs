//! CSV, plain-text table, and gnuplot script emission.

use std::path::Path;

use crate::error::{Error, Result};

pub fn write_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.len() * 32 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Fixed-width table with a title line, for the human-readable reports.
pub fn render_table(title: &str, headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let line = |cells: &[String], widths: &[usize]| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(&format!("{c:>w$}", w = w));
        }
        s.push('\n');
        s
    };
    let hcells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    out.push_str(&line(&hcells, &widths));
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row, &widths));
    }
    out
}

/// Companion gnuplot script so the CSVs plot without further tooling.
pub fn gnuplot_script() -> String {
    let mut s = String::new();
    s.push_str("# gnuplot script for the emitted CSVs\n");
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n\n");
    s.push_str("set terminal pngcairo size 900,600\n\n");
    s.push_str("set output 'throughput.png'\n");
    s.push_str("set xlabel 'generated length'; set ylabel 'tokens/sec'\n");
    s.push_str(
        "plot for [p in 'full window strided sink h2o adore'] \\\n    '< grep -E \"^(policy|\\'.p.\\',)\" bench.csv' using 2:4 with linespoints title p\n\n",
    );
    s.push_str("set output 'perplexity.png'\n");
    s.push_str("set xlabel 'length bucket'; set ylabel 'log ppl'\n");
    s.push_str(
        "plot for [p in 'full window strided sink h2o adore'] \\\n    '< grep -E \"^(policy|\\'.p.\\',)\" ppl.csv' using 2:(log($4)) with linespoints title p\n\n",
    );
    s.push_str("set output 'attention_curve.png'\n");
    s.push_str("set xlabel 'rank'; set ylabel 'softmax weight'; set logscale y\n");
    s.push_str("plot 'analyze_curve.csv' using 1:2 with lines title 'mean sorted row'\n");
    s
}

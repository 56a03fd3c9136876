//! Payload stream files: one payload per line, components separated by `;`
//! or `,`. Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use memfigless_core::PayloadVector;

pub fn parse(text: &str) -> Result<Vec<PayloadVector>> {
    let mut out: Vec<PayloadVector> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split([';', ','])
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("line {}: not a list of numbers", i + 1))?;
        let p = PayloadVector::new(values).with_context(|| format!("line {}", i + 1))?;
        if let Some(first) = out.first() {
            if first.dims() != p.dims() {
                bail!(
                    "line {}: {} components, earlier lines have {}",
                    i + 1,
                    p.dims(),
                    first.dims()
                );
            }
        }
        out.push(p);
    }
    Ok(out)
}

pub fn render(payloads: &[PayloadVector]) -> String {
    let mut out = String::new();
    for p in payloads {
        let _ = writeln!(out, "{p}");
    }
    out
}

/// `count` payloads evenly spaced from `min` to `max`, every component equal.
pub fn linspace(min: f64, max: f64, count: usize, dims: usize) -> Result<Vec<PayloadVector>> {
    if dims == 0 {
        bail!("payloads need at least one dimension");
    }
    if !(min.is_finite() && max.is_finite() && min <= max) {
        bail!("bad payload range [{min}, {max}]");
    }
    (0..count)
        .map(|i| {
            let v = if count == 1 {
                min
            } else {
                min + (max - min) * i as f64 / (count - 1) as f64
            };
            Ok(PayloadVector::new(vec![v; dims])?)
        })
        .collect()
}

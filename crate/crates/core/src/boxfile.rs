//! `x,y,w,h` box files: one pixel box per line, top-left convention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::PixelBox;

pub fn format_boxes(boxes: &[PixelBox]) -> String {
    let mut s = String::with_capacity(boxes.len() * 32);
    for b in boxes {
        writeln!(s, "{:.3},{:.3},{:.3},{:.3}", b.x, b.y, b.w, b.h).expect("writing to a String");
    }
    s
}

pub fn write_boxes(path: &Path, boxes: &[PixelBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

pub fn parse_boxes(text: &str) -> Result<Vec<PixelBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split([',', ' ', '\t'])
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("line {}: expected four finite numbers, got {line:?}", n + 1)));
        }
        out.push(PixelBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<PixelBox>> {
    parse_boxes(&fs::read_to_string(path)?)
}

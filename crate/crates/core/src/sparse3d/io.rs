//! Point table files.
//!
//! Both forms start with one ASCII header line.
//!
//! Text form:
//! ```text
//! <N> 6
//! x y z r g b        (N lines, whitespace separated, shortest round-trip decimals)
//! ```
//!
//! Binary form:
//! ```text
//! <N> 6 f64le\n
//! N × 6 IEEE-754 binary64 values, little-endian, row-major (x y z r g b per row)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{PointCloud, POINT_DIM};
use crate::error::{format_err, Result};

const BINARY_TAG: &str = "f64le";

pub fn write_text(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_text_to(cloud, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_text_to(cloud: &PointCloud, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{} {POINT_DIM}", cloud.len())?;
    for p in cloud.points() {
        writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], p[3], p[4], p[5])?;
    }
    Ok(())
}

pub fn write_binary(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{} {POINT_DIM} {BINARY_TAG}", cloud.len())?;
    for p in cloud.points() {
        for v in p {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads either form, chosen by the header.
pub fn read(path: &Path) -> Result<PointCloud> {
    let mut reader = BufReader::new(crate::error::open_file(path)?);
    read_from(&mut reader)
}

pub fn read_from(reader: &mut impl BufRead) -> Result<PointCloud> {
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n, binary) = match fields.as_slice() {
        [n, d] if *d == "6" => (n, false),
        [n, d, tag] if *d == "6" && *tag == BINARY_TAG => (n, true),
        _ => return Err(format_err(format!("bad point table header {header:?}"))),
    };
    let n: usize = n
        .parse()
        .map_err(|_| format_err(format!("bad point count {n:?}")))?;
    let mut points = Vec::with_capacity(n);
    if binary {
        let mut buf = [0u8; 8 * POINT_DIM];
        for _ in 0..n {
            reader.read_exact(&mut buf)?;
            let mut p = [0.0; POINT_DIM];
            for (j, v) in p.iter_mut().enumerate() {
                *v = f64::from_le_bytes(buf[j * 8..(j + 1) * 8].try_into().expect("8 bytes"));
            }
            points.push(p);
        }
    } else {
        let mut line = String::new();
        for row in 0..n {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(format_err(format!("point table ends at row {row} of {n}")));
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(format!("row {row}: {e}")))?;
            let p: [f64; POINT_DIM] = vals
                .try_into()
                .map_err(|_| format_err(format!("row {row} does not have 6 values")))?;
            points.push(p);
        }
    }
    PointCloud::new(points)
}

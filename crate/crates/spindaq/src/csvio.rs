//! CSV and raw packet-log output.
//!
//! Floats are written with 17 significant digits so a written file reparses
//! to bit-identical values; lines end with LF regardless of platform.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::codec::AcqPacket;

/// Format a float so that parsing the text recovers the exact same bits.
/// 17 significant digits are sufficient for any f64.
pub fn format_float(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Write a table of equally long columns. `header` entries must not contain
/// commas or newlines.
pub fn write_csv(path: &Path, header: &[&str], columns: &[&[f64]]) -> io::Result<()> {
    assert_eq!(header.len(), columns.len(), "one header per column");
    let rows = columns.first().map_or(0, |c| c.len());
    for c in columns {
        assert_eq!(c.len(), rows, "ragged columns");
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.join(",").as_bytes())?;
    w.write_all(b"\n")?;
    let mut line = String::new();
    for r in 0..rows {
        line.clear();
        for (i, c) in columns.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format_float(c[r]));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()
}

/// Read back a file produced by [`write_csv`]: returns (header, columns).
pub fn read_csv(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: Vec<String> = match lines.next() {
        Some(l) => l?.split(',').map(str::to_owned).collect(),
        None => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "empty csv")),
    };
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for (i, field) in line.split(',').enumerate() {
            let v = field.parse::<f64>().map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("bad float {field:?}: {e}"))
            })?;
            columns
                .get_mut(i)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "too many fields"))?
                .push(v);
            n = i + 1;
        }
        if n != header.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "short row"));
        }
    }
    Ok((header, columns))
}

/// Dump packets as consecutive 16-byte wire records. This is a function of
/// the packet stream alone, independent of how reads were chunked, so two
/// equal acquisitions produce byte-identical logs.
pub fn write_packet_log(path: &Path, packets: &[AcqPacket]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in packets {
        let rec = p
            .pack()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        w.write_all(&rec)?;
    }
    w.flush()
}

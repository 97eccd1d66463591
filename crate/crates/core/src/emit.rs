//! Output file formats: atomic writes, CSV, 16-bit PGM heatmaps, JSON.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes via a temp file in the target directory plus rename, so repeated
/// runs either fully replace the output or leave the old one intact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Path-field CSV: `index,count_numerator,count_denominator,float`.
pub fn path_field_csv(field: &crate::lattice::PathField) -> String {
    let mut out = String::from("index,count_numerator,count_denominator,float\n");
    for i in 0..field.numer.len() {
        let (num, den) = field.reduced(i);
        out.push_str(&format!("{i},{num},{den},{}\n", format_float(field.value(i))));
    }
    out
}

/// Landscape/prediction CSV: `row,col,value` (rank-1 fields use col 0).
pub fn grid_csv(values: &[f64], extent: &[usize]) -> String {
    let (rows, cols) = match extent {
        [n] => (*n, 1),
        [w, h] => (*w, *h),
        other => panic!("grid_csv expects rank 1 or 2, got {other:?}"),
    };
    let mut out = String::from("row,col,value\n");
    for r in 0..rows {
        for c in 0..cols {
            out.push_str(&format!("{r},{c},{}\n", format_float(values[r * cols + c])));
        }
    }
    out
}

fn format_float(v: f64) -> String {
    // shortest representation that round-trips, for byte-stable outputs
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// 16-bit binary PGM (maxval 65535, big-endian samples) with min/max recorded
/// in a `<path>.minmax.txt` sidecar. Rows run over the first extent.
pub fn write_pgm16(path: &Path, values: &[f64], extent: &[usize]) -> Result<()> {
    let (rows, cols) = match extent {
        [n] => (*n, 1),
        [w, h] => (*w, *h),
        other => panic!("write_pgm16 expects rank 1 or 2, got {other:?}"),
    };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in values {
        let q = if span > 0.0 { ((v - min) / span * 65535.0).round() as u16 } else { 0 };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    atomic_write(path, &bytes)?;
    let sidecar = path.with_extension(format!(
        "{}minmax.txt",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    atomic_write(&sidecar, format!("min {min}\nmax {max}\n").as_bytes())?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_csv_layout() {
        let csv = grid_csv(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(csv, "row,col,value\n0,0,1.0\n0,1,2.0\n1,0,3.0\n1,1,4.0\n");
    }

    #[test]
    fn pgm_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm16(&p, &[0.0, 0.5, 1.0, 0.25], &[2, 2]).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_pgm16(&p, &[0.0, 0.5, 1.0, 0.25], &[2, 2]).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert!(p.with_extension("pgm.minmax.txt").exists());
    }
}

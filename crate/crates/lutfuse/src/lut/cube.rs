//! Iridas/Resolve `.cube` text files: `LUT_3D_SIZE` header, R-fastest data
//! rows, six decimal places.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lut::Lut3d;

/// Writes a display-ready LUT (every value finite and in [0,1]).
pub fn write_cube(path: &Path, lut: &Lut3d) -> Result<()> {
    if !lut.is_display_ready() {
        return Err(Error::InvalidArgument(
            "cube export requires a display-ready LUT with values in [0,1]".into(),
        ));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "TITLE \"lutfuse\"").map_err(io)?;
    writeln!(w, "LUT_3D_SIZE {}", lut.n()).map_err(io)?;
    let n = lut.n();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let v = lut.get(i, j, k);
                writeln!(w, "{:.6} {:.6} {:.6}", v[0], v[1], v[2]).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<Lut3d> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut size: Option<usize> = None;
    let mut data: Vec<f32> = Vec::new();
    let mut data_line = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("LUT_3D_SIZE") {
            let n: usize = rest.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid LUT_3D_SIZE value `{}`", rest.trim()),
            })?;
            if n < 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("LUT_3D_SIZE must be at least 2, got {n}"),
                });
            }
            size = Some(n);
            continue;
        }
        if line.starts_with("TITLE")
            || line.starts_with("DOMAIN_MIN")
            || line.starts_with("DOMAIN_MAX")
            || line.starts_with("LUT_1D_SIZE")
        {
            continue;
        }
        // data row: three floats
        let mut vals = [0.0f32; 3];
        let mut it = line.split_whitespace();
        for v in vals.iter_mut() {
            let tok = it.next().ok_or(Error::Parse {
                line: lineno,
                msg: "expected three values per data row".into(),
            })?;
            *v = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid float `{tok}`"),
            })?;
        }
        if it.next().is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected exactly three values per data row".into(),
            });
        }
        data.extend_from_slice(&vals);
        data_line = lineno;
    }

    let n = size.ok_or(Error::Parse {
        line: text.lines().count(),
        msg: "missing LUT_3D_SIZE header".into(),
    })?;
    let expected = n * n * n;
    if data.len() / 3 != expected {
        return Err(Error::Parse {
            line: data_line,
            msg: format!(
                "LUT_3D_SIZE {n} expects {expected} data rows, found {}",
                data.len() / 3
            ),
        });
    }
    Lut3d::new(n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::identity_lut;

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.cube");
        let lut = identity_lut(7).unwrap();
        write_cube(&path, &lut).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back.n(), 7);
        for (a, b) in lut.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minimal_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.cube");
        let mut text = String::from("LUT_3D_SIZE 2\n");
        for _ in 0..8 {
            text.push_str("0 0 0\n");
        }
        fs::write(&path, text).unwrap();
        let lut = read_cube(&path).unwrap();
        assert_eq!(lut.n(), 2);
        assert!(lut.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_data_names_expected_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.cube");
        let mut text = String::from("LUT_3D_SIZE 2\n");
        for _ in 0..7 {
            text.push_str("0 0 0\n");
        }
        fs::write(&path, text).unwrap();
        match read_cube(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("expects 8"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_float_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cube");
        fs::write(&path, "LUT_3D_SIZE 2\n0 0 0\n0 0 zebra\n").unwrap();
        match read_cube(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn write_rejects_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oob.cube");
        let mut lut = identity_lut(2).unwrap();
        lut.values_mut()[0] = 1.5;
        assert!(write_cube(&path, &lut).is_err());
    }
}

//! CSV, JSON and plot-data serializers.
//!
//! Field CSVs list the mask cells in index order with columns
//! `i, j, x, y, value` (scalar) or `i, j, x, y, vx, vy` (vector). The grid is
//! described by a [`GridHeader`] written as a JSON sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distribution::LevelProfile;
use crate::grid::{DomainGrid, GridHeader, ScalarField, VectorField};
use crate::maximal::{MaximalMeta, MaximalResult};
use crate::{Error, Real, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_field_csv<T: Real, W: Write>(w: W, f: &ScalarField<T>) -> Result<()> {
    let g = f.grid();
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["i", "j", "x", "y", "value"]).map_err(csv_err)?;
    for k in g.cells() {
        let (i, j) = g.ij(k);
        let (x, y) = g.center(k);
        c.serialize((i, j, x.to_f64_lossy(), y.to_f64_lossy(), f.get(k).to_f64_lossy())).map_err(csv_err)?;
    }
    c.flush()?;
    Ok(())
}

pub fn write_vector_csv<T: Real, W: Write>(w: W, f: &VectorField<T>) -> Result<()> {
    let g = f.grid();
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["i", "j", "x", "y", "vx", "vy"]).map_err(csv_err)?;
    for k in g.cells() {
        let (i, j) = g.ij(k);
        let (x, y) = g.center(k);
        let (a, b) = f.get(k);
        c.serialize((i, j, x.to_f64_lossy(), y.to_f64_lossy(), a.to_f64_lossy(), b.to_f64_lossy()))
            .map_err(csv_err)?;
    }
    c.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct FieldRow {
    i: usize,
    j: usize,
    value: f64,
}

/// Reads a scalar field CSV; the mask is the set of listed cells.
pub fn read_field_csv<T: Real, R: Read>(r: R, header: &GridHeader) -> Result<ScalarField<T>> {
    let (nx, ny) = header.dims;
    let mut mask = vec![false; nx * ny];
    let mut values = vec![T::zero(); nx * ny];
    let mut c = csv::Reader::from_reader(r);
    for (line, row) in c.deserialize::<FieldRow>().enumerate() {
        let row = row.map_err(|e| Error::Io(format!("field csv row {}: {e}", line + 2)))?;
        if row.i >= nx || row.j >= ny {
            return Err(Error::Io(format!("field csv row {}: cell ({}, {}) outside {nx}×{ny}", line + 2, row.i, row.j)));
        }
        let k = row.j * nx + row.i;
        mask[k] = true;
        values[k] = T::lit(row.value);
    }
    let origin = (T::lit(header.origin.0), T::lit(header.origin.1));
    let grid = DomainGrid::from_mask(header.shape_tag, nx, ny, T::lit(header.h), origin, mask)?;
    ScalarField::from_values(Arc::new(grid), values)
}

pub fn write_profile_csv<T: Real, W: Write>(w: W, p: &LevelProfile<T>) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["lambda", "measure"]).map_err(csv_err)?;
    for (l, m) in p.lambdas().iter().zip(&p.measures) {
        c.serialize((l.to_f64_lossy(), m.to_f64_lossy())).map_err(csv_err)?;
    }
    c.flush()?;
    Ok(())
}

/// One CSV row per element, with the header taken from the field names.
pub fn write_rows_csv<S: Serialize, W: Write>(w: W, rows: &[S]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    for r in rows {
        c.serialize(r).map_err(csv_err)?;
    }
    c.flush()?;
    Ok(())
}

/// Two-column plot data with a `#` comment header readable by gnuplot.
pub fn write_dat<W: Write>(mut w: W, title: &str, columns: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "# {title}")?;
    writeln!(w, "# {} {}", columns.0, columns.1)?;
    for (x, y) in points {
        writeln!(w, "{x:e} {y:e}")?;
    }
    Ok(())
}

pub fn to_json<S: Serialize>(v: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    fs::write(path, to_json(v)?)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<GridHeader> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize)]
pub struct MaximalDoc {
    pub grid: GridHeader,
    pub meta: MaximalMeta,
}

pub fn maximal_doc<T: Real>(m: &MaximalResult<T>) -> MaximalDoc {
    MaximalDoc { grid: m.field.grid().header(), meta: m.meta() }
}

/// Writes `<stem>.csv` and the grid header `<stem>.json` into `dir`.
pub fn save_field<T: Real>(dir: &Path, stem: &str, f: &ScalarField<T>) -> Result<Vec<String>> {
    let csv = format!("{stem}.csv");
    let json = format!("{stem}.json");
    write_field_csv(fs::File::create(dir.join(&csv))?, f)?;
    write_json(&dir.join(&json), &f.grid().header())?;
    Ok(vec![csv, json])
}

/// Loads a field saved by [`save_field`]; the header is `<csv stem>.json`.
pub fn load_field<T: Real>(csv: &Path) -> Result<ScalarField<T>> {
    let header = read_header(&csv.with_extension("json"))?;
    read_field_csv(fs::File::open(csv)?, &header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{dist_fn, LevelGrid};
    use crate::grid::ShapeTag;

    #[test]
    fn field_round_trip() {
        let g = Arc::new(DomainGrid::<f64>::new(ShapeTag::Lshape, 8, 8, 0.125).unwrap());
        let f = ScalarField::from_fn(g.clone(), |x, y| (3.0 * x).sin() + y / 7.0);
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,x,y,value\n"));
        assert_eq!(text.lines().count(), g.mask_count() + 1);
        let back: ScalarField<f64> = read_field_csv(&buf[..], &g.header()).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid().mask(), g.mask());
    }

    #[test]
    fn bad_rows_are_located() {
        let g = DomainGrid::<f64>::new(ShapeTag::Square, 4, 4, 0.25).unwrap();
        let text = "i,j,x,y,value\n0,0,0.125,0.125,1\n5,0,0,0,1\n";
        let e = read_field_csv::<f64, _>(text.as_bytes(), &g.header()).unwrap_err();
        assert!(e.to_string().contains("row 3"), "{e}");
    }

    #[test]
    fn profile_and_dat_layout() {
        let g = Arc::new(DomainGrid::<f64>::new(ShapeTag::Square, 4, 4, 0.25).unwrap());
        let f = ScalarField::from_fn(g, |x, _| x);
        let p = dist_fn(&f, &LevelGrid::new(vec![0.1, 0.5]).unwrap());
        let mut buf = Vec::new();
        write_profile_csv(&mut buf, &p).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "lambda,measure\n0.1,1.0\n0.5,0.5\n");
        let mut buf = Vec::new();
        write_dat(&mut buf, "C(eps)", ("eps", "C"), &[(0.1, 2.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# C(eps)\n# eps C\n1e-1 2e0\n");
    }
}

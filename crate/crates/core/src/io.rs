//! Grid and boundary-data files.
//!
//! Grids are written as CSV with header `x,y,value`, one row per node with
//! `j` outer and `i` inner, every number in `{:.16e}` (17 significant
//! digits, so a read-back is bit exact), or as binary 8-bit PGM images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::config::GridFormat;
use crate::error::{Error, Result};
use crate::forward::{BoundaryData, GridField};
use crate::grid::{AngleGrid, Grid2D};

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("line {line}: cannot parse number '{s}'")))
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("grid has non-finite values".into()));
    }
    Ok(())
}

/// CSV of `field` at node coordinates `xs × ys`.
pub fn write_grid_csv(field: &GridField, xs: &[f64], ys: &[f64], w: &mut impl Write) -> Result<()> {
    if xs.len() != field.nx || ys.len() != field.ny {
        return Err(Error::InvalidArgument(format!(
            "field is {}x{} but coordinates are {}x{}",
            field.nx,
            field.ny,
            xs.len(),
            ys.len()
        )));
    }
    check_finite(&field.values)?;
    writeln!(w, "x,y,value")?;
    for (j, y) in ys.iter().enumerate() {
        for (i, x) in xs.iter().enumerate() {
            writeln!(w, "{x:.16e},{y:.16e},{:.16e}", field.get(i, j))?;
        }
    }
    Ok(())
}

/// Read a grid CSV; returns the field and its distinct x and y coordinates.
pub fn read_grid_csv(r: impl BufRead) -> Result<(GridField, Vec<f64>, Vec<f64>)> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "x,y,value" {
        return Err(Error::InvalidArgument(format!("unexpected grid header '{header}'")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!("line {}: expected 3 columns", ln + 2)));
        }
        rows.push([
            parse_f64(parts[0], ln + 2)?,
            parse_f64(parts[1], ln + 2)?,
            parse_f64(parts[2], ln + 2)?,
        ]);
    }
    let y0 = rows
        .first()
        .map(|r| r[1])
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let nx = rows.iter().take_while(|r| r[1] == y0).count();
    if rows.len() % nx != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} rows do not form a grid with {nx} columns",
            rows.len()
        )));
    }
    let ny = rows.len() / nx;
    let xs: Vec<f64> = rows[..nx].iter().map(|r| r[0]).collect();
    let ys: Vec<f64> = (0..ny).map(|j| rows[j * nx][1]).collect();
    for (k, r) in rows.iter().enumerate() {
        if r[0] != xs[k % nx] || r[1] != ys[k / nx] {
            return Err(Error::InvalidArgument(format!(
                "row {} breaks the j-outer, i-inner node order",
                k + 1
            )));
        }
    }
    Ok((
        GridField {
            nx,
            ny,
            values: rows.iter().map(|r| r[2]).collect(),
        },
        xs,
        ys,
    ))
}

/// Binary PGM with values mapped linearly from `[min, max]` to `[0, 255]`;
/// a constant field maps to 0. The top image row is the largest `y`.
pub fn write_pgm(field: &GridField, w: &mut impl Write) -> Result<()> {
    check_finite(&field.values)?;
    let lo = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write!(
        w,
        "P5\n# min-max normalized: min={lo:e} max={hi:e}\n{} {}\n255\n",
        field.nx, field.ny
    )?;
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(field.values.len());
    for j in (0..field.ny).rev() {
        for i in 0..field.nx {
            let t = if span > 0.0 { (field.get(i, j) - lo) / span } else { 0.0 };
            bytes.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Write `field` to `path` in `format`.
pub fn export_grid(field: &GridField, grid: &Grid2D, path: &Path, format: GridFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        GridFormat::Csv => write_grid_csv(field, grid.xs(), grid.ys(), &mut w)?,
        GridFormat::Pgm => write_pgm(field, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn import_grid_csv(path: &Path) -> Result<GridField> {
    Ok(read_grid_csv(BufReader::new(File::open(path)?))?.0)
}

/// Boundary data as `i,j,x,y,k,alpha,value,inflow`, node-major.
pub fn write_boundary_csv(data: &BoundaryData, grid: &Grid2D, angles: &AngleGrid, w: &mut impl Write) -> Result<()> {
    writeln!(w, "i,j,x,y,k,alpha,value,inflow")?;
    let nodes = angles.nodes();
    for (b, &(i, j)) in data.nodes.iter().enumerate() {
        for (k, v) in data.at(b).iter().enumerate() {
            writeln!(
                w,
                "{i},{j},{:.16e},{:.16e},{k},{:.16e},{:.16e},{}",
                grid.x(i),
                grid.y(j),
                nodes[k],
                v,
                u8::from(data.inflow[b * data.na + k])
            )?;
        }
    }
    Ok(())
}

/// Read boundary data written by [`write_boundary_csv`] for `grid` and `angles`.
pub fn read_boundary_csv(r: impl BufRead, grid: &Grid2D, angles: &AngleGrid) -> Result<BoundaryData> {
    let nodes = grid.boundary_nodes();
    let na = angles.len();
    let mut slot = vec![usize::MAX; grid.node_count()];
    for (b, &(i, j)) in nodes.iter().enumerate() {
        slot[j * grid.nx() + i] = b;
    }
    let mut values = vec![0.0; nodes.len() * na];
    let mut inflow = vec![false; nodes.len() * na];
    let mut seen = vec![false; nodes.len() * na];
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "i,j,x,y,k,alpha,value,inflow" {
        return Err(Error::InvalidArgument(format!("unexpected boundary header '{header}'")));
    }
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("line {}: malformed boundary row", ln + 2));
        if p.len() != 8 {
            return Err(bad());
        }
        let i: usize = p[0].trim().parse().map_err(|_| bad())?;
        let j: usize = p[1].trim().parse().map_err(|_| bad())?;
        let k: usize = p[4].trim().parse().map_err(|_| bad())?;
        if i >= grid.nx() || j >= grid.ny() || k >= na || slot[j * grid.nx() + i] == usize::MAX {
            return Err(Error::InvalidArgument(format!(
                "line {}: ({i}, {j}, {k}) is not a boundary node and angle of this grid",
                ln + 2
            )));
        }
        let idx = slot[j * grid.nx() + i] * na + k;
        values[idx] = parse_f64(p[6], ln + 2)?;
        inflow[idx] = p[7].trim() == "1";
        seen[idx] = true;
    }
    if let Some(miss) = seen.iter().position(|s| !s) {
        let (i, j) = nodes[miss / na];
        return Err(Error::InvalidArgument(format!(
            "boundary data missing node ({i}, {j}) angle {}",
            miss % na
        )));
    }
    Ok(BoundaryData {
        nodes,
        na,
        values,
        inflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;

    fn grid(m: usize) -> Grid2D {
        Grid2D::new(Domain::default(), m, m).unwrap()
    }

    #[test]
    fn zero_grid_csv() {
        let f = GridField {
            nx: 2,
            ny: 2,
            values: vec![0.0; 4],
        };
        let mut buf = Vec::new();
        write_grid_csv(&f, &[-1.0, 1.0], &[1.0, 3.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "x,y,value");
        assert_eq!(
            lines[1],
            "-1.0000000000000000e0,1.0000000000000000e0,0.0000000000000000e0"
        );
        assert_eq!(
            lines[2],
            "1.0000000000000000e0,1.0000000000000000e0,0.0000000000000000e0"
        );
        assert!(lines[1..].iter().all(|l| l.ends_with(",0.0000000000000000e0")));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = grid(7);
        let f = GridField::sample(&g, |x, y| (x * 3.1).sin() / y + 1e-300 * x - 1.0 / 3.0);
        let mut buf = Vec::new();
        write_grid_csv(&f, g.xs(), g.ys(), &mut buf).unwrap();
        let (back, xs, ys) = read_grid_csv(&buf[..]).unwrap();
        assert_eq!(back.nx, f.nx);
        assert_eq!(xs, g.xs());
        assert_eq!(ys, g.ys());
        for (a, b) in back.values.iter().zip(&f.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pgm_constant_and_ramp() {
        let g = grid(3);
        let mut f = GridField::zeros(&g);
        f.values.iter_mut().for_each(|v| *v = 4.2);
        let mut buf = Vec::new();
        write_pgm(&f, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n"));
        let pixels = &buf[buf.len() - 16..];
        assert!(pixels.iter().all(|&p| p == 0));
        let text_part = String::from_utf8_lossy(&buf[..buf.len() - 16]).to_string();
        assert!(text_part.ends_with("4 4\n255\n"));

        let ramp = GridField::sample(&g, |_, y| y);
        let mut buf = Vec::new();
        write_pgm(&ramp, &mut buf).unwrap();
        let px = &buf[buf.len() - 16..];
        assert_eq!(&px[..4], &[255; 4]);
        assert_eq!(&px[12..], &[0; 4]);
    }

    #[test]
    fn rejects_nonfinite_and_malformed() {
        let g = grid(2);
        let mut f = GridField::zeros(&g);
        f.values[0] = f64::NAN;
        assert!(write_grid_csv(&f, g.xs(), g.ys(), &mut Vec::new()).is_err());
        assert!(write_grid_csv(&GridField::zeros(&g), &[0.0], g.ys(), &mut Vec::new()).is_err());
        assert!(write_pgm(&f, &mut Vec::new()).is_err());
        assert!(read_grid_csv(&b"a,b,c\n"[..]).is_err());
        assert!(read_grid_csv(&b"x,y,value\n1,2\n"[..]).is_err());
        assert!(read_grid_csv(&b"x,y,value\n0,1,0\n1,1,0\n0,2,0\n"[..]).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let g = grid(2);
        let err = export_grid(
            &GridField::zeros(&g),
            &g,
            Path::new("/nonexistent-dir/x.csv"),
            GridFormat::Csv,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn boundary_round_trip() {
        let g = grid(3);
        let angles = AngleGrid::new(5.0, 4).unwrap();
        let nodes = g.boundary_nodes();
        let na = angles.len();
        let data = BoundaryData {
            values: (0..nodes.len() * na).map(|k| k as f64 / 7.0).collect(),
            inflow: (0..nodes.len() * na).map(|k| k % 3 == 0).collect(),
            nodes,
            na,
        };
        let mut buf = Vec::new();
        write_boundary_csv(&data, &g, &angles, &mut buf).unwrap();
        let back = read_boundary_csv(&buf[..], &g, &angles).unwrap();
        assert_eq!(back, data);
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_boundary_csv(truncated.as_bytes(), &g, &angles).is_err());
    }
}

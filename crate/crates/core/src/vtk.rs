//! Legacy ASCII VTK unstructured grids: hexahedral leaves with nodal
//! temperature and per-cell status and level.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::fe_space::{node_key, DofMap};
use crate::octree::OctreeMesh;
use crate::status::CellStatus;

#[derive(Debug, thiserror::Error)]
pub enum VtkError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("field has {got} values, the DOF map has {expected}")]
    FieldLength { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// VTK corner order of a hexahedron in terms of the `x + 2y + 4z` order.
const VTK_HEX: [usize; 8] = [0, 1, 3, 2, 4, 5, 7, 6];
pub const VTK_HEXAHEDRON: u8 = 12;

#[derive(Clone, Copy, Debug)]
pub struct VtkOptions {
    pub include_inactive: bool,
    /// Temperature written at nodes that touch no active cell.
    pub inactive_value: f64,
}

impl Default for VtkOptions {
    fn default() -> Self {
        VtkOptions {
            include_inactive: true,
            inactive_value: 0.0,
        }
    }
}

pub fn render_vtk(
    mesh: &OctreeMesh,
    status: &[CellStatus],
    dofs: &DofMap,
    field: &[f64],
    opts: &VtkOptions,
) -> Result<String, VtkError> {
    if field.len() != dofs.num_dofs() {
        return Err(VtkError::FieldLength {
            expected: dofs.num_dofs(),
            got: field.len(),
        });
    }
    let cells: Vec<usize> = (0..mesh.len())
        .filter(|&i| opts.include_inactive || status[i].is_active())
        .collect();
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut points: Vec<[u32; 3]> = Vec::new();
    let mut conn: Vec<[usize; 8]> = Vec::with_capacity(cells.len());
    for &i in &cells {
        let k = mesh.leaves()[i];
        conn.push(std::array::from_fn(|v| {
            let p = k.corner(VTK_HEX[v]);
            *ids.entry(node_key(p)).or_insert_with(|| {
                points.push(p);
                points.len() - 1
            })
        }));
    }
    let mut temp = vec![opts.inactive_value; points.len()];
    for (n, p) in points.iter().enumerate() {
        if let Some(r) = dofs.node(*p) {
            temp[n] = dofs.node_value(r, field);
        }
    }

    let mut s = String::with_capacity(64 * points.len() + 48 * cells.len());
    s.push_str("# vtk DataFile Version 3.0\ngrowfem temperature field\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", points.len());
    for p in &points {
        let x = mesh.point(*p);
        let _ = writeln!(s, "{:e} {:e} {:e}", x[0], x[1], x[2]);
    }
    let _ = writeln!(s, "CELLS {} {}", conn.len(), conn.len() * 9);
    for c in &conn {
        let _ = writeln!(s, "8 {} {} {} {} {} {} {} {}", c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", conn.len());
    for _ in &conn {
        let _ = writeln!(s, "{VTK_HEXAHEDRON}");
    }
    let _ = writeln!(s, "CELL_DATA {}", conn.len());
    s.push_str("SCALARS status int 1\nLOOKUP_TABLE default\n");
    for &i in &cells {
        let _ = writeln!(s, "{}", status[i].vtk_code());
    }
    s.push_str("SCALARS level int 1\nLOOKUP_TABLE default\n");
    for &i in &cells {
        let _ = writeln!(s, "{}", mesh.leaves()[i].level());
    }
    let _ = writeln!(s, "POINT_DATA {}", points.len());
    s.push_str("SCALARS temperature double 1\nLOOKUP_TABLE default\n");
    for t in &temp {
        // Shortest round-trip representation.
        let _ = writeln!(s, "{t:?}");
    }
    Ok(s)
}

pub fn write_vtk(
    path: &Path,
    mesh: &OctreeMesh,
    status: &[CellStatus],
    dofs: &DofMap,
    field: &[f64],
    opts: &VtkOptions,
) -> Result<(), VtkError> {
    let text = render_vtk(mesh, status, dofs, field, opts)?;
    std::fs::write(path, text).map_err(|source| VtkError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Contents of a legacy unstructured-grid file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VtkGrid {
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u8>,
    pub point_data: BTreeMap<String, Vec<f64>>,
    pub cell_data: BTreeMap<String, Vec<f64>>,
}

pub fn parse_vtk<'a>(text: &'a str) -> Result<VtkGrid, VtkError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).peekable();
    let err = |line: usize, m: &str| VtkError::Parse {
        line,
        message: m.to_string(),
    };
    let mut grid = VtkGrid::default();
    let header: Vec<_> = lines.by_ref().take(4).collect();
    if header.len() < 4 || !header[0].1.starts_with("# vtk DataFile") {
        return Err(err(1, "not a legacy VTK file"));
    }
    if header[2].1 != "ASCII" {
        return Err(err(3, "only ASCII files are supported"));
    }
    if header[3].1 != "DATASET UNSTRUCTURED_GRID" {
        return Err(err(4, "expected DATASET UNSTRUCTURED_GRID"));
    }
    let mut section: Option<(bool, usize)> = None; // (point data?, count)
    while let Some((ln, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let count = |i: usize| -> Result<usize, VtkError> {
            words
                .get(i)
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| err(ln, "missing count"))
        };
        let take = |lines: &mut dyn Iterator<Item = (usize, &'a str)>, n: usize| take_lines(lines, n, ln);
        let num = |l: usize, w: &str| -> Result<f64, VtkError> { w.parse().map_err(|_| err(l, "bad number")) };
        match words[0] {
            "POINTS" => {
                for (l, row) in take(&mut lines, count(1)?)? {
                    let v: Vec<f64> = row.split_whitespace().map(|w| num(l, w)).collect::<Result<_, _>>()?;
                    if v.len() != 3 {
                        return Err(err(l, "expected three coordinates"));
                    }
                    grid.points.push([v[0], v[1], v[2]]);
                }
            }
            "CELLS" => {
                for (l, row) in take(&mut lines, count(1)?)? {
                    let v: Vec<usize> = row
                        .split_whitespace()
                        .map(|w| w.parse().map_err(|_| err(l, "bad index")))
                        .collect::<Result<_, _>>()?;
                    if v.is_empty() || v.len() != v[0] + 1 {
                        return Err(err(l, "cell size mismatch"));
                    }
                    grid.cells.push(v[1..].to_vec());
                }
            }
            "CELL_TYPES" => {
                for (l, row) in take(&mut lines, count(1)?)? {
                    grid.cell_types.push(row.parse().map_err(|_| err(l, "bad cell type"))?);
                }
            }
            "CELL_DATA" => section = Some((false, count(1)?)),
            "POINT_DATA" => section = Some((true, count(1)?)),
            "SCALARS" => {
                let (is_point, n) = section.ok_or_else(|| err(ln, "SCALARS outside a data section"))?;
                let name = words.get(1).ok_or_else(|| err(ln, "missing name"))?.to_string();
                match lines.next() {
                    Some((_, l)) if l.starts_with("LOOKUP_TABLE") => {}
                    _ => return Err(err(ln + 1, "expected LOOKUP_TABLE")),
                }
                let vals = take(&mut lines, n)?
                    .into_iter()
                    .map(|(l, w)| num(l, w))
                    .collect::<Result<Vec<_>, _>>()?;
                if is_point {
                    grid.point_data.insert(name, vals);
                } else {
                    grid.cell_data.insert(name, vals);
                }
            }
            _ => return Err(err(ln, "unknown section")),
        }
    }
    Ok(grid)
}

fn take_lines<'a>(
    lines: &mut dyn Iterator<Item = (usize, &'a str)>,
    n: usize,
    ln: usize,
) -> Result<Vec<(usize, &'a str)>, VtkError> {
    let v: Vec<_> = lines.take(n).collect();
    if v.len() < n {
        return Err(VtkError::Parse {
            line: ln,
            message: "unexpected end of file".into(),
        });
    }
    Ok(v)
}

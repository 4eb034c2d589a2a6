//! TetGen-style `.node` / `.ele` ASCII ingestion and the canonical writer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, MeshError, MeshReport, Point};

/// Reads, validates and orients a mesh from a `.node` / `.ele` pair.
pub fn load_mesh(node_path: &Path, ele_path: &Path) -> Result<(Mesh, MeshReport), MeshError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| MeshError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let node_text = read(node_path)?;
    let ele_text = read(ele_path)?;
    parse_labelled(
        &node_text,
        &ele_text,
        &node_path.display().to_string(),
        &ele_path.display().to_string(),
    )
}

/// Parses in-memory `.node` / `.ele` text.
pub fn parse_mesh(node_text: &str, ele_text: &str) -> Result<(Mesh, MeshReport), MeshError> {
    parse_labelled(node_text, ele_text, ".node", ".ele")
}

fn parse_labelled(
    node_text: &str,
    ele_text: &str,
    node_label: &str,
    ele_label: &str,
) -> Result<(Mesh, MeshReport), MeshError> {
    let (nodes, base, node_markers) = parse_nodes(node_text, node_label)?;
    let (elements, ele_markers) = parse_elements(ele_text, ele_label, nodes.len(), base)?;
    let (mesh, mut report) = Mesh::from_parts(nodes, elements)?;
    if node_markers || ele_markers {
        report.discarded_markers = true;
        report
            .warnings
            .push("attribute and marker columns discarded".into());
    }
    Ok((mesh, report))
}

struct Lines<'a> {
    file: &'a str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, file: &'a str) -> Self {
        Lines {
            file,
            inner: text.lines().enumerate(),
        }
    }

    /// Next non-empty line with comments stripped, split into fields.
    fn next_fields(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let content = line.split('#').next().unwrap_or("");
            let fields: Vec<&str> = content.split_whitespace().collect();
            if !fields.is_empty() {
                return Some((i + 1, fields));
            }
        }
        None
    }

    fn err(&self, line: usize, message: impl Into<String>) -> MeshError {
        MeshError::Parse {
            file: self.file.to_string(),
            line,
            message: message.into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    lines: &Lines,
    line: usize,
    field: &str,
    what: &str,
) -> Result<T, MeshError> {
    field
        .parse()
        .map_err(|_| lines.err(line, format!("invalid {what} `{field}`")))
}

fn parse_nodes(text: &str, file: &str) -> Result<(Vec<Point>, i64, bool), MeshError> {
    let mut lines = Lines::new(text, file);
    let (hline, header) = lines
        .next_fields()
        .ok_or_else(|| lines.err(1, "missing header"))?;
    if header.len() < 2 {
        return Err(lines.err(hline, "header must be `N_v 3 [attrs] [markers]`"));
    }
    let count: usize = parse_num(&lines, hline, header[0], "node count")?;
    let dim: usize = parse_num(&lines, hline, header[1], "dimension")?;
    if dim != 3 {
        return Err(lines.err(hline, format!("dimension must be 3, got {dim}")));
    }
    let n_attr: usize = match header.get(2) {
        Some(f) => parse_num(&lines, hline, f, "attribute count")?,
        None => 0,
    };
    let n_mark: usize = match header.get(3) {
        Some(f) => parse_num(&lines, hline, f, "marker count")?,
        None => 0,
    };
    let width = 4 + n_attr + n_mark;

    let mut nodes = Vec::with_capacity(count);
    let mut base = 1;
    for k in 0..count {
        let (ln, f) = lines
            .next_fields()
            .ok_or_else(|| lines.err(hline, format!("expected {count} nodes, found {k}")))?;
        if f.len() != width {
            return Err(lines.err(ln, format!("expected {width} fields, found {}", f.len())));
        }
        let idx: i64 = parse_num(&lines, ln, f[0], "node index")?;
        if k == 0 {
            if idx != 0 && idx != 1 {
                return Err(lines.err(ln, "first node index must be 0 or 1"));
            }
            base = idx;
        }
        if idx != base + k as i64 {
            return Err(lines.err(ln, format!("node index {idx} out of sequence")));
        }
        let mut p = [0.0; 3];
        for (i, slot) in p.iter_mut().enumerate() {
            let v: f64 = parse_num(&lines, ln, f[1 + i], "coordinate")?;
            if !v.is_finite() {
                return Err(lines.err(ln, "non-finite coordinate"));
            }
            *slot = v;
        }
        nodes.push(p);
    }
    if let Some((ln, _)) = lines.next_fields() {
        return Err(lines.err(ln, "trailing data after last node"));
    }
    Ok((nodes, base, n_attr + n_mark > 0))
}

fn parse_elements(
    text: &str,
    file: &str,
    n_nodes: usize,
    base: i64,
) -> Result<(Vec<[usize; 4]>, bool), MeshError> {
    let mut lines = Lines::new(text, file);
    let (hline, header) = lines
        .next_fields()
        .ok_or_else(|| lines.err(1, "missing header"))?;
    if header.len() < 2 {
        return Err(lines.err(hline, "header must be `N_e 4 [attrs]`"));
    }
    let count: usize = parse_num(&lines, hline, header[0], "element count")?;
    let per: usize = parse_num(&lines, hline, header[1], "nodes per element")?;
    if per != 4 {
        return Err(lines.err(hline, format!("only linear tets supported, got {per} nodes")));
    }
    let n_attr: usize = match header.get(2) {
        Some(f) => parse_num(&lines, hline, f, "attribute count")?,
        None => 0,
    };
    let width = 5 + n_attr;

    let mut elements = Vec::with_capacity(count);
    for k in 0..count {
        let (ln, f) = lines
            .next_fields()
            .ok_or_else(|| lines.err(hline, format!("expected {count} elements, found {k}")))?;
        if f.len() != width {
            return Err(lines.err(ln, format!("expected {width} fields, found {}", f.len())));
        }
        let mut el = [0usize; 4];
        for (i, slot) in el.iter_mut().enumerate() {
            let raw: i64 = parse_num(&lines, ln, f[1 + i], "node index")?;
            let idx = raw - base;
            if idx < 0 || idx >= n_nodes as i64 {
                return Err(MeshError::IndexOutOfRange {
                    element: k,
                    index: raw,
                    first: base,
                    last: base + n_nodes as i64 - 1,
                });
            }
            *slot = idx as usize;
        }
        elements.push(el);
    }
    if let Some((ln, _)) = lines.next_fields() {
        return Err(lines.err(ln, "trailing data after last element"));
    }
    Ok((elements, n_attr > 0))
}

/// Canonical `.node` text: 1-based indices, 17 significant digits, LF.
pub fn canonical_node_text(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.n_nodes() * 80);
    writeln!(s, "{} 3 0 0", mesh.n_nodes()).unwrap();
    for (i, p) in mesh.nodes().iter().enumerate() {
        writeln!(s, "{} {:.16e} {:.16e} {:.16e}", i + 1, p[0], p[1], p[2]).unwrap();
    }
    s
}

/// Canonical `.ele` text: 1-based indices in stored (oriented) order, LF.
pub fn canonical_ele_text(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.n_elements() * 40);
    writeln!(s, "{} 4 0", mesh.n_elements()).unwrap();
    for (i, el) in mesh.elements().iter().enumerate() {
        writeln!(
            s,
            "{} {} {} {} {}",
            i + 1,
            el[0] + 1,
            el[1] + 1,
            el[2] + 1,
            el[3] + 1
        )
        .unwrap();
    }
    s
}

pub fn save_mesh(mesh: &Mesh, node_path: &Path, ele_path: &Path) -> Result<(), MeshError> {
    let write = |p: &Path, text: String| {
        fs::write(p, text).map_err(|source| MeshError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write(node_path, canonical_node_text(mesh))?;
    write(ele_path, canonical_ele_text(mesh))
}

//! Common Layer Interface (CLI) ASCII slice files and the discretization of
//! scan entities into short subsegments.
//!
//! Accepted grammar, one directive per line, `//...//` comments anywhere:
//!
//! ```text
//! $$HEADERSTART
//! $$ASCII
//! $$UNITS/<mm per unit>
//! $$HEADEREND
//! $$GEOMETRYSTART
//! $$LAYER/<z>
//! $$POLYLINE/<id>,<dir>,<n>,<x1>,<y1>,...,<xn>,<yn>
//! $$HATCHES/<id>,<n>,<xs1>,<ys1>,<xe1>,<ye1>,...
//! $$GEOMETRYEND
//! ```
//!
//! Other standard header directives are accepted and ignored with a warning.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

pub type Point2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct CliError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("step length and speeds must be positive")]
    BadParameters,
    #[error("entity has zero length")]
    ZeroLength,
    #[error("entity needs at least two points")]
    TooFewPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub id: i64,
    /// CLI orientation flag (0 clockwise, 1 counter-clockwise, 2 open).
    pub direction: i64,
    pub points: Vec<Point2>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hatch {
    pub id: i64,
    pub begin: Point2,
    pub end: Point2,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Top of the layer in mm.
    pub height: f64,
    pub polylines: Vec<Polyline>,
    pub hatches: Vec<Hatch>,
}

impl Layer {
    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty() && self.hatches.is_empty()
    }

    /// Scan entities in processing order: polylines, then hatches.
    pub fn entities(&self) -> impl Iterator<Item = Vec<Point2>> + '_ {
        self.polylines
            .iter()
            .map(|p| p.points.clone())
            .chain(self.hatches.iter().map(|h| vec![h.begin, h.end]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserPath {
    /// Millimetres per file unit of the source file; coordinates below are
    /// already in millimetres.
    pub units: f64,
    pub layers: Vec<Layer>,
}

impl Default for LaserPath {
    fn default() -> Self {
        LaserPath {
            units: 1.0,
            layers: Vec::new(),
        }
    }
}

/// Non-fatal parser diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CliWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for CliWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

const IGNORED_DIRECTIVES: &[&str] = &[
    "VERSION", "DATE", "LABEL", "LAYERS", "DIMENSION", "USERDATA", "ALIGN", "BINARY",
];

fn err(line: usize, message: impl Into<String>) -> CliError {
    CliError {
        line,
        message: message.into(),
    }
}

/// Remove `//...//` comments; an unterminated comment runs to end of line.
fn strip_comments(line: &str, in_comment: &mut bool) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    loop {
        if *in_comment {
            match rest.find("//") {
                Some(i) => {
                    *in_comment = false;
                    rest = &rest[i + 2..];
                }
                None => return out,
            }
        } else {
            match rest.find("//") {
                Some(i) => {
                    out.push_str(&rest[..i]);
                    *in_comment = true;
                    rest = &rest[i + 2..];
                }
                None => {
                    out.push_str(rest);
                    return out;
                }
            }
        }
    }
}

fn parse_numbers(line: usize, args: &str) -> Result<Vec<f64>, CliError> {
    if args.trim().is_empty() {
        return Ok(Vec::new());
    }
    args.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("invalid number '{t}'")))
        })
        .collect()
}

fn as_int(line: usize, v: f64, what: &str) -> Result<i64, CliError> {
    if v.fract() != 0.0 || v.abs() > 1e15 {
        return Err(err(line, format!("{what} must be an integer, got {v}")));
    }
    Ok(v as i64)
}

#[derive(PartialEq)]
enum Section {
    Start,
    Header,
    BetweenSections,
    Geometry,
    End,
}

pub fn parse_cli(text: &str) -> Result<LaserPath, CliError> {
    parse_cli_with_warnings(text).map(|(p, _)| p)
}

pub fn parse_cli_with_warnings(text: &str) -> Result<(LaserPath, Vec<CliWarning>), CliError> {
    let mut path = LaserPath::default();
    let mut warnings = Vec::new();
    let mut section = Section::Start;
    let mut units_seen = false;
    let mut in_comment = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = strip_comments(raw, &mut in_comment);
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let Some(directive) = content.strip_prefix("$$") else {
            return Err(err(line, format!("expected a $$ directive, found '{content}'")));
        };
        let (name, args) = match directive.split_once('/') {
            Some((n, a)) => (n.trim(), a),
            None => (directive.trim(), ""),
        };
        match name {
            "HEADERSTART" => {
                if section != Section::Start {
                    return Err(err(line, "$$HEADERSTART must open the file"));
                }
                section = Section::Header;
            }
            "HEADEREND" => {
                if section != Section::Header {
                    return Err(err(line, "$$HEADEREND without $$HEADERSTART"));
                }
                if !units_seen {
                    return Err(err(line, "header lacks $$UNITS"));
                }
                section = Section::BetweenSections;
            }
            "ASCII" => {
                if section != Section::Header {
                    return Err(err(line, "$$ASCII outside the header"));
                }
            }
            "UNITS" => {
                if section != Section::Header {
                    return Err(err(line, "$$UNITS outside the header"));
                }
                let v = parse_numbers(line, args)?;
                if v.len() != 1 || !(v[0] > 0.0) {
                    return Err(err(line, "$$UNITS takes one positive value"));
                }
                path.units = v[0];
                units_seen = true;
            }
            "GEOMETRYSTART" => {
                if section != Section::BetweenSections {
                    return Err(err(line, "$$GEOMETRYSTART must follow the header"));
                }
                section = Section::Geometry;
            }
            "GEOMETRYEND" => {
                if section != Section::Geometry {
                    return Err(err(line, "$$GEOMETRYEND without $$GEOMETRYSTART"));
                }
                section = Section::End;
            }
            "LAYER" => {
                if section != Section::Geometry {
                    return Err(err(line, "$$LAYER outside the geometry section"));
                }
                let v = parse_numbers(line, args)?;
                if v.len() != 1 {
                    return Err(err(line, format!("$$LAYER takes 1 value, got {}", v.len())));
                }
                let height = v[0] * path.units;
                if let Some(prev) = path.layers.last() {
                    if !(height > prev.height) {
                        return Err(err(
                            line,
                            format!("layer height {height} does not exceed previous {}", prev.height),
                        ));
                    }
                }
                path.layers.push(Layer {
                    height,
                    ..Default::default()
                });
            }
            "POLYLINE" => {
                if section != Section::Geometry {
                    return Err(err(line, "$$POLYLINE outside the geometry section"));
                }
                let units = path.units;
                let layer = path
                    .layers
                    .last_mut()
                    .ok_or_else(|| err(line, "$$POLYLINE before any $$LAYER"))?;
                let v = parse_numbers(line, args)?;
                if v.len() < 3 {
                    return Err(err(line, "$$POLYLINE needs id, dir, n"));
                }
                let id = as_int(line, v[0], "polyline id")?;
                let direction = as_int(line, v[1], "polyline direction")?;
                let n = as_int(line, v[2], "point count")?;
                if n < 2 {
                    return Err(err(line, "polyline needs at least 2 points"));
                }
                if v.len() != 3 + 2 * n as usize {
                    return Err(err(
                        line,
                        format!("$$POLYLINE declares {n} points but carries {} coordinates", v.len() - 3),
                    ));
                }
                let points: Vec<Point2> = v[3..].chunks(2).map(|c| [c[0] * units, c[1] * units]).collect();
                if points.windows(2).any(|w| w[0] == w[1]) {
                    return Err(err(line, "polyline repeats a point"));
                }
                layer.polylines.push(Polyline {
                    id,
                    direction,
                    points,
                });
            }
            "HATCHES" => {
                if section != Section::Geometry {
                    return Err(err(line, "$$HATCHES outside the geometry section"));
                }
                let units = path.units;
                let layer = path
                    .layers
                    .last_mut()
                    .ok_or_else(|| err(line, "$$HATCHES before any $$LAYER"))?;
                let v = parse_numbers(line, args)?;
                if v.len() < 2 {
                    return Err(err(line, "$$HATCHES needs id, n"));
                }
                let id = as_int(line, v[0], "hatch id")?;
                let n = as_int(line, v[1], "hatch count")?;
                if n < 1 {
                    return Err(err(line, "hatch count must be positive"));
                }
                if v.len() != 2 + 4 * n as usize {
                    return Err(err(
                        line,
                        format!("$$HATCHES declares {n} hatches but carries {} coordinates", v.len() - 2),
                    ));
                }
                for c in v[2..].chunks(4) {
                    let begin = [c[0] * units, c[1] * units];
                    let end = [c[2] * units, c[3] * units];
                    if begin == end {
                        return Err(err(line, "hatch has zero length"));
                    }
                    layer.hatches.push(Hatch { id, begin, end });
                }
            }
            other if IGNORED_DIRECTIVES.contains(&other) => {
                let w = CliWarning {
                    line,
                    message: format!("ignoring directive $${other}"),
                };
                log::warn!("{w}");
                warnings.push(w);
            }
            other => return Err(err(line, format!("unknown directive $${other}"))),
        }
    }
    match section {
        Section::End => Ok((path, warnings)),
        Section::Geometry => Err(err(text.lines().count(), "missing $$GEOMETRYEND")),
        _ => Err(err(text.lines().count().max(1), "missing geometry section")),
    }
}

/// Canonical text form in millimetres (`$$UNITS/1`).
pub fn serialize_cli(path: &LaserPath) -> String {
    let mut out = String::new();
    out.push_str("$$HEADERSTART\n$$ASCII\n$$UNITS/1\n");
    let _ = writeln!(out, "$$LAYERS/{}", path.layers.len());
    out.push_str("$$HEADEREND\n$$GEOMETRYSTART\n");
    for layer in &path.layers {
        let _ = writeln!(out, "$$LAYER/{}", layer.height);
        for p in &layer.polylines {
            let _ = write!(out, "$$POLYLINE/{},{},{}", p.id, p.direction, p.points.len());
            for q in &p.points {
                let _ = write!(out, ",{},{}", q[0], q[1]);
            }
            out.push('\n');
        }
        // Consecutive hatches with one id share a block.
        let mut i = 0;
        while i < layer.hatches.len() {
            let id = layer.hatches[i].id;
            let j = i + layer.hatches[i..].iter().take_while(|h| h.id == id).count();
            let _ = write!(out, "$$HATCHES/{},{}", id, j - i);
            for h in &layer.hatches[i..j] {
                let _ = write!(out, ",{},{},{},{}", h.begin[0], h.begin[1], h.end[0], h.end[1]);
            }
            out.push('\n');
            i = j;
        }
    }
    out.push_str("$$GEOMETRYEND\n");
    out
}

/// Layers of parallel hatches over `[lo, hi]`, alternating between the x
/// and y directions, starting at height `first_top` with step `thickness`.
pub fn alternating_hatches(
    layers: usize,
    first_top: f64,
    thickness: f64,
    lo: Point2,
    hi: Point2,
    spacing: f64,
) -> LaserPath {
    let mut path = LaserPath::default();
    for l in 0..layers {
        let height = first_top + thickness * l as f64;
        let along_x = l % 2 == 0;
        let (a, b) = if along_x { (1, 0) } else { (0, 1) };
        let count = ((hi[a] - lo[a]) / spacing).round().max(1.0) as usize;
        let hatches = (0..count)
            .map(|k| {
                let c = lo[a] + spacing * (k as f64 + 0.5);
                let mut begin = [0.0; 2];
                let mut end = [0.0; 2];
                begin[a] = c;
                end[a] = c;
                // Serpentine: reverse every other line.
                let (s, e) = if k % 2 == 0 { (lo[b], hi[b]) } else { (hi[b], lo[b]) };
                begin[b] = s;
                end[b] = e;
                Hatch {
                    id: l as i64 + 1,
                    begin,
                    end,
                }
            })
            .collect();
        path.layers.push(Layer {
            height,
            polylines: Vec::new(),
            hatches,
        });
    }
    path
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subsegment {
    pub p0: Point2,
    pub p1: Point2,
    /// Scanning time of the piece in seconds.
    pub dt: f64,
}

impl Subsegment {
    pub fn length(&self) -> f64 {
        (self.p1[0] - self.p0[0]).hypot(self.p1[1] - self.p0[1])
    }
}

/// Discretization of the entity currently being scanned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    pub step_length: f64,
    pub scan_speed: f64,
    pub relocation_speed: f64,
    pub subsegments: Vec<Subsegment>,
}

impl DiscretePath {
    pub fn new(step_length: f64, scan_speed: f64, relocation_speed: f64) -> Result<Self, PathError> {
        if !(step_length > 0.0 && scan_speed > 0.0 && relocation_speed > 0.0) {
            return Err(PathError::BadParameters);
        }
        Ok(DiscretePath {
            step_length,
            scan_speed,
            relocation_speed,
            subsegments: Vec::new(),
        })
    }

    /// Replace the stored subsegments with those of a new entity.
    pub fn refill(&mut self, points: &[Point2]) -> Result<(), PathError> {
        if points.len() < 2 {
            return Err(PathError::TooFewPoints);
        }
        let total: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
        if !(total > 0.0) {
            return Err(PathError::ZeroLength);
        }
        self.subsegments.clear();
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = dist(a, b);
            if len == 0.0 {
                continue;
            }
            let n = piece_count(len, self.step_length);
            let mut prev = a;
            for k in 1..=n {
                let next = if k == n {
                    b
                } else {
                    let t = k as f64 * self.step_length / len;
                    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
                };
                let piece = dist(prev, next);
                self.subsegments.push(Subsegment {
                    p0: prev,
                    p1: next,
                    dt: piece / self.scan_speed,
                });
                prev = next;
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.subsegments.iter().map(Subsegment::length).sum()
    }

    pub fn scanning_time(&self) -> f64 {
        self.subsegments.iter().map(|s| s.dt).sum()
    }

    pub fn begin(&self) -> Option<Point2> {
        self.subsegments.first().map(|s| s.p0)
    }

    pub fn end(&self) -> Option<Point2> {
        self.subsegments.last().map(|s| s.p1)
    }
}

/// `ceil(len / dx)`, without an extra sliver piece from rounding.
fn piece_count(len: f64, dx: f64) -> usize {
    let n = (len / dx).ceil().max(1.0) as usize;
    if n > 1 && (n - 1) as f64 * dx >= len * (1.0 - 1e-12) {
        n - 1
    } else {
        n
    }
}

fn dist(a: Point2, b: Point2) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

pub fn discretize(
    points: &[Point2],
    step_length: f64,
    scan_speed: f64,
    relocation_speed: f64,
) -> Result<DiscretePath, PathError> {
    let mut d = DiscretePath::new(step_length, scan_speed, relocation_speed)?;
    d.refill(points)?;
    Ok(d)
}

pub fn relocation_time(end: Point2, next_begin: Point2, relocation_speed: f64) -> f64 {
    dist(end, next_begin) / relocation_speed
}

/// Idle time between two entities: the recoat time when a new layer starts,
/// otherwise the relocation time.
pub fn idle_time(end: Point2, next_begin: Point2, relocation_speed: f64, new_layer: bool, recoat_time: f64) -> f64 {
    if new_layer {
        recoat_time
    } else {
        relocation_time(end, next_begin, relocation_speed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_HATCH: &str = "$$HEADERSTART\n$$ASCII\n$$UNITS/1\n$$HEADEREND\n$$GEOMETRYSTART\n$$LAYER/0.06\n$$HATCHES/1,1,0,0,0.96,0\n$$GEOMETRYEND\n";

    #[test]
    fn one_layer_one_hatch() {
        let p = parse_cli(ONE_HATCH).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].hatches.len(), 1);
        assert_eq!(p.layers[0].hatches[0].end, [0.96, 0.0]);
    }

    #[test]
    fn hatches_before_layer_is_an_error() {
        let text = "$$HEADERSTART\n$$UNITS/1\n$$HEADEREND\n$$GEOMETRYSTART\n$$HATCHES/1,1,0,0,1,0\n$$LAYER/1\n$$GEOMETRYEND\n";
        let e = parse_cli(text).unwrap_err();
        assert_eq!(e.line, 5);
        assert!(e.to_string().starts_with("line 5:"));
    }

    #[test]
    fn units_and_comments() {
        let text = "//generated// $$HEADERSTART\n$$UNITS/0.005 // 5 um //\n$$VERSION/200\n$$HEADEREND\n$$GEOMETRYSTART\n$$LAYER/12\n$$POLYLINE/1,2,3,0,0,100,0,100,100\n$$GEOMETRYEND\n";
        let (p, w) = parse_cli_with_warnings(text).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].line, 3);
        assert!((p.layers[0].height - 0.06).abs() < 1e-15);
        assert_eq!(p.layers[0].polylines[0].points[2], [0.5, 0.5]);
    }

    #[test]
    fn roundtrip_is_byte_stable() {
        let p = alternating_hatches(8, 0.06, 0.06, [0.0, 0.0], [1.92, 1.92], 0.48);
        let s = serialize_cli(&p);
        let q = parse_cli(&s).unwrap();
        assert_eq!(q, p);
        assert_eq!(serialize_cli(&q), s);
    }

    #[test]
    fn discretize_examples() {
        let d = discretize(&[[0.0, 0.0], [0.96, 0.0]], 0.96, 100.0, 200.0).unwrap();
        assert_eq!(d.subsegments.len(), 1);
        assert!((d.subsegments[0].dt - 9.6e-3).abs() < 1e-15);

        let d = discretize(&[[0.0, 0.0], [2.0, 0.0]], 0.96, 100.0, 200.0).unwrap();
        let lens: Vec<f64> = d.subsegments.iter().map(|s| s.length()).collect();
        assert_eq!(lens.len(), 3);
        assert!((lens[0] - 0.96).abs() < 1e-12 && (lens[1] - 0.96).abs() < 1e-12);
        assert!((lens[2] - 0.08).abs() < 1e-12);

        let d = discretize(&[[0.0, 0.0], [1.0, 0.0], [2.5, 0.0]], 0.4, 10.0, 10.0).unwrap();
        assert!((d.length() - 2.5).abs() < 1e-12);
        assert!((d.scanning_time() - 0.25).abs() < 1e-12);
        assert!(discretize(&[[1.0, 1.0], [1.0, 1.0]], 0.4, 10.0, 10.0).is_err());
        assert!(discretize(&[[0.0, 0.0], [1.0, 0.0]], 0.0, 10.0, 10.0).is_err());
    }

    #[test]
    fn relocation() {
        assert_eq!(relocation_time([1.0, 1.0], [1.0, 1.0], 200.0), 0.0);
        assert!((relocation_time([0.0, 0.0], [4.0, 0.0], 200.0) - 0.02).abs() < 1e-15);
        assert_eq!(idle_time([0.0, 0.0], [4.0, 0.0], 200.0, true, 10.0), 10.0);
    }
}

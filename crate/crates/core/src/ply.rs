//! PLY point clouds and splat checkpoints.
//!
//! Splat checkpoints follow the usual Gaussian-splatting vertex layout:
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`, all
//! `float`, with `f_rest` stored channel-major. Opacity and scales are the
//! raw (pre-activation) parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::splat::{sh_coeffs_for_degree, sh_degree_for_len, Splat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Kind {
    fn parse(s: &str) -> Option<Kind> {
        Some(match s {
            "char" | "int8" => Kind::I8,
            "uchar" | "uint8" => Kind::U8,
            "short" | "int16" => Kind::I16,
            "ushort" | "uint16" => Kind::U16,
            "int" | "int32" => Kind::I32,
            "uint" | "uint32" => Kind::U32,
            "float" | "float32" => Kind::F32,
            "double" | "float64" => Kind::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Kind::I8 | Kind::U8 => 1,
            Kind::I16 | Kind::U16 => 2,
            Kind::I32 | Kind::U32 | Kind::F32 => 4,
            Kind::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Kind::I8 => b[0] as i8 as f64,
            Kind::U8 => b[0] as f64,
            Kind::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Kind::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Kind::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Kind::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Kind::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Kind::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, kind: Kind },
    List { count: Kind, item: Kind },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Vertex data of a PLY file: property names and one column per property.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexTable {
    pub format: PlyFormat,
    pub names: Vec<String>,
    /// Whether each column was stored with an integer type.
    pub integer: Vec<bool>,
    pub columns: Vec<Vec<f64>>,
}

impl VertexTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name).ok_or_else(|| Error::PlyParse {
            line: 0,
            message: format!("missing vertex property '{name}'"),
        })
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::PlyParse {
        line,
        message: message.into(),
    }
}

fn read_header(input: &mut impl BufRead) -> Result<(PlyFormat, Vec<Element>, usize)> {
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut line_no = 0;
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(parse_err(line_no + 1, "unexpected end of file in header"));
        }
        line_no += 1;
        let text = line.trim_end_matches(['\n', '\r']);
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if line_no == 1 {
            if text != "ply" {
                return Err(parse_err(1, "missing 'ply' magic"));
            }
            continue;
        }
        match tokens.first().copied() {
            Some("format") => {
                format = Some(match tokens.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some("binary_big_endian") => {
                        return Err(Error::UnsupportedFormat("big-endian PLY".into()));
                    }
                    other => return Err(parse_err(line_no, format!("unknown format {other:?}"))),
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(parse_err(line_no, "expected 'element <name> <count>'"));
                }
                let count = tokens[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad element count '{}'", tokens[2])))?;
                elements.push(Element {
                    name: tokens[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_no, "property before any element"))?;
                let prop = if tokens.get(1) == Some(&"list") {
                    if tokens.len() != 5 {
                        return Err(parse_err(line_no, "expected 'property list <count> <item> <name>'"));
                    }
                    let count = Kind::parse(tokens[2]).ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tokens[2])))?;
                    let item = Kind::parse(tokens[3]).ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tokens[3])))?;
                    Property::List { count, item }
                } else {
                    if tokens.len() != 3 {
                        return Err(parse_err(line_no, "expected 'property <type> <name>'"));
                    }
                    let kind = Kind::parse(tokens[1]).ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tokens[1])))?;
                    Property::Scalar {
                        name: tokens[2].to_string(),
                        kind,
                    }
                };
                el.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(line_no, format!("unexpected header keyword '{other}'"))),
            None => return Err(parse_err(line_no, "empty header line")),
        }
    }
    let format = format.ok_or_else(|| parse_err(line_no, "header has no format line"))?;
    Ok((format, elements, line_no))
}

/// Reads the `vertex` element of a PLY file.
pub fn read_vertices(path: &Path) -> Result<VertexTable> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_vertices_from(&mut BufReader::new(file))
}

pub fn read_vertices_from(input: &mut impl BufRead) -> Result<VertexTable> {
    let (format, elements, header_lines) = read_header(input)?;
    let mut table = None;
    let mut line_no = header_lines;
    let mut ascii_lines = AsciiLines { input, line_no: &mut line_no };
    for el in &elements {
        let names: Vec<String> = el
            .props
            .iter()
            .filter_map(|p| match p {
                Property::Scalar { name, .. } => Some(name.clone()),
                Property::List { .. } => None,
            })
            .collect();
        let integer: Vec<bool> = el
            .props
            .iter()
            .filter_map(|p| match p {
                Property::Scalar { kind, .. } => Some(!matches!(kind, Kind::F32 | Kind::F64)),
                Property::List { .. } => None,
            })
            .collect();
        let mut columns = vec![Vec::with_capacity(el.count); names.len()];
        for _ in 0..el.count {
            let mut col = 0;
            match format {
                PlyFormat::Ascii => {
                    let (line, tokens) = ascii_lines.next()?;
                    let mut it = tokens.iter();
                    let mut next = |what: &str| -> Result<f64> {
                        let tok = it.next().ok_or_else(|| parse_err(line, format!("missing value for {what}")))?;
                        tok.parse::<f64>()
                            .map_err(|_| parse_err(line, format!("bad number '{tok}' for {what}")))
                    };
                    for p in &el.props {
                        match p {
                            Property::Scalar { name, .. } => {
                                columns[col].push(next(name)?);
                                col += 1;
                            }
                            Property::List { .. } => {
                                let n = next("list count")? as usize;
                                for _ in 0..n {
                                    next("list item")?;
                                }
                            }
                        }
                    }
                }
                PlyFormat::BinaryLittleEndian => {
                    let input = &mut ascii_lines.input;
                    for p in &el.props {
                        match p {
                            Property::Scalar { kind, .. } => {
                                columns[col].push(read_binary(input, *kind)?);
                                col += 1;
                            }
                            Property::List { count, item } => {
                                let n = read_binary(input, *count)? as usize;
                                for _ in 0..n {
                                    read_binary(input, *item)?;
                                }
                            }
                        }
                    }
                }
            }
        }
        if el.name == "vertex" {
            table = Some(VertexTable {
                format,
                names,
                integer,
                columns,
            });
        }
    }
    table.ok_or_else(|| parse_err(header_lines, "no 'vertex' element"))
}

struct AsciiLines<'a, R: BufRead> {
    input: &'a mut R,
    line_no: &'a mut usize,
}

impl<R: BufRead> AsciiLines<'_, R> {
    fn next(&mut self) -> Result<(usize, Vec<String>)> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.input.read_line(&mut line)? == 0 {
                return Err(parse_err(*self.line_no + 1, "unexpected end of file in body"));
            }
            *self.line_no += 1;
            let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            if !tokens.is_empty() {
                return Ok((*self.line_no, tokens));
            }
        }
    }
}

fn read_binary(input: &mut impl Read, kind: Kind) -> Result<f64> {
    let mut buf = [0u8; 8];
    input
        .read_exact(&mut buf[..kind.size()])
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::UnsupportedFormat("PLY body shorter than its header declares".into()),
            _ => e.into(),
        })?;
    Ok(kind.read_le(&buf))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Either kind of PLY content, distinguished by an `opacity` property.
#[derive(Clone, Debug, PartialEq)]
pub enum PlyContent {
    Points(PointCloud),
    Splats(Vec<Splat>),
}

pub fn load_ply(path: &Path) -> Result<PlyContent> {
    let table = read_vertices(path)?;
    if table.column("opacity").is_some() {
        Ok(PlyContent::Splats(splats_from_table(&table)?))
    } else {
        Ok(PlyContent::Points(points_from_table(&table)?))
    }
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    points_from_table(&read_vertices(path)?)
}

pub fn load_splats(path: &Path) -> Result<Vec<Splat>> {
    splats_from_table(&read_vertices(path)?)
}

fn points_from_table(t: &VertexTable) -> Result<PointCloud> {
    let (x, y, z) = (t.require("x")?, t.require("y")?, t.require("z")?);
    let points = (0..t.len()).map(|i| Vector3::new(x[i], y[i], z[i])).collect();
    let colors = match (t.column("red"), t.column("green"), t.column("blue")) {
        (Some(r), Some(g), Some(b)) => {
            // Integer-typed colors are 0..255; float colors are already unit range.
            let red = t.names.iter().position(|n| n == "red").unwrap();
            let scale = if t.integer[red] { 1.0 / 255.0 } else { 1.0 };
            (0..t.len()).map(|i| [r[i] * scale, g[i] * scale, b[i] * scale]).collect()
        }
        _ => vec![[0.5; 3]; t.len()],
    };
    Ok(PointCloud { points, colors })
}

fn rest_count(t: &VertexTable) -> usize {
    t.names.iter().filter(|n| n.starts_with("f_rest_")).count()
}

fn splats_from_table(t: &VertexTable) -> Result<Vec<Splat>> {
    let rest = rest_count(t);
    if rest % 3 != 0 {
        return Err(parse_err(0, format!("f_rest count {rest} is not a multiple of 3")));
    }
    let coeffs = 1 + rest / 3;
    let deg = sh_degree_for_len(coeffs);
    if sh_coeffs_for_degree(deg) != coeffs {
        return Err(parse_err(0, format!("f_rest count {rest} does not match any SH degree")));
    }
    let get = |n: &str| t.require(n);
    let (x, y, z) = (get("x")?, get("y")?, get("z")?);
    let opacity = get("opacity")?;
    let scales = [get("scale_0")?, get("scale_1")?, get("scale_2")?];
    let rots = [get("rot_0")?, get("rot_1")?, get("rot_2")?, get("rot_3")?];
    let dc = [get("f_dc_0")?, get("f_dc_1")?, get("f_dc_2")?];
    let rest_cols: Vec<&[f64]> = (0..rest).map(|j| get(&format!("f_rest_{j}"))).collect::<Result<_>>()?;
    Ok((0..t.len())
        .map(|i| {
            let mut sh = vec![[dc[0][i], dc[1][i], dc[2][i]]];
            for k in 1..coeffs {
                sh.push(std::array::from_fn(|ch| rest_cols[ch * (coeffs - 1) + k - 1][i]));
            }
            Splat {
                id: i as u64,
                mu: Vector3::new(x[i], y[i], z[i]),
                log_scale: Vector3::new(scales[0][i], scales[1][i], scales[2][i]),
                rotation: [rots[0][i], rots[1][i], rots[2][i], rots[3][i]],
                opacity_logit: opacity[i],
                sh,
            }
        })
        .collect())
}

/// Property names of a splat checkpoint with `coeffs` SH coefficients.
pub fn splat_property_names(coeffs: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (coeffs - 1)).map(|j| format!("f_rest_{j}")));
    names.push("opacity".into());
    names.extend((0..3).map(|j| format!("scale_{j}")));
    names.extend((0..4).map(|j| format!("rot_{j}")));
    names
}

/// Writes splats as a binary little-endian checkpoint (values stored as f32;
/// splats with fewer SH coefficients are zero-padded).
pub fn save_splats(path: &Path, splats: &[Splat]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    write_splats(&mut out, splats)?;
    out.flush().map_err(|e| Error::file(path, e))
}

pub fn write_splats(out: &mut impl Write, splats: &[Splat]) -> Result<()> {
    let coeffs = splats.iter().map(|s| s.sh.len()).max().unwrap_or(1).max(1);
    let names = splat_property_names(coeffs);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", splats.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    let mut row: Vec<f32> = Vec::with_capacity(names.len());
    let mut bytes = Vec::with_capacity(4 * names.len());
    for s in splats {
        row.clear();
        row.extend(s.mu.iter().map(|&v| v as f32));
        row.extend([0.0f32; 3]);
        let coeff = |k: usize, ch: usize| s.sh.get(k).map_or(0.0, |c| c[ch]) as f32;
        row.extend((0..3).map(|ch| coeff(0, ch)));
        for ch in 0..3 {
            row.extend((1..coeffs).map(|k| coeff(k, ch)));
        }
        row.push(s.opacity_logit as f32);
        row.extend(s.log_scale.iter().map(|&v| v as f32));
        row.extend(s.rotation.iter().map(|&v| v as f32));
        bytes.clear();
        row.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Writes a point cloud with 8-bit colors.
pub fn save_points(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let rgb = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        match format {
            PlyFormat::Ascii => writeln!(out, "{} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, rgb[0], rgb[1], rgb[2])?,
            PlyFormat::BinaryLittleEndian => {
                for v in p.iter() {
                    out.write_all(&(*v as f32).to_le_bytes())?;
                }
                out.write_all(&rgb)?;
            }
        }
    }
    out.flush().map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<VertexTable> {
        read_vertices_from(&mut Cursor::new(text.as_bytes().to_vec()))
    }

    #[test]
    fn ascii_points_default_gray() {
        let t = parse("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n")
            .unwrap();
        let cloud = points_from_table(&t).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.colors, vec![[0.5; 3]; 3]);
        assert_eq!(cloud.points[1], Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn big_endian_is_unsupported() {
        let err = parse("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn header_errors_carry_line_numbers() {
        let err = parse("ply\nformat ascii 1.0\nelement vertex 1\nproperty flot x\nend_header\n").unwrap_err();
        assert!(matches!(err, Error::PlyParse { line: 4, .. }), "{err}");
        let err = parse("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\nabc\n").unwrap_err();
        assert!(matches!(err, Error::PlyParse { line: 7, .. }), "{err}");
    }

    #[test]
    fn skips_face_lists() {
        let t = parse(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 3\n3 0 0 0\n",
        )
        .unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn degree_three_from_45_rest_coefficients() {
        let s = Splat {
            sh: vec![[0.25, 0.5, 0.75]; 16],
            ..Splat::isotropic(0, Vector3::new(1.0, 2.0, 3.0), 0.5, 0.25, [0.5; 3])
        };
        let mut buf = Vec::new();
        write_splats(&mut buf, &[s.clone()]).unwrap();
        let t = read_vertices_from(&mut Cursor::new(buf)).unwrap();
        assert_eq!(rest_count(&t), 45);
        let back = splats_from_table(&t).unwrap();
        assert_eq!(back[0].sh_degree(), 3);
        assert_eq!(back[0].sh, s.sh);
        assert_eq!(back[0].mu, s.mu);
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let splats: Vec<Splat> = (0..5)
            .map(|i| {
                let mut s = Splat::isotropic(i, Vector3::new(0.1 * i as f64, -0.3, 1.7), 0.03, 0.4, [0.2, 0.4, 0.9]);
                s.sh.extend((0..3).map(|k| [0.01 * k as f64, -0.02, 0.3]));
                s.rotation = [0.9, 0.1, -0.2, 0.3];
                s
            })
            .collect();
        let mut first = Vec::new();
        write_splats(&mut first, &splats).unwrap();
        let loaded = splats_from_table(&read_vertices_from(&mut Cursor::new(first.clone())).unwrap()).unwrap();
        let mut second = Vec::new();
        write_splats(&mut second, &loaded).unwrap();
        assert_eq!(first, second);
    }
}

//! PLY reading and writing for labeled clouds.
//!
//! Supported inputs are `ascii 1.0` and `binary_little_endian 1.0` files with
//! `x`, `y`, `z` stored as `float` or `double` and an optional integer label
//! property. Big-endian files are rejected. Written files always store
//! coordinates as `double` and labels as an unsigned 32-bit `class` property.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::Label;

/// Label property name used when writing and the conventional default when
/// reading.
pub const DEFAULT_LABEL_PROPERTY: &str = "class";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(token: &str) -> Option<Self> {
        match token {
            "char" | "int8" => Some(Self::I8),
            "uchar" | "uint8" => Some(Self::U8),
            "short" | "int16" => Some(Self::I16),
            "ushort" | "uint16" => Some(Self::U16),
            "int" | "int32" => Some(Self::I32),
            "uint" | "uint32" => Some(Self::U32),
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { ty: ScalarType, name: String },
    List { item: ScalarType, count: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    props: Vec<Property>,
}

impl ElementDef {
    /// Fixed binary row size; `None` when the element has a list property.
    fn fixed_row_size(&self) -> Option<usize> {
        self.props.iter().try_fold(0, |acc, p| match p {
            Property::Scalar { ty, .. } => Some(acc + ty.size()),
            Property::List { .. } => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLittleEndian,
}

struct Header {
    format: Format,
    elements: Vec<ElementDef>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Ply("missing end_header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Ply("header is not valid utf-8".into()))?
            .trim_end_matches('\r')
            .to_owned();
        pos += nl + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }

    let mut iter = lines.iter().map(|l| l.trim());
    if iter.next() != Some("ply") {
        return Err(Error::Ply("missing ply magic".into()));
    }

    let mut format = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    for line in iter {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                format = Some(match tokens.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLittleEndian,
                    Some("binary_big_endian") => return Err(Error::PlyBigEndian),
                    other => {
                        return Err(Error::Ply(format!("unknown format {other:?}")));
                    }
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::Ply("element without name".into()))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Ply(format!("bad count for element {name}")))?;
                elements.push(ElementDef {
                    name: name.to_owned(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before any element".into()))?;
                let first = tokens
                    .next()
                    .ok_or_else(|| Error::Ply("property without type".into()))?;
                if first == "list" {
                    let count = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::Ply("bad list count type".into()))?;
                    let item = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::Ply("bad list item type".into()))?;
                    element.props.push(Property::List { item, count });
                } else {
                    let ty = ScalarType::parse(first)
                        .ok_or_else(|| Error::Ply(format!("unknown property type {first}")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| Error::Ply("property without name".into()))?
                        .to_owned();
                    element.props.push(Property::Scalar { ty, name });
                }
            }
            Some("end_header") => {}
            Some(other) => return Err(Error::Ply(format!("unknown header line {other:?}"))),
            None => {}
        }
    }

    Ok(Header {
        format: format.ok_or_else(|| Error::Ply("missing format line".into()))?,
        elements,
        body_offset: pos,
    })
}

struct BinaryCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BinaryCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Ply("unexpected end of binary data".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn read_f64(&mut self, ty: ScalarType) -> Result<f64> {
        let raw = self.take(ty.size())?;
        Ok(match ty {
            ScalarType::I8 => raw[0] as i8 as f64,
            ScalarType::U8 => raw[0] as f64,
            ScalarType::I16 => i16::from_le_bytes(raw.try_into().unwrap()) as f64,
            ScalarType::U16 => u16::from_le_bytes(raw.try_into().unwrap()) as f64,
            ScalarType::I32 => i32::from_le_bytes(raw.try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(raw.try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(raw.try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(raw.try_into().unwrap()),
        })
    }

    fn read_i64(&mut self, ty: ScalarType) -> Result<i64> {
        let raw = self.take(ty.size())?;
        Ok(match ty {
            ScalarType::I8 => raw[0] as i8 as i64,
            ScalarType::U8 => raw[0] as i64,
            ScalarType::I16 => i16::from_le_bytes(raw.try_into().unwrap()) as i64,
            ScalarType::U16 => u16::from_le_bytes(raw.try_into().unwrap()) as i64,
            ScalarType::I32 => i32::from_le_bytes(raw.try_into().unwrap()) as i64,
            ScalarType::U32 => u32::from_le_bytes(raw.try_into().unwrap()) as i64,
            _ => return Err(Error::Ply("expected integer value".into())),
        })
    }
}

struct VertexLayout {
    xyz: [(usize, ScalarType); 3],
    label: Option<(usize, ScalarType)>,
}

fn vertex_layout(def: &ElementDef, label_property: Option<&str>) -> Result<VertexLayout> {
    let find = |wanted: &str| -> Option<(usize, ScalarType)> {
        def.props.iter().enumerate().find_map(|(i, p)| match p {
            Property::Scalar { ty, name } if name == wanted => Some((i, *ty)),
            _ => None,
        })
    };

    let mut xyz = [(0, ScalarType::F64); 3];
    for (slot, axis) in xyz.iter_mut().zip(["x", "y", "z"]) {
        let (i, ty) =
            find(axis).ok_or_else(|| Error::Ply(format!("vertex has no {axis} property")))?;
        if !ty.is_float() {
            return Err(Error::Ply(format!(
                "vertex property {axis} must be float or double"
            )));
        }
        *slot = (i, ty);
    }

    let label = match label_property {
        None => None,
        Some(name) => {
            let (i, ty) =
                find(name).ok_or_else(|| Error::LabelPropertyMissing(name.to_owned()))?;
            if !ty.is_integer() {
                return Err(Error::Ply(format!(
                    "label property {name:?} must be an integer type"
                )));
            }
            Some((i, ty))
        }
    };

    Ok(VertexLayout { xyz, label })
}

fn label_from_i64(value: i64, index: usize) -> Result<Label> {
    if value < 0 {
        return Err(Error::NegativeLabel { index, value });
    }
    Ok(value as Label)
}

/// Loads a cloud from a PLY file.
///
/// When `label_property` is given, that vertex property is required and read
/// as the per-point label; class names are synthesized as `class_<id>`. When
/// it is `None`, any label property present is ignored and the cloud is
/// unlabeled.
pub fn load_ply(path: impl AsRef<Path>, label_property: Option<&str>) -> Result<LabeledCloud> {
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes)?;

    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let vertex = &header.elements[vertex_pos];
    let layout = vertex_layout(vertex, label_property)?;

    let mut points = Vec::with_capacity(vertex.count);
    let mut labels = layout.label.map(|_| Vec::with_capacity(vertex.count));

    match header.format {
        Format::Ascii => {
            let body = std::str::from_utf8(&bytes[header.body_offset..])
                .map_err(|_| Error::Ply("ascii body is not valid utf-8".into()))?;
            let mut lines = body.lines();
            for skipped in &header.elements[..vertex_pos] {
                for _ in 0..skipped.count {
                    lines
                        .next()
                        .ok_or_else(|| Error::Ply("unexpected end of ascii data".into()))?;
                }
            }
            for index in 0..vertex.count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Ply("unexpected end of ascii data".into()))?;
                let mut tokens = line.split_whitespace();
                let mut fields: Vec<Option<&str>> = Vec::with_capacity(vertex.props.len());
                for prop in &vertex.props {
                    match prop {
                        Property::Scalar { .. } => {
                            let t = tokens
                                .next()
                                .ok_or_else(|| Error::Ply(format!("short vertex row {index}")))?;
                            fields.push(Some(t));
                        }
                        Property::List { .. } => {
                            let n: usize = tokens
                                .next()
                                .and_then(|t| t.parse().ok())
                                .ok_or_else(|| Error::Ply(format!("bad list count, row {index}")))?;
                            for _ in 0..n {
                                tokens.next().ok_or_else(|| {
                                    Error::Ply(format!("short list, row {index}"))
                                })?;
                            }
                            fields.push(None);
                        }
                    }
                }
                let mut p = [0.0f64; 3];
                for (d, &(slot, _)) in layout.xyz.iter().enumerate() {
                    let token = fields[slot].expect("xyz is scalar");
                    p[d] = token
                        .parse()
                        .map_err(|_| Error::Ply(format!("bad coordinate {token:?}")))?;
                }
                points.push(p);
                if let (Some(labels), Some((slot, _))) = (&mut labels, layout.label) {
                    let token = fields[slot].expect("label is scalar");
                    let value: i64 = token
                        .parse()
                        .map_err(|_| Error::Ply(format!("bad label {token:?}")))?;
                    labels.push(label_from_i64(value, index)?);
                }
            }
        }
        Format::BinaryLittleEndian => {
            let mut cursor = BinaryCursor {
                bytes: &bytes,
                pos: header.body_offset,
            };
            for skipped in &header.elements[..vertex_pos] {
                let row = skipped.fixed_row_size().ok_or_else(|| {
                    Error::Ply(format!(
                        "cannot skip list-typed element {:?} before vertex in a binary file",
                        skipped.name
                    ))
                })?;
                cursor.take(row * skipped.count)?;
            }
            for index in 0..vertex.count {
                let mut p = [0.0f64; 3];
                let mut label_value = None;
                for (slot, prop) in vertex.props.iter().enumerate() {
                    match prop {
                        Property::Scalar { ty, .. } => {
                            if let Some(d) = layout.xyz.iter().position(|&(s, _)| s == slot) {
                                p[d] = cursor.read_f64(*ty)?;
                            } else if layout.label.is_some_and(|(s, _)| s == slot) {
                                label_value = Some(cursor.read_i64(*ty)?);
                            } else {
                                cursor.take(ty.size())?;
                            }
                        }
                        Property::List { item, count } => {
                            let n = cursor.read_i64(*count)? as usize;
                            cursor.take(item.size() * n)?;
                        }
                    }
                }
                points.push(p);
                if let Some(labels) = &mut labels {
                    let value =
                        label_value.ok_or_else(|| Error::Ply("label column missing".into()))?;
                    labels.push(label_from_i64(value, index)?);
                }
            }
        }
    }

    match labels {
        Some(labels) => LabeledCloud::with_labels(points, labels),
        None => LabeledCloud::unlabeled(points),
    }
}

/// Writes a cloud as PLY. Coordinates are stored as `double`; when the cloud
/// is labeled a `uint class` property is added.
pub fn save_ply(cloud: &LabeledCloud, path: impl AsRef<Path>, binary: bool) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    writeln!(out, "ply")?;
    writeln!(out, "format {format} 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    if cloud.labels().is_some() {
        writeln!(out, "property uint {DEFAULT_LABEL_PROPERTY}")?;
    }
    writeln!(out, "end_header")?;

    let labels = cloud.labels();
    for (i, p) in cloud.points().iter().enumerate() {
        if binary {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
            if let Some(labels) = labels {
                out.extend_from_slice(&labels[i].to_le_bytes());
            }
        } else {
            match labels {
                Some(labels) => writeln!(out, "{} {} {} {}", p[0], p[1], p[2], labels[i])?,
                None => writeln!(out, "{} {} {}", p[0], p[1], p[2])?,
            }
        }
    }

    fs::write(path, out)?;
    Ok(())
}

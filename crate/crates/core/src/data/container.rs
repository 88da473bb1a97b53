//! Binary motion container and the plain-text rig CSV alternative.
//!
//! Container layout (little endian):
//!
//! ```text
//! magic      [u8; 4] = b"TDMO"
//! version    u16     = 1
//! kind       u8      0 = vertex, 1 = rig, 2 = features, 3 = template
//! reserved   u8
//! rows       u32     N (frames, or vertices for templates)
//! cols       u32     D
//! fps        f32     frames per second (feature rate for features, 0 for templates)
//! subject    u16 length + UTF-8 bytes
//! sentence   u16 length + UTF-8 bytes (topology id for templates)
//! data       rows * cols f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{AnimationSequence, MotionKind, TemplateMesh};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TDMO";
const VERSION: u16 = 1;

/// What a container holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Vertex,
    Rig,
    Features,
    Template,
}

impl ContainerKind {
    fn code(self) -> u8 {
        match self {
            ContainerKind::Vertex => 0,
            ContainerKind::Rig => 1,
            ContainerKind::Features => 2,
            ContainerKind::Template => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ContainerKind::Vertex,
            1 => ContainerKind::Rig,
            2 => ContainerKind::Features,
            3 => ContainerKind::Template,
            _ => return None,
        })
    }
}

impl From<MotionKind> for ContainerKind {
    fn from(kind: MotionKind) -> Self {
        match kind {
            MotionKind::VertexDisplacement => ContainerKind::Vertex,
            MotionKind::RigControl => ContainerKind::Rig,
        }
    }
}

/// Raw container contents before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub rate: f32,
    pub subject: String,
    pub sentence: String,
    pub data: Array2<f64>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let (rows, cols) = self.data.dim();
        let mut out = Vec::with_capacity(32 + rows * cols * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(0);
        out.extend_from_slice(&u32::try_from(rows).map_err(|_| too_large("rows"))?.to_le_bytes());
        out.extend_from_slice(&u32::try_from(cols).map_err(|_| too_large("cols"))?.to_le_bytes());
        out.extend_from_slice(&self.rate.to_le_bytes());
        for s in [&self.subject, &self.sentence] {
            let len = u16::try_from(s.len()).map_err(|_| too_large("header string"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in self.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        if cur.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic, not a motion container"));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let code = cur.take(1)?[0];
        let kind = ContainerKind::from_code(code)
            .ok_or_else(|| Error::format(origin, format!("unknown kind code {code}")))?;
        cur.take(1)?;
        let rows = u32::from_le_bytes(cur.array()?) as usize;
        let cols = u32::from_le_bytes(cur.array()?) as usize;
        let rate = f32::from_le_bytes(cur.array()?);
        let subject = cur.string()?;
        let sentence = cur.string()?;
        let payload = cur.take(rows * cols * 4)?;
        if cur.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after payload"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::format(origin, e))?;
        Ok(Self {
            kind,
            rate,
            subject,
            sentence,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::load(path.display().to_string(), e))?)
            .read_to_end(&mut bytes)?;
        Self::decode(&bytes, path)
    }
}

fn too_large(what: &str) -> Error {
    Error::Contract(format!("{what} too large for the container header"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.origin, "truncated container")),
        }
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut a = [0u8; K];
        a.copy_from_slice(self.take(K)?);
        Ok(a)
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::format(self.origin, e))
    }
}

pub fn write_sequence(seq: &AnimationSequence, path: &Path) -> Result<()> {
    Container {
        kind: seq.kind().into(),
        rate: seq.fps() as f32,
        subject: seq.subject().to_string(),
        sentence: seq.sentence().to_string(),
        data: seq.frames().clone(),
    }
    .write(path)
}

pub fn read_sequence(path: &Path) -> Result<AnimationSequence> {
    let c = Container::read(path)?;
    let kind = match c.kind {
        ContainerKind::Vertex => MotionKind::VertexDisplacement,
        ContainerKind::Rig => MotionKind::RigControl,
        other => {
            return Err(Error::format(
                path,
                format!("expected a motion container, found {other:?}"),
            ))
        }
    };
    AnimationSequence::new(c.data, kind, c.rate as f64, c.subject, c.sentence)
}

pub fn write_template(mesh: &TemplateMesh, subject: &str, path: &Path) -> Result<()> {
    Container {
        kind: ContainerKind::Template,
        rate: 0.0,
        subject: subject.to_string(),
        sentence: mesh.topology.clone(),
        data: mesh.vertices.clone(),
    }
    .write(path)
}

pub fn read_template(path: &Path) -> Result<TemplateMesh> {
    let c = Container::read(path)?;
    if c.kind != ContainerKind::Template {
        return Err(Error::format(path, format!("expected a template, found {:?}", c.kind)));
    }
    TemplateMesh::new(c.data, c.sentence)
}

/// Writes rig values as CSV: a header of control names, then one row per frame.
pub fn write_rig_csv(seq: &AnimationSequence, names: Option<&[String]>, path: &Path) -> Result<()> {
    if seq.kind() != MotionKind::RigControl {
        return Err(Error::Contract("CSV export is only defined for rig-control data".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let header: Vec<String> = match names {
        Some(n) if n.len() == seq.dim() => n.to_vec(),
        Some(n) => {
            return Err(Error::Contract(format!(
                "{} control names for {} columns",
                n.len(),
                seq.dim()
            )))
        }
        None => (0..seq.dim()).map(|i| format!("c{i}")).collect(),
    };
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for row in seq.frames().rows() {
        // `{}` on f64 prints the shortest representation that parses back exactly.
        w.write_record(row.iter().map(|v| format!("{v}")))
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rig CSV. A first row that does not parse as numbers is taken as
/// the header of control names.
pub fn read_rig_csv(path: &Path) -> Result<(Array2<f64>, Option<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::load(path.display().to_string(), e))?;
    let mut names = None;
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => {
                names = Some(rec.iter().map(|s| s.trim().to_string()).collect::<Vec<_>>());
                width = Some(rec.len());
                continue;
            }
            Err(e) => return Err(Error::format(path, format!("row {}: {e}", i + 1))),
        };
        match width {
            Some(w) if w != row.len() => {
                return Err(Error::format(
                    path,
                    format!("ragged rows: row {} has {} columns, expected {w}", i + 1, row.len()),
                ))
            }
            None => width = Some(row.len()),
            _ => {}
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: non-finite value {v} in row {}",
                path.display(),
                i + 1
            )));
        }
        values.extend(row);
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, "no data rows"));
    }
    let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::format(path, e))?;
    Ok((data, names))
}

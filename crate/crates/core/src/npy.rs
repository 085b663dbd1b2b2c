//! Reader and writer for the NumPy `.npy` binary format.
//!
//! Only little-endian `u8`, `u16`, `i64`, `f32` and `f64` payloads are
//! supported. Files are always written as format version 1.0 with the same
//! header layout NumPy itself produces (including the spare spaces NumPy
//! reserves after the shape so the leading axis can grow in place), so the
//! output of [`write_npy`] is byte-identical to `numpy.save` for the same
//! array. Versions 1.0 and 2.0 are accepted on read.

use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ARRAY_ALIGN: usize = 64;
/// NumPy pads the header so that the growing axis can reach this many digits.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NpyError {
    #[error("bad magic string, not an NPY file")]
    BadMagic,
    #[error("unsupported NPY format version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDtype(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes but shape {shape:?} needs {expected}")]
    HeaderShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("file truncated")]
    Truncated,
}

/// Element type of an [`NpyArray`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    U16,
    I64,
    F32,
    F64,
}

impl DType {
    /// The NumPy `descr` string written for this type.
    pub fn descr(self) -> &'static str {
        match self {
            DType::U8 => "|u1",
            DType::U16 => "<u2",
            DType::I64 => "<i8",
            DType::F32 => "<f4",
            DType::F64 => "<f8",
        }
    }

    pub fn item_size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::I64 | DType::F64 => 8,
            DType::F32 => 4,
        }
    }

    fn from_descr(descr: &str) -> Result<Self, NpyError> {
        match descr {
            "|u1" | "<u1" | "u1" => Ok(DType::U8),
            "<u2" => Ok(DType::U16),
            "<i8" => Ok(DType::I64),
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }
}

/// Flat element buffer, tagged with its element type.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    pub fn dtype(&self) -> DType {
        match self {
            NpyData::U8(_) => DType::U8,
            NpyData::U16(_) => DType::U16,
            NpyData::I64(_) => DType::I64,
            NpyData::F32(_) => DType::F32,
            NpyData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::U16(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` widened to f64 (lossy for very large i64 values).
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            NpyData::U8(v) => v[i] as f64,
            NpyData::U16(v) => v[i] as f64,
            NpyData::I64(v) => v[i] as f64,
            NpyData::F32(v) => v[i] as f64,
            NpyData::F64(v) => v[i],
        }
    }

    fn decode(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => NpyData::U8(bytes.to_vec()),
            DType::U16 => NpyData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I64 => NpyData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => NpyData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => NpyData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            NpyData::U8(v) => out.extend_from_slice(v),
            NpyData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// An n-dimensional array as stored in an `.npy` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
    /// Always false for arrays produced by this crate.
    pub fortran_order: bool,
}

impl NpyArray {
    /// Builds a C-ordered array, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self, NpyError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            let item = data.dtype().item_size();
            return Err(NpyError::HeaderShapeMismatch {
                shape,
                expected: expected * item,
                actual: data.len() * item,
            });
        }
        Ok(Self {
            shape,
            data,
            fortran_order: false,
        })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Renders a shape the way Python's `repr` renders a tuple.
fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// The header dictionary text, without alignment padding or the final newline.
fn header_text(dtype: DType, shape: &[usize], fortran_order: bool) -> String {
    let order = if fortran_order { "True" } else { "False" };
    let mut text = format!(
        "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
        dtype.descr(),
        order,
        shape_repr(shape)
    );
    let growth_axis = if fortran_order { shape.last() } else { shape.first() };
    if let Some(extent) = growth_axis {
        let digits = extent.to_string().len();
        text.extend(std::iter::repeat_n(' ', GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    text
}

/// The complete version 1.0 header (magic through the padded newline) for an
/// array of this type and shape.
pub fn npy_header(dtype: DType, shape: &[usize], fortran_order: bool) -> Vec<u8> {
    let text = header_text(dtype, shape, fortran_order);
    // magic + version + u16 length + text + newline, padded to the alignment.
    let unpadded = MAGIC.len() + 2 + 2 + text.len() + 1;
    let pad = ARRAY_ALIGN - unpadded % ARRAY_ALIGN;
    let header_len = text.len() + pad + 1;
    assert!(header_len <= u16::MAX as usize, "NPY header exceeds version 1.0 limit");

    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    out
}

/// Serializes `arr` as an NPY version 1.0 file.
pub fn write_npy(arr: &NpyArray) -> Vec<u8> {
    let mut out = npy_header(arr.dtype(), &arr.shape, arr.fortran_order);
    out.reserve(arr.len() * arr.dtype().item_size());
    arr.data.encode_into(&mut out);
    out
}

/// Header fields of an NPY file plus the byte offset where the payload starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub version: (u8, u8),
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub fortran_order: bool,
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn element_count(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

/// Parses only the header; the payload is not inspected.
pub fn read_npy_header(bytes: &[u8]) -> Result<NpyHeader, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 2 {
        return Err(NpyError::Truncated);
    }
    let (major, minor) = (rest[0], rest[1]);
    let (header_len, prefix) = match (major, minor) {
        (1, 0) => {
            let b = rest.get(2..4).ok_or(NpyError::Truncated)?;
            (u16::from_le_bytes([b[0], b[1]]) as usize, MAGIC.len() + 4)
        }
        (2, 0) => {
            let b = rest.get(2..6).ok_or(NpyError::Truncated)?;
            (
                u32::from_le_bytes(b.try_into().unwrap()) as usize,
                MAGIC.len() + 6,
            )
        }
        _ => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let header_end = prefix.checked_add(header_len).ok_or(NpyError::Truncated)?;
    let header = bytes.get(prefix..header_end).ok_or(NpyError::Truncated)?;
    let header = std::str::from_utf8(header)
        .map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    let dict = parse_header(header)?;
    Ok(NpyHeader {
        version: (major, minor),
        dtype: DType::from_descr(&dict.descr)?,
        shape: dict.shape,
        fortran_order: dict.fortran_order,
        data_offset: header_end,
    })
}

/// Parses an NPY file held in memory.
pub fn read_npy(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    let header = read_npy_header(bytes)?;
    let count = header
        .element_count()
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    let payload = &bytes[header.data_offset..];
    let expected = count
        .checked_mul(header.dtype.item_size())
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(NpyError::HeaderShapeMismatch {
            shape: header.shape,
            expected,
            actual: payload.len(),
        });
    }
    Ok(NpyArray {
        shape: header.shape,
        data: NpyData::decode(header.dtype, payload),
        fortran_order: header.fortran_order,
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the Python dict literal of an NPY header. Only the three keys the
/// format defines are accepted; key order is free.
fn parse_header(text: &str) -> Result<HeaderDict, NpyError> {
    let malformed = |msg: &str| NpyError::MalformedHeader(msg.to_string());
    let body = text
        .trim_end()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| malformed("expected a dict literal"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut cursor = Cursor { s: body, pos: 0 };
    loop {
        cursor.skip_ws();
        if cursor.at_end() {
            break;
        }
        let key = cursor.string()?;
        cursor.skip_ws();
        cursor.expect(':')?;
        cursor.skip_ws();
        match key.as_str() {
            "descr" => descr = Some(cursor.string()?),
            "fortran_order" => fortran_order = Some(cursor.boolean()?),
            "shape" => shape = Some(cursor.tuple()?),
            other => return Err(NpyError::MalformedHeader(format!("unexpected key {other:?}"))),
        }
        cursor.skip_ws();
        if cursor.at_end() {
            break;
        }
        cursor.expect(',')?;
    }
    Ok(HeaderDict {
        descr: descr.ok_or_else(|| malformed("missing descr"))?,
        fortran_order: fortran_order.ok_or_else(|| malformed("missing fortran_order"))?,
        shape: shape.ok_or_else(|| malformed("missing shape"))?,
    })
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl Cursor<'_> {
    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.s.len()
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn expect(&mut self, c: char) -> Result<(), NpyError> {
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(NpyError::MalformedHeader(format!(
                "expected {c:?} at offset {}",
                self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = self
            .rest()
            .chars()
            .next()
            .filter(|c| *c == '\'' || *c == '"')
            .ok_or_else(|| NpyError::MalformedHeader("expected a string".into()))?;
        self.pos += 1;
        let end = self
            .rest()
            .find(quote)
            .ok_or_else(|| NpyError::MalformedHeader("unterminated string".into()))?;
        let value = self.rest()[..end].to_string();
        self.pos += end + 1;
        Ok(value)
    }

    fn boolean(&mut self) -> Result<bool, NpyError> {
        for (word, value) in [("True", true), ("False", false)] {
            if self.rest().starts_with(word) {
                self.pos += word.len();
                return Ok(value);
            }
        }
        Err(NpyError::MalformedHeader("expected True or False".into()))
    }

    fn tuple(&mut self) -> Result<Vec<usize>, NpyError> {
        self.expect('(')?;
        let end = self
            .rest()
            .find(')')
            .ok_or_else(|| NpyError::MalformedHeader("unterminated shape tuple".into()))?;
        let inner = &self.rest()[..end];
        let mut dims = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            // Python 2 era writers emit long literals such as `10L`.
            let digits = part.trim_end_matches('L');
            dims.push(digits.parse::<usize>().map_err(|_| {
                NpyError::MalformedHeader(format!("bad shape entry {part:?}"))
            })?);
        }
        self.pos += end + 1;
        Ok(dims)
    }
}

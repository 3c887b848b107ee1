//! Reader and writer for the NPY v1.0 array container.
//!
//! Only little-endian `float32` and `int32`, C order, rank 1 to 4 are
//! accepted. Writing reproduces numpy's own header layout byte for byte
//! (including the spare space numpy reserves after the dict), so files
//! produced by `numpy.save` survive a load/save cycle unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
const PREFIX_LEN: usize = MAGIC.len() + 2 + 2;
// numpy pads the header so the leading axis can grow in place.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

/// Element type recorded in an array file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I32,
}

/// Parsed array file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset of the payload from the start of the file.
    pub payload_offset: usize,
}

/// Either element type, for callers that do not know the dtype up front.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyArray {
    F32(Tensor<f32>),
    I32(Tensor<i32>),
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let header = header_text(T::DESCR, t.shape());
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes4());
    }
    out
}

fn header_text(descr: &str, shape: &[usize]) -> String {
    let shape_repr = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}");
    let lead_digits = shape[0].to_string().len();
    header.extend(std::iter::repeat_n(
        ' ',
        GROWTH_AXIS_MAX_DIGITS.saturating_sub(lead_digits),
    ));
    let hlen = header.len() + 1;
    let pad = ALIGN - (PREFIX_LEN + hlen) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    header
}

pub fn parse_header(bytes: &[u8]) -> Result<ArrayHeader> {
    if bytes.len() < PREFIX_LEN || &bytes[..6] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = PREFIX_LEN + hlen;
    if bytes.len() < end {
        return Err(Error::MalformedHeader("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[PREFIX_LEN..end])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    if !text.ends_with('\n') {
        return Err(Error::MalformedHeader(
            "header must end with newline".into(),
        ));
    }
    let dict = DictParser::new(text).parse()?;

    let fortran = dict
        .fortran_order
        .ok_or_else(|| Error::MalformedHeader("missing 'fortran_order'".into()))?;
    let descr = dict
        .descr
        .ok_or_else(|| Error::MalformedHeader("missing 'descr'".into()))?;
    let shape = dict
        .shape
        .ok_or_else(|| Error::MalformedHeader("missing 'shape'".into()))?;
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F32,
        "<i4" => Dtype::I32,
        _ => return Err(Error::DtypeUnsupported(descr)),
    };
    if fortran {
        return Err(Error::FortranOrder);
    }
    Ok(ArrayHeader {
        dtype,
        shape,
        payload_offset: end,
    })
}

fn decode_payload<T: Element>(header: &ArrayHeader, bytes: &[u8]) -> Result<Tensor<T>> {
    let n: usize = header.shape.iter().product();
    let payload = &bytes[header.payload_offset..];
    if payload.len() != 4 * n {
        return Err(Error::MalformedHeader(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_le_bytes4([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new_finite(header.shape.clone(), data)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyArray> {
    let header = parse_header(bytes)?;
    Ok(match header.dtype {
        Dtype::F32 => AnyArray::F32(decode_payload(&header, bytes)?),
        Dtype::I32 => AnyArray::I32(decode_payload(&header, bytes)?),
    })
}

/// Decodes an array whose dtype must match `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = parse_header(bytes)?;
    let want = if T::DESCR == "<f4" {
        Dtype::F32
    } else {
        Dtype::I32
    };
    if header.dtype != want {
        let got = match header.dtype {
            Dtype::F32 => "<f4",
            Dtype::I32 => "<i4",
        };
        return Err(Error::DtypeUnsupported(format!(
            "{got} (expected {})",
            T::DESCR
        )));
    }
    decode_payload(&header, bytes)
}

pub fn load_array<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes)
}

pub fn save_array<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct HeaderDict {
    descr: Option<String>,
    fortran_order: Option<bool>,
    shape: Option<Vec<usize>>,
}

/// Parser for the tiny Python-literal subset used by array headers.
struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, what: &str) -> Error {
        Error::MalformedHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn parse(mut self) -> Result<HeaderDict> {
        let mut dict = HeaderDict::default();
        self.expect(b'{')?;
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            match key.as_str() {
                "descr" => dict.descr = Some(self.string()?),
                "fortran_order" => dict.fortran_order = Some(self.boolean()?),
                "shape" => dict.shape = Some(self.tuple()?),
                other => return Err(self.err(&format!("unexpected key {other:?}"))),
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("trailing characters"));
        }
        Ok(dict)
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn boolean(&mut self) -> Result<bool> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(self.err("expected True or False"))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                    dims.push(text.parse().map_err(|_| self.err("bad extent"))?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')'")),
                    }
                }
                _ => return Err(self.err("expected extent")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Bytes written by numpy 2.2 for np.array([[1, 2], [3, 4]], dtype='<f4').
    fn numpy_2x2() -> Vec<u8> {
        let mut b = b"\x93NUMPY\x01\x00v\x00".to_vec();
        let mut h = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }".to_string();
        h.push_str(&" ".repeat(117 - h.len()));
        h.push('\n');
        b.extend_from_slice(h.as_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_numpy_file() {
        let t: Tensor<f32> = decode(&numpy_2x2()).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reencodes_numpy_file_bit_exact() {
        let bytes = numpy_2x2();
        let t: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(encode(&t), bytes);
    }

    #[test]
    fn header_is_aligned() {
        for shape in [vec![3], vec![1, 2, 3, 4], vec![123456, 2]] {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, vec![0i32; n]).unwrap();
            let bytes = encode(&t);
            let header = parse_header(&bytes).unwrap();
            assert_eq!(header.payload_offset % 64, 0);
            assert_eq!(bytes[header.payload_offset - 1], b'\n');
        }
    }

    #[test]
    fn one_dim_shape_has_trailing_comma() {
        let t = Tensor::new(vec![3], vec![0i32, 1, 2]).unwrap();
        let bytes = encode(&t);
        let text = String::from_utf8_lossy(&bytes[10..]);
        assert!(text.contains("'shape': (3,), }"));
    }

    #[test]
    fn rejects_fortran_order() {
        let mut b = numpy_2x2();
        let pos = b.windows(5).position(|w| w == b"False").unwrap();
        b[pos..pos + 5].copy_from_slice(b"True ");
        assert!(matches!(decode::<f32>(&b), Err(Error::FortranOrder)));
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let mut b = numpy_2x2();
        b[1] = b'X';
        assert!(matches!(decode::<f32>(&b), Err(Error::MalformedHeader(_))));

        let mut b = numpy_2x2();
        let pos = b.windows(3).position(|w| w == b"<f4").unwrap();
        b[pos..pos + 3].copy_from_slice(b"<f8");
        assert!(matches!(decode::<f32>(&b), Err(Error::DtypeUnsupported(_))));

        let mut b = numpy_2x2();
        b[6] = 2;
        assert!(matches!(decode::<f32>(&b), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn rejects_dtype_mismatch_and_truncation() {
        assert!(matches!(
            decode::<i32>(&numpy_2x2()),
            Err(Error::DtypeUnsupported(_))
        ));
        let b = numpy_2x2();
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut b = numpy_2x2();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode::<f32>(&b), Err(Error::NonFinite)));
    }
}

//! Reader and writer for the `.npy` array container (format versions 1.0,
//! 2.0 and 3.0), restricted to little-endian, C-ordered real payloads.
//!
//! Layout: the magic string `\x93NUMPY`, one byte each of major and minor
//! version, a little-endian header length (`u16` for 1.0, `u32` otherwise), and
//! an ASCII Python dict literal with keys `descr`, `fortran_order` and `shape`
//! padded with spaces and a final newline so that the payload starts on a
//! 64-byte boundary.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum NpyError {
    #[error("not an array container: bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype '{0}'")]
    UnknownDtype(String),
    #[error("column-major (fortran_order) arrays are not supported")]
    UnsupportedOrder,
    #[error("payload size mismatch: header implies {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("arrays with a zero-length axis are not supported")]
    EmptyArray,
    #[error("value {value} at element {index} cannot be stored as {dtype}")]
    Unrepresentable { index: usize, value: f64, dtype: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::U8 => "|u1",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_descr(s: &str) -> Result<Self, NpyError> {
        match s {
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            "|u1" | "<u1" => Ok(DType::U8),
            other => Err(NpyError::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyHeader {
    pub version: (u8, u8),
    pub dtype: DType,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Byte offset of the payload.
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parses the preamble and header dict. Column-major arrays parse
/// successfully here and are rejected by [`decode`].
pub fn parse_header(bytes: &[u8]) -> Result<NpyHeader, NpyError> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let version = (bytes[6], bytes[7]);
    let (len_bytes, header_start) = match version.0 {
        1 => (2, 10),
        2 | 3 => (4, 12),
        _ => return Err(NpyError::UnsupportedVersion(version.0, version.1)),
    };
    if bytes.len() < header_start {
        return Err(NpyError::Header("truncated header length".into()));
    }
    let header_len = if len_bytes == 2 {
        u16::from_le_bytes([bytes[8], bytes[9]]) as usize
    } else {
        u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize
    };
    let data_offset = header_start + header_len;
    if bytes.len() < data_offset {
        return Err(NpyError::Header(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - header_start
        )));
    }
    let text = std::str::from_utf8(&bytes[header_start..data_offset])
        .map_err(|_| NpyError::Header("header is not valid text".into()))?;
    if version.0 < 3 && !text.is_ascii() {
        return Err(NpyError::Header("non-ASCII header in a version 1/2 file".into()));
    }
    let dict = match literal::parse(text.trim_end())? {
        literal::Value::Dict(d) => d,
        _ => return Err(NpyError::Header("header is not a dict".into())),
    };
    let field = |key: &str| {
        dict.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| NpyError::Header(format!("missing key '{key}'")))
    };
    let dtype = match field("descr")? {
        literal::Value::Str(s) => DType::from_descr(s)?,
        _ => return Err(NpyError::Header("descr must be a string".into())),
    };
    let fortran_order = match field("fortran_order")? {
        literal::Value::Bool(b) => *b,
        _ => return Err(NpyError::Header("fortran_order must be True or False".into())),
    };
    let shape = match field("shape")? {
        literal::Value::Tuple(items) => items
            .iter()
            .map(|v| match v {
                literal::Value::Int(n) => Ok(*n),
                _ => Err(NpyError::Header("shape entries must be integers".into())),
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(NpyError::Header("shape must be a tuple".into())),
    };
    Ok(NpyHeader {
        version,
        dtype,
        fortran_order,
        shape,
        data_offset,
    })
}

/// Decodes a complete container into a tensor and its stored dtype.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType), NpyError> {
    let header = parse_header(bytes)?;
    if header.fortran_order {
        return Err(NpyError::UnsupportedOrder);
    }
    if header.shape.contains(&0) {
        return Err(NpyError::EmptyArray);
    }
    let count = header.element_count();
    let payload = &bytes[header.data_offset..];
    let expected = count * header.dtype.size();
    if payload.len() != expected {
        return Err(NpyError::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    let tensor = Tensor::new(header.shape, data).map_err(|e| NpyError::Header(e.to_string()))?;
    Ok((tensor, header.dtype))
}

fn header_text(shape: &[usize], dtype: DType) -> String {
    let shape = match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    )
}

/// Encodes a tensor. Version 1.0 is used unless the header needs more than
/// 65535 bytes.
pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>, NpyError> {
    let dict = header_text(tensor.shape(), dtype);
    let (version, len_bytes) = if dict.len() + 1 + 10 + ALIGN <= u16::MAX as usize {
        (1u8, 2)
    } else {
        (2u8, 4)
    };
    let preamble = 6 + 2 + len_bytes;
    let unpadded = preamble + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + padding + 1;

    let mut out = Vec::with_capacity(preamble + header_len + tensor.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[version, 0]);
    if len_bytes == 2 {
        out.extend_from_slice(&(header_len as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
    }
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');

    for (index, &value) in tensor.data().iter().enumerate() {
        match dtype {
            DType::F64 => out.extend_from_slice(&value.to_le_bytes()),
            DType::F32 => {
                let v = value as f32;
                if v as f64 != value && value.is_finite() {
                    return Err(NpyError::Unrepresentable {
                        index,
                        value,
                        dtype: "f32",
                    });
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
            DType::U8 => {
                if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
                    return Err(NpyError::Unrepresentable {
                        index,
                        value,
                        dtype: "u8",
                    });
                }
                out.push(value as u8);
            }
        }
    }
    Ok(out)
}

/// Converts a tensor to `f32` precision first so it can be stored as `<f4`.
pub fn round_to_f32(tensor: &Tensor) -> Tensor {
    tensor.map(|x| x as f32 as f64)
}

pub fn load_array_file(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(load_array_file_with_dtype(path)?.0)
}

pub fn load_array_file_with_dtype(path: impl AsRef<Path>) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn save_array_file(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(tensor, dtype)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Just enough of the Python literal grammar for `.npy` headers.
mod literal {
    use super::NpyError;

    #[derive(Debug, Clone, PartialEq)]
    pub enum Value {
        Str(String),
        Bool(bool),
        Int(usize),
        Tuple(Vec<Value>),
        Dict(Vec<(String, Value)>),
    }

    struct Parser<'a> {
        s: &'a [u8],
        pos: usize,
    }

    fn err<T>(msg: impl Into<String>) -> Result<T, NpyError> {
        Err(NpyError::Header(msg.into()))
    }

    pub fn parse(text: &str) -> Result<Value, NpyError> {
        let mut p = Parser {
            s: text.as_bytes(),
            pos: 0,
        };
        let v = p.value()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return err(format!("trailing characters at offset {}", p.pos));
        }
        Ok(v)
    }

    impl Parser<'_> {
        fn skip_ws(&mut self) {
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
        }

        fn peek(&mut self) -> Option<u8> {
            self.skip_ws();
            self.s.get(self.pos).copied()
        }

        fn expect(&mut self, c: u8) -> Result<(), NpyError> {
            if self.peek() == Some(c) {
                self.pos += 1;
                Ok(())
            } else {
                err(format!("expected '{}' at offset {}", c as char, self.pos))
            }
        }

        fn value(&mut self) -> Result<Value, NpyError> {
            match self.peek() {
                Some(b'{') => self.dict(),
                Some(b'(') => self.tuple(),
                Some(b'\'') | Some(b'"') => Ok(Value::Str(self.string()?)),
                Some(c) if c.is_ascii_digit() => self.int(),
                Some(c) if c.is_ascii_alphabetic() => self.word(),
                Some(c) => err(format!("unexpected '{}' at offset {}", c as char, self.pos)),
                None => err("unexpected end of header"),
            }
        }

        fn string(&mut self) -> Result<String, NpyError> {
            let quote = self.s[self.pos];
            self.pos += 1;
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos] != quote {
                self.pos += 1;
            }
            if self.pos == self.s.len() {
                return err("unterminated string");
            }
            let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
            self.pos += 1;
            Ok(out)
        }

        fn int(&mut self) -> Result<Value, NpyError> {
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            // Python 2 era writers emit `3L`.
            if self.s.get(self.pos) == Some(&b'L') {
                self.pos += 1;
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap().trim_end_matches('L');
            digits
                .parse()
                .map(Value::Int)
                .or_else(|_| err(format!("bad integer '{digits}'")))
        }

        fn word(&mut self) -> Result<Value, NpyError> {
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
                self.pos += 1;
            }
            match &self.s[start..self.pos] {
                b"True" => Ok(Value::Bool(true)),
                b"False" => Ok(Value::Bool(false)),
                other => err(format!("unknown token '{}'", String::from_utf8_lossy(other))),
            }
        }

        fn tuple(&mut self) -> Result<Value, NpyError> {
            self.expect(b'(')?;
            let mut items = Vec::new();
            loop {
                if self.peek() == Some(b')') {
                    self.pos += 1;
                    return Ok(Value::Tuple(items));
                }
                items.push(self.value()?);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {}
                    _ => return err("expected ',' or ')' in tuple"),
                }
            }
        }

        fn dict(&mut self) -> Result<Value, NpyError> {
            self.expect(b'{')?;
            let mut items = Vec::new();
            loop {
                match self.peek() {
                    Some(b'}') => {
                        self.pos += 1;
                        return Ok(Value::Dict(items));
                    }
                    Some(b'\'') | Some(b'"') => {
                        let key = self.string()?;
                        self.expect(b':')?;
                        let v = self.value()?;
                        items.push((key, v));
                        match self.peek() {
                            Some(b',') => self.pos += 1,
                            Some(b'}') => {}
                            _ => return err("expected ',' or '}' in dict"),
                        }
                    }
                    _ => return err("dict keys must be strings"),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(version: u8, dict: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[version, 0]);
        let text = format!("{dict}\n");
        if version == 1 {
            out.extend_from_slice(&(text.len() as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn header_fields_for_2x2_f32() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t, DType::F32).unwrap();
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.shape, vec![2, 2]);
        assert_eq!(h.dtype.size(), 4);
        assert_eq!(h.version, (1, 0));
        assert!(!h.fortran_order);
        assert_eq!(h.data_offset % ALIGN, 0);
        assert_eq!(bytes.len(), h.data_offset + 16);
        assert_eq!(bytes[h.data_offset - 1], b'\n');
    }

    #[test]
    fn numpy_style_headers_parse() {
        let p = [0u8; 24];
        let b = raw(1, "{'descr': '<f8', 'fortran_order': False, 'shape': (3,), }", &p);
        assert_eq!(decode(&b).unwrap().0.shape(), &[3]);
        let b = raw(2, "{\"descr\":\"<f4\",\"fortran_order\":False,\"shape\":(2, 3)}", &p);
        assert_eq!(decode(&b).unwrap().0.shape(), &[2, 3]);
        let b = raw(1, "{'descr': '<f8', 'fortran_order': False, 'shape': (3L,), }", &p);
        assert_eq!(decode(&b).unwrap().0.shape(), &[3]);
        let b = raw(1, "{'descr': '<f8', 'fortran_order': False, 'shape': (), }", &p[..8]);
        assert_eq!(decode(&b).unwrap().0.len(), 1);
    }

    #[test]
    fn specified_errors() {
        let p = [0u8; 16];
        let fortran = raw(1, "{'descr': '<f4', 'fortran_order': True, 'shape': (2, 2), }", &p);
        assert_eq!(decode(&fortran).unwrap_err(), NpyError::UnsupportedOrder);
        let dtype = raw(1, "{'descr': '<c16', 'fortran_order': False, 'shape': (2,), }", &p);
        assert_eq!(decode(&dtype).unwrap_err(), NpyError::UnknownDtype("<c16".into()));
        let short = raw(1, "{'descr': '<f4', 'fortran_order': False, 'shape': (5,), }", &p);
        assert_eq!(
            decode(&short).unwrap_err(),
            NpyError::PayloadSize {
                expected: 20,
                actual: 16
            }
        );
        assert_eq!(decode(b"PK\x03\x04garbage").unwrap_err(), NpyError::BadMagic);
        assert_eq!(decode(b"\x93NUMPY\x09\x00").unwrap_err(), NpyError::UnsupportedVersion(9, 0));
        let missing = raw(1, "{'descr': '<f4', 'shape': (4,), }", &p);
        assert!(matches!(decode(&missing), Err(NpyError::Header(_))));
        let empty = raw(1, "{'descr': '<f4', 'fortran_order': False, 'shape': (0, 3), }", &[]);
        assert_eq!(decode(&empty).unwrap_err(), NpyError::EmptyArray);
    }

    #[test]
    fn unrepresentable_values_rejected() {
        let t = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(matches!(encode(&t, DType::U8), Err(NpyError::Unrepresentable { index: 1, .. })));
        let t = Tensor::new(vec![1], vec![0.1]).unwrap();
        assert!(encode(&t, DType::F32).is_err());
        assert!(encode(&round_to_f32(&t), DType::F32).is_ok());
    }
}

//! Low-level header and image-file-directory parsing.

use std::collections::HashMap;
use std::io::{Read, Seek, SeekFrom};

use super::{ByteOrder, TiffError, Variant};

pub(crate) mod tags {
    pub const IMAGE_WIDTH: u16 = 256;
    pub const IMAGE_LENGTH: u16 = 257;
    pub const BITS_PER_SAMPLE: u16 = 258;
    pub const COMPRESSION: u16 = 259;
    pub const STRIP_OFFSETS: u16 = 273;
    pub const SAMPLES_PER_PIXEL: u16 = 277;
    pub const ROWS_PER_STRIP: u16 = 278;
    pub const STRIP_BYTE_COUNTS: u16 = 279;
    pub const PLANAR_CONFIGURATION: u16 = 284;
    pub const PREDICTOR: u16 = 317;
    pub const TILE_WIDTH: u16 = 322;
    pub const TILE_LENGTH: u16 = 323;
    pub const TILE_OFFSETS: u16 = 324;
    pub const TILE_BYTE_COUNTS: u16 = 325;
    pub const SAMPLE_FORMAT: u16 = 339;
    pub const MODEL_PIXEL_SCALE: u16 = 33550;
}

/// Reads fixed-width integers honoring the file's byte order.
pub(crate) struct Cursor<R> {
    inner: R,
    order: ByteOrder,
}

impl<R: Read + Seek> Cursor<R> {
    pub fn new(inner: R, order: ByteOrder) -> Self {
        Cursor { inner, order }
    }

    pub fn seek(&mut self, pos: u64) -> std::io::Result<()> {
        self.inner.seek(SeekFrom::Start(pos)).map(|_| ())
    }

    pub fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> std::io::Result<()> {
        self.inner.read_exact(buf)
    }

    pub fn u16(&mut self) -> std::io::Result<u16> {
        let b = self.bytes::<2>()?;
        Ok(self.order.u16(b))
    }

    pub fn u32(&mut self) -> std::io::Result<u32> {
        let b = self.bytes::<4>()?;
        Ok(self.order.u32(b))
    }

    pub fn u64(&mut self) -> std::io::Result<u64> {
        let b = self.bytes::<8>()?;
        Ok(self.order.u64(b))
    }
}

/// TIFF field types this reader understands as numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FieldType {
    Byte,
    Ascii,
    Short,
    Long,
    Rational,
    SByte,
    Undefined,
    SShort,
    SLong,
    SRational,
    Float,
    Double,
    Ifd,
    Long8,
    SLong8,
    Ifd8,
}

impl FieldType {
    fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            1 => FieldType::Byte,
            2 => FieldType::Ascii,
            3 => FieldType::Short,
            4 => FieldType::Long,
            5 => FieldType::Rational,
            6 => FieldType::SByte,
            7 => FieldType::Undefined,
            8 => FieldType::SShort,
            9 => FieldType::SLong,
            10 => FieldType::SRational,
            11 => FieldType::Float,
            12 => FieldType::Double,
            13 => FieldType::Ifd,
            16 => FieldType::Long8,
            17 => FieldType::SLong8,
            18 => FieldType::Ifd8,
            _ => return None,
        })
    }

    fn size(self) -> u64 {
        match self {
            FieldType::Byte | FieldType::Ascii | FieldType::SByte | FieldType::Undefined => 1,
            FieldType::Short | FieldType::SShort => 2,
            FieldType::Long | FieldType::SLong | FieldType::Float | FieldType::Ifd => 4,
            FieldType::Rational
            | FieldType::SRational
            | FieldType::Double
            | FieldType::Long8
            | FieldType::SLong8
            | FieldType::Ifd8 => 8,
        }
    }
}

/// One directory entry, value not yet materialized.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RawEntry {
    field_type: FieldType,
    count: u64,
    /// Inline value bytes (left-justified) or the offset to them.
    value_field: [u8; 8],
    inline: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Directory {
    pub entries: HashMap<u16, RawEntry>,
    pub next: u64,
}

pub(crate) struct Header {
    pub order: ByteOrder,
    pub variant: Variant,
    pub first_ifd: u64,
}

pub(crate) fn parse_header(head: &[u8]) -> Result<Header, TiffError> {
    if head.len() < 8 {
        return Err(TiffError::TruncatedHeader);
    }
    let order = match &head[..2] {
        b"II" => ByteOrder::Little,
        b"MM" => ByteOrder::Big,
        _ => return Err(TiffError::BadMagic),
    };
    match order.u16([head[2], head[3]]) {
        42 => Ok(Header {
            order,
            variant: Variant::Classic,
            first_ifd: order.u32(head[4..8].try_into().unwrap()) as u64,
        }),
        43 => {
            if head.len() < 16 {
                return Err(TiffError::TruncatedHeader);
            }
            let offset_size = order.u16([head[4], head[5]]);
            let reserved = order.u16([head[6], head[7]]);
            if offset_size != 8 || reserved != 0 {
                return Err(TiffError::BadMagic);
            }
            Ok(Header {
                order,
                variant: Variant::BigTiff,
                first_ifd: order.u64(head[8..16].try_into().unwrap()),
            })
        }
        _ => Err(TiffError::BadMagic),
    }
}

pub(crate) fn read_directory<R: Read + Seek>(
    cur: &mut Cursor<R>,
    variant: Variant,
    offset: u64,
    file_len: u64,
) -> Result<Directory, TiffError> {
    let truncated = |_| TiffError::TruncatedDirectory { offset };
    if offset >= file_len {
        return Err(TiffError::TruncatedDirectory { offset });
    }
    cur.seek(offset)?;
    let count = match variant {
        Variant::Classic => cur.u16().map_err(truncated)? as u64,
        Variant::BigTiff => cur.u64().map_err(truncated)?,
    };
    let entry_size = match variant {
        Variant::Classic => 12,
        Variant::BigTiff => 20,
    };
    if count.saturating_mul(entry_size) > file_len - offset {
        return Err(TiffError::TruncatedDirectory { offset });
    }
    let mut entries = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let tag = cur.u16().map_err(truncated)?;
        let type_code = cur.u16().map_err(truncated)?;
        let (count, value_field, field_len) = match variant {
            Variant::Classic => {
                let n = cur.u32().map_err(truncated)? as u64;
                let v = cur.bytes::<4>().map_err(truncated)?;
                let mut field = [0u8; 8];
                field[..4].copy_from_slice(&v);
                (n, field, 4)
            }
            Variant::BigTiff => {
                let n = cur.u64().map_err(truncated)?;
                (n, cur.bytes::<8>().map_err(truncated)?, 8)
            }
        };
        // Unknown types are legal; skip them like any tag we do not consume.
        let Some(field_type) = FieldType::from_code(type_code) else {
            continue;
        };
        let inline = count.saturating_mul(field_type.size()) <= field_len;
        entries.insert(
            tag,
            RawEntry {
                field_type,
                count,
                value_field,
                inline,
            },
        );
    }
    let next = match variant {
        Variant::Classic => cur.u32().map_err(truncated)? as u64,
        Variant::BigTiff => cur.u64().map_err(truncated)?,
    };
    Ok(Directory { entries, next })
}

/// Materialized numeric value of an entry.
pub(crate) enum Value {
    Unsigned(Vec<u64>),
    Float(Vec<f64>),
}

impl Directory {
    pub fn has(&self, tag: u16) -> bool {
        self.entries.contains_key(&tag)
    }

    pub fn read<R: Read + Seek>(
        &self,
        cur: &mut Cursor<R>,
        variant: Variant,
        tag: u16,
        file_len: u64,
    ) -> Result<Option<Value>, TiffError> {
        let Some(e) = self.entries.get(&tag) else {
            return Ok(None);
        };
        let bytes_len = e
            .count
            .checked_mul(e.field_type.size())
            .ok_or(TiffError::InvalidTag {
                tag,
                reason: "value size overflows",
            })?;
        let bytes = if e.inline {
            e.value_field[..bytes_len as usize].to_vec()
        } else {
            let at = match variant {
                Variant::Classic => cur.order.u32(e.value_field[..4].try_into().unwrap()) as u64,
                Variant::BigTiff => cur.order.u64(e.value_field),
            };
            if at.checked_add(bytes_len).is_none_or(|end| end > file_len) {
                return Err(TiffError::InvalidTag {
                    tag,
                    reason: "value lies beyond end of file",
                });
            }
            cur.seek(at)?;
            let mut buf = vec![0u8; bytes_len as usize];
            cur.read_exact(&mut buf)?;
            buf
        };
        Ok(Some(decode_values(e, cur.order, &bytes)))
    }
}

fn decode_values(e: &RawEntry, order: ByteOrder, bytes: &[u8]) -> Value {
    let size = e.field_type.size() as usize;
    let items = bytes.chunks_exact(size);
    match e.field_type {
        FieldType::Byte | FieldType::Undefined | FieldType::Ascii => {
            Value::Unsigned(bytes.iter().map(|b| *b as u64).collect())
        }
        FieldType::SByte => Value::Unsigned(bytes.iter().map(|b| *b as i8 as u64).collect()),
        FieldType::Short => {
            Value::Unsigned(items.map(|c| order.u16([c[0], c[1]]) as u64).collect())
        }
        FieldType::SShort => Value::Unsigned(
            items
                .map(|c| order.u16([c[0], c[1]]) as i16 as u64)
                .collect(),
        ),
        FieldType::Long | FieldType::Ifd => Value::Unsigned(
            items
                .map(|c| order.u32(c.try_into().unwrap()) as u64)
                .collect(),
        ),
        FieldType::SLong => Value::Unsigned(
            items
                .map(|c| order.u32(c.try_into().unwrap()) as i32 as u64)
                .collect(),
        ),
        FieldType::Long8 | FieldType::SLong8 | FieldType::Ifd8 => {
            Value::Unsigned(items.map(|c| order.u64(c.try_into().unwrap())).collect())
        }
        FieldType::Float => Value::Float(
            items
                .map(|c| f32::from_bits(order.u32(c.try_into().unwrap())) as f64)
                .collect(),
        ),
        FieldType::Double => Value::Float(
            items
                .map(|c| f64::from_bits(order.u64(c.try_into().unwrap())))
                .collect(),
        ),
        FieldType::Rational | FieldType::SRational => Value::Float(
            items
                .map(|c| {
                    let n = order.u32(c[..4].try_into().unwrap());
                    let d = order.u32(c[4..].try_into().unwrap());
                    if e.field_type == FieldType::SRational {
                        n as i32 as f64 / d as i32 as f64
                    } else {
                        n as f64 / d as f64
                    }
                })
                .collect(),
        ),
    }
}

impl Value {
    pub fn into_unsigned(self, tag: u16) -> Result<Vec<u64>, TiffError> {
        match self {
            Value::Unsigned(v) => Ok(v),
            Value::Float(_) => Err(TiffError::InvalidTag {
                tag,
                reason: "expected an integer type",
            }),
        }
    }

    pub fn into_float(self) -> Vec<f64> {
        match self {
            Value::Unsigned(v) => v.into_iter().map(|x| x as f64).collect(),
            Value::Float(v) => v,
        }
    }
}

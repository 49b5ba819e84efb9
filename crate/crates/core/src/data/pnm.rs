//! Binary PGM (`P5`) masks and PPM (`P6`) images, maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded raster: `channels` interleaved bytes per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::contract("pnm_encode", format!("{c} channels"))),
    };
    if r.bytes.len() != r.width * r.height * r.channels {
        return Err(Error::shape(
            "pnm_encode",
            &[r.height, r.width, r.channels],
            &[r.bytes.len()],
        ));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.bytes);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments that run to end of line.
    fn skip_space(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode(buf: &[u8]) -> Result<Raster> {
    let mut c = Cursor { buf, pos: 0 };
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if !buf.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected single whitespace before payload"));
    }
    c.pos += 1;
    let need = width * height * channels;
    let payload = &buf[c.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: buf.len(),
            msg: format!("payload truncated: {} of {need} bytes", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Parse {
            offset: c.pos + need,
            msg: format!("{} trailing bytes", payload.len() - need),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        bytes: payload.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_header() {
        let mut buf = b"P5\n2 2\n255\n".to_vec();
        buf.extend([0, 255, 255, 0]);
        let r = decode(&buf).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 2, 1));
        assert_eq!(r.bytes, vec![0, 255, 255, 0]);
    }

    #[test]
    fn comments_in_header() {
        let mut buf = b"P6 # made by hand\n1\n# rows\n1 255\n".to_vec();
        buf.extend([1, 2, 3]);
        assert_eq!(decode(&buf).unwrap().bytes, vec![1, 2, 3]);
    }

    fn offset_of(e: Error) -> usize {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn errors_report_offsets() {
        assert_eq!(offset_of(decode(b"P3\n1 1\n255\n").unwrap_err()), 0);
        assert_eq!(offset_of(decode(b"P5\n2 2\n65535\n\0\0").unwrap_err()), 7);
        assert_eq!(offset_of(decode(b"P5\n2 x\n255\n").unwrap_err()), 5);
        let trunc = b"P5\n2 2\n255\n\0\0";
        assert_eq!(offset_of(decode(trunc).unwrap_err()), trunc.len());
        assert_eq!(offset_of(decode(b"P5\n1 1\n255\n\0\0").unwrap_err()), 12);
        assert_eq!(offset_of(decode(b"P5\n0 1\n255\n").unwrap_err()), 10);
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..20, h in 1usize..20, color in any::<bool>(), seed in any::<u64>()) {
            let channels = if color { 3 } else { 1 };
            let bytes = (0..w * h * channels).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let r = Raster { width: w, height: h, channels, bytes };
            prop_assert_eq!(decode(&encode(&r).unwrap()).unwrap(), r);
        }
    }
}

//! Binary PPM (P6, maxval 255) images mapped to and from `[-1, 1]`.

use std::fs;
use std::path::Path;

use crate::data::{PairedDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted width or height.
pub const MAX_EXTENT: usize = 1 << 14;

/// `q = round((v + 1) * 127.5)`, halves rounded up, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("PPM needs an [h, w, 3] image, got {s:?}")));
    }
    if let Some(v) = image.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, msg: msg.into() }
    }

    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format { offset: start, msg: format!("{what} overflows") })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format { offset: 0, msg: "missing P6 magic".into() });
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 || width > MAX_EXTENT || height > MAX_EXTENT {
        return Err(h.err(format!("unsupported extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(h.err(format!("maxval {maxval} (only 255 is supported)")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected single whitespace before payload"));
    }
    let start = h.pos + 1;
    let need = width * height * 3;
    let payload = &bytes[start..];
    if payload.len() != need {
        return Err(Error::Format {
            offset: start,
            msg: format!("payload has {} bytes, expected {need}", payload.len()),
        });
    }
    Tensor::new(vec![height, width, 3], payload.iter().map(|&q| dequantize(q)).collect())
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Writes `<root>/<task>/<split>/<index>_{cond|target}.ppm`.
pub fn write_dataset(ds: &PairedDataset, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Val] {
        let dir = root.join(&ds.name).join(match split {
            Split::Train => "train",
            Split::Val => "val",
        });
        fs::create_dir_all(&dir)?;
        for i in ds.indices(split) {
            let p = &ds.pairs[i];
            write_ppm(&p.condition, &dir.join(format!("{i:04}_cond.ppm")))?;
            write_ppm(&p.target, &dir.join(format!("{i:04}_target.ppm")))?;
        }
    }
    Ok(())
}

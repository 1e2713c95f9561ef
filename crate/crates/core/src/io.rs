//! PFM / PPM / PGM readers and writers.
//!
//! PFM (portable float map): header `PF` for 3-channel or `Pf` for
//! single-channel, ASCII width/height, a scale line whose sign encodes
//! endianness (negative = little-endian), then raw f32 samples with rows
//! stored bottom-to-top and channels interleaved per pixel. Round trips are
//! bit-exact.
//!
//! PPM (`P6`) and PGM (`P5`) binary variants cover 8-bit color/gray; `P5` with
//! maxval 65535 stores 16-bit big-endian samples and is used for label maps.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::MultiChannelImage;

/// Writes `contents` atomically: a temp file in the same directory is renamed
/// over the destination only after a successful full write.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct TokenReader<R: Read> {
    inner: R,
}

impl<R: Read> TokenReader<R> {
    fn new(inner: R) -> Self {
        TokenReader { inner }
    }

    fn read_byte(&mut self) -> std::io::Result<Option<u8>> {
        let mut b = [0u8; 1];
        match self.inner.read_exact(&mut b) {
            Ok(()) => Ok(Some(b[0])),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Next whitespace-delimited token, skipping `#` comment lines. Consumes
    /// exactly one trailing whitespace byte, which is what the netpbm/PFM
    /// family requires before binary payloads.
    fn next_token(&mut self, path: &Path) -> Result<String> {
        let mut tok = Vec::new();
        let mut in_comment = false;
        loop {
            let b = self
                .read_byte()
                .map_err(|e| Error::io(path, e))?
                .ok_or_else(|| Error::format(path, "unexpected end of header"))?;
            if in_comment {
                if b == b'\n' {
                    in_comment = false;
                }
                continue;
            }
            if b == b'#' && tok.is_empty() {
                in_comment = true;
                continue;
            }
            if b.is_ascii_whitespace() {
                if tok.is_empty() {
                    continue;
                }
                break;
            }
            tok.push(b);
        }
        String::from_utf8(tok).map_err(|_| Error::format(path, "non-utf8 header token"))
    }

    fn read_payload(&mut self, len: usize, path: &Path) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Ok(buf)
    }
}

fn parse_dim(tok: &str, what: &str, path: &Path) -> Result<usize> {
    let v: usize = tok
        .parse()
        .map_err(|_| Error::format(path, format!("invalid {what}: {tok:?}")))?;
    if v == 0 {
        return Err(Error::format(path, format!("{what} must be positive")));
    }
    Ok(v)
}

/// Reads a PFM file into a 1- or 3-channel image.
pub fn read_pfm(path: &Path) -> Result<MultiChannelImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = TokenReader::new(BufReader::new(file));
    let magic = r.next_token(path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("not a PFM file (magic {other:?})"))),
    };
    let width = parse_dim(&r.next_token(path)?, "width", path)?;
    let height = parse_dim(&r.next_token(path)?, "height", path)?;
    let scale_tok = r.next_token(path)?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::format(path, format!("invalid scale: {scale_tok:?}")))?;
    let little_endian = scale < 0.0;

    let n = width * height * channels;
    let raw = r.read_payload(n * 4, path)?;
    let mut img = MultiChannelImage::new(width, height, channels);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let pixel = i / channels;
        let c = i % channels;
        let x = pixel % width;
        // Rows are stored bottom-to-top.
        let y = height - 1 - pixel / width;
        img.set(x, y, c, v);
    }
    Ok(img)
}

/// Writes a 1- or 3-channel image as little-endian PFM (scale line `-1.0`).
pub fn write_pfm(path: &Path, img: &MultiChannelImage) -> Result<()> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Shape(format!(
                "PFM supports 1 or 3 channels, image has {c}"
            )))
        }
    };
    let mut out = Vec::with_capacity(32 + img.data().len() * 4);
    out.extend_from_slice(format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).as_bytes());
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for c in 0..img.channels() {
                out.extend_from_slice(&img.get(x, y, c).to_le_bytes());
            }
        }
    }
    write_atomic(path, &out)
}

/// Reads an 8-bit binary PPM (`P6`) into a 3-channel image scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<MultiChannelImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = TokenReader::new(BufReader::new(file));
    let magic = r.next_token(path)?;
    if magic != "P6" {
        return Err(Error::format(path, format!("not a binary PPM (magic {magic:?})")));
    }
    let width = parse_dim(&r.next_token(path)?, "width", path)?;
    let height = parse_dim(&r.next_token(path)?, "height", path)?;
    let maxval = parse_dim(&r.next_token(path)?, "maxval", path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported PPM maxval {maxval}")));
    }
    let raw = r.read_payload(width * height * 3, path)?;
    let mut img = MultiChannelImage::new(width, height, 3);
    for (i, b) in raw.iter().enumerate() {
        let pixel = i / 3;
        let c = i % 3;
        img.set(pixel % width, pixel / width, c, *b as f32 / 255.0);
    }
    Ok(img)
}

/// Writes a 3-channel image in [0, 1] as binary PPM (`P6`).
pub fn write_ppm(path: &Path, img: &MultiChannelImage) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "PPM requires 3 channels, image has {}",
            img.channels()
        )));
    }
    let mut out = Vec::with_capacity(32 + img.pixel_count() * 3);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = (img.get(x, y, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    write_atomic(path, &out)
}

/// Reads an 8-bit binary PGM (`P5`) into a single-channel image in [0, 1].
pub fn read_pgm(path: &Path) -> Result<MultiChannelImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = TokenReader::new(BufReader::new(file));
    let magic = r.next_token(path)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("not a binary PGM (magic {magic:?})")));
    }
    let width = parse_dim(&r.next_token(path)?, "width", path)?;
    let height = parse_dim(&r.next_token(path)?, "height", path)?;
    let maxval = parse_dim(&r.next_token(path)?, "maxval", path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported PGM maxval {maxval}")));
    }
    let raw = r.read_payload(width * height, path)?;
    let mut img = MultiChannelImage::new(width, height, 1);
    for (i, b) in raw.iter().enumerate() {
        img.set(i % width, i / width, 0, *b as f32 / 255.0);
    }
    Ok(img)
}

/// Writes a single-channel image in [0, 1] as binary PGM (`P5`).
pub fn write_pgm(path: &Path, img: &MultiChannelImage) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Shape(format!(
            "PGM requires 1 channel, image has {}",
            img.channels()
        )));
    }
    let mut out = Vec::with_capacity(32 + img.pixel_count());
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push((img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_atomic(path, &out)
}

/// Writes a label raster as 16-bit PGM (`P5`, maxval 65535, big-endian).
pub fn write_label_map(path: &Path, labels: &[u32], width: usize, height: usize) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::Shape(format!(
            "label buffer length {} does not match {width}x{height}",
            labels.len()
        )));
    }
    if let Some(&max) = labels.iter().max() {
        if max > u16::MAX as u32 {
            return Err(Error::Input(format!(
                "label {max} exceeds the 16-bit PGM range"
            )));
        }
    }
    let mut out = Vec::with_capacity(32 + labels.len() * 2);
    out.extend_from_slice(format!("P5\n{width} {height}\n65535\n").as_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u16).to_be_bytes());
    }
    write_atomic(path, &out)
}

/// Reads a 16-bit PGM label raster.
pub fn read_label_map(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = TokenReader::new(BufReader::new(file));
    let magic = r.next_token(path)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("not a binary PGM (magic {magic:?})")));
    }
    let width = parse_dim(&r.next_token(path)?, "width", path)?;
    let height = parse_dim(&r.next_token(path)?, "height", path)?;
    let maxval = parse_dim(&r.next_token(path)?, "maxval", path)?;
    if maxval != 65535 {
        return Err(Error::format(
            path,
            format!("label maps use maxval 65535, found {maxval}"),
        ));
    }
    let raw = r.read_payload(width * height * 2, path)?;
    let labels = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    Ok((labels, width, height))
}

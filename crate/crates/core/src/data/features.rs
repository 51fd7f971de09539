//! `.cpff` feature files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header (40 bytes)
//!   magic    b"CPFF"
//!   version  u32 = 1
//!   D T B d M N   u32 each
//!   count    u64
//! record (repeated `count` times)
//!   id_len   u16, then id_len bytes of UTF-8
//!   attr     u32
//!   obj      u32
//!   deep class token        D   f32
//!   deep patch tokens       T*D f32
//!   per shallow block (B times):
//!     class token           D   f32
//!     patch tokens          T*D f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FeatureBundle;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"CPFF";
pub const FEATURE_VERSION: u32 = 1;
/// magic + version + six dimensions + count.
pub const FEATURE_HEADER_LEN: u64 = 4 + 4 + 6 * 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    /// `D`
    pub visual_dim: u32,
    /// `T`
    pub tokens: u32,
    /// `B`
    pub blocks: u32,
    /// `d`
    pub text_dim: u32,
    /// `M`
    pub num_attrs: u32,
    /// `N`
    pub num_objs: u32,
    pub count: u64,
}

impl FeatureFileHeader {
    pub fn new(visual_dim: usize, tokens: usize, blocks: usize, text_dim: usize, num_attrs: usize, num_objs: usize, count: usize) -> Self {
        FeatureFileHeader {
            version: FEATURE_VERSION,
            visual_dim: visual_dim as u32,
            tokens: tokens as u32,
            blocks: blocks as u32,
            text_dim: text_dim as u32,
            num_attrs: num_attrs as u32,
            num_objs: num_objs as u32,
            count: count as u64,
        }
    }

    fn dims(&self) -> [u32; 6] {
        [
            self.visual_dim,
            self.tokens,
            self.blocks,
            self.text_dim,
            self.num_attrs,
            self.num_objs,
        ]
    }

    fn validate(&self, offset: u64) -> Result<()> {
        if self.version != FEATURE_VERSION {
            return Err(Error::format(offset + 4, format!("unsupported version {}", self.version)));
        }
        if let Some(i) = self.dims().iter().position(|&d| d == 0) {
            return Err(Error::format(offset + 8 + 4 * i as u64, "dimension must be at least 1"));
        }
        Ok(())
    }

    /// Bytes of one record excluding its id.
    fn record_floats(&self) -> usize {
        let (d, t, b) = (self.visual_dim as usize, self.tokens as usize, self.blocks as usize);
        d + t * d + b * (d + t * d)
    }
}

/// Byte reader that remembers how far it has read.
pub(crate) struct Cursor<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> Cursor<R> {
    pub(crate) fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub(crate) fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated while reading {what}"),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    /// `n` little-endian `f32`s widened to `f64`.
    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.bytes(&mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.offset;
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| Error::format(start, format!("{what} is not UTF-8")))
    }
}

pub(crate) fn put_f32s<W: Write>(w: &mut W, data: &[f64]) -> io::Result<()> {
    for &x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Data(format!("name of {} bytes exceeds the u16 length field", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_header<R: Read>(cur: &mut Cursor<R>) -> Result<FeatureFileHeader> {
    let mut magic = [0u8; 4];
    cur.bytes(&mut magic, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"CPFF\"")));
    }
    let version = cur.u32("version")?;
    let mut dims = [0u32; 6];
    for d in dims.iter_mut() {
        *d = cur.u32("header dimensions")?;
    }
    let count = cur.u64("image count")?;
    let h = FeatureFileHeader {
        version,
        visual_dim: dims[0],
        tokens: dims[1],
        blocks: dims[2],
        text_dim: dims[3],
        num_attrs: dims[4],
        num_objs: dims[5],
        count,
    };
    h.validate(0)?;
    Ok(h)
}

/// Streaming reader over the records of a feature file.
pub struct FeatureReader<R> {
    cur: Cursor<R>,
    header: FeatureFileHeader,
    remaining: u64,
}

impl FeatureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> FeatureReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut cur = Cursor::new(reader);
        let header = read_header(&mut cur)?;
        Ok(FeatureReader {
            cur,
            remaining: header.count,
            header,
        })
    }

    pub fn header(&self) -> &FeatureFileHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<FeatureBundle> {
        let h = self.header;
        let (d, t) = (h.visual_dim as usize, h.tokens as usize);
        let record_start = self.cur.offset;
        let image_id = self.cur.string("image id")?;
        let label_at = self.cur.offset;
        let attr = self.cur.u32("attribute label")?;
        let obj = self.cur.u32("object label")?;
        if attr >= h.num_attrs || obj >= h.num_objs {
            return Err(Error::format(
                label_at,
                format!(
                    "record {image_id:?} (starting at byte {record_start}) has label ({attr}, {obj}) outside {}x{}",
                    h.num_attrs, h.num_objs
                ),
            ));
        }
        let deep_class = Tensor::matrix(1, d, self.cur.f32s(d, "deep class token")?)?;
        let deep_patches = Tensor::matrix(t, d, self.cur.f32s(t * d, "deep patch tokens")?)?;
        let mut shallow_class = Vec::with_capacity(h.blocks as usize);
        let mut shallow_blocks = Vec::with_capacity(h.blocks as usize);
        for _ in 0..h.blocks {
            shallow_class.push(Tensor::matrix(1, d, self.cur.f32s(d, "shallow class token")?)?);
            shallow_blocks.push(Tensor::matrix(t, d, self.cur.f32s(t * d, "shallow patch tokens")?)?);
        }
        Ok(FeatureBundle {
            image_id,
            deep_class,
            deep_patches,
            shallow_blocks,
            shallow_class,
            attr: attr as usize,
            obj: obj as usize,
        })
    }

    /// Fails if bytes remain after the declared records.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.cur.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::format(self.cur.offset, "trailing bytes after the last record")),
        }
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<FeatureBundle>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let r = self.read_record();
        if r.is_err() {
            self.remaining = 0;
        }
        Some(r)
    }
}

/// Reads a whole feature file.
pub fn read_features(path: impl AsRef<Path>) -> Result<(FeatureFileHeader, Vec<FeatureBundle>)> {
    read_features_from(BufReader::new(File::open(path)?))
}

pub fn read_features_from<R: Read>(reader: R) -> Result<(FeatureFileHeader, Vec<FeatureBundle>)> {
    let mut r = FeatureReader::new(reader)?;
    let header = *r.header();
    let bundles = r.by_ref().collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((header, bundles))
}

/// Writes `bundles` under `header`; the header's count is replaced by the
/// number of bundles.
pub fn write_features_to<W: Write>(
    writer: W,
    header: &FeatureFileHeader,
    bundles: &[FeatureBundle],
) -> Result<()> {
    let mut h = *header;
    h.count = bundles.len() as u64;
    h.validate(0)?;
    let (d, t, b) = (h.visual_dim as usize, h.tokens as usize, h.blocks as usize);
    for bundle in bundles {
        bundle.validate(d, t, b)?;
        if bundle.attr >= h.num_attrs as usize || bundle.obj >= h.num_objs as usize {
            return Err(Error::Data(format!(
                "image {} label {} outside {}x{}",
                bundle.image_id,
                bundle.pair(),
                h.num_attrs,
                h.num_objs
            )));
        }
    }
    let mut w = BufWriter::new(writer);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    for dim in h.dims() {
        w.write_all(&dim.to_le_bytes())?;
    }
    w.write_all(&h.count.to_le_bytes())?;
    debug_assert_eq!(h.record_floats(), d + t * d + b * (d + t * d));
    for bundle in bundles {
        put_str(&mut w, &bundle.image_id)?;
        w.write_all(&(bundle.attr as u32).to_le_bytes())?;
        w.write_all(&(bundle.obj as u32).to_le_bytes())?;
        put_f32s(&mut w, bundle.deep_class.data())?;
        put_f32s(&mut w, bundle.deep_patches.data())?;
        for (c, p) in bundle.shallow_class.iter().zip(&bundle.shallow_blocks) {
            put_f32s(&mut w, c.data())?;
            put_f32s(&mut w, p.data())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_features(
    path: impl AsRef<Path>,
    header: &FeatureFileHeader,
    bundles: &[FeatureBundle],
) -> Result<()> {
    write_features_to(File::create(path)?, header, bundles)
}

/// Rounds every stored value to `f32`, matching what a write/read cycle yields.
pub fn quantize_f32(bundle: &FeatureBundle) -> FeatureBundle {
    let q = |t: &Tensor| {
        let data = t.data().iter().map(|&x| x as f32 as f64).collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    };
    FeatureBundle {
        image_id: bundle.image_id.clone(),
        deep_class: q(&bundle.deep_class),
        deep_patches: q(&bundle.deep_patches),
        shallow_blocks: bundle.shallow_blocks.iter().map(q).collect(),
        shallow_class: bundle.shallow_class.iter().map(q).collect(),
        attr: bundle.attr,
        obj: bundle.obj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(id: &str, d: usize, t: usize, b: usize, seed: f64) -> FeatureBundle {
        let mk = |rows: usize, k: f64| {
            let data = (0..rows * d).map(|i| ((i as f64 + k) * 0.37 + seed).sin()).collect();
            Tensor::matrix(rows, d, data).unwrap()
        };
        FeatureBundle {
            image_id: id.into(),
            deep_class: mk(1, 0.0),
            deep_patches: mk(t, 1.0),
            shallow_blocks: (0..b).map(|k| mk(t, 2.0 + k as f64)).collect(),
            shallow_class: (0..b).map(|k| mk(1, 9.0 + k as f64)).collect(),
            attr: 1,
            obj: 2,
        }
    }

    #[test]
    fn header_is_40_bytes() {
        assert_eq!(FEATURE_HEADER_LEN, 40);
        let h = FeatureFileHeader::new(2, 3, 1, 4, 2, 3, 0);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[]).unwrap();
        assert_eq!(buf.len(), 40);
        let (back, bundles) = read_features_from(&buf[..]).unwrap();
        assert_eq!(back, h);
        assert!(bundles.is_empty());
    }

    #[test]
    fn record_size_matches_layout() {
        let (d, t, b) = (3, 2, 2);
        let h = FeatureFileHeader::new(d, t, b, 4, 2, 3, 1);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[bundle("img", d, t, b, 0.1)]).unwrap();
        let floats = d + t * d + b * (d + t * d);
        assert_eq!(buf.len() as u64, FEATURE_HEADER_LEN + 2 + 3 + 8 + 4 * floats as u64);
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let (d, t, b) = (4, 3, 3);
        let h = FeatureFileHeader::new(d, t, b, 5, 2, 3, 0);
        let src: Vec<_> = (0..3).map(|i| bundle(&format!("im{i}"), d, t, b, i as f64)).collect();
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &src).unwrap();
        let (hb, back) = read_features_from(&buf[..]).unwrap();
        assert_eq!(hb.count, 3);
        let expected: Vec<_> = src.iter().map(quantize_f32).collect();
        assert_eq!(back, expected);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let h = FeatureFileHeader::new(1, 1, 1, 1, 1, 1, 0);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[]).unwrap();
        buf[0] = b'X';
        match read_features_from(&buf[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_zero_dim() {
        let h = FeatureFileHeader::new(1, 1, 1, 1, 1, 1, 0);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[]).unwrap();
        let mut v = buf.clone();
        v[4] = 2;
        assert!(matches!(read_features_from(&v[..]), Err(Error::Format { offset: 4, .. })));
        let mut z = buf.clone();
        z[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_features_from(&z[..]), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let (d, t, b) = (2, 2, 1);
        let h = FeatureFileHeader::new(d, t, b, 2, 2, 3, 0);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[bundle("a", d, t, b, 0.0)]).unwrap();
        let cut = buf.len() - 3;
        match read_features_from(&buf[..cut]) {
            Err(Error::Format { offset, message }) => {
                assert!(offset >= FEATURE_HEADER_LEN && offset <= cut as u64, "{offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let h = FeatureFileHeader::new(1, 1, 1, 1, 1, 1, 0);
        let mut buf = Vec::new();
        write_features_to(&mut buf, &h, &[]).unwrap();
        buf.push(0);
        assert!(matches!(read_features_from(&buf[..]), Err(Error::Format { offset: 40, .. })));
    }

    #[test]
    fn writer_rejects_shape_mismatch() {
        let h = FeatureFileHeader::new(4, 3, 3, 5, 2, 3, 0);
        let mut buf = Vec::new();
        let err = write_features_to(&mut buf, &h, &[bundle("x", 4, 2, 3, 0.0)]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}

//! The `.gfd` gridded tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GFD1"                       4 bytes ASCII magic
//! version, C, H, W, p, c, r    7 x u32 (version = 1)
//! C x { u16 len, name utf-8, u16 len, unit utf-8 }
//! C*H*W x f32                  row-major, channel-major
//! ```
//!
//! A [`LandMask`] is stored as a single channel named `mask`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec, LandMask};

pub const MAGIC: &[u8; 4] = b"GFD1";
pub const VERSION: u32 = 1;

pub fn encode(field: &Field) -> Vec<u8> {
    let spec = field.spec();
    let mut out = Vec::with_capacity(32 + field.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        field.n_channels() as u32,
        spec.height as u32,
        spec.width as u32,
        spec.patch as u32,
        spec.sector_cols as u32,
        spec.sector_rows as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, unit) in field.channels().iter().zip(field.units()) {
        for s in [name, unit] {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    for x in field.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at as u64, format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Field> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"GFD1\"")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_at = cur.pos as u64;
    let mut dims = [0usize; 6];
    for (d, what) in dims.iter_mut().zip(["channel count", "H", "W", "p", "c", "r"]) {
        *d = cur.u32(what)? as usize;
    }
    let [c, h, w, p, sc, sr] = dims;
    let spec = GridSpec::new(h, w, p, sc, sr)
        .map_err(|e| Error::format(header_at, format!("invalid grid header: {e}")))?;
    if c == 0 {
        return Err(Error::format(header_at, "channel count is zero"));
    }
    let mut channels = Vec::with_capacity(c);
    let mut units = Vec::with_capacity(c);
    for _ in 0..c {
        channels.push(cur.string("channel name")?);
        units.push(cur.string("channel unit")?);
    }
    let n = c * h * w;
    let payload_at = cur.pos;
    let payload = cur.take(n * 4, "payload")?;
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::format(
                (payload_at + 4 * i) as u64,
                format!("non-finite value {x}"),
            ));
        }
        data.push(x);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }
    Field::new(spec, channels, units, data)
}

pub fn write_grid(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(field)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        e => e,
    })
}

pub fn write_mask(mask: &LandMask, path: impl AsRef<Path>) -> Result<()> {
    write_grid(&mask.to_field(), path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LandMask> {
    LandMask::from_field(&read_grid(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_layout_of_a_1x2x2_field() {
        let spec = GridSpec::new(2, 2, 1, 1, 1).unwrap();
        let f = Field::scalar(spec, "c", "u", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&f);
        // 4 magic + 28 header + (2+1) name + (2+1) unit
        let header = 4 + 28 + 3 + 3;
        assert_eq!(bytes.len(), header + 16);
        assert_eq!(&bytes[..4], b"GFD1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(
            &bytes[header..],
            &[
                0x00, 0x00, 0x80, 0x3f, // 1.0
                0x00, 0x00, 0x00, 0x40, // 2.0
                0x00, 0x00, 0x40, 0x40, // 3.0
                0x00, 0x00, 0x80, 0x40, // 4.0
            ]
        );
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let spec = GridSpec::new(2, 2, 1, 1, 1).unwrap();
        let f = Field::scalar(spec, "c", "u", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode(&f);
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(short), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn rejects_nan_payload() {
        let spec = GridSpec::new(1, 2, 1, 1, 1).unwrap();
        let f = Field::scalar(spec, "c", "", vec![1.0, 2.0]).unwrap();
        let mut bytes = encode(&f);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, n - 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            bits in prop::collection::vec(any::<u32>(), 12),
            name in "[a-z_]{1,12}",
        ) {
            let data: Vec<f32> = bits
                .iter()
                .map(|&b| f32::from_bits(b))
                .map(|x| if x.is_finite() { x } else { -0.0 })
                .collect();
            let spec = GridSpec::new(2, 3, 1, 1, 1).unwrap();
            let f = Field::new(
                spec,
                vec![name, "second".into()],
                vec!["m".into(), "µg/m³".into()],
                data.clone(),
            ).unwrap();
            let back = decode(&encode(&f)).unwrap();
            let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.channels(), f.channels());
            prop_assert_eq!(back.units(), f.units());
        }
    }
}

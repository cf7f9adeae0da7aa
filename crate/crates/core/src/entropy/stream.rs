use super::StreamError;

pub const MAGIC: [u8; 4] = *b"LVC1";
pub const STREAM_VERSION: u8 = 1;
/// Bytes before the `ẑ` payload: magic, version, quality, height, width.
const FIXED_HEADER: usize = 4 + 1 + 1 + 2 + 2;

/// Container of one compressed image.
///
/// Layout (little-endian): `"LVC1"`, version `u8`, quality `u8`, height
/// `u16`, width `u16`, `z_len: u32`, `z_bytes`, `y_len: u32`, `y_bytes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u8,
    pub quality_index: u8,
    pub image_h: u16,
    pub image_w: u16,
    pub z_bytes: Vec<u8>,
    pub y_bytes: Vec<u8>,
}

impl Bitstream {
    pub fn new(quality_index: u8, image_h: u16, image_w: u16, z_bytes: Vec<u8>, y_bytes: Vec<u8>) -> Self {
        Bitstream {
            version: STREAM_VERSION,
            quality_index,
            image_h,
            image_w,
            z_bytes,
            y_bytes,
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.quality_index);
        out.extend_from_slice(&self.image_h.to_le_bytes());
        out.extend_from_slice(&self.image_w.to_le_bytes());
        out.extend_from_slice(&(self.z_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_bytes);
        out.extend_from_slice(&(self.y_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.y_bytes);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, StreamError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(StreamError::BadMagic);
        }
        if bytes.len() < 5 {
            return Err(StreamError::Truncated);
        }
        if bytes[4] != STREAM_VERSION {
            return Err(StreamError::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < FIXED_HEADER {
            return Err(StreamError::Truncated);
        }
        let quality_index = bytes[5];
        let image_h = u16::from_le_bytes([bytes[6], bytes[7]]);
        let image_w = u16::from_le_bytes([bytes[8], bytes[9]]);
        let mut pos = FIXED_HEADER;
        let z_bytes = read_segment(bytes, &mut pos)?;
        let y_bytes = read_segment(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(StreamError::Truncated);
        }
        Ok(Bitstream {
            version: STREAM_VERSION,
            quality_index,
            image_h,
            image_w,
            z_bytes,
            y_bytes,
        })
    }

    /// Serialized size in bytes.
    pub fn len_bytes(&self) -> usize {
        FIXED_HEADER + 8 + self.z_bytes.len() + self.y_bytes.len()
    }

    /// Entropy-coded payload size in bytes (both segments, no header).
    pub fn payload_bytes(&self) -> usize {
        self.z_bytes.len() + self.y_bytes.len()
    }

    /// Serialized bits per pixel of an `h × w` source.
    pub fn bpp(&self, h: usize, w: usize) -> f64 {
        (self.len_bytes() * 8) as f64 / (h * w) as f64
    }
}

fn read_segment(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>, StreamError> {
    let len_end = *pos + 4;
    let len = bytes.get(*pos..len_end).ok_or(StreamError::Truncated)?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let seg = bytes.get(len_end..len_end + len).ok_or(StreamError::Truncated)?;
    *pos = len_end + len;
    Ok(seg.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_errors() {
        let s = Bitstream::new(4, 64, 128, vec![1, 2, 3], vec![9; 10]).serialize();
        assert_eq!(&s[..4], b"LVC1");
        assert_eq!(
            Bitstream::parse(b"PNG\x89....").unwrap_err().to_string(),
            "not a latentvision stream"
        );
        let mut v = s.clone();
        v[4] = 2;
        assert!(Bitstream::parse(&v)
            .unwrap_err()
            .to_string()
            .starts_with("unsupported version"));
        assert_eq!(
            Bitstream::parse(&s[..s.len() - 1]).unwrap_err().to_string(),
            "truncated stream"
        );
        let mut long = s.clone();
        long.push(0);
        assert_eq!(Bitstream::parse(&long).unwrap_err(), StreamError::Truncated);
        let mut bad_len = s;
        bad_len[10] = 200;
        assert_eq!(Bitstream::parse(&bad_len).unwrap_err(), StreamError::Truncated);
    }

    proptest! {
        #[test]
        fn serialize_parse_identity(
            q in prop::sample::select(vec![1u8, 4, 8]),
            h in any::<u16>(),
            w in any::<u16>(),
            z in prop::collection::vec(any::<u8>(), 0..64),
            y in prop::collection::vec(any::<u8>(), 0..256),
        ) {
            let b = Bitstream::new(q, h, w, z, y);
            let bytes = b.serialize();
            prop_assert_eq!(bytes.len(), b.len_bytes());
            prop_assert_eq!(&bytes[..4], b"LVC1");
            prop_assert_eq!(Bitstream::parse(&bytes).unwrap(), b);
        }
    }
}

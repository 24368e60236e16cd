//! CRC-64 trailer shared by the dataset and model file formats.

use crc::{Crc, CRC_64_XZ};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// CRC-64/XZ of `bytes`.
pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Splits a file image into body and trailing checksum, verifying it.
/// Returns `None` when the image is too short or the checksum disagrees.
pub fn verify_trailer(image: &[u8]) -> Option<&[u8]> {
    let split = image.len().checked_sub(8)?;
    let (body, trailer) = image.split_at(split);
    let stored = u64::from_le_bytes(trailer.try_into().ok()?);
    (crc64(body) == stored).then_some(body)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc64_xz_check_value() {
        assert_eq!(crc64(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    #[test]
    fn trailer_roundtrip_and_corruption() {
        let mut image = b"hello".to_vec();
        image.extend_from_slice(&crc64(b"hello").to_le_bytes());
        assert_eq!(verify_trailer(&image), Some(&b"hello"[..]));
        image[0] ^= 1;
        assert_eq!(verify_trailer(&image), None);
        assert_eq!(verify_trailer(&[1, 2, 3]), None);
    }
}

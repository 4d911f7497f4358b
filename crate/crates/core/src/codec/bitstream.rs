//! `.hquc` container layout (little-endian):
//!
//! ```text
//! "HQUC" | version u8 | flags u8 | H u16 | W u16 | lambda_index u8 |
//! param_hash [8] | side_len u32 | side_info | payload_len u32 | payload
//! ```
//!
//! Flags: bit 0 is ALTC on, bits 1–2 hold the side-info compressor id.
//! `lambda_index` is the position of the training λ in the reference grid,
//! or 255 when off-grid.

use crate::altc::SideInfoCompressor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HQUC";
pub const VERSION: u8 = 1;
pub const OFF_GRID: u8 = 255;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 2 + 1 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub altc: bool,
    pub compressor: SideInfoCompressor,
    pub height: u16,
    pub width: u16,
    pub lambda_index: u8,
    pub param_hash: [u8; 8],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub side_info: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 + self.side_info.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(u8::from(h.altc) | (h.compressor.id() << 1));
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.push(h.lambda_index);
        out.extend_from_slice(&h.param_hash);
        out.extend_from_slice(&(self.side_info.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.side_info);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("not an HQUC bitstream".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "bitstream version {version}, this build reads {VERSION}"
            )));
        }
        let flags = r.u8()?;
        if flags & !0b111 != 0 {
            return Err(Error::Decode(format!("reserved flag bits set: {flags:#010b}")));
        }
        let header = Header {
            altc: flags & 1 == 1,
            compressor: SideInfoCompressor::from_id((flags >> 1) & 0b11)?,
            height: r.u16()?,
            width: r.u16()?,
            lambda_index: r.u8()?,
            param_hash: r.take(8)?.try_into().unwrap(),
        };
        if header.height == 0 || header.width == 0 {
            return Err(Error::Decode("zero image dimension".into()));
        }
        let side_len = r.u32()? as usize;
        let side_info = r.take(side_len)?.to_vec();
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream {
            header,
            side_info,
            payload,
        })
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_LEN + 8 + self.side_info.len() + self.payload.len()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode("bitstream truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

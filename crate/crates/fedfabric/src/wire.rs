//! Low-level binary encoding shared by the reference codec, the memory-KV
//! protocol, and the relay frame protocol.
//!
//! Conventions: all integers little-endian; byte blobs are `u32` length +
//! bytes; key/value sections are a `u16` pair count followed by
//! (`u16` key length, key, `u32` value length, value), keys and values UTF-8.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated record (needed {needed} more bytes)")]
    Truncated { needed: usize },
    #[error("invalid utf-8 in {0}")]
    Utf8(&'static str),
    #[error("unknown tag {tag} for {what}")]
    BadTag { what: &'static str, tag: u8 },
    #[error("record too large: {len} > {max}")]
    TooLarge { len: usize, max: usize },
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("malformed field {field}: {detail}")]
    Malformed { field: &'static str, detail: String },
}

pub fn put_u8(buf: &mut Vec<u8>, v: u8) {
    buf.push(v);
}

pub fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_blob(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

pub fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u16(buf, s.len() as u16);
    buf.extend_from_slice(s.as_bytes());
}

/// Key/value section: `u16` count then (`u16` key len, key, `u32` val len, val).
pub fn put_kv_pairs<'a, I>(buf: &mut Vec<u8>, pairs: I)
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let start = buf.len();
    put_u16(buf, 0);
    let mut n: u16 = 0;
    for (k, v) in pairs {
        put_str(buf, k);
        put_u32(buf, v.len() as u32);
        buf.extend_from_slice(v.as_bytes());
        n += 1;
    }
    buf[start..start + 2].copy_from_slice(&n.to_le_bytes());
}

/// Cursor over a byte slice with checked reads.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        self.take(n)
    }

    pub fn blob(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn str16(&mut self) -> Result<&'a str, WireError> {
        let len = self.u16()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| WireError::Utf8("str16"))
    }

    pub fn kv_pairs(&mut self) -> Result<Vec<(String, String)>, WireError> {
        let n = self.u16()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.str16()?.to_owned();
            let vlen = self.u32()? as usize;
            let v = std::str::from_utf8(self.take(vlen)?)
                .map_err(|_| WireError::Utf8("kv value"))?
                .to_owned();
            out.push((k, v));
        }
        Ok(out)
    }
}

/// Lookup helper over a decoded key/value section.
pub struct KvMap {
    pairs: Vec<(String, String)>,
}

impl KvMap {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &'static str) -> Result<&str, WireError> {
        self.get(key).ok_or(WireError::MissingField(key))
    }

    pub fn require_u64(&self, key: &'static str) -> Result<u64, WireError> {
        self.require(key)?
            .parse()
            .map_err(|e| WireError::Malformed {
                field: key,
                detail: format!("{e}"),
            })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }
}

/// Write a length-prefixed frame (`u32` LE total body length, then body).
pub fn write_frame<W: std::io::Write>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Read one length-prefixed frame. `max_len` bounds hostile/corrupt input.
pub fn read_frame<R: std::io::Read>(r: &mut R, max_len: usize) -> std::io::Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > max_len {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit {max_len}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

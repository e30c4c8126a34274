//! Big-endian, length-prefixed primitives shared by every canonical encoding.

use num_bigint::BigUint;
use num_traits::Zero;

use super::FieldError;

pub fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_bytes(out: &mut Vec<u8>, v: &[u8]) {
    put_u32(out, v.len() as u32);
    out.extend_from_slice(v);
}

/// Zero encodes as an empty byte string.
pub fn put_biguint(out: &mut Vec<u8>, v: &BigUint) {
    if v.is_zero() {
        put_u32(out, 0);
    } else {
        put_bytes(out, &v.to_bytes_be());
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        if self.remaining() < n {
            return Err(FieldError::Malformed("truncated input"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FieldError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FieldError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, FieldError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], FieldError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn fixed(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        self.take(n)
    }

    pub fn biguint(&mut self) -> Result<BigUint, FieldError> {
        let b = self.bytes()?;
        if b.first() == Some(&0) {
            return Err(FieldError::Malformed("non-canonical integer (leading zero)"));
        }
        Ok(BigUint::from_bytes_be(b))
    }

    pub fn finish(&self) -> Result<(), FieldError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(FieldError::Malformed("trailing bytes"))
        }
    }
}

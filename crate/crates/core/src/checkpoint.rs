//! Binary checkpoint encoding.
//!
//! All numbers are little-endian. The decoder block starts with the magic
//! `BBPC`; a full training checkpoint is a `BBPS` manifest followed by tagged
//! sections, each `[tag: 4 bytes][length: u64][payload]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, DecoderNetwork, DenseLayer};

pub const NETWORK_MAGIC: &[u8; 4] = b"BBPC";
pub const STATE_MAGIC: &[u8; 4] = b"BBPS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    /// Length-prefixed (u64) f64 array.
    pub fn f64_array(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        self.f64s(vs);
    }

    /// Length-prefixed (u64) UTF-8 string.
    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.bytes(tag);
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_done(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("length does not fit in usize"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|bytes| bytes > self.remaining()) {
            return Err(Error::format(format!("truncated checkpoint: {n} floats announced")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn f64_array(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        self.f64s(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format("string is not UTF-8"))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    /// Next `(tag, payload)` section.
    pub fn section(&mut self) -> Result<([u8; 4], &'a [u8])> {
        let tag = self.array::<4>()?;
        let len = self.usize()?;
        Ok((tag, self.take(len)?))
    }
}

/// Encodes a decoder and, optionally, its ADAM state.
pub fn write_network(w: &mut ByteWriter, net: &DecoderNetwork, adam: Option<&AdamState>) {
    w.bytes(NETWORK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(net.layers().len() as u32);
    for layer in net.layers() {
        w.u32(layer.in_dim as u32);
        w.u32(layer.out_dim as u32);
        w.u8(layer.activation.tag());
    }
    for t in net.tensors() {
        w.f64s(t);
    }
    match adam {
        None => w.u8(0),
        Some(state) => {
            w.u8(1);
            write_adam(w, state);
        }
    }
}

/// ADAM state without shapes; the reader supplies them.
pub fn write_adam(w: &mut ByteWriter, state: &AdamState) {
    w.u64(state.t);
    let c = state.config;
    w.f64s(&[c.rho, c.beta1, c.beta2, c.eps]);
    for m in &state.m {
        w.f64s(m);
    }
    for v in &state.v {
        w.f64s(v);
    }
}

pub fn read_adam(r: &mut ByteReader, shapes: &[usize]) -> Result<AdamState> {
    let t = r.u64()?;
    let config = AdamConfig {
        rho: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let m = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<_>>()?;
    let v = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<_>>()?;
    Ok(AdamState { config, t, m, v })
}

pub fn read_network(r: &mut ByteReader) -> Result<(DecoderNetwork, Option<AdamState>)> {
    r.expect_magic(NETWORK_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported network format version {version}")));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::format("network has no layers"));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let tag = r.u8()?;
        let activation =
            Activation::from_tag(tag).ok_or_else(|| Error::format(format!("unknown activation tag {tag}")))?;
        layers.push(DenseLayer::zeros(in_dim, out_dim, activation));
    }
    for layer in &mut layers {
        layer.weight = r.f64s(layer.in_dim * layer.out_dim)?;
        layer.bias = r.f64s(layer.out_dim)?;
    }
    let net = DecoderNetwork::from_layers(layers)?;
    let adam = match r.u8()? {
        0 => None,
        1 => Some(read_adam(r, &net.tensor_shapes())?),
        other => return Err(Error::format(format!("bad adam flag {other}"))),
    };
    Ok((net, adam))
}

pub fn network_to_bytes(net: &DecoderNetwork, adam: Option<&AdamState>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_network(&mut w, net, adam);
    w.into_bytes()
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<(DecoderNetwork, Option<AdamState>)> {
    let mut r = ByteReader::new(bytes);
    let out = read_network(&mut r)?;
    if !r.is_done() {
        return Err(Error::format(format!("{} trailing bytes after network", r.remaining())));
    }
    Ok(out)
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut file = fs::File::create(tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn net() -> DecoderNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        DecoderNetwork::new(4, &[6, 5], 3, Activation::Softmax, &mut rng).unwrap()
    }

    #[test]
    fn network_round_trip_is_bit_exact() {
        let net = net();
        let mut adam = AdamState::for_network(&net, AdamConfig::default());
        adam.t = 7;
        adam.m[1][2] = -0.25;
        adam.v[3][0] = 1e-300;
        for with_adam in [false, true] {
            let bytes = network_to_bytes(&net, with_adam.then_some(&adam));
            assert_eq!(&bytes[..4], b"BBPC");
            let (back, back_adam) = network_from_bytes(&bytes).unwrap();
            assert_eq!(back, net);
            assert_eq!(back_adam.as_ref(), with_adam.then_some(&adam));
            assert_eq!(network_to_bytes(&back, back_adam.as_ref()), bytes);
        }
    }

    #[test]
    fn corrupt_network_bytes_are_rejected() {
        let bytes = network_to_bytes(&net(), None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(network_from_bytes(&bad).is_err());
        assert!(network_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(network_from_bytes(&long).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(network_from_bytes(&bad_version).is_err());
    }

    #[test]
    fn sections_round_trip() {
        let mut w = ByteWriter::new();
        w.section(b"ABCD", &[1, 2, 3]);
        w.section(b"EFGH", &[]);
        w.str("héllo");
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(r.section().unwrap(), (*b"ABCD", &[1u8, 2, 3][..]));
        assert_eq!(r.section().unwrap(), (*b"EFGH", &[][..]));
        assert_eq!(r.str().unwrap(), "héllo");
        assert!(r.is_done());
        assert!(r.u8().is_err());
    }

    #[test]
    fn huge_announced_lengths_fail_cleanly() {
        let mut w = ByteWriter::new();
        w.u64(u64::MAX / 4);
        let bytes = w.into_bytes();
        assert!(ByteReader::new(&bytes).f64_array().is_err());
    }
}

//! Versioned little-endian binary containers.
//!
//! Every file starts with an ASCII magic string and a `u32` format version.

use std::path::Path;

use crate::certify::{CacheEntry, CertCache};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

pub const NETWORK_MAGIC: &[u8] = b"ARQNET";
pub const DATASET_MAGIC: &[u8] = b"ARQDATA";
pub const CACHE_MAGIC: &[u8] = b"ARQCACHE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8]) -> Self {
        let mut e = Self { buf: magic.to_vec() };
        e.u32(FORMAT_VERSION);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    /// Checks magic and version.
    pub fn new(buf: &'a [u8], magic: &[u8], what: &'static str) -> Result<Self> {
        if buf.len() < magic.len() || &buf[..magic.len()] != magic {
            return Err(Error::Format(format!("not an {what} file (bad magic)")));
        }
        let mut d = Self {
            buf,
            pos: magic.len(),
            what,
        };
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{what} format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated {} file at byte {}",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length-prefixed array; the length is checked against the remaining
    /// bytes before allocating.
    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a `u64` count of items of `item_size` bytes and checks it fits.
    pub fn len(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(item_size as u64) > remaining {
            return Err(Error::Format(format!(
                "truncated {} file: {n} items announced at byte {}",
                self.what, self.pos
            )));
        }
        Ok(n as usize)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {} data",
                self.buf.len() - self.pos,
                self.what
            )));
        }
        Ok(())
    }
}

fn corrupt(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("corrupt {what} file: {detail}"))
}

pub(crate) fn encode_network_into(e: &mut Encoder, net: &Network) {
    e.u32(net.num_classes() as u32);
    e.u32(net.input_shape().len() as u32);
    for &d in net.input_shape() {
        e.u32(d as u32);
    }
    e.u32(net.layers().len() as u32);
    for l in net.layers() {
        e.u8(l.kind.code());
        for v in [l.c_in, l.c_out, l.kernel, l.stride, l.feat] {
            e.u32(v as u32);
        }
        e.u8(u8::from(l.depthwise));
        e.u64(l.n_params as u64);
    }
    for p in net.params().iter().flatten() {
        e.f64s(p.weight.data());
        e.f64s(p.bias.data());
    }
}

pub(crate) fn decode_network_from(d: &mut Decoder<'_>) -> Result<Network> {
    let num_classes = d.u32()? as usize;
    let ndim = d.u32()? as usize;
    if ndim > 3 {
        return Err(corrupt("ARQNET", format!("input rank {ndim}")));
    }
    let input_shape = (0..ndim).map(|_| d.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = d.u32()? as usize;
    let mut layers = Vec::new();
    for index in 0..n_layers {
        let kind = LayerKind::from_code(d.u8()?).ok_or_else(|| corrupt("ARQNET", format!("layer {index} kind")))?;
        let mut dims = [0usize; 5];
        for v in dims.iter_mut() {
            *v = d.u32()? as usize;
        }
        let depthwise = d.u8()? != 0;
        let n_params = d.u64()? as usize;
        let [c_in, c_out, kernel, stride, feat] = dims;
        layers.push(LayerSpec {
            index,
            kind,
            c_in,
            c_out,
            kernel,
            stride,
            feat,
            depthwise,
            n_params,
        });
    }
    let mut params = Vec::with_capacity(layers.len());
    for l in &layers {
        if !l.kind.is_quantizable() {
            params.push(None);
            continue;
        }
        let w = d.f64s()?;
        let b = d.f64s()?;
        let wshape = match (l.kind, l.depthwise) {
            (LayerKind::Dense, _) => vec![l.c_out, l.c_in],
            (_, true) => vec![l.c_out, 1, l.kernel, l.kernel],
            _ => vec![l.c_out, l.c_in, l.kernel, l.kernel],
        };
        let weight = Tensor::new(wshape, w).map_err(|e| corrupt("ARQNET", e))?;
        let bias = Tensor::new(vec![l.c_out], b).map_err(|e| corrupt("ARQNET", e))?;
        params.push(Some(LayerParams { weight, bias }));
    }
    Network::from_parts(input_shape, layers, params, num_classes).map_err(|e| corrupt("ARQNET", e))
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut e = Encoder::new(NETWORK_MAGIC);
    encode_network_into(&mut e, net);
    e.finish()
}

pub fn decode_network(buf: &[u8]) -> Result<Network> {
    let mut d = Decoder::new(buf, NETWORK_MAGIC, "ARQNET")?;
    let net = decode_network_from(&mut d)?;
    d.finish()?;
    Ok(net)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_network(net))?)
}

pub fn load_model(path: &Path) -> Result<Network> {
    decode_network(&std::fs::read(path)?)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut e = Encoder::new(DATASET_MAGIC);
    e.u32(ds.num_classes() as u32);
    e.u32(ds.sample_shape().len() as u32);
    for &d in ds.sample_shape() {
        e.u32(d as u32);
    }
    e.u64(ds.len() as u64);
    for &v in ds.features() {
        e.f64(v);
    }
    for &l in ds.labels() {
        e.u32(l as u32);
    }
    e.finish()
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut d = Decoder::new(buf, DATASET_MAGIC, "ARQDATA")?;
    let num_classes = d.u32()? as usize;
    let ndim = d.u32()? as usize;
    if ndim == 0 || ndim > 3 {
        return Err(corrupt("ARQDATA", format!("sample rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| d.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let dim: usize = shape.iter().product();
    let count = d.len(dim * 8 + 4)?;
    let features = (0..count * dim).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
    let labels = (0..count).map(|_| d.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Dataset::new(shape, features, labels, num_classes).map_err(|e| corrupt("ARQDATA", e))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(ds))?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn encode_cache(cache: &CertCache) -> Vec<u8> {
    let mut e = Encoder::new(CACHE_MAGIC);
    e.f64(cache.sigma);
    e.f64(cache.alpha);
    e.u64(cache.n0 as u64);
    e.u64(cache.run_seed);
    e.u64(cache.entries.len() as u64);
    for entry in &cache.entries {
        e.u64(entry.input_id as u64);
        e.u32(entry.predicted as u32);
        e.f64(entry.p_lower);
        e.u64(entry.trace.len() as u64);
        for &t in &entry.trace {
            e.u32(t);
        }
    }
    e.finish()
}

pub fn decode_cache(buf: &[u8]) -> Result<CertCache> {
    let mut d = Decoder::new(buf, CACHE_MAGIC, "ARQCACHE")?;
    let sigma = d.f64()?;
    let alpha = d.f64()?;
    let n0 = d.u64()? as usize;
    let run_seed = d.u64()?;
    let n = d.len(28)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let input_id = d.u64()? as usize;
        let predicted = d.u32()? as usize;
        let p_lower = d.f64()?;
        let len = d.len(4)?;
        let trace = (0..len).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
        entries.push(CacheEntry {
            input_id,
            predicted,
            p_lower,
            trace,
        });
    }
    d.finish()?;
    Ok(CertCache {
        sigma,
        alpha,
        n0,
        run_seed,
        entries,
    })
}

pub fn save_cache(cache: &CertCache, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_cache(cache))?)
}

pub fn load_cache(path: &Path) -> Result<CertCache> {
    decode_cache(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_conv_net, TinyConvConfig};

    #[test]
    fn network_round_trip_is_bit_exact() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 11).unwrap();
        let bytes = encode_network(&net);
        assert_eq!(&bytes[..6], b"ARQNET");
        assert_eq!(decode_network(&bytes).unwrap(), net);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 11).unwrap();
        let bytes = encode_network(&net);
        for cut in [3, 10, 40, bytes.len() - 1] {
            let err = decode_network(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated") || err.contains("magic"), "{err}");
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert_eq!(decode_network(&wrong).unwrap_err().to_string(), "not an ARQNET file (bad magic)");
        let mut version = bytes;
        version[6] = 9;
        assert!(decode_network(&version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn dataset_and_cache_round_trip() {
        let ds = Dataset::new(vec![2], vec![1.0, -2.0, 0.5, 3.0], vec![1, 0], 2).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
        let cache = CertCache {
            sigma: 0.25,
            alpha: 0.001,
            n0: 4,
            run_seed: 9,
            entries: vec![CacheEntry {
                input_id: 0,
                predicted: 1,
                p_lower: 0.75,
                trace: vec![1, 1, 0, 1],
            }],
        };
        let bytes = encode_cache(&cache);
        assert_eq!(&bytes[..8], b"ARQCACHE");
        assert_eq!(decode_cache(&bytes).unwrap(), cache);
        assert!(decode_cache(&bytes[..bytes.len() - 2]).is_err());
    }
}

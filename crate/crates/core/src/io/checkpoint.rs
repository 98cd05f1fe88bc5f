use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::layers::{CombineMode, LrnParams};
use crate::network::{BlockSpec, Network, NetworkSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCNR";
pub const CHECKPOINT_VERSION: u32 = 1;

// Layout, all little-endian:
//   magic, version u32,
//   input_channels u32, target_factor u32, block count u32,
//   per block: filters, size, pool, lrn, upsample (u32 each),
//   combiner u32 (0 linear, 1 channel max),
//   lrn k, alpha, beta f64, lrn n u32,
//   seed u64, parameter count u64, parameters f64.

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
}

pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let spec = net.spec();
    let params = net.flatten_params();
    let mut out = Vec::with_capacity(64 + 20 * spec.blocks.len() + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(u32_of(spec.input_channels, "input channels")?);
    put(u32_of(spec.target_factor, "target factor")?);
    put(u32_of(spec.blocks.len(), "block count")?);
    for b in &spec.blocks {
        put(u32_of(b.num_filters, "filter count")?);
        put(u32_of(b.filter_size, "filter size")?);
        put(b.pool as u32);
        put(b.lrn as u32);
        put(b.upsample as u32);
    }
    put(match spec.combiner {
        CombineMode::Linear => 0,
        CombineMode::ChannelMax => 1,
    });
    for v in [spec.lrn.k, spec.lrn.alpha, spec.lrn.beta] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&u32_of(spec.lrn.n, "lrn size")?.to_le_bytes());
    out.extend_from_slice(&net.seed().to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::LengthMismatch {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Config(format!("checkpoint {what} flag is {v}, expected 0 or 1"))),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let input_channels = r.u32()? as usize;
    let target_factor = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        blocks.push(BlockSpec {
            num_filters: r.u32()? as usize,
            filter_size: r.u32()? as usize,
            pool: r.flag("pool")?,
            lrn: r.flag("lrn")?,
            upsample: r.flag("upsample")?,
        });
    }
    let combiner = match r.u32()? {
        0 => CombineMode::Linear,
        1 => CombineMode::ChannelMax,
        v => return Err(Error::Config(format!("unknown combiner code {v}"))),
    };
    let lrn = LrnParams {
        k: r.f64()?,
        alpha: r.f64()?,
        beta: r.f64()?,
        n: r.u32()? as usize,
    };
    let seed = r.u64()?;
    let count = r.u64()?;
    let expected = r.pos as u64 + 8 * count;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let params: Vec<f64> = bytes[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let spec = NetworkSpec {
        input_channels,
        blocks,
        combiner,
        target_factor,
        lrn,
    };
    let mut net = Network::zeroed(spec)?;
    net.unflatten_params(&params)?;
    net.set_seed(seed);
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_checkpoint(net)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode_checkpoint(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn face_payload_size() {
        let net = Network::build(NetworkSpec::face(3), 7).unwrap();
        let bytes = encode_checkpoint(&net).unwrap();
        let header = 4 + 4 + 3 * 4 + 3 * 5 * 4 + 4 + 3 * 8 + 4 + 8 + 8;
        assert_eq!(bytes.len(), header + 3686 * 8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::build(NetworkSpec::saliency(1), 3).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&net).unwrap()).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.seed(), 3);
        let a: Vec<u64> = net.flatten_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flatten_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let img = Tensor::from_fn(1, 16, 16, |_, y, x| ((y * 5 + x * 3) % 11) as f64 / 10.0);
        let (pa, pb) = (net.predict(&img).unwrap(), back.predict(&img).unwrap());
        assert!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let net = Network::build(NetworkSpec::face(1), 1).unwrap();
        let bytes = encode_checkpoint(&net).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion(2))));

        for cut in [6, 30, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(Error::LengthMismatch { .. })
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::LengthMismatch { .. })));
        assert!(matches!(decode_checkpoint(b"HC"), Err(Error::BadMagic { .. })));
    }
}

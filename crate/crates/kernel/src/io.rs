//! Binary tensor container shared by weights, programs and datasets.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic[4] version count { name_len name[name_len] rank dims[rank] data[f64 LE] }*
//! ```
//!
//! Files may carry a trailer after the tensors (datasets append labels).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{KernelError, Result};
use crate::layer::{Layer, LayerKind};
use crate::net::FeedforwardNet;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RPGW";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on values per tensor accepted when decoding.
pub const MAX_TENSOR_VALUES: usize = 1 << 30;

pub type NamedTensor = (String, Tensor);

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => KernelError::Format("truncated file".into()),
        _ => KernelError::Io(e),
    })
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| KernelError::Format(format!("{what} {v} exceeds u32")))
}

pub fn write_header(w: &mut impl Write, magic: [u8; 4], count: usize) -> Result<()> {
    w.write_all(&magic)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, to_u32(count, "tensor count")?)
}

/// Validates magic and version, returns the tensor count.
pub fn read_header(r: &mut impl Read, magic: [u8; 4]) -> Result<usize> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if got != magic {
        return Err(KernelError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(KernelError::Format(format!("unsupported version {version}")));
    }
    Ok(read_u32(r)? as usize)
}

pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, to_u32(name.len(), "name length")?)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, to_u32(t.rank(), "rank")?)?;
    for &d in t.dims() {
        write_u32(w, to_u32(d, "dimension")?)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<NamedTensor> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(KernelError::Format(format!("name length {name_len} too large")));
    }
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| KernelError::Format("tensor name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(KernelError::Format(format!("bad rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_TENSOR_VALUES)
            .ok_or_else(|| KernelError::Format("tensor dims overflow".into()))?;
        dims.push(d);
    }
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(dims, data).map_err(|e| KernelError::Format(e.to_string()))?;
    Ok((name, t))
}

pub fn write_tensors(w: &mut impl Write, magic: [u8; 4], tensors: &[NamedTensor]) -> Result<()> {
    write_header(w, magic, tensors.len())?;
    for (name, t) in tensors {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read, magic: [u8; 4]) -> Result<Vec<NamedTensor>> {
    let n = read_header(r, magic)?;
    (0..n).map(|_| read_tensor(r)).collect()
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, WEIGHTS_MAGIC, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensors(&mut r, WEIGHTS_MAGIC)
}

fn scalar_record(values: &[usize]) -> Tensor {
    Tensor::vector(values.iter().map(|&v| v as f64).collect()).expect("non-empty record")
}

fn record_values(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

impl FeedforwardNet {
    /// Encode architecture and parameters as named tensors.
    ///
    /// `input_dims` carries the input shape; each layer contributes
    /// `"{i}.affine.weight"`/`"{i}.affine.bias"` or a shape record `"{i}.{kind}"`.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![("input_dims".to_string(), scalar_record(self.input_dims()))];
        for (i, layer) in self.layers().iter().enumerate() {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push((format!("{i}.affine.weight"), weight.clone()));
                    out.push((format!("{i}.affine.bias"), bias.clone()));
                }
                Layer::Relu { width } | Layer::Tanh { width } | Layer::Softmax { width } => {
                    out.push((format!("{i}.{}", layer.kind().name()), scalar_record(&[*width])));
                }
                Layer::AvgPool {
                    height,
                    width,
                    channels,
                    window,
                } => out.push((
                    format!("{i}.avgpool"),
                    scalar_record(&[*height, *width, *channels, *window]),
                )),
            }
        }
        out
    }

    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let bad = |m: &str| KernelError::Format(format!("network record: {m}"));
        let mut iter = tensors.iter().peekable();
        let (name, dims) = iter.next().ok_or_else(|| bad("empty"))?;
        if name != "input_dims" {
            return Err(bad("missing input_dims"));
        }
        let input_dims = record_values(dims);
        let mut layers = Vec::new();
        while let Some((name, t)) = iter.next() {
            let kind = name
                .split_once('.')
                .map(|(_, k)| k)
                .ok_or_else(|| bad(name))?;
            let layer = match kind {
                "affine.weight" => {
                    let (bname, bias) = iter.next().ok_or_else(|| bad("missing bias"))?;
                    if !bname.ends_with("affine.bias") {
                        return Err(bad(bname));
                    }
                    Layer::affine(t.clone(), bias.clone())?
                }
                _ => {
                    let v = record_values(t);
                    let width = *v.first().ok_or_else(|| bad(name))?;
                    match kind {
                        k if k == LayerKind::Relu.name() => Layer::Relu { width },
                        k if k == LayerKind::Tanh.name() => Layer::Tanh { width },
                        k if k == LayerKind::Softmax.name() => Layer::Softmax { width },
                        k if k == LayerKind::AvgPool.name() && v.len() == 4 => {
                            Layer::avg_pool(v[0], v[1], v[2], v[3])?
                        }
                        _ => return Err(bad(name)),
                    }
                }
            };
            layers.push(layer);
        }
        FeedforwardNet::new(input_dims, layers)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(path, &self.to_named_tensors())
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named_tensors(&load_tensors(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn net_round_trip_is_bit_exact() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let mut layers = vec![Layer::avg_pool(4, 4, 2, 2).unwrap()];
        layers.push(Layer::affine_init(8, 5, &mut rng));
        layers.push(Layer::Tanh { width: 5 });
        layers.push(Layer::affine_init(5, 3, &mut rng));
        layers.push(Layer::Softmax { width: 3 });
        let net = FeedforwardNet::new(vec![4, 4, 2], layers).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, WEIGHTS_MAGIC, &net.to_named_tensors()).unwrap();
        assert_eq!(&buf[..4], b"RPGW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        let back = FeedforwardNet::from_named_tensors(
            &read_tensors(&mut buf.as_slice(), WEIGHTS_MAGIC).unwrap(),
        )
        .unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, WEIGHTS_MAGIC, &[("W".into(), t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensors(&mut bad.as_slice(), WEIGHTS_MAGIC),
            Err(KernelError::Format(_))
        ));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            read_tensors(&mut &short[..], WEIGHTS_MAGIC),
            Err(KernelError::Format(_))
        ));
    }

    #[test]
    fn rejects_dimension_overflow() {
        let mut buf = Vec::new();
        write_header(&mut buf, WEIGHTS_MAGIC, 1).unwrap();
        write_u32(&mut buf, 1).unwrap();
        buf.push(b'x');
        write_u32(&mut buf, 3).unwrap();
        for _ in 0..3 {
            write_u32(&mut buf, u32::MAX).unwrap();
        }
        assert!(matches!(
            read_tensors(&mut buf.as_slice(), WEIGHTS_MAGIC),
            Err(KernelError::Format(_))
        ));
    }
}

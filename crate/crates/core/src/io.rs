//! Binary container for unique-term kernels and attention-block parameters.
//!
//! All integers and floats are little-endian.
//!
//! Kernel section:
//!
//! | offset      | size        | field                                        |
//! |-------------|-------------|----------------------------------------------|
//! | 0           | 4           | magic `EVCK`                                 |
//! | 4           | 4           | format version (`u32`, currently 1)          |
//! | 8           | 4           | `n`, patch length (`u32`)                    |
//! | 12          | 4           | `r`, highest order (`u32`)                   |
//! | 16          | 4           | output channels `oc` (`u32`)                 |
//! | 20          | 8 r         | term count of orders 1..=r (`u64` each)      |
//! | 20 + 8 r    | 8 oc T      | weights (`f64`), channel-major, then order, then full-position-matrix row; `T` = sum of term counts |
//! | ...         | 8 oc        | biases (`f64`)                               |
//!
//! Attention-block section (follows a kernel section holding the block's
//! Volterra layer):
//!
//! | size          | field                                                  |
//! |---------------|--------------------------------------------------------|
//! | 4             | magic `HLA1`                                           |
//! | 4             | channels `c` (`u32`)                                   |
//! | 4             | reduced channels `cr` (`u32`)                          |
//! | 1             | input batch norm present (`u8`, 0 or 1)                |
//! | 8 cr c        | SE reduce weights, row-major `cr x c`                  |
//! | 8 cr          | SE reduce bias                                         |
//! | 8 c cr        | SE expand weights, row-major `c x cr`                  |
//! | 8 c           | SE expand bias                                         |
//! | 4 x 8 c       | batch norm scale, shift, running mean, running variance |
//! | 4 x 8 c       | same for the input batch norm, when present            |

use std::io::{Read, Write};

use crate::efficient::{UniqueKernel, VolterraConvLayer};
use crate::error::{Error, Result};
use crate::hla::{HlaConfig, HlaParams};
use crate::index::count_terms;
use crate::norm::BatchNorm2d;
use crate::tensor::ConvGeometry;

pub const KERNEL_MAGIC: &[u8; 4] = b"EVCK";
pub const HLA_MAGIC: &[u8; 4] = b"HLA1";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format { offset: self.offset, message: format!("truncated while reading {what}") },
            _ => Error::Io(e),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.bytes::<4>(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.bytes::<8>(what).map(u64::from_le_bytes)
    }

    fn f64s(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        (0..len).map(|_| self.bytes::<8>(what).map(f64::from_le_bytes)).collect()
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.offset, message: message.into() })
    }
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Overflow(format!("{what} = {v} does not fit the container")))
}

pub fn write_kernels(w: &mut impl Write, kernels: &[UniqueKernel]) -> Result<()> {
    let first = kernels.first().ok_or_else(|| Error::InvalidArgument("no kernels to write".into()))?;
    let (n, r) = (first.n(), first.order());
    if kernels.iter().any(|k| k.n() != n || k.order() != r) {
        return Err(Error::InvalidArgument("kernels must share n and order".into()));
    }
    w.write_all(KERNEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&as_u32(n, "n")?.to_le_bytes())?;
    w.write_all(&as_u32(r, "order")?.to_le_bytes())?;
    w.write_all(&as_u32(kernels.len(), "out_channels")?.to_le_bytes())?;
    for j in 1..=r {
        w.write_all(&count_terms(n, j)?.to_le_bytes())?;
    }
    for k in kernels {
        put_f64s(w, k.weights())?;
    }
    put_f64s(w, &kernels.iter().map(|k| k.bias).collect::<Vec<_>>())
}

fn read_kernels_from<R: Read>(rd: &mut Reader<R>) -> Result<Vec<UniqueKernel>> {
    if &rd.bytes::<4>("magic")? != KERNEL_MAGIC {
        return rd.fail("not a kernel container (bad magic)");
    }
    let version = rd.u32("version")?;
    if version != FORMAT_VERSION {
        return rd.fail(format!("unsupported version {version}"));
    }
    let n = rd.u32("n")? as usize;
    let r = rd.u32("order")? as usize;
    let oc = rd.u32("out_channels")? as usize;
    if n == 0 || r == 0 || oc == 0 {
        return rd.fail(format!("degenerate header n={n}, order={r}, out_channels={oc}"));
    }
    let mut lengths = Vec::with_capacity(r);
    for j in 1..=r {
        let len = rd.u64("order length")?;
        if len != count_terms(n, j)? {
            return rd.fail(format!("order-{j} length {len} does not match n={n}"));
        }
        lengths.push(len as usize);
    }
    let mut weights = Vec::with_capacity(oc);
    for _ in 0..oc {
        let per_order = lengths.iter().map(|&len| rd.f64s(len, "weights")).collect::<Result<Vec<_>>>()?;
        weights.push(per_order);
    }
    let biases = rd.f64s(oc, "biases")?;
    weights.into_iter().zip(biases).map(|(w, b)| UniqueKernel::new(n, w, b)).collect()
}

pub fn read_kernels(r: &mut impl Read) -> Result<Vec<UniqueKernel>> {
    read_kernels_from(&mut Reader { inner: r, offset: 0 })
}

fn put_bn(w: &mut impl Write, bn: &BatchNorm2d) -> Result<()> {
    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
        put_f64s(w, v)?;
    }
    Ok(())
}

fn get_bn<R: Read>(rd: &mut Reader<R>, c: usize) -> Result<BatchNorm2d> {
    let mut bn = BatchNorm2d::new(c);
    bn.gamma = rd.f64s(c, "batch norm scale")?;
    bn.beta = rd.f64s(c, "batch norm shift")?;
    bn.running_mean = rd.f64s(c, "batch norm mean")?;
    bn.running_var = rd.f64s(c, "batch norm variance")?;
    Ok(bn)
}

pub fn write_hla(w: &mut impl Write, p: &HlaParams) -> Result<()> {
    write_kernels(w, p.volterra.kernels())?;
    let c = p.config.channels;
    w.write_all(HLA_MAGIC)?;
    w.write_all(&as_u32(c, "channels")?.to_le_bytes())?;
    w.write_all(&as_u32(p.config.reduced(), "reduced channels")?.to_le_bytes())?;
    w.write_all(&[u8::from(p.input_bn.is_some())])?;
    put_f64s(w, &p.se_reduce_w)?;
    put_f64s(w, &p.se_reduce_b)?;
    put_f64s(w, &p.se_expand_w)?;
    put_f64s(w, &p.se_expand_b)?;
    put_bn(w, &p.bn)?;
    if let Some(bn) = &p.input_bn {
        put_bn(w, bn)?;
    }
    Ok(())
}

/// Reads a block written by [`write_hla`] for inputs of `height x width`.
pub fn read_hla(r: &mut impl Read, height: usize, width: usize) -> Result<HlaParams> {
    let mut rd = Reader { inner: r, offset: 0 };
    let kernels = read_kernels_from(&mut rd)?;
    if &rd.bytes::<4>("block magic")? != HLA_MAGIC {
        return rd.fail("missing attention-block section");
    }
    let c = rd.u32("channels")? as usize;
    let cr = rd.u32("reduced channels")? as usize;
    let has_input_bn = match rd.bytes::<1>("input batch norm flag")?[0] {
        0 => false,
        1 => true,
        other => return rd.fail(format!("bad input batch norm flag {other}")),
    };
    if cr == 0 || !c.is_multiple_of(cr) || kernels.len() != c || kernels[0].n() != 9 * c || kernels[0].order() != 2 {
        return rd.fail(format!("inconsistent block header: channels={c}, reduced={cr}"));
    }
    let config = HlaConfig { channels: c, reduction_ratio: c / cr, use_input_batchnorm: has_input_bn };
    let se_reduce_w = rd.f64s(cr * c, "SE reduce weights")?;
    let se_reduce_b = rd.f64s(cr, "SE reduce bias")?;
    let se_expand_w = rd.f64s(c * cr, "SE expand weights")?;
    let se_expand_b = rd.f64s(c, "SE expand bias")?;
    let bn = get_bn(&mut rd, c)?;
    let input_bn = if has_input_bn { Some(get_bn(&mut rd, c)?) } else { None };
    let volterra = VolterraConvLayer::from_kernels(ConvGeometry::square(c, height, width, 3, 1)?, kernels)?;
    Ok(HlaParams { config, se_reduce_w, se_reduce_b, se_expand_w, se_expand_b, volterra, bn, input_bn })
}

//! Dense row-major tensors and their binary serialization.
//!
//! The on-disk layout is little-endian:
//!
//! ```text
//! "ATT1" | u32 rank | rank x u32 extent | u8 width (4 or 8) | data
//! ```
//!
//! where `data` holds `product(extents)` floats of the given byte width.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATT1";
pub const MAX_RANK: usize = 4;

/// Floating point element type. Gradient checks run at `f64`, training at `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Byte width on disk.
    const WIDTH: u8;

    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to every scalar type")
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Contract(format!(
                "tensor rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor from `f64` values, converting each to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect()
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    /// Encodes the tensor at its native width.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.rank() + self.len() * T::WIDTH as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.push(T::WIDTH);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Reads one tensor from `r`, converting to `T` if the stored width differs.
    ///
    /// `offset` is the absolute position of the reader in its stream and is
    /// only used for error messages. On success it is advanced past the record.
    pub fn read_from(r: &mut impl Read, offset: &mut u64) -> Result<Self> {
        let start = *offset;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, offset, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: start,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let rank = read_u32(r, offset, "rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format {
                offset: *offset - 4,
                msg: format!("rank {rank} exceeds {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, offset, "extent")? as usize);
        }
        let mut width = [0u8; 1];
        read_exact(r, &mut width, offset, "width flag")?;
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match width[0] {
            4 => {
                let mut buf = vec![0u8; numel * 4];
                read_exact(r, &mut buf, offset, "f32 data")?;
                buf.chunks_exact(4)
                    .map(|c| lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect()
            }
            8 => {
                let mut buf = vec![0u8; numel * 8];
                read_exact(r, &mut buf, offset, "f64 data")?;
                buf.chunks_exact(8)
                    .map(|c| lit(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            }
            w => {
                return Err(Error::Format {
                    offset: *offset - 1,
                    msg: format!("unsupported width flag {w}"),
                })
            }
        };
        Ok(Self { shape, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut offset = 0;
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor, &mut offset)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset,
                msg: format!("{} trailing bytes", cursor.len()),
            });
        }
        Ok(t)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: *offset + filled as u64,
                    msg: format!("truncated {what}"),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => {
                return Err(Error::Format {
                    offset: *offset + filled as u64,
                    msg: e.to_string(),
                })
            }
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32(r: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, offset, what)?;
    Ok(u32::from_le_bytes(b))
}

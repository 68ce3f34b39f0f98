//! Little-endian primitives shared by the container and checkpoint formats.

use crate::error::{Error, Result};
use crate::tensor::{shape_of, DType, Tensor};
use ndarray::{ArrayD, Dimension};
use num_complex::{Complex32, Complex64};
use std::io::{Read, Write};

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

/// Dtype code, rank, extents, then the little-endian payload.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&[t.dtype().code(), t.shape().len() as u8])?;
    for &e in t.shape() {
        write_u64(w, e as u64)?;
    }
    match t {
        Tensor::R32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::R64(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::C64(a) => {
            for v in a.iter() {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Tensor::C128(a) => {
            for v in a.iter() {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Tensor::Bool(a) => {
            for v in a.iter() {
                w.write_all(&[u8::from(*v)])?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])?;
    let rank = head[1] as usize;
    if rank > 8 {
        return Err(Error::Format(format!("unreasonable tensor rank {rank}")));
    }
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(read_u64(r)?);
    }
    let shape = shape_of(&extents)?;
    let count: usize = shape.size();
    let mut payload = vec![0u8; count * dtype.elem_size()];
    r.read_exact(&mut payload)?;
    Ok(match dtype {
        DType::Real32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::R32(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        DType::Real64 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::R64(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        DType::Complex64 => {
            let data: Vec<Complex32> = payload
                .chunks_exact(8)
                .map(|c| {
                    Complex32::new(
                        f32::from_le_bytes(c[0..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..8].try_into().unwrap()),
                    )
                })
                .collect();
            Tensor::C64(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        DType::Complex128 => {
            let data: Vec<Complex64> = payload
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[0..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..16].try_into().unwrap()),
                    )
                })
                .collect();
            Tensor::C128(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        DType::Bool => {
            let data: Vec<bool> = payload.iter().map(|&b| b != 0).collect();
            Tensor::Bool(ArrayD::from_shape_vec(shape, data).unwrap())
        }
    })
}

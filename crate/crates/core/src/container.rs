//! The KSP container: a small binary format for k-space, coil maps, masks,
//! ground-truth/reconstructed images, and their metadata.
//!
//! Layout (all integers little-endian):
//! magic `"SSDU"`, format version u16, kind tag u8, then the tensor as
//! dtype code u8, rank u8, extents u64 each, raw payload (complex entries
//! interleaved re/im, booleans one byte each), and a trailing metadata
//! block of key=value strings (u32 count, each length-prefixed).

use crate::bytes;
use crate::error::{Error, Result};
use crate::mri::{CoilMaps, KSpaceVolume, MaskDescriptor, MaskKind, SamplingMask};
use crate::tensor::Tensor;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSDU";
const VERSION: u16 = 1;

/// What the stored tensor represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Kspace,
    Maps,
    Mask,
    Image,
}

impl ContainerKind {
    fn code(self) -> u8 {
        match self {
            ContainerKind::Kspace => 0,
            ContainerKind::Maps => 1,
            ContainerKind::Mask => 2,
            ContainerKind::Image => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => ContainerKind::Kspace,
            1 => ContainerKind::Maps,
            2 => ContainerKind::Mask,
            3 => ContainerKind::Image,
            other => return Err(Error::Format(format!("unknown container kind {other}"))),
        })
    }
}

/// A decoded container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub tensor: Tensor,
    pub metadata: Vec<(String, String)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    bytes::write_u16(&mut w, VERSION)?;
    w.write_all(&[container.kind.code()])?;
    bytes::write_tensor(&mut w, &container.tensor)?;
    bytes::write_u32(&mut w, container.metadata.len() as u32)?;
    for (k, v) in &container.metadata {
        if k.contains('=') {
            return Err(Error::Usage(format!("metadata key '{k}' contains '='")));
        }
        bytes::write_string(&mut w, &format!("{k}={v}"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a KSP container", path.display())));
    }
    let version = bytes::read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut kind_byte = [0u8; 1];
    r.read_exact(&mut kind_byte)?;
    let kind = ContainerKind::from_code(kind_byte[0])?;
    let tensor = bytes::read_tensor(&mut r)?;
    let n_meta = bytes::read_u32(&mut r)? as usize;
    let mut metadata = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let entry = bytes::read_string(&mut r)?;
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata entry '{entry}' lacks '='")))?;
        metadata.push((k.to_string(), v.to_string()));
    }
    Ok(Container { kind, tensor, metadata })
}

fn meta_u64(c: &Container, key: &str) -> Result<u64> {
    c.meta(key)
        .ok_or_else(|| Error::Format(format!("missing metadata key '{key}'")))?
        .parse()
        .map_err(|_| Error::Format(format!("metadata key '{key}' is not an integer")))
}

fn meta_f64(c: &Container, key: &str) -> Result<f64> {
    c.meta(key)
        .ok_or_else(|| Error::Format(format!("missing metadata key '{key}'")))?
        .parse()
        .map_err(|_| Error::Format(format!("metadata key '{key}' is not a number")))
}

/// Store acquired k-space; the acquisition mask travels in its own file.
pub fn write_kspace(path: &Path, volume: &KSpaceVolume) -> Result<()> {
    write_container(
        path,
        &Container {
            kind: ContainerKind::Kspace,
            tensor: Tensor::C128(volume.data.clone().into_dyn()),
            metadata: vec![
                ("slice_id".into(), volume.slice_id.to_string()),
                ("norm_scale".into(), volume.norm_scale.to_string()),
            ],
        },
    )
}

/// Read k-space back, pairing it with its acquisition mask.
pub fn read_kspace(path: &Path, omega: &SamplingMask) -> Result<KSpaceVolume> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Kspace {
        return Err(Error::Format(format!("{}: expected k-space", path.display())));
    }
    let data = c
        .tensor
        .to_c128()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Format("k-space must be rank 3".into()))?;
    let restricted = omega.restrict(&data.view())?;
    KSpaceVolume::new(restricted, omega.clone(), meta_u64(&c, "slice_id")?, meta_f64(&c, "norm_scale")?)
}

/// Raw per-coil k-space without mask pairing (fully-sampled references).
pub fn read_kspace_raw(path: &Path) -> Result<(Array3<Complex64>, Vec<(String, String)>)> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Kspace {
        return Err(Error::Format(format!("{}: expected k-space", path.display())));
    }
    let data = c
        .tensor
        .to_c128()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Format("k-space must be rank 3".into()))?;
    Ok((data, c.metadata))
}

pub fn write_maps(path: &Path, maps: &CoilMaps) -> Result<()> {
    write_container(
        path,
        &Container {
            kind: ContainerKind::Maps,
            tensor: Tensor::C128(maps.view().to_owned().into_dyn()),
            metadata: vec![],
        },
    )
}

pub fn read_maps(path: &Path) -> Result<CoilMaps> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Maps {
        return Err(Error::Format(format!("{}: expected coil maps", path.display())));
    }
    let maps = c
        .tensor
        .to_c128()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Format("coil maps must be rank 3".into()))?;
    CoilMaps::new(maps)
}

pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    let mut metadata = vec![
        ("kind".into(), mask.kind.tag().to_string()),
        ("scheme".into(), mask.descriptor.scheme.clone()),
    ];
    if let Some(seed) = mask.descriptor.seed {
        metadata.push(("seed".into(), seed.to_string()));
    }
    if let Some(rho) = mask.descriptor.rho {
        metadata.push(("rho".into(), rho.to_string()));
    }
    write_container(
        path,
        &Container {
            kind: ContainerKind::Mask,
            tensor: Tensor::Bool(mask.grid.as_ref().clone().into_dyn()),
            metadata,
        },
    )
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Mask {
        return Err(Error::Format(format!("{}: expected a mask", path.display())));
    }
    let grid = c
        .tensor
        .as_bool()?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format("mask must be rank 2".into()))?;
    let kind = match c.meta("kind") {
        Some("theta") => MaskKind::Theta,
        Some("lambda") => MaskKind::Lambda,
        _ => MaskKind::Omega,
    };
    let descriptor = MaskDescriptor {
        scheme: c.meta("scheme").unwrap_or("unknown").to_string(),
        seed: c.meta("seed").and_then(|s| s.parse().ok()),
        rho: c.meta("rho").and_then(|s| s.parse().ok()),
    };
    SamplingMask::new(grid, kind, descriptor)
}

pub fn write_image(path: &Path, image: &Array2<Complex64>, metadata: Vec<(String, String)>) -> Result<()> {
    write_container(
        path,
        &Container {
            kind: ContainerKind::Image,
            tensor: Tensor::C128(image.clone().into_dyn()),
            metadata,
        },
    )
}

pub fn read_image(path: &Path) -> Result<(Array2<Complex64>, Vec<(String, String)>)> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Image {
        return Err(Error::Format(format!("{}: expected an image", path.display())));
    }
    let img = c
        .tensor
        .to_c128()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format("image must be rank 2".into()))?;
    Ok((img, c.metadata))
}

/// 8-bit binary portable greymap of a magnitude image, windowed to
/// [0, 99.5th percentile]. Inspection aid only; not used by any metric.
pub fn write_pgm_preview(path: &Path, image: &Array2<Complex64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut mags: Vec<f64> = image.iter().map(|v| v.norm()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as f64 - 1.0) * 0.995).round() as usize;
    let hi = sorted[idx].max(f64::MIN_POSITIVE);
    for m in &mut mags {
        *m = (*m / hi).clamp(0.0, 1.0);
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mags.iter().map(|&m| (m * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

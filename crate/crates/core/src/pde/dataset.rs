//! FMDS: a small binary container for trajectory sets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      [u8; 4]  "FMDS"
//! version    u16      1
//! flags      u16      bit 0: latent grids (side not restricted to 16/32/64)
//! height     u32
//! width      u32
//! channels   u32
//! length     f64      periodic domain length
//! count      u32      trajectories
//! states     u32      states per trajectory
//! crc32      u32      CRC32 of the payload
//! per trajectory (count times):
//!   system u8, diffusivity f64, velocity_x f64, velocity_y f64, dt f64
//! payload    f32 * count * states * channels * height * width
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenSpec, GridSpec, Normalizer, System, SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMDS";
pub const VERSION: u16 = 1;
/// File names inside a dataset directory.
pub const DATA_FILE: &str = "data.fmds";
pub const SIDECAR_FILE: &str = "data.json";
const FLAG_LATENT: u16 = 1;
const FIXED_HEADER: usize = 4 + 2 + 2 + 4 * 3 + 8 + 4 * 3;
const TRAJ_BLOCK: usize = 1 + 8 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u16,
    pub latent: bool,
    pub grid: GridSpec,
    pub count: usize,
    pub states: usize,
    pub checksum: u32,
}

/// JSON sidecar written next to every generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u16,
    pub generator: GenSpec,
    pub splits: Splits,
    pub normalization: Normalizer,
    pub checksum: String,
}

/// Trajectory counts of the contiguous train / valid / test partitions, in file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Splits {
    /// 8:1:1 partition, with at least one valid and one test trajectory when count >= 3.
    pub fn eight_one_one(count: usize) -> Self {
        let held = if count >= 3 { (count / 10).max(1) } else { 0 };
        Splits {
            train: count - 2 * held,
            valid: held,
            test: held,
        }
    }
}

pub fn encode(trajectories: &[Trajectory], latent: bool) -> Result<Vec<u8>> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty trajectory list"))?;
    let grid = first.grid;
    let states = first.states.len();
    for tr in trajectories {
        if tr.grid != grid || tr.states.len() != states {
            return Err(Error::contract("all trajectories in a dataset must share grid and length"));
        }
        for s in &tr.states {
            grid.check(s)?;
        }
    }
    let mut payload = Vec::with_capacity(trajectories.len() * states * first.states[0].numel() * 4);
    for tr in trajectories {
        for s in &tr.states {
            for &v in s.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + trajectories.len() * TRAJ_BLOCK + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if latent { FLAG_LATENT } else { 0 }).to_le_bytes());
    for d in [grid.height, grid.width, grid.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.domain_length.to_le_bytes());
    out.extend_from_slice(&(trajectories.len() as u32).to_le_bytes());
    out.extend_from_slice(&(states as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    for tr in trajectories {
        out.push(tr.system.code());
        for v in [tr.params.diffusivity, tr.params.velocity.0, tr.params.velocity.1, tr.dt] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corruption(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corruption("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let latent = r.u16()? & FLAG_LATENT != 0;
    let (height, width, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let grid = GridSpec {
        height,
        width,
        channels,
        domain_length: r.f64()?,
    };
    if !latent {
        grid.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    }
    let count = r.u32()? as usize;
    let states = r.u32()? as usize;
    let checksum = r.u32()?;
    let mut meta = Vec::with_capacity(count);
    for _ in 0..count {
        let system = System::from_code(r.take(1)?[0])?;
        let (d, vx, vy, dt) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        meta.push((system, SystemParams { diffusivity: d, velocity: (vx, vy) }, dt));
    }
    let cells = channels * height * width;
    let expected = count * states * cells * 4;
    let payload = &bytes[r.pos..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    if crc32fast::hash(payload) != checksum {
        return Err(Error::Corruption("payload checksum mismatch".into()));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let trajectories = meta
        .into_iter()
        .map(|(system, params, dt)| Trajectory {
            system,
            params,
            dt,
            grid,
            states: (0..states)
                .map(|_| Tensor::new(grid.shape().to_vec(), values.by_ref().take(cells).collect()).expect("cells"))
                .collect(),
        })
        .collect();
    let header = DatasetHeader {
        version,
        latent,
        grid,
        count,
        states,
        checksum,
    };
    Ok((header, trajectories))
}

pub fn write_dataset(path: &Path, trajectories: &[Trajectory]) -> Result<DatasetHeader> {
    write_dataset_with(path, trajectories, false)
}

pub fn write_dataset_with(path: &Path, trajectories: &[Trajectory], latent: bool) -> Result<DatasetHeader> {
    let bytes = encode(trajectories, latent)?;
    let (header, _) = decode(&bytes)?;
    std::fs::write(path, &bytes)?;
    Ok(header)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    Ok(decode(&std::fs::read(path)?)?.1)
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    Ok(decode(&std::fs::read(path)?)?.0)
}

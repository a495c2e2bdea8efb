//! Dense video arrays and their on-disk formats.
//!
//! A [`VideoCube`] holds up to four extents, conventionally `H × W × C × T`,
//! stored row-major with the last extent fastest.
//!
//! VCUBE layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 0..4  | magic `VCUB`                              |
//! | 4     | version, `1`                              |
//! | 5     | dtype: `0` = f32, `1` = f64               |
//! | 6     | ndim, 1..=4                               |
//! | 7     | reserved, `0`                             |
//! | 8..   | `ndim` × u32 extents, then the payload    |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const VCUBE_MAGIC: &[u8; 4] = b"VCUB";
pub const VCUBE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoCube {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl VideoCube {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Shape(format!(
                "a cube has 1 to 4 extents, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {expected} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        assert!(!dims.is_empty() && dims.len() <= 4 && !dims.contains(&0));
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds an `H × W × C × T` cube from `f(h, w, c, t)`.
    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        t: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c * t);
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    for ti in 0..t {
                        data.push(f(hi, wi, ci, ti));
                    }
                }
            }
        }
        Self {
            dims: vec![h, w, c, t],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents padded to four entries (`H, W, C, T`), trailing ones filled with 1.
    pub fn hwct(&self) -> [usize; 4] {
        let mut out = [1; 4];
        out[..self.dims.len()].copy_from_slice(&self.dims);
        out
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize, t: usize) -> usize {
        let [_, wd, cd, td] = self.hwct();
        ((h * wd + w) * cd + c) * td + t
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, c: usize, t: usize) -> f64 {
        self.data[self.index(h, w, c, t)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, t: usize, v: f64) {
        let i = self.index(h, w, c, t);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channel `c` of every frame into a new `H × W × 1 × T` cube.
    pub fn channel(&self, c: usize) -> Self {
        let [h, w, _, t] = self.hwct();
        Self::from_fn(h, w, 1, t, |hi, wi, _, ti| self.at(hi, wi, c, ti))
    }

    /// Repeats a single-channel cube into `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> Self {
        let [h, w, _, t] = self.hwct();
        Self::from_fn(h, w, channels, t, |hi, wi, _, ti| self.at(hi, wi, 0, ti))
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + dtype.width() * self.len());
        out.extend_from_slice(VCUBE_MAGIC);
        out.push(VCUBE_VERSION);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a VCUBE byte stream, reporting the stored payload type.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Dtype)> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the VCUBE header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != VCUBE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"VCUB\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        if bytes[4] != VCUBE_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = match bytes[5] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        let ndim = bytes[6] as usize;
        if !(1..=4).contains(&ndim) {
            return Err(Error::Format(format!("ndim {ndim} outside 1..=4")));
        }
        if bytes[7] != 0 {
            return Err(Error::Format("reserved header byte is not zero".into()));
        }
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("header truncated inside extents".into()));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero extent in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        let payload = &bytes[header..];
        let width = dtype.width();
        if payload.len() != expected * width {
            return Err(Error::Truncation {
                expected,
                found: payload.len() / width,
            });
        }
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        Ok((Self::new(&dims, data)?, dtype))
    }
}

pub fn save_cube(cube: &VideoCube, path: impl AsRef<Path>) -> Result<()> {
    save_cube_as(cube, path, Dtype::F64)
}

pub fn save_cube_as(cube: &VideoCube, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_bytes(dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<VideoCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VideoCube::from_bytes(&bytes).map(|(c, _)| c)
}

/// Writes frame `t` of an `H × W × C × T` cube as binary PPM. Single-channel
/// cubes are written as gray; values are clamped to `[0, 1]` and scaled to 255.
pub fn write_ppm(cube: &VideoCube, t: usize, mut out: impl Write) -> Result<()> {
    let [h, w, c, frames] = cube.hwct();
    if t >= frames {
        return Err(Error::Shape(format!("frame {t} out of range for {frames} frames")));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("PPM export needs 1 or 3 channels, got {c}")));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for hi in 0..h {
        for wi in 0..w {
            for ch in 0..3 {
                let v = cube.at(hi, wi, if c == 1 { 0 } else { ch }, t);
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("<ppm stream>", e))
}

/// Dumps every frame to `<dir>/<stem>_<t>.ppm`.
pub fn dump_frames(cube: &VideoCube, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for t in 0..cube.hwct()[3] {
        let path = dir.join(format!("{stem}_{t:03}.ppm"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_ppm(cube, t, std::io::BufWriter::new(file))?;
        paths.push(path);
    }
    Ok(paths)
}

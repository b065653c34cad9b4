//! Residual construction, normalization, patch tiling and the trajectory file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ConditioningContext, Field, Quantity};
use crate::spectral::{wavenumber, Fft2};

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Upsample one periodic line of `n` knots by `factor`; knot `j` sits at fine index `j * factor`.
fn upsample_line(line: &[f64], factor: usize, out: &mut [f64]) {
    let n = line.len() as isize;
    for (xf, o) in out.iter_mut().enumerate() {
        let j = (xf / factor) as isize;
        let frac = (xf % factor) as f64 / factor as f64;
        let mut acc = 0.0;
        for m in -1..=2isize {
            let w = cubic_weight(frac - m as f64);
            acc += w * line[(j + m).rem_euclid(n) as usize];
        }
        *o = acc;
    }
}

/// Periodic bicubic interpolation by `factor` in {2, 4, 8}.
pub fn upsample(low: &Field, factor: usize) -> Result<Field> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::Parameter(format!(
            "upsample factor {factor} not in {{2, 4, 8}}"
        )));
    }
    let (nx, ny) = (low.nx, low.ny);
    let (fx, fy) = (nx * factor, ny * factor);
    // rows first, then columns
    let mut wide = vec![0.0f64; ny * fx];
    let mut line: Vec<f64> = vec![0.0; nx];
    for y in 0..ny {
        for x in 0..nx {
            line[x] = low.at(x, y) as f64;
        }
        upsample_line(&line, factor, &mut wide[y * fx..(y + 1) * fx]);
    }
    let mut out = vec![0.0f32; fx * fy];
    let mut col = vec![0.0f64; ny];
    let mut col_out = vec![0.0f64; fy];
    for x in 0..fx {
        for y in 0..ny {
            col[y] = wide[y * fx + x];
        }
        upsample_line(&col, factor, &mut col_out);
        for y in 0..fy {
            out[y * fx + x] = col_out[y] as f32;
        }
    }
    let mut f = Field::new(fx, fy, out)?;
    f.copy_meta_from(low);
    Ok(f)
}

/// Strided subsampling (every `factor`-th point starting at the origin).
pub fn subsample(hr: &Field, factor: usize) -> Result<Field> {
    if factor == 0 || hr.nx % factor != 0 || hr.ny % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} grid not divisible by factor {factor}",
            hr.nx, hr.ny
        )));
    }
    let (lx, ly) = (hr.nx / factor, hr.ny / factor);
    let mut vals = Vec::with_capacity(lx * ly);
    for y in 0..ly {
        for x in 0..lx {
            vals.push(hr.at(x * factor, y * factor));
        }
    }
    let mut f = Field::new(lx, ly, vals)?;
    f.copy_meta_from(hr);
    Ok(f)
}

/// Remove every Fourier mode a grid coarsened by `factor` cannot represent.
pub fn lowpass(field: &Field, factor: usize) -> Result<Field> {
    let (nx, ny) = (field.nx, field.ny);
    let fft = Fft2::new(nx, ny);
    let vals: Vec<f64> = field.values.iter().map(|&v| v as f64).collect();
    let mut spec = fft.forward_real(&vals);
    let (cx, cy) = ((nx / factor / 2) as f64, (ny / factor / 2) as f64);
    for y in 0..ny {
        for x in 0..nx {
            if wavenumber(x, nx).abs() >= cx || wavenumber(y, ny).abs() >= cy {
                spec[y * nx + x] = Default::default();
            }
        }
    }
    let out = fft
        .inverse_real(spec)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    field.with_values(out)
}

/// A residual together with its conditioning and the scale it is expressed in.
///
/// `norm_mean = 0, norm_std = 1` means physical units. The conditioning
/// snapshots are always expressed in the same units as the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub residual: Field,
    pub context: ConditioningContext,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl ResidualSample {
    /// Re-express a physical-unit sample in normalized units.
    pub fn normalized(&self, mean: f64, std: f64) -> Result<Self> {
        if self.norm_mean != 0.0 || self.norm_std != 1.0 {
            return Err(Error::Consistency("sample is already normalized".into()));
        }
        let residual = self
            .residual
            .with_values(normalize(&self.residual.values, mean, std)?)?;
        let mut context = self.context.clone();
        for s in &mut context.snapshots {
            s.values = normalize(&s.values, mean, std)?;
        }
        Ok(Self {
            residual,
            context,
            norm_mean: mean,
            norm_std: std,
        })
    }

    /// The same square window of the residual and every context snapshot.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<Self> {
        let mut context = self.context.clone();
        for s in &mut context.snapshots {
            *s = crop(s, x0, y0, size)?;
        }
        Ok(Self {
            residual: crop(&self.residual, x0, y0, size)?,
            context,
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
        })
    }

    /// The residual in physical units.
    pub fn physical_residual(&self) -> Result<Vec<f32>> {
        denormalize(&self.residual.values, self.norm_mean, self.norm_std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SrOptions {
    /// Low-pass the target before subsampling (off by default).
    pub prefilter: bool,
}

/// `R = X_hr - up(X_lr)` with `X_lr` the strided subsample of `hr`.
pub fn make_sr_residual(hr: &Field, factor: usize) -> Result<ResidualSample> {
    make_sr_residual_with(hr, factor, SrOptions::default())
}

pub fn make_sr_residual_with(hr: &Field, factor: usize, opts: SrOptions) -> Result<ResidualSample> {
    let source = if opts.prefilter {
        lowpass(hr, factor)?
    } else {
        hr.clone()
    };
    let lr = subsample(&source, factor)?;
    let up = upsample(&lr, factor)?;
    let res: Vec<f32> = hr
        .values
        .iter()
        .zip(&up.values)
        .map(|(a, b)| a - b)
        .collect();
    let residual = hr.with_values(res)?;
    Ok(ResidualSample {
        residual,
        context: ConditioningContext::super_resolution(up, hr.re_tag, factor),
        norm_mean: 0.0,
        norm_std: 1.0,
    })
}

/// `R = X_{n+s} - X_n`; the context holds `(X_{n-1}, X_n)`.
pub fn make_fc_residual(
    previous: &Field,
    current: &Field,
    future: &Field,
    s: usize,
) -> Result<ResidualSample> {
    if !current.same_grid(future) || !current.same_grid(previous) {
        return Err(Error::Shape("forecast frames differ in grid size".into()));
    }
    if future.time_index != current.time_index + s {
        return Err(Error::Consistency(format!(
            "future index {} is not current index {} + {s}",
            future.time_index, current.time_index
        )));
    }
    if previous.time_index >= current.time_index {
        return Err(Error::Consistency(format!(
            "previous index {} does not precede current index {}",
            previous.time_index, current.time_index
        )));
    }
    let res: Vec<f32> = future
        .values
        .iter()
        .zip(&current.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(ResidualSample {
        residual: current.with_values(res)?,
        context: ConditioningContext::forecast(
            previous.clone(),
            current.clone(),
            current.re_tag,
            s,
        ),
        norm_mean: 0.0,
        norm_std: 1.0,
    })
}

pub fn normalize(r: &[f32], mean: f64, std: f64) -> Result<Vec<f32>> {
    if !(std > 0.0) {
        return Err(Error::Parameter(format!(
            "normalization std must be positive, got {std}"
        )));
    }
    Ok(r.iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect())
}

pub fn denormalize(r: &[f32], mean: f64, std: f64) -> Result<Vec<f32>> {
    if !(std > 0.0) {
        return Err(Error::Parameter(format!(
            "normalization std must be positive, got {std}"
        )));
    }
    Ok(r.iter().map(|&v| (v as f64 * std + mean) as f32).collect())
}

/// A tile and its top-left corner in the parent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub x0: usize,
    pub y0: usize,
    pub field: Field,
}

pub fn crop(field: &Field, x0: usize, y0: usize, size: usize) -> Result<Field> {
    if x0 + size > field.nx || y0 + size > field.ny {
        return Err(Error::Parameter(format!(
            "crop at ({x0}, {y0}) of size {size} exceeds {}x{}",
            field.nx, field.ny
        )));
    }
    let mut vals = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        vals.extend_from_slice(&field.values[y * field.nx + x0..y * field.nx + x0 + size]);
    }
    let mut f = Field::new(size, size, vals)?;
    f.copy_meta_from(field);
    Ok(f)
}

fn tile_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch <= n)
        .collect()
}

/// Raster-order square tiles.
pub fn extract_patches(field: &Field, patch: usize, stride: usize) -> Result<Vec<Patch>> {
    if patch > field.nx || patch > field.ny {
        return Err(Error::Parameter(format!(
            "patch {patch} larger than {}x{} field",
            field.nx, field.ny
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    let mut out = Vec::new();
    for y0 in tile_starts(field.ny, patch, stride) {
        for x0 in tile_starts(field.nx, patch, stride) {
            out.push(Patch {
                x0,
                y0,
                field: crop(field, x0, y0, patch)?,
            });
        }
    }
    Ok(out)
}

/// Uniformly random patch origin.
pub fn random_origin(n: usize, patch: usize, rng: &mut impl Rng) -> usize {
    if n == patch {
        0
    } else {
        rng.random_range(0..=n - patch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Direct placement; later patches overwrite earlier ones.
    #[default]
    None,
    /// Plain per-pixel average of overlapping patches.
    Uniform,
    /// Per-pixel average weighted by a separable raised-cosine taper.
    CosineTaper,
}

fn taper(i: usize, n: usize) -> f64 {
    let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
    s * s
}

pub fn stitch(patches: &[Patch], nx: usize, ny: usize, mode: OverlapMode) -> Result<Field> {
    let mut acc = vec![0.0f64; nx * ny];
    let mut weight = vec![0.0f64; nx * ny];
    for p in patches {
        let (px, py) = (p.field.nx, p.field.ny);
        if p.x0 + px > nx || p.y0 + py > ny {
            return Err(Error::Shape(format!(
                "patch at ({}, {}) of size {px}x{py} exceeds {nx}x{ny}",
                p.x0, p.y0
            )));
        }
        for y in 0..py {
            for x in 0..px {
                let idx = (p.y0 + y) * nx + p.x0 + x;
                let v = p.field.at(x, y) as f64;
                match mode {
                    OverlapMode::None => {
                        acc[idx] = v;
                        weight[idx] = 1.0;
                    }
                    OverlapMode::Uniform => {
                        acc[idx] += v;
                        weight[idx] += 1.0;
                    }
                    OverlapMode::CosineTaper => {
                        let w = taper(x, px) * taper(y, py);
                        acc[idx] += w * v;
                        weight[idx] += w;
                    }
                }
            }
        }
    }
    if let Some(i) = weight.iter().position(|&w| w <= 0.0) {
        return Err(Error::Coverage(format!(
            "pixel ({}, {}) is not covered by any patch",
            i % nx,
            i / nx
        )));
    }
    let vals = acc
        .iter()
        .zip(&weight)
        .map(|(a, w)| (a / w) as f32)
        .collect();
    let mut out = Field::new(nx, ny, vals)?;
    if let Some(p) = patches.first() {
        out.copy_meta_from(&p.field);
    }
    Ok(out)
}

pub const DATASET_MAGIC: &[u8; 8] = b"FLEXDS01";

/// One trajectory: a sequence of equally spaced snapshots plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub nx: usize,
    pub ny: usize,
    /// Time between consecutive snapshots.
    pub dt: f64,
    pub viscosity: f64,
    pub re_tag: f64,
    pub quantity: Quantity,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub snapshots: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn new(nx: usize, ny: usize, dt: f64, viscosity: f64, re_tag: f64) -> Self {
        Self {
            nx,
            ny,
            dt,
            viscosity,
            re_tag,
            quantity: Quantity::Vorticity,
            norm_mean: 0.0,
            norm_std: 1.0,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, field: &Field) -> Result<()> {
        if field.nx != self.nx || field.ny != self.ny {
            return Err(Error::Shape(format!(
                "{}x{} snapshot pushed to {}x{} dataset",
                field.nx, field.ny, self.nx, self.ny
            )));
        }
        self.snapshots.push(field.values.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn field(&self, index: usize) -> Result<Field> {
        let vals = self
            .snapshots
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("snapshot {index} of {}", self.len())))?
            .clone();
        let mut f = Field::new(self.nx, self.ny, vals)?;
        f.quantity = self.quantity;
        f.time_index = index;
        f.dt = self.dt;
        f.re_tag = self.re_tag;
        Ok(f)
    }

    pub fn fields(&self) -> Result<Vec<Field>> {
        (0..self.len()).map(|i| self.field(i)).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let dim = |n: usize| -> Result<[u8; 4]> {
            u32::try_from(n)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&dim(self.nx)?)?;
        w.write_all(&dim(self.ny)?)?;
        w.write_all(&dim(self.snapshots.len())?)?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.viscosity.to_le_bytes())?;
        w.write_all(&self.re_tag.to_le_bytes())?;
        w.write_all(&[self.quantity.code()])?;
        w.write_all(&self.norm_mean.to_le_bytes())?;
        w.write_all(&self.norm_std.to_le_bytes())?;
        for snap in &self.snapshots {
            if snap.len() != self.nx * self.ny {
                return Err(Error::Shape("snapshot size differs from header".into()));
            }
            let mut buf = Vec::with_capacity(snap.len() * 4);
            for v in snap {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let dt = read_f64(r)?;
        let viscosity = read_f64(r)?;
        let re_tag = read_f64(r)?;
        let mut q = [0u8; 1];
        r.read_exact(&mut q).map_err(truncated)?;
        let quantity = Quantity::from_code(q[0])?;
        let norm_mean = read_f64(r)?;
        let norm_std = read_f64(r)?;
        let mut snapshots = Vec::with_capacity(count);
        let mut buf = vec![0u8; nx * ny * 4];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(truncated)?;
            snapshots.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Ok(Self {
            nx,
            ny,
            dt,
            viscosity,
            re_tag,
            quantity,
            norm_mean,
            norm_std,
            snapshots,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated dataset file".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

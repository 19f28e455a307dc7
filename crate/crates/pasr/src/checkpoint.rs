//! Versioned binary checkpoints: run configuration, region bounds,
//! location coordinates and every parameter tensor, all little-endian.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::config::RunConfig;
use crate::error::{PasrError, Result};
use crate::geocode::GeoCoordinate;
use crate::model::Pasr;
use crate::pipeline::LocationTable;

const MAGIC: &[u8; 8] = b"PASRCKPT";
const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    put_u64(out, vs.len() as u64);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(PasrError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn save(path: &Path, config: &RunConfig, model: &Pasr) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, config.to_flat_text().as_bytes());
    for v in [model.bounds.lat_min, model.bounds.lat_max, model.bounds.lon_min, model.bounds.lon_max] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let coords = model.location_coords();
    put_u64(&mut out, coords.len() as u64);
    for c in coords {
        out.extend_from_slice(&c.lat().to_le_bytes());
        out.extend_from_slice(&c.lon().to_le_bytes());
    }
    put_u64(&mut out, model.params.len() as u64);
    for (_, p) in model.params.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        put_u64(&mut out, p.rows as u64);
        put_u64(&mut out, p.cols as u64);
        put_f64s(&mut out, &p.value);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, Pasr)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| PasrError::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(PasrError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PasrError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| PasrError::Checkpoint("config block is not UTF-8".into()))?;
    let config = RunConfig::from_flat_text(&config_text)?;
    let stored_bounds = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let num = r.u64()? as usize;
    let mut coords = Vec::with_capacity(num);
    for _ in 0..num {
        let lat = r.f64()?;
        let lon = r.f64()?;
        coords.push(
            GeoCoordinate::new(lat, lon)
                .map_err(|_| PasrError::Checkpoint("invalid stored coordinate".into()))?,
        );
    }
    let n_params = r.u64()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| PasrError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let value = r.f64s()?;
        if value.len() != rows * cols {
            return Err(PasrError::Checkpoint(format!("tensor {name} size mismatch")));
        }
        params.add(&name, rows, cols, value);
    }
    if r.at != buf.len() {
        return Err(PasrError::Checkpoint("trailing bytes after checkpoint".into()));
    }
    let table = LocationTable::from_coords(coords);
    let model = Pasr::with_params(config.model.clone(), &table, params)?;
    let b = &model.bounds;
    if [b.lat_min, b.lat_max, b.lon_min, b.lon_max] != stored_bounds {
        return Err(PasrError::Checkpoint("region bounds do not match stored coordinates".into()));
    }
    Ok((config, model))
}

//! Gaussian cloud storage and the `GCLD` snapshot format.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::hand::HandSide;

pub const CLOUD_MAGIC: &[u8; 4] = b"GCLD";
pub const CLOUD_VERSION: u32 = 1;
const RECORD_FLOATS: usize = 3 + 3 + 4 + 1 + 3 + 1 + 2 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    pub validity: f64,
    pub uv: [f64; 2],
    pub side: HandSide,
    /// Mesh vertex the point descends from.
    pub parent: u32,
}

impl Gaussian {
    /// An isotropic, axis-aligned Gaussian.
    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Gaussian {
            mean,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
            validity: 0.5,
            uv: [0.0, 0.0],
            side: HandSide::Left,
            parent: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(points: Vec<Gaussian>) -> Self {
        GaussianCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyPoints);
        }
        for (i, p) in self.points.iter().enumerate() {
            let qn = p.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
            let bad = (qn - 1.0).abs() > 1e-9
                || !(0.0..=1.0).contains(&p.opacity)
                || p.color.iter().any(|c| !(0.0..=1.0).contains(c))
                || !(0.0..=1.0).contains(&p.validity)
                || p.mean.iter().chain(&p.log_scale).any(|x| !x.is_finite());
            if bad {
                return Err(Error::Invalid(format!("gaussian {i} violates the cloud invariants")));
            }
        }
        Ok(())
    }

    pub fn sides(&self) -> Vec<HandSide> {
        self.points.iter().map(|p| p.side).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CLOUD_MAGIC)?;
        w.write_u32::<LittleEndian>(CLOUD_VERSION)?;
        w.write_u32::<LittleEndian>(self.points.len() as u32)?;
        for p in &self.points {
            let mut rec = Vec::with_capacity(RECORD_FLOATS);
            rec.extend_from_slice(&p.mean);
            rec.extend_from_slice(&p.log_scale);
            rec.extend_from_slice(&p.rotation);
            rec.push(p.opacity);
            rec.extend_from_slice(&p.color);
            rec.push(p.validity);
            rec.extend_from_slice(&p.uv);
            rec.push(p.side.index() as f64);
            rec.push(p.parent as f64);
            for x in rec {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    /// Reads a snapshot. Values come back at single precision; quaternions
    /// are renormalized.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CLOUD_MAGIC {
            return Err(Error::Format("not a cloud snapshot (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CLOUD_VERSION {
            return Err(Error::Version { kind: "cloud", found: version, expected: CLOUD_VERSION });
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(n.min(1 << 24));
        let mut rec = [0f32; RECORD_FLOATS];
        for _ in 0..n {
            r.read_f32_into::<LittleEndian>(&mut rec)?;
            let f = |i: usize| rec[i] as f64;
            let mut q = [f(6), f(7), f(8), f(9)];
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if qn > 0.0 {
                q.iter_mut().for_each(|x| *x /= qn);
            }
            let side = match rec[17] as i64 {
                0 => HandSide::Left,
                1 => HandSide::Right,
                s => return Err(Error::Format(format!("bad hand side {s}"))),
            };
            points.push(Gaussian {
                mean: [f(0), f(1), f(2)],
                log_scale: [f(3), f(4), f(5)],
                rotation: q,
                opacity: f(10),
                color: [f(11), f(12), f(13)],
                validity: f(14),
                uv: [f(15), f(16)],
                side,
                parent: rec[18] as u32,
            });
        }
        Ok(GaussianCloud { points })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_at_single_precision() {
        let mut g = Gaussian::isotropic([0.1, -0.2, 0.5], 0.004, 0.7, [0.2, 0.4, 0.6]);
        g.side = HandSide::Right;
        g.parent = 4242;
        g.uv = [0.75, 0.25];
        let cloud = GaussianCloud::new(vec![g, Gaussian::isotropic([0.0; 3], 0.01, 0.5, [1.0, 0.0, 0.0])]);
        let mut buf = Vec::new();
        cloud.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 4 * RECORD_FLOATS);
        let back = GaussianCloud::read(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.points[0].side, HandSide::Right);
        assert_eq!(back.points[0].parent, 4242);
        for (a, b) in back.points.iter().zip(&cloud.points) {
            for k in 0..3 {
                assert_eq!(a.mean[k], b.mean[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut buf = Vec::new();
        GaussianCloud::default().write(&mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(GaussianCloud::read(&buf[..]), Err(Error::Version { .. })));
    }
}

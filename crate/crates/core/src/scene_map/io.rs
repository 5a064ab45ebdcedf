//! Binary scene-map container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   magic "PTZMAP\0\0" | version u32 | reference id u32 | view count u32 | descriptor dim u32
//! view     id u32 | pan f64 | tilt f64 | zoom f64
//!          focal f64 | pp.x f64 | pp.y f64
//!          rotation 9×f64 (row-major)
//!          h_rk 9×f64 (row-major) | has_cov u8 | [cov 81×f64 (row-major)]
//!          next landmark id u64 | landmark count u64 | landmarks
//! landmark id u64 | x f64 | y f64 | desc dim×f32 | cov 4×f64 (row-major)
//!          frames_seen u32 | frames_since_match u32 | born_at u64 | original u8
//! trailer  CRC-32 (IEEE) of everything before it, u32
//! ```

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Point2};

use super::{ActuatorReading, Landmark, MapError, SceneMap, ViewMap};
use crate::geometry::{Homography, Intrinsics, Matrix9};

pub const MAP_MAGIC: [u8; 8] = *b"PTZMAP\0\0";
pub const MAP_VERSION: u32 = 1;

pub fn serialize_map(map: &SceneMap) -> Result<Vec<u8>, MapError> {
    let dim = map
        .views
        .iter()
        .find_map(|v| v.descriptor_dim())
        .unwrap_or(0);
    let mut w = Vec::with_capacity(64 + map.landmark_count() * (64 + 4 * dim));
    w.extend_from_slice(&MAP_MAGIC);
    put_u32(&mut w, MAP_VERSION);
    put_u32(&mut w, map.reference);
    put_u32(&mut w, map.views.len() as u32);
    put_u32(&mut w, dim as u32);
    for v in &map.views {
        put_u32(&mut w, v.id);
        put_f64s(&mut w, &[v.key.pan_deg, v.key.tilt_deg, v.key.zoom]);
        put_f64s(
            &mut w,
            &[v.intrinsics.focal, v.intrinsics.pp.x, v.intrinsics.pp.y],
        );
        put_f64s(&mut w, v.rotation.transpose().as_slice());
        put_f64s(&mut w, v.h_rk.matrix().transpose().as_slice());
        match v.h_rk.covariance() {
            Some(c) => {
                w.push(1);
                put_f64s(&mut w, c.transpose().as_slice());
            }
            None => w.push(0),
        }
        w.extend_from_slice(&v.next_landmark_id.to_le_bytes());
        w.extend_from_slice(&(v.landmarks.len() as u64).to_le_bytes());
        for l in &v.landmarks {
            if l.desc.len() != dim {
                return Err(MapError::DimensionMismatch {
                    expected: dim,
                    got: l.desc.len(),
                });
            }
            w.extend_from_slice(&l.id.to_le_bytes());
            put_f64s(&mut w, &[l.pos.x, l.pos.y]);
            for d in &l.desc {
                w.extend_from_slice(&d.to_le_bytes());
            }
            put_f64s(&mut w, l.cov.transpose().as_slice());
            put_u32(&mut w, l.frames_seen);
            put_u32(&mut w, l.frames_since_match);
            w.extend_from_slice(&l.born_at.to_le_bytes());
            w.push(u8::from(l.original));
        }
    }
    let crc = crc32fast::hash(&w);
    put_u32(&mut w, crc);
    Ok(w)
}

pub fn deserialize_map(bytes: &[u8]) -> Result<SceneMap, MapError> {
    if bytes.len() < MAP_MAGIC.len() + 4 {
        return Err(corrupt("truncated header"));
    }
    if bytes[..8] != MAP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MAP_VERSION {
        return Err(MapError::VersionMismatch {
            found: version,
            expected: MAP_VERSION,
        });
    }
    if bytes.len() < 8 + 4 + 4 {
        return Err(corrupt("truncated header"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let reference = r.u32()?;
    let n_views = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut views = Vec::with_capacity(n_views.min(r.remaining() / 200 + 1));
    for _ in 0..n_views {
        let id = r.u32()?;
        let key = ActuatorReading::new(r.f64()?, r.f64()?, r.f64()?);
        let focal = r.f64()?;
        let pp = Point2::new(r.f64()?, r.f64()?);
        if !(focal > 0.0) {
            return Err(corrupt("non-positive focal"));
        }
        let rotation = Matrix3::from_row_slice(&r.f64s(9)?);
        let h = Matrix3::from_row_slice(&r.f64s(9)?);
        let cov = match r.u8()? {
            0 => None,
            1 => Some(Matrix9::from_row_slice(&r.f64s(81)?)),
            _ => return Err(corrupt("bad covariance flag")),
        };
        let next_landmark_id = r.u64()?;
        let n_lm = r.u64()? as usize;
        let lm_size = 8 + 16 + 4 * dim + 32 + 4 + 4 + 8 + 1;
        if n_lm.checked_mul(lm_size).is_none_or(|s| s > r.remaining()) {
            return Err(corrupt("landmark count exceeds payload"));
        }
        let mut landmarks = Vec::with_capacity(n_lm);
        for _ in 0..n_lm {
            let lid = r.u64()?;
            let pos = Point2::new(r.f64()?, r.f64()?);
            let mut desc = Vec::with_capacity(dim);
            for _ in 0..dim {
                desc.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            let cov = Matrix2::from_row_slice(&r.f64s(4)?);
            landmarks.push(Landmark {
                id: lid,
                pos,
                desc,
                cov,
                frames_seen: r.u32()?,
                frames_since_match: r.u32()?,
                born_at: r.u64()?,
                original: match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(corrupt("bad landmark flag")),
                },
            });
        }
        views.push(Arc::new(ViewMap {
            id,
            key,
            landmarks,
            h_rk: Homography::from_parts(h, cov),
            intrinsics: Intrinsics::new(focal, pp),
            rotation,
            next_landmark_id,
        }));
    }
    if r.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    if !views.iter().any(|v| v.id == reference) {
        return Err(corrupt("reference view missing"));
    }
    Ok(SceneMap { views, reference })
}

impl SceneMap {
    pub fn write_to(&self, path: &std::path::Path) -> Result<(), MapError> {
        std::fs::write(path, serialize_map(self)?)?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self, MapError> {
        deserialize_map(&std::fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> MapError {
    MapError::CorruptPayload(msg.to_string())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MapError> {
        if self.remaining() < n {
            return Err(corrupt("truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MapError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MapError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, MapError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, MapError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, MapError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

//! Versioned little-endian checkpoint holding student and teacher parameters.
//!
//! ```text
//! magic      8 bytes  "MMCKPT\0\0"
//! version    u32      1
//! model      u32 in_channels, u32 num_classes, u32 base_width, u32 depth,
//!            u64 seed, u8 recon_head
//! step       u64      optimizer steps taken
//! sections   u32 count, then per section:
//!   tag      4 bytes  "STUD" | "TEAC"
//!   [TEAC]   f64 ema alpha, u64 ema step
//!   params   u32 count, then per parameter:
//!            u32 name length, name (UTF-8), u32 rank, rank x u64 extents,
//!            numel x f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::segnet::{ModelConfig, TeacherState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMCKPT\0\0";
pub const VERSION: u32 = 1;
const STUDENT_TAG: &[u8; 4] = b"STUD";
const TEACHER_TAG: &[u8; 4] = b"TEAC";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub student: ParamSet,
    pub teacher: TeacherState,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, params: &ParamSet) {
    put_u32(buf, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, t.rank() as u32);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let m = &self.model;
        put_u32(&mut buf, m.in_channels as u32);
        put_u32(&mut buf, m.num_classes as u32);
        put_u32(&mut buf, m.base_width as u32);
        put_u32(&mut buf, m.depth as u32);
        put_u64(&mut buf, m.seed);
        buf.push(u8::from(m.recon_head));
        put_u64(&mut buf, self.step);
        put_u32(&mut buf, 2);
        buf.extend_from_slice(STUDENT_TAG);
        put_params(&mut buf, &self.student);
        buf.extend_from_slice(TEACHER_TAG);
        buf.extend_from_slice(&self.teacher.alpha.to_le_bytes());
        put_u64(&mut buf, self.teacher.step);
        put_params(&mut buf, &self.teacher.params);
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let model = ModelConfig {
            in_channels: r.u32()? as usize,
            num_classes: r.u32()? as usize,
            base_width: r.u32()? as usize,
            depth: r.u32()? as usize,
            seed: r.u64()?,
            recon_head: r.take(1)?[0] != 0,
        };
        let step = r.u64()?;
        let sections = r.u32()?;
        let mut student = None;
        let mut teacher = None;
        for _ in 0..sections {
            match r.take(4)? {
                t if t == STUDENT_TAG => student = Some(r.params()?),
                t if t == TEACHER_TAG => {
                    let alpha = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    let ema_step = r.u64()?;
                    teacher = Some(TeacherState {
                        params: r.params()?,
                        alpha,
                        step: ema_step,
                    });
                }
                other => return Err(format!("unknown section tag {other:?}")),
            }
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let student = student.ok_or("missing student section")?;
        let teacher = teacher.ok_or("missing teacher section")?;
        teacher
            .params
            .check_compatible(&student)
            .map_err(|e| e.to_string())?;
        Ok(Checkpoint {
            model,
            step,
            student,
            teacher,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn params(&mut self) -> std::result::Result<ParamSet, String> {
        let count = self.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| "parameter name is not UTF-8".to_string())?
                .to_string();
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("parameter extents overflow")?;
            let raw = self.take(numel.checked_mul(8).ok_or("parameter too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.insert(name, t).map_err(|e| e.to_string())?;
        }
        Ok(params)
    }
}

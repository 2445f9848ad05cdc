//! ASCTRACE: little-endian binary record of a sampling trajectory.
//!
//! ```text
//! header  "ASCTRACE" | u32 version | u32 c | u32 h | u32 w | u32 n_steps | u32 flags
//!         | u32 schedule_len | f64 alpha_bar[schedule_len]
//! frame   u32 t | f32 state[c*h*w] (flags bit0) | f32 score[c*h*w] (flags bit1)
//! ```
//!
//! The ᾱ table is aligned to the frames, so `schedule_len == n_steps`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, ScoreField, Shape};
use crate::sampler::Trajectory;
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"ASCTRACE";
pub const VERSION: u32 = 1;
pub const FLAG_STATES: u32 = 1;
pub const FLAG_SCORES: u32 = 1 << 1;

/// Parsed contents of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub shape: Shape,
    pub steps: Vec<u32>,
    pub alpha_bars: Vec<f64>,
    pub states: Option<Vec<Image>>,
    pub scores: Vec<ScoreField>,
}

impl TraceRecord {
    pub fn from_trajectory(traj: &Trajectory, sched: &NoiseSchedule) -> Result<Self> {
        let alpha_bars = traj
            .steps
            .iter()
            .map(|&t| sched.alpha_bar(t))
            .collect::<Result<_>>()?;
        Ok(Self {
            shape: traj.final_state.shape(),
            steps: traj.steps.clone(),
            alpha_bars,
            states: Some(traj.states.clone()),
            scores: traj.scores.clone(),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// `(t, ᾱ_t, score)` per frame.
    pub fn frames(&self) -> impl Iterator<Item = (u32, f64, &ScoreField)> {
        self.steps
            .iter()
            .zip(&self.alpha_bars)
            .zip(&self.scores)
            .map(|((&t, &ab), s)| (t, ab, s))
    }

    fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::Usage("refusing to write a trace with no steps".into()));
        }
        if self.alpha_bars.len() != n || self.scores.len() != n {
            return Err(Error::Usage(format!(
                "trace has {n} steps but {} alpha_bar values and {} score frames",
                self.alpha_bars.len(),
                self.scores.len()
            )));
        }
        if let Some(st) = &self.states {
            if st.len() != n {
                return Err(Error::Usage(format!("trace has {n} steps but {} states", st.len())));
            }
            st.iter().try_for_each(|x| self.shape.check(&x.shape()))?;
        }
        self.scores.iter().try_for_each(|s| self.shape.check(&s.shape()))?;
        if self.steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Usage("trace steps must be strictly decreasing".into()));
        }
        Ok(())
    }

    /// Serialized bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = self.steps.len();
        let len = self.shape.len();
        let per_frame = 4 + 4 * len * (1 + usize::from(self.states.is_some()));
        let mut out = Vec::with_capacity(40 + 8 * n + per_frame * n);
        out.extend_from_slice(MAGIC);
        let flags = FLAG_SCORES | if self.states.is_some() { FLAG_STATES } else { 0 };
        for v in [
            VERSION,
            dim(self.shape.c)?,
            dim(self.shape.h)?,
            dim(self.shape.w)?,
            dim(n)?,
            flags,
            dim(n)?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ab in &self.alpha_bars {
            out.extend_from_slice(&ab.to_le_bytes());
        }
        for (i, &t) in self.steps.iter().enumerate() {
            out.extend_from_slice(&t.to_le_bytes());
            if let Some(states) = &self.states {
                push_f32(&mut out, &states[i]);
            }
            push_f32(&mut out, &self.scores[i]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(|_| Error::Format("file shorter than the magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let header = |r: &mut Reader<'_>| {
            r.u32()
                .map_err(|off| Error::Format(format!("truncated header at byte offset {off}")))
        };
        let version = header(&mut r)?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let (c, h, w) = (header(&mut r)?, header(&mut r)?, header(&mut r)?);
        let n_steps = header(&mut r)? as usize;
        let flags = header(&mut r)?;
        let schedule_len = header(&mut r)? as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Format(format!("zero dimension {c}x{h}x{w}")));
        }
        if flags & FLAG_SCORES == 0 {
            return Err(Error::Format("scores flag (bit 1) not set".into()));
        }
        if flags & !(FLAG_STATES | FLAG_SCORES) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
        }
        if schedule_len != n_steps {
            return Err(Error::Format(format!(
                "schedule_len {schedule_len} does not match n_steps {n_steps}"
            )));
        }
        let mut alpha_bars = Vec::with_capacity(schedule_len);
        for _ in 0..schedule_len {
            let off = r.pos;
            let b = r
                .take(8)
                .map_err(|_| Error::Format(format!("truncated alpha_bar table at byte offset {off}")))?;
            alpha_bars.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        if let Some(bad) = alpha_bars.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Format(format!("alpha_bar value {bad} outside (0, 1]")));
        }

        let shape = Shape::new(c as usize, h as usize, w as usize);
        let has_states = flags & FLAG_STATES != 0;
        let mut steps = Vec::with_capacity(n_steps);
        let mut states = has_states.then(|| Vec::with_capacity(n_steps));
        let mut scores = Vec::with_capacity(n_steps);
        for frame in 0..n_steps {
            let corrupt = |offset: usize, reason: &str| Error::Corrupt {
                offset: offset as u64,
                frame,
                reason: reason.to_string(),
            };
            let t = r.u32().map_err(|off| corrupt(off, "truncated timestep"))?;
            if let Some(&prev) = steps.last() {
                if t >= prev {
                    return Err(corrupt(r.pos - 4, &format!("timestep {t} does not decrease from {prev}")));
                }
            }
            steps.push(t);
            if let Some(st) = states.as_mut() {
                st.push(r.image(shape).map_err(|off| corrupt(off, "truncated state payload"))?);
            }
            scores.push(r.image(shape).map_err(|off| corrupt(off, "truncated score payload"))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: r.pos as u64,
                frame: n_steps,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            shape,
            steps,
            alpha_bars,
            states,
            scores,
        })
    }
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Usage(format!("dimension {v} exceeds u32")))
}

fn push_f32(out: &mut Vec<u8>, im: &Image) {
    for &v in im.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Err carries the offset where the read started.
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], usize> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(self.pos)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn image(&mut self, shape: Shape) -> std::result::Result<Image, usize> {
        let raw = self.take(4 * shape.len())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        Ok(Image::from_vec(shape, data).expect("length matches shape"))
    }
}

pub fn write_record(record: &TraceRecord, path: &Path) -> Result<()> {
    let bytes = record.to_bytes()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace(traj: &Trajectory, sched: &NoiseSchedule, path: &Path) -> Result<()> {
    write_record(&TraceRecord::from_trajectory(traj, sched)?, path)
}

pub fn read_trace(path: &Path) -> Result<TraceRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TraceRecord::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TraceRecord {
        let shape = Shape::new(1, 2, 3);
        let im = |k: f64| Image::from_vec(shape, (0..6).map(|i| k + i as f64 * 0.25).collect()).unwrap();
        TraceRecord {
            shape,
            steps: vec![9, 5],
            alpha_bars: vec![0.25, 0.5],
            states: Some(vec![im(1.0), im(2.0)]),
            scores: vec![im(-1.0), im(-2.0)],
        }
    }

    #[test]
    fn byte_layout() {
        let b = record().to_bytes().unwrap();
        assert_eq!(&b[..8], b"ASCTRACE");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[28..32].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[36..44].try_into().unwrap()), 0.25);
        assert_eq!(u32::from_le_bytes(b[52..56].try_into().unwrap()), 9);
        assert_eq!(b.len(), 36 + 16 + 2 * (4 + 48));
    }

    #[test]
    fn round_trip_and_errors() {
        let rec = record();
        let b = rec.to_bytes().unwrap();
        assert_eq!(TraceRecord::from_bytes(&b).unwrap(), rec);

        let mut bad = b.clone();
        bad[7] = b'X';
        assert!(matches!(TraceRecord::from_bytes(&bad), Err(Error::Format(_))));

        let mut v2 = b.clone();
        v2[8] = 2;
        assert!(matches!(TraceRecord::from_bytes(&v2), Err(Error::Version(2))));

        let cut = &b[..b.len() - 10];
        match TraceRecord::from_bytes(cut) {
            Err(Error::Corrupt { frame, offset, .. }) => {
                assert_eq!(frame, 1);
                assert_eq!(offset, 52 + 52 + 4 + 24);
            }
            other => panic!("{other:?}"),
        }

        let mut noscore = b.clone();
        noscore[28] = 1;
        assert!(matches!(TraceRecord::from_bytes(&noscore), Err(Error::Format(_))));

        let mut nonmono = b;
        nonmono[52 + 52..52 + 56].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(TraceRecord::from_bytes(&nonmono), Err(Error::Corrupt { frame: 1, .. })));
    }

    #[test]
    fn empty_trace_refused() {
        let mut rec = record();
        rec.steps.clear();
        rec.alpha_bars.clear();
        rec.states = None;
        rec.scores.clear();
        assert!(rec.to_bytes().unwrap_err().is_usage());
    }
}

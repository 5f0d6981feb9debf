use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{FrameRecord, WarmupLog};
use crate::error::{Error, Result};
use crate::geometry::{Pose3, Vec2, Vec3};

/// On-disk line of a warm-up log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameJson {
    pub t: f64,
    pub pose: Vec<f64>,
    pub tip3d: [f64; 3],
    pub px: Option<[f64; 2]>,
    pub conf: Option<f64>,
    pub ez: Option<f64>,
    pub sharp: Option<f64>,
    pub valid: bool,
}

impl From<&FrameRecord> for FrameJson {
    fn from(f: &FrameRecord) -> Self {
        FrameJson {
            t: f.t,
            pose: f.pose.to_row_major().to_vec(),
            tip3d: f.tip3d.into(),
            px: f.pixel_obs.map(|p| [p.x, p.y]),
            conf: f.confidence,
            ez: f.depth_obs,
            sharp: f.sharpness,
            valid: f.valid,
        }
    }
}

impl TryFrom<FrameJson> for FrameRecord {
    type Error = Error;
    fn try_from(j: FrameJson) -> Result<Self> {
        let pose = Pose3::from_row_major(&j.pose)?;
        if j.valid != j.px.is_some() {
            return Err(Error::Parse(format!("frame t={}: valid flag disagrees with px", j.t)));
        }
        Ok(FrameRecord {
            t: j.t,
            pose,
            tip3d: Vec3::from(j.tip3d),
            pixel_true: None,
            pixel_obs: j.px.map(|p| Vec2::new(p[0], p[1])),
            confidence: j.conf,
            depth_obs: j.ez,
            sharpness: j.sharp,
            valid: j.valid,
        })
    }
}

pub fn write_log_jsonl<W: Write>(log: &WarmupLog, mut w: W) -> Result<()> {
    for f in &log.frames {
        serde_json::to_writer(&mut w, &FrameJson::from(f))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log_jsonl<R: BufRead>(r: R) -> Result<WarmupLog> {
    let mut frames = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: FrameJson =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        frames.push(FrameRecord::try_from(j)?);
    }
    let log = WarmupLog { frames };
    log.check()?;
    Ok(log)
}

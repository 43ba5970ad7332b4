//! Episode files.
//!
//! ```text
//! ICTRACE-EPISODES 1\n                      magic and format version
//! { JSON record }\n                         one per episode
//! <payload_bytes bytes>\n                   that episode's arrays
//! ...
//! ```
//!
//! A record carries `task`, `seed`, `n_distractor_objects`,
//! `n_distractor_receptacles`, `steps` (N), `third` and `wrist` image shapes
//! (`[H, W, 3]`), `has_traces`, and `payload_bytes`. The payload holds
//! little-endian `f32` arrays back to back: all third-view images
//! (`N·H·W·3`), all wrist images, proprioception (`N·4`), traces (`N·10`,
//! only when `has_traces`), actions (`N·4`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpisodeMeta, Step, Trajectory};
use crate::error::{Error, Result};
use crate::traces::TRACE_DIM;

pub const EPISODE_MAGIC: &str = "ICTRACE-EPISODES";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    task: String,
    seed: u64,
    n_distractor_objects: usize,
    n_distractor_receptacles: usize,
    steps: usize,
    third: [usize; 3],
    wrist: [usize; 3],
    has_traces: bool,
    payload_bytes: usize,
}

impl Record {
    fn floats(&self) -> usize {
        let per_step = self.third.iter().product::<usize>() + self.wrist.iter().product::<usize>() + 8 + if self.has_traces { TRACE_DIM } else { 0 };
        self.steps * per_step
    }
}

fn image_shape(len: usize) -> Option<[usize; 3]> {
    let side = ((len / 3) as f64).sqrt().round() as usize;
    (side * side * 3 == len).then_some([side, side, 3])
}

pub fn write_episodes(trajectories: &[Trajectory]) -> Result<Vec<u8>> {
    let mut out = format!("{EPISODE_MAGIC} {EPISODE_VERSION}\n").into_bytes();
    for traj in trajectories {
        let first = traj.steps.first().ok_or(Error::EmptyTrajectory)?;
        let bad = |what: &str| Error::InvalidArgument(format!("episode `{}`: {what}", traj.task_label));
        let third = image_shape(first.third.len()).ok_or_else(|| bad("third image is not square RGB"))?;
        let wrist = image_shape(first.wrist.len()).ok_or_else(|| bad("wrist image is not square RGB"))?;
        let has_traces = traj.has_traces();
        if !has_traces && traj.steps.iter().any(|s| s.trace.is_some()) {
            return Err(bad("traces present on only some steps"));
        }
        if traj.steps.iter().any(|s| s.third.len() != first.third.len() || s.wrist.len() != first.wrist.len()) {
            return Err(bad("image sizes vary across steps"));
        }
        let mut rec = Record {
            task: traj.task_label.clone(),
            seed: traj.meta.seed,
            n_distractor_objects: traj.meta.n_distractor_objects,
            n_distractor_receptacles: traj.meta.n_distractor_receptacles,
            steps: traj.len(),
            third,
            wrist,
            has_traces,
            payload_bytes: 0,
        };
        rec.payload_bytes = rec.floats() * 4;
        out.extend(serde_json::to_vec(&rec).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        out.push(b'\n');
        let mut push = |xs: &[f32]| xs.iter().for_each(|x| out.extend(x.to_le_bytes()));
        traj.steps.iter().for_each(|s| push(&s.third));
        traj.steps.iter().for_each(|s| push(&s.wrist));
        traj.steps.iter().for_each(|s| push(&s.proprio));
        if has_traces {
            traj.steps.iter().for_each(|s| push(s.trace.as_ref().expect("checked")));
        }
        traj.steps.iter().for_each(|s| push(&s.action));
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_episodes(bytes: &[u8], path: &Path) -> Result<Vec<Trajectory>> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0;
    let line = |pos: &mut usize| -> Result<&[u8]> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| truncated(format!("unterminated line at offset {pos}")))?;
        *pos += end + 1;
        Ok(&rest[..end])
    };
    let header = String::from_utf8_lossy(line(&mut pos)?).into_owned();
    let (magic, version) = header.split_once(' ').ok_or_else(|| malformed("missing header".into()))?;
    if magic != EPISODE_MAGIC {
        return Err(malformed(format!("bad magic `{magic}`")));
    }
    if version != EPISODE_VERSION.to_string() {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: EPISODE_VERSION.to_string(),
        });
    }
    let mut out = Vec::new();
    while pos < bytes.len() {
        let rec: Record = serde_json::from_slice(line(&mut pos)?).map_err(|e| malformed(format!("record {}: {e}", out.len())))?;
        let end = pos.checked_add(rec.payload_bytes).filter(|&e| e < bytes.len()).ok_or_else(|| truncated(format!("record {} payload runs past end of file", out.len())))?;
        if rec.payload_bytes != rec.floats() * 4 || rec.steps == 0 || rec.third[2] != 3 || rec.wrist[2] != 3 {
            return Err(Error::ShapeInconsistency {
                path: path.to_path_buf(),
                detail: format!("record {} declares {} payload bytes for {} steps of shapes {:?}/{:?}", out.len(), rec.payload_bytes, rec.steps, rec.third, rec.wrist),
            });
        }
        if bytes[end] != b'\n' {
            return Err(malformed(format!("record {} payload not newline-terminated", out.len())));
        }
        let mut floats = bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        pos = end + 1;
        let n = rec.steps;
        let third_len = rec.third.iter().product::<usize>();
        let wrist_len = rec.wrist.iter().product::<usize>();
        let mut take = |k: usize| -> Vec<f32> { floats.by_ref().take(k).collect() };
        let thirds: Vec<Vec<f32>> = (0..n).map(|_| take(third_len)).collect();
        let wrists: Vec<Vec<f32>> = (0..n).map(|_| take(wrist_len)).collect();
        let proprio: Vec<Vec<f32>> = (0..n).map(|_| take(4)).collect();
        let traces: Option<Vec<Vec<f32>>> = rec.has_traces.then(|| (0..n).map(|_| take(TRACE_DIM)).collect());
        let actions: Vec<Vec<f32>> = (0..n).map(|_| take(4)).collect();
        let steps = thirds
            .into_iter()
            .zip(wrists)
            .enumerate()
            .map(|(i, (third, wrist))| Step {
                third,
                wrist,
                proprio: proprio[i].clone().try_into().unwrap(),
                trace: traces.as_ref().map(|t| t[i].clone().try_into().unwrap()),
                action: actions[i].clone().try_into().unwrap(),
            })
            .collect();
        out.push(Trajectory {
            task_label: rec.task,
            meta: EpisodeMeta {
                seed: rec.seed,
                n_distractor_objects: rec.n_distractor_objects,
                n_distractor_receptacles: rec.n_distractor_receptacles,
            },
            steps,
        });
    }
    Ok(out)
}

pub fn save_episodes(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    fs::write(path, write_episodes(trajectories)?)?;
    Ok(())
}

pub fn load_episodes(path: &Path) -> Result<Vec<Trajectory>> {
    read_episodes(&fs::read(path)?, path)
}

//! Demo record stream.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "EQFLDEMO" | version u32 | demos u64
//! per demo:  task u8 | success u8 | steps u64
//! per step:  points u32 | xyz f64 x 3n | rgb f64 x 3n
//!            height u32 | width u32 | pixels f32 x 3hw
//!            proprio f64 x 10 | action f64 x 10
//! ```
//!
//! A proprio or action record is position, first rotation column, second
//! rotation column, gripper.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_scene, scripted_expert, Task};
use crate::error::{Error, Result};
use crate::flow::TrainSample;
use crate::perception::{embed_action_chunk, ActionChunk, Image, PointCloud, ProprioState};
use crate::policy::{prepare, Observation};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EQFLDEMO";
const MAX_POINTS: u32 = 1 << 20;
const MAX_PIXELS: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: ProprioState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub task: Task,
    pub steps: Vec<DemoStep>,
    pub success: bool,
}

impl Demo {
    /// The `horizon` actions starting at step `t`, padded with the final action.
    pub fn chunk(&self, t: usize, horizon: usize) -> ActionChunk {
        let last = self.steps.len() - 1;
        ActionChunk { steps: (t..t + horizon).map(|k| self.steps[k.min(last)].action).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: Task,
    pub n_demos: usize,
    pub seed: u64,
    pub demo_seeds: Vec<u64>,
    /// Scene seeds on which the expert failed.
    pub rejected_seeds: Vec<u64>,
    pub total_steps: usize,
}

/// Generates `n` expert demos. Demo `i` comes from the scene seeded with `demo_seeds[i]`.
pub fn generate_dataset(task: Task, n: usize, seed: u64) -> Result<(Vec<Demo>, DatasetManifest)> {
    if n == 0 {
        return Err(Error::Validation("a dataset needs at least one demo".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::with_capacity(n);
    let mut demo_seeds = Vec::with_capacity(n);
    let mut rejected_seeds = Vec::new();
    while demos.len() < n {
        let s = master.next_u64();
        let scene = sample_scene(task, &mut ChaCha8Rng::seed_from_u64(s));
        match scripted_expert(&scene) {
            Ok(d) => {
                demos.push(d);
                demo_seeds.push(s);
            }
            Err(e) => {
                log::warn!("rejecting scene {s}: {e}");
                rejected_seeds.push(s);
                if rejected_seeds.len() > 10 * n {
                    return Err(Error::Generation(format!("expert failed on {} scenes", rejected_seeds.len())));
                }
            }
        }
    }
    let total_steps = demos.iter().map(|d| d.steps.len()).sum();
    let manifest = DatasetManifest { version: DATASET_VERSION, task, n_demos: n, seed, demo_seeds, rejected_seeds, total_steps };
    Ok((demos, manifest))
}

fn put_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_state(w: &mut impl Write, s: &ProprioState) -> Result<()> {
    put_f64s(w, s.position.iter().chain(&s.rot_a).chain(&s.rot_b).copied().chain([s.gripper]))
}

pub fn write_demos(w: &mut impl Write, demos: &[Demo]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(demos.len() as u64).to_le_bytes())?;
    for d in demos {
        let task: u8 = match d.task {
            Task::Reach => 0,
            Task::PickPlace => 1,
        };
        w.write_all(&[task, d.success as u8])?;
        w.write_all(&(d.steps.len() as u64).to_le_bytes())?;
        for s in &d.steps {
            let c = &s.obs.cloud;
            w.write_all(&(c.len() as u32).to_le_bytes())?;
            put_f64s(w, c.points.iter().flat_map(|p| [p.x, p.y, p.z]))?;
            put_f64s(w, c.colors.iter().flatten().copied())?;
            let img = &s.obs.image;
            w.write_all(&(img.height as u32).to_le_bytes())?;
            w.write_all(&(img.width as u32).to_le_bytes())?;
            for v in &img.data {
                w.write_all(&v.to_le_bytes())?;
            }
            put_state(w, &s.obs.proprio)?;
            put_state(w, &s.action)?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

fn get_vec3(r: &mut impl Read) -> Result<Vector3<f64>> {
    Ok(Vector3::new(get_f64(r)?, get_f64(r)?, get_f64(r)?))
}

fn get_state(r: &mut impl Read) -> Result<ProprioState> {
    Ok(ProprioState { position: get_vec3(r)?, rot_a: get_vec3(r)?, rot_b: get_vec3(r)?, gripper: get_f64(r)? })
}

pub fn read_demos(r: &mut impl Read) -> Result<Vec<Demo>> {
    if &take::<8>(r)? != MAGIC {
        return Err(Error::Format("not a demo dataset (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let n = get_u64(r)?;
    let mut demos = Vec::new();
    for _ in 0..n {
        let [task, success] = take::<2>(r)?;
        let task = match task {
            0 => Task::Reach,
            1 => Task::PickPlace,
            t => return Err(Error::Format(format!("unknown task code {t}"))),
        };
        let len = get_u64(r)?;
        let mut steps = Vec::new();
        for _ in 0..len {
            let np = get_u32(r)?;
            if np == 0 || np > MAX_POINTS {
                return Err(Error::Format(format!("implausible point count {np}")));
            }
            let points = (0..np).map(|_| get_vec3(r)).collect::<Result<Vec<_>>>()?;
            let colors = (0..np)
                .map(|_| Ok([get_f64(r)?, get_f64(r)?, get_f64(r)?]))
                .collect::<Result<Vec<_>>>()?;
            let cloud = PointCloud::new(points, colors).map_err(|e| Error::Format(e.to_string()))?;
            let (height, width) = (get_u32(r)? as usize, get_u32(r)? as usize);
            if (height * width) as u64 > MAX_PIXELS {
                return Err(Error::Format(format!("implausible image size {height}x{width}")));
            }
            let data = (0..height * width * 3)
                .map(|_| Ok(f32::from_le_bytes(take(r)?)))
                .collect::<Result<Vec<_>>>()?;
            let image = Image { height, width, data };
            let proprio = get_state(r)?;
            let action = get_state(r)?;
            steps.push(DemoStep { obs: Observation { cloud, image, proprio }, action });
        }
        demos.push(Demo { task, steps, success: success != 0 });
    }
    Ok(demos)
}

/// Writes `demos.bin` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, demos: &[Demo], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("demos.bin"))?);
    write_demos(&mut w, demos)?;
    w.flush()?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Demo>, DatasetManifest)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let demos = read_demos(&mut BufReader::new(fs::File::open(dir.join("demos.bin"))?))?;
    if demos.len() != manifest.n_demos {
        return Err(Error::Format(format!("manifest lists {} demos, file has {}", manifest.n_demos, demos.len())));
    }
    Ok((demos, manifest))
}

/// One sample per demo step: the observation and the next `horizon` expert actions.
pub fn training_samples(demos: &[Demo], horizon: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for d in demos {
        for (t, s) in d.steps.iter().enumerate() {
            let obs = prepare(&s.obs)?;
            let target = embed_action_chunk(&d.chunk(t, horizon), &obs.centroid)?;
            out.push(TrainSample { obs, target });
        }
    }
    Ok(out)
}

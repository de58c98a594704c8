//! Deterministic synthetic multi-task classification suites.
//!
//! Every task owns `c` isotropic Gaussian clusters (σ = 0.5), one per label,
//! placed inside a task-specific region of input space. Cluster centers of
//! different tasks are at least `separation_sigmas · σ` apart and centers
//! inside a task at least `8σ` apart.
//!
//! With `overlapping = false` each task gets its own block of coordinates and
//! any sample whose nearest center belongs to another task is redrawn, so
//! supports never mix. With `overlapping = true` the tasks share one block and
//! sit next to each other with conflicting labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::math::l2_distance;

pub const CLUSTER_SIGMA: f32 = 0.5;
/// Minimum distance between two cluster centers of the same task, in σ.
const WITHIN_TASK_SIGMAS: f32 = 8.0;
/// Distance of each task's region from the origin (disjoint layout).
const REGION_RADIUS: f32 = 8.0;
/// Per-coordinate scale of cluster offsets inside a coordinate block.
const BLOCK_SCALE: f32 = 2.5;
/// Per-coordinate scale of random task region centers when `T > d`.
const REGION_SCALE: f32 = 2.0;
/// Per-coordinate scale of cluster offsets around a random region center.
const CLUSTER_SCALE: f32 = 1.0;
/// Minimum distance of far-field probes from every center, in σ.
const FAR_FIELD_SIGMAS: f32 = 6.0;
const LAYOUT_ATTEMPTS: usize = 200;
const REDRAW_LIMIT: usize = 10_000;
const PROBE_MIN_ACCURACY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteParams {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation_sigmas: f32,
    #[serde(default)]
    pub overlapping: bool,
}

fn default_separation() -> f32 {
    6.0
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            tasks: 4,
            dim: 16,
            classes: 4,
            n_train: 512,
            n_test: 256,
            seed: 0,
            separation_sigmas: default_separation(),
            overlapping: false,
        }
    }
}

impl SuiteParams {
    /// The label-conflict variant: shared region, 3σ cross-task separation.
    pub fn conflict(seed: u64) -> Self {
        Self {
            seed,
            separation_sigmas: 3.0,
            overlapping: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f32>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub centers: Vec<Vec<f32>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn n_test(&self) -> usize {
        self.test.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub params: SuiteParams,
    pub tasks: Vec<TaskDataset>,
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    /// `(task, center)` for every cluster of every task.
    pub fn all_centers(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.tasks
            .iter()
            .flat_map(|t| t.centers.iter().map(move |c| (t.task_id, c.as_slice())))
    }

    /// Task owning the cluster center nearest to `x`.
    pub fn nearest_task(&self, x: &[f32]) -> usize {
        nearest_owner(self.all_centers(), x)
    }

    pub fn union_train(&self) -> Vec<&Sample> {
        self.tasks.iter().flat_map(|t| t.train.iter()).collect()
    }

    pub fn union_test(&self) -> Vec<&Sample> {
        self.tasks.iter().flat_map(|t| t.test.iter()).collect()
    }

    /// Samples at least `6σ` away from every cluster center, used to probe
    /// model behaviour off the task supports.
    pub fn far_field(&self, n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa4f_1e1d);
        let scale = REGION_RADIUS / 2.0;
        let min_gap = FAR_FIELD_SIGMAS * CLUSTER_SIGMA;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let x = gaussian(&mut rng, self.dim(), scale);
            let clear = self
                .all_centers()
                .all(|(_, c)| l2_distance(&x, c).unwrap() >= min_gap as f64);
            if clear {
                out.push(x);
            }
        }
        out
    }
}

fn nearest_owner<'a>(centers: impl Iterator<Item = (usize, &'a [f32])>, x: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (owner, c) in centers {
        let d = l2_distance(x, c).unwrap();
        if d < best.0 {
            best = (d, owner);
        }
    }
    best.1
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f32) -> Vec<f32> {
    (0..dim)
        .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

fn sample_layout(rng: &mut ChaCha8Rng, p: &SuiteParams) -> Option<Vec<Vec<Vec<f32>>>> {
    let within = (WITHIN_TASK_SIGMAS * CLUSTER_SIGMA) as f64;
    let across = (p.separation_sigmas * CLUSTER_SIGMA) as f64;
    let layout = if p.overlapping {
        overlapping_layout(rng, p, across)
    } else {
        disjoint_layout(rng, p)
    };
    let ok = layout.iter().enumerate().all(|(t, centers)| {
        centers.iter().enumerate().all(|(k, c)| {
            let inside = centers[..k].iter().all(|o| l2_distance(o, c).unwrap() >= within);
            let outside = layout[..t]
                .iter()
                .flatten()
                .all(|o| l2_distance(o, c).unwrap() >= across - 1e-4);
            inside && outside
        })
    });
    ok.then_some(layout)
}

/// With `T ≤ d` each task owns a disjoint block of `⌊d/T⌋` coordinates and its
/// cluster centers live inside that block, so centers of different tasks are
/// orthogonal. Otherwise regions are random directions.
fn disjoint_layout(rng: &mut ChaCha8Rng, p: &SuiteParams) -> Vec<Vec<Vec<f32>>> {
    let mut axes: Vec<usize> = (0..p.dim).collect();
    axes.shuffle(rng);
    let block = p.dim / p.tasks;
    (0..p.tasks)
        .map(|task| {
            if block >= 1 {
                let coords = &axes[task * block..(task + 1) * block];
                (0..p.classes)
                    .map(|_| {
                        let mut c = vec![0.0; p.dim];
                        c[coords[0]] = REGION_RADIUS;
                        for &a in coords {
                            c[a] += gaussian(rng, 1, BLOCK_SCALE)[0];
                        }
                        c
                    })
                    .collect()
            } else {
                let region = gaussian(rng, p.dim, REGION_SCALE);
                (0..p.classes)
                    .map(|_| {
                        let offset = gaussian(rng, p.dim, CLUSTER_SCALE);
                        region.iter().zip(&offset).map(|(r, o)| r + o).collect()
                    })
                    .collect()
            }
        })
        .collect()
}

/// All tasks reuse one template of `c` centers in a shared block of
/// coordinates, task `t` rotating the labels by `t`, and each task is shifted
/// along its own axis by `across / √2`. Same-template clusters of two tasks
/// are then exactly `across` apart and carry different labels.
fn overlapping_layout(rng: &mut ChaCha8Rng, p: &SuiteParams, across: f64) -> Vec<Vec<Vec<f32>>> {
    let shift = (across / std::f64::consts::SQRT_2) as f32;
    let mut axes: Vec<usize> = (0..p.dim).collect();
    axes.shuffle(rng);
    let shared_len = (p.dim / p.tasks.max(1)).max(1).min(p.dim);
    let shared: Vec<usize> = axes[..shared_len].to_vec();
    let free = &axes[shared_len..];
    let template: Vec<Vec<f32>> = (0..p.classes)
        .map(|_| {
            let mut c = vec![0.0; p.dim];
            for &a in &shared {
                c[a] = gaussian(rng, 1, BLOCK_SCALE)[0];
            }
            c
        })
        .collect();
    (0..p.tasks)
        .map(|task| {
            (0..p.classes)
                .map(|y| {
                    let mut c = template[(y + task) % p.classes].clone();
                    if !free.is_empty() {
                        c[free[task % free.len()]] += shift;
                    }
                    c
                })
                .collect()
        })
        .collect()
}

/// Accuracy of a nearest-train-centroid classifier on the test split.
pub fn nearest_centroid_accuracy(task: &TaskDataset, classes: usize) -> f64 {
    let dim = task.centers[0].len();
    let mut sums = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in &task.train {
        counts[s.y] += 1;
        for (acc, v) in sums[s.y].iter_mut().zip(&s.x) {
            *acc += *v as f64;
        }
    }
    let centroids: Vec<Vec<f32>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| (v / n.max(1) as f64) as f32).collect())
        .collect();
    let correct = task
        .test
        .iter()
        .filter(|s| nearest_owner(centroids.iter().map(Vec::as_slice).enumerate(), &s.x) == s.y)
        .count();
    correct as f64 / task.test.len() as f64
}

pub fn generate_suite(params: &SuiteParams) -> Result<TaskSuite> {
    let p = params;
    if p.tasks < 2 || p.dim < 2 || p.classes < 2 {
        return Err(Error::Domain(format!(
            "a suite needs T ≥ 2, d ≥ 2 and c ≥ 2 (got T={}, d={}, c={})",
            p.tasks, p.dim, p.classes
        )));
    }
    if p.classes > 256 {
        return Err(Error::Domain("labels are stored as bytes; c must be ≤ 256".into()));
    }
    if p.n_train < p.classes || p.n_test == 0 {
        return Err(Error::Domain(format!(
            "need at least one train sample per class and one test sample (n_train={}, n_test={})",
            p.n_train, p.n_test
        )));
    }
    if !(p.separation_sigmas > 0.0) {
        return Err(Error::Domain("separation_sigmas must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let layout = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| sample_layout(&mut rng, p))
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place {}×{} cluster centers with {}σ separation in d={}; use a larger input dimension",
                p.tasks, p.classes, p.separation_sigmas, p.dim
            ))
        })?;

    let all: Vec<(usize, &[f32])> = layout
        .iter()
        .enumerate()
        .flat_map(|(t, cs)| cs.iter().map(move |c| (t, c.as_slice())))
        .collect();
    let draw = |task: usize, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let y = k % p.classes;
            let center = &layout[task][y];
            let mut tries = 0;
            loop {
                let noise = gaussian(rng, p.dim, CLUSTER_SIGMA);
                let x: Vec<f32> = center.iter().zip(&noise).map(|(c, e)| c + e).collect();
                if p.overlapping || nearest_owner(all.iter().copied(), &x) == task {
                    out.push(Sample { x, y });
                    break;
                }
                tries += 1;
                if tries > REDRAW_LIMIT {
                    return Err(Error::Generation(format!(
                        "task {task} samples keep landing nearer other tasks; use a larger input dimension"
                    )));
                }
            }
        }
        Ok(out)
    };

    let mut tasks = Vec::with_capacity(p.tasks);
    for (task_id, centers) in layout.iter().enumerate() {
        let train = draw(task_id, p.n_train, &mut rng)?;
        let test = draw(task_id, p.n_test, &mut rng)?;
        tasks.push(TaskDataset {
            task_id,
            centers: centers.clone(),
            train,
            test,
        });
    }

    for t in &tasks {
        let acc = nearest_centroid_accuracy(t, p.classes);
        if acc < PROBE_MIN_ACCURACY {
            return Err(Error::Generation(format!(
                "task {} is not linearly separable enough (probe accuracy {acc:.4} < {PROBE_MIN_ACCURACY}); use a larger input dimension",
                t.task_id
            )));
        }
    }

    Ok(TaskSuite {
        params: p.clone(),
        tasks,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/suite/<seed>/suite.json
//                 <root>/suite/<seed>/task<i>/{train,test}/{manifest.json,inputs.f32,labels.u8}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteManifest {
    params: SuiteParams,
    centers: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    task_id: usize,
    split: String,
    count: usize,
    dim: usize,
    classes: usize,
    inputs_file: String,
    labels_file: String,
    content_hash: String,
}

pub fn suite_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("suite").join(seed.to_string())
}

fn split_bytes(samples: &[Sample]) -> (Vec<u8>, Vec<u8>) {
    let inputs = samples
        .iter()
        .flat_map(|s| s.x.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let labels = samples.iter().map(|s| s.y as u8).collect();
    (inputs, labels)
}

fn split_hash(inputs: &[u8], labels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(inputs);
    h.update(labels);
    hex::encode(h.finalize())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Writes the suite below `root` and returns the suite directory.
pub fn write_suite(suite: &TaskSuite, root: &Path) -> Result<PathBuf> {
    let dir = suite_dir(root, suite.params.seed);
    let manifest = SuiteManifest {
        params: suite.params.clone(),
        centers: suite.tasks.iter().map(|t| t.centers.clone()).collect(),
    };
    write_atomic(&dir.join("suite.json"), &json_bytes(&manifest))?;
    for task in &suite.tasks {
        for (split, samples) in [("train", &task.train), ("test", &task.test)] {
            let sdir = dir.join(format!("task{}", task.task_id)).join(split);
            let (inputs, labels) = split_bytes(samples);
            let m = SplitManifest {
                task_id: task.task_id,
                split: split.into(),
                count: samples.len(),
                dim: suite.dim(),
                classes: suite.classes(),
                inputs_file: "inputs.f32".into(),
                labels_file: "labels.u8".into(),
                content_hash: split_hash(&inputs, &labels),
            };
            write_atomic(&sdir.join("inputs.f32"), &inputs)?;
            write_atomic(&sdir.join("labels.u8"), &labels)?;
            write_atomic(&sdir.join("manifest.json"), &json_bytes(&m))?;
        }
    }
    Ok(dir)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_split(dir: &Path, task_id: usize, dim: usize, classes: usize) -> Result<Vec<Sample>> {
    let mpath = dir.join("manifest.json");
    let m: SplitManifest = serde_json::from_slice(&read(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.task_id != task_id || m.dim != dim || m.classes != classes {
        return Err(Error::format(&mpath, "split manifest disagrees with suite.json"));
    }
    let inputs = read(&dir.join(&m.inputs_file))?;
    let labels = read(&dir.join(&m.labels_file))?;
    if inputs.len() != m.count * dim * 4 || labels.len() != m.count {
        return Err(Error::format(dir, "data files do not match the manifest counts"));
    }
    if split_hash(&inputs, &labels) != m.content_hash {
        return Err(Error::format(dir, "content hash mismatch"));
    }
    let samples = inputs
        .chunks_exact(dim * 4)
        .zip(&labels)
        .map(|(row, &y)| Sample {
            x: row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            y: y as usize,
        })
        .collect::<Vec<_>>();
    if samples.iter().any(|s| s.y >= classes) {
        return Err(Error::format(dir, "label out of range"));
    }
    Ok(samples)
}

/// Loads a suite previously written by [`write_suite`] from its suite directory.
pub fn read_suite(dir: &Path) -> Result<TaskSuite> {
    let mpath = dir.join("suite.json");
    let m: SuiteManifest = serde_json::from_slice(&read(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    let p = m.params;
    let mut tasks = Vec::with_capacity(p.tasks);
    for (task_id, centers) in m.centers.into_iter().enumerate() {
        let tdir = dir.join(format!("task{task_id}"));
        tasks.push(TaskDataset {
            task_id,
            centers,
            train: read_split(&tdir.join("train"), task_id, p.dim, p.classes)?,
            test: read_split(&tdir.join("test"), task_id, p.dim, p.classes)?,
        });
    }
    Ok(TaskSuite { params: p, tasks })
}

//! Datasets of grasp examples: a synthetic scene generator with an exact
//! geometric success oracle, the three leakage-controlled split protocols,
//! and binary dataset files.
//!
//! Examples are 32x32 heightmap crops aligned to the gripper axis (the grasp
//! center sits at the crop center, the jaw closes along the horizontal axis),
//! plus the grasp depth z in the same metric units as the pixels.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Crop side in pixels.
pub const IMAGE_SIDE: usize = 32;
/// Elements per image.
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

const DATASET_MAGIC: &[u8; 4] = b"GFD1";

// Stream tags so generation, splitting and augmentation never share draws.
const TAG_OBJECT: u64 = 0x4f424a; // "OBJ"
const TAG_POSE: u64 = 0x504f53; // "POS"
const TAG_GRASP: u64 = 0x475250; // "GRP"
const TAG_SPLIT: u64 = 0x53504c; // "SPL"

/// One labelled grasp: an aligned depth crop, the closing height z, and the
/// identity keys that drive the split protocols. phi records the gripper
/// orientation before alignment; crops are pre-aligned so it is always 0
/// here.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspExample {
    pub image: Vec<f32>,
    pub z: f32,
    pub phi: f32,
    pub label: u8,
    pub object_id: u64,
    pub pose_id: u64,
    pub image_id: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<GraspExample>,
}

impl Dataset {
    /// Wraps examples after checking the per-example and uniqueness
    /// invariants.
    pub fn new(examples: Vec<GraspExample>) -> Result<Dataset> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            check_example(ex)?;
            if !seen.insert(ex.image_id) {
                return Err(Error::Config(format!("duplicate image_id {}", ex.image_id)));
            }
        }
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let pos = self.examples.iter().filter(|e| e.label == 1).count();
        pos as f64 / self.examples.len() as f64
    }
}

fn check_example(ex: &GraspExample) -> Result<()> {
    if ex.image.len() != IMAGE_LEN {
        return Err(Error::dimension(
            "dataset",
            format!("image has {} elements, want {IMAGE_LEN}", ex.image.len()),
        ));
    }
    if ex.image.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "image {} has non-finite or negative heights",
            ex.image_id
        )));
    }
    if !ex.z.is_finite() || ex.z < 0.0 {
        return Err(Error::Config(format!("image {} has invalid z {}", ex.image_id, ex.z)));
    }
    if ex.label > 1 {
        return Err(Error::Config(format!(
            "image {} has label {}, want 0 or 1",
            ex.image_id, ex.label
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Image,
    Pose,
    Object,
}

impl SplitKind {
    fn tag(self) -> u64 {
        match self {
            SplitKind::Image => 1,
            SplitKind::Pose => 2,
            SplitKind::Object => 3,
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SplitKind> {
        match s {
            "image" => Ok(SplitKind::Image),
            "pose" => Ok(SplitKind::Pose),
            "object" => Ok(SplitKind::Object),
            other => Err(Error::Config(format!(
                "unknown split kind {other:?}, want image|pose|object"
            ))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Image => "image",
            SplitKind::Pose => "pose",
            SplitKind::Object => "object",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(kind: SplitKind, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must be strictly inside (0,1), got {train_fraction}"
            )));
        }
        Ok(SplitSpec { kind, train_fraction, seed })
    }
}

/// Partitions example indices so that no key of the requested kind appears on
/// both sides. Keys are shuffled under the split seed; the coarser the key
/// (object > pose > image), the harder the generalization task.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    SplitSpec::new(spec.kind, spec.train_fraction, spec.seed)?;
    if ds.is_empty() {
        return Err(Error::Split("dataset is empty".into()));
    }
    // (object, pose) pairs key the pose split; the other kinds use one id.
    let key_of = |ex: &GraspExample| -> (u64, u64) {
        match spec.kind {
            SplitKind::Image => (ex.image_id, 0),
            SplitKind::Pose => (ex.object_id, ex.pose_id),
            SplitKind::Object => (ex.object_id, 0),
        }
    };
    let keys: BTreeSet<(u64, u64)> = ds.examples.iter().map(key_of).collect();
    if keys.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 distinct {} keys, found {}",
            spec.kind,
            keys.len()
        )));
    }
    let mut keys: Vec<(u64, u64)> = keys.into_iter().collect();
    let mut rng = stream(spec.seed, spec.kind.tag(), 0, TAG_SPLIT);
    keys.shuffle(&mut rng);
    let n_train = ((keys.len() as f64 * spec.train_fraction).round() as usize)
        .clamp(1, keys.len() - 1);
    let train_keys: HashSet<(u64, u64)> = keys[..n_train].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        if train_keys.contains(&key_of(ex)) {
            train.push(i);
        } else {
            val.push(i);
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Label oracle

/// Geometric success test thresholds, in the image's height units.
#[derive(Debug, Clone, Copy)]
pub struct OracleParams {
    pub stroke_min: f64,
    pub stroke_max: f64,
    pub clearance: f64,
    pub finger_offset: usize,
}

impl OracleParams {
    /// Same geometry with all heights multiplied by g (pixel offsets are
    /// scale-free).
    pub fn scaled(&self, g: f64) -> OracleParams {
        OracleParams {
            stroke_min: self.stroke_min * g,
            stroke_max: self.stroke_max * g,
            clearance: self.clearance * g,
            finger_offset: self.finger_offset,
        }
    }
}

/// Maximum surface height along one pixel column.
fn column_height(image: &[f64], side: usize, col: usize) -> f64 {
    let mut h = f64::NEG_INFINITY;
    for row in 0..side {
        h = h.max(image[row * side + col]);
    }
    h
}

/// Surface heights at the grasp center column and the two finger columns
/// (center ± finger_offset).
pub fn surface_heights(image: &[f64], side: usize, finger_offset: usize) -> (f64, f64, f64) {
    let c = side / 2;
    debug_assert!(finger_offset > 0 && finger_offset <= c && c + finger_offset < side);
    (
        column_height(image, side, c),
        column_height(image, side, c - finger_offset),
        column_height(image, side, c + finger_offset),
    )
}

/// Deterministic grasp success test on a heightmap crop.
///
/// Success requires (a) the center-column surface to sit within the gripper
/// stroke above the closing height: h_c − z ∈ [stroke_min, stroke_max], and
/// (b) both finger columns to clear the grasped surface by the clearance
/// margin: height ≤ h_c − clearance.
pub fn label_oracle(image: &[f64], side: usize, z: f64, p: &OracleParams) -> bool {
    let (hc, left, right) = surface_heights(image, side, p.finger_offset);
    let depth = hc - z;
    depth >= p.stroke_min
        && depth <= p.stroke_max
        && left <= hc - p.clearance
        && right <= hc - p.clearance
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Generator controls: one box or cylinder plateau per scene on a flat
/// table, heights and footprints drawn per object.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    /// Object height above the table, meters.
    pub height_range: (f64, f64),
    /// Footprint half-extent (box half-width, cylinder radius), pixels.
    pub footprint_range: (usize, usize),
    pub stroke_min: f64,
    pub stroke_max: f64,
    pub clearance: f64,
    /// Finger column offset from the grasp center, pixels.
    pub finger_offset: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> SceneParams {
        SceneParams {
            height_range: (0.02, 0.08),
            footprint_range: (3, 8),
            stroke_min: 0.005,
            stroke_max: 0.035,
            clearance: 0.01,
            finger_offset: 10,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.stroke_min < self.stroke_max) {
            return Err(Error::Config(format!(
                "stroke window [{}, {}] is empty",
                self.stroke_min, self.stroke_max
            )));
        }
        if self.clearance <= 0.0 {
            return Err(Error::Config("clearance must be positive".into()));
        }
        if self.height_range.0 < self.clearance || self.height_range.0 >= self.height_range.1 {
            return Err(Error::Config(format!(
                "height range ({}, {}) must be increasing and start above the clearance {}",
                self.height_range.0, self.height_range.1, self.clearance
            )));
        }
        let (fmin, fmax) = self.footprint_range;
        if fmin < 2 || fmin > fmax || fmax + 2 > self.finger_offset {
            return Err(Error::Config(format!(
                "footprint half-extents ({fmin}, {fmax}) must fit inside the finger offset {}",
                self.finger_offset
            )));
        }
        if self.finger_offset == 0 || self.finger_offset >= IMAGE_SIDE / 2 {
            return Err(Error::Config(format!(
                "finger offset {} outside (0, {})",
                self.finger_offset,
                IMAGE_SIDE / 2
            )));
        }
        Ok(())
    }

    pub fn oracle(&self) -> OracleParams {
        OracleParams {
            stroke_min: self.stroke_min,
            stroke_max: self.stroke_max,
            clearance: self.clearance,
            finger_offset: self.finger_offset,
        }
    }
}

const SCENE_SIDE: usize = 64;
const GRASPS_PER_POSE: u64 = 5;
const POSES_PER_OBJECT: u64 = 4;
const MAX_ATTEMPTS: usize = 200;
/// Sampling keeps this margin (meters) between any height comparison and its
/// threshold so the f32 storage round-trip can never flip a label.
const EDGE_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy)]
struct ObjectSpec {
    is_box: bool,
    height: f64,
    half_x: usize,
    half_y: usize,
}

fn sample_object(params: &SceneParams, object_id: u64) -> ObjectSpec {
    let mut rng = stream(params.seed, object_id, 0, TAG_OBJECT);
    let (fmin, fmax) = params.footprint_range;
    ObjectSpec {
        is_box: rng.gen_bool(0.5),
        height: rng.gen_range(params.height_range.0..params.height_range.1),
        half_x: rng.gen_range(fmin..=fmax),
        half_y: rng.gen_range(fmin..=fmax),
    }
}

/// Table-frame heightmap with the object plateau stamped in.
fn render_scene(obj: &ObjectSpec, cx: usize, cy: usize) -> Vec<f64> {
    let mut scene = vec![0.0; SCENE_SIDE * SCENE_SIDE];
    for y in 0..SCENE_SIDE {
        for x in 0..SCENE_SIDE {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            let inside = if obj.is_box {
                dx.abs() <= obj.half_x as f64 && dy.abs() <= obj.half_y as f64
            } else {
                dx * dx + dy * dy <= (obj.half_x * obj.half_x) as f64
            };
            if inside {
                scene[y * SCENE_SIDE + x] = obj.height;
            }
        }
    }
    scene
}

fn crop(scene: &[f64], gx: usize, gy: usize) -> Vec<f64> {
    let half = IMAGE_SIDE / 2;
    let mut out = Vec::with_capacity(IMAGE_LEN);
    for row in 0..IMAGE_SIDE {
        let sy = gy + row - half;
        let sx = gx - half;
        out.extend_from_slice(&scene[sy * SCENE_SIDE + sx..sy * SCENE_SIDE + sx + IMAGE_SIDE]);
    }
    out
}

fn generate_example(params: &SceneParams, image_id: u64) -> Result<GraspExample> {
    let object_id = image_id / (GRASPS_PER_POSE * POSES_PER_OBJECT);
    let pose_id = image_id / GRASPS_PER_POSE;
    let obj = sample_object(params, object_id);
    let mut pose_rng = stream(params.seed, pose_id, 0, TAG_POSE);
    let cx = pose_rng.gen_range(24..=40usize);
    let cy = pose_rng.gen_range(24..=40usize);
    let scene = render_scene(&obj, cx, cy);
    let oracle = params.oracle();
    let target = (image_id % 2 == 0) as u8;
    let mut rng = stream(params.seed, image_id, 0, TAG_GRASP);

    let valid_depth = |rng: &mut rand_chacha::ChaCha8Rng| {
        let hi = params.stroke_max.min(obj.height) - EDGE_MARGIN;
        rng.gen_range(params.stroke_min + EDGE_MARGIN..hi)
    };
    for _ in 0..MAX_ATTEMPTS {
        let gy = cy.saturating_add_signed(rng.gen_range(-4..=4));
        let (gx, z);
        if target == 1 {
            // Center over the plateau, fingers strictly clear of it.
            let slack = (oracle.finger_offset - 1).saturating_sub(obj.half_x).min(obj.half_x);
            gx = cx.saturating_add_signed(rng.gen_range(-(slack as isize)..=slack as isize));
            z = obj.height - valid_depth(&mut rng);
        } else {
            // Failure modes: closing depth outside the stroke (too deep /
            // too shallow), a finger landing on a wide plateau, or the grasp
            // missing the object entirely.
            let deep_ok = obj.height > params.stroke_max + 2.0 * EDGE_MARGIN;
            let collide_ok = 2 * obj.half_x >= oracle.finger_offset;
            let miss_ok = obj.half_x + 2 <= 8;
            let mut modes = vec![1u8];
            if deep_ok {
                modes.push(0);
            }
            if collide_ok {
                modes.push(2);
            }
            if miss_ok {
                modes.push(3);
            }
            match *modes.choose(&mut rng).unwrap() {
                0 => {
                    gx = cx;
                    let u = rng
                        .gen_range(params.stroke_max + EDGE_MARGIN..obj.height - EDGE_MARGIN);
                    z = obj.height - u;
                }
                1 => {
                    gx = cx;
                    let u = rng.gen_range(-0.03..params.stroke_min - EDGE_MARGIN);
                    z = obj.height - u;
                }
                2 => {
                    let lo = oracle.finger_offset - obj.half_x;
                    let off = rng.gen_range(lo as isize..=obj.half_x.min(8) as isize);
                    let sign: isize = if rng.gen_bool(0.5) { 1 } else { -1 };
                    gx = cx.saturating_add_signed(sign * off);
                    z = obj.height - valid_depth(&mut rng);
                }
                _ => {
                    let off = rng.gen_range(obj.half_x as isize + 2..=8);
                    let sign: isize = if rng.gen_bool(0.5) { 1 } else { -1 };
                    gx = cx.saturating_add_signed(sign * off);
                    z = rng.gen_range(0.0..0.05);
                }
            }
        }
        let image64 = crop(&scene, gx, gy);
        // Store in f32 and label from exactly the stored representation, so a
        // reload always reproduces the oracle decision.
        let image: Vec<f32> = image64.iter().map(|&v| v as f32).collect();
        let z = z.max(0.0) as f32;
        let stored64: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let label = label_oracle(&stored64, IMAGE_SIDE, z as f64, &oracle) as u8;
        if label == target {
            return Ok(GraspExample {
                image,
                z,
                phi: 0.0,
                label,
                object_id,
                pose_id,
                image_id,
            });
        }
    }
    Err(Error::Generation(format!(
        "no grasp with label {target} found for image {image_id} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Synthetic corpus with balanced labels (targets alternate per example) and
/// an object → pose → grasp identity hierarchy. Deterministic given the seed
/// and independent of thread schedule.
pub fn generate_synthetic(params: &SceneParams, n: usize) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Generation("need at least one example".into()));
    }
    let examples = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_example(params, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}

// ---------------------------------------------------------------------------
// Dataset files

struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn read_bytes<R: Read>(src: &mut Counting<R>, buf: &mut [u8], what: &str) -> Result<()> {
    let at = src.pos;
    src.inner.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(at, format!("unexpected end of file reading {what}"))
        } else {
            Error::from(e)
        }
    })?;
    src.pos += buf.len() as u64;
    Ok(())
}

pub fn save_dataset<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    if ds.len() > u32::MAX as usize {
        return Err(Error::contract("save_dataset", "more than u32::MAX examples"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(ds.len() as u32).to_le_bytes())?;
    for ex in &ds.examples {
        let t = Tensor::from_vec(&[IMAGE_SIDE, IMAGE_SIDE], ex.image.clone());
        write_tensor(&mut out, &t)?;
        out.write_all(&ex.z.to_le_bytes())?;
        out.write_all(&ex.phi.to_le_bytes())?;
        out.write_all(&[ex.label])?;
        out.write_all(&ex.object_id.to_le_bytes())?;
        out.write_all(&ex.pose_id.to_le_bytes())?;
        out.write_all(&ex.image_id.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let mut src = Counting { inner: BufReader::new(File::open(path)?), pos: 0 };
    let mut magic = [0u8; 4];
    read_bytes(&mut src, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, want \"GFD1\"")));
    }
    let mut count_raw = [0u8; 4];
    read_bytes(&mut src, &mut count_raw, "example count")?;
    let count = u32::from_le_bytes(count_raw) as usize;
    let mut examples = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let base = src.pos;
        let image = read_tensor::<f32, _>(&mut src).map_err(|e| match e {
            Error::Format { offset, detail } => Error::format(base + offset, detail),
            other => other,
        })?;
        if image.shape() != [IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::format(
                base,
                format!("image tensor is {:?}, want [{IMAGE_SIDE}, {IMAGE_SIDE}]", image.shape()),
            ));
        }
        let mut f4 = [0u8; 4];
        read_bytes(&mut src, &mut f4, "z")?;
        let z = f32::from_le_bytes(f4);
        read_bytes(&mut src, &mut f4, "phi")?;
        let phi = f32::from_le_bytes(f4);
        let mut lab = [0u8; 1];
        read_bytes(&mut src, &mut lab, "label")?;
        let mut f8 = [0u8; 8];
        read_bytes(&mut src, &mut f8, "object_id")?;
        let object_id = u64::from_le_bytes(f8);
        read_bytes(&mut src, &mut f8, "pose_id")?;
        let pose_id = u64::from_le_bytes(f8);
        read_bytes(&mut src, &mut f8, "image_id")?;
        let image_id = u64::from_le_bytes(f8);
        let ex = GraspExample {
            image: image.data().to_vec(),
            z,
            phi,
            label: lab[0],
            object_id,
            pose_id,
            image_id,
        };
        check_example(&ex).map_err(|e| Error::format(base, e.to_string()))?;
        if !seen.insert(image_id) {
            return Err(Error::format(base, format!("duplicate image_id {image_id}")));
        }
        examples.push(ex);
    }
    Ok(Dataset { examples })
}

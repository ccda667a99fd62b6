//! MMP1 dataset files, the synthetic motion generator, and batching.
//!
//! Positions are millimeters, stored per sequence in `(person, frame, joint,
//! coord)` order. Batches flatten persons into the batch axis and lay the pose
//! axis out joint-major: entry `j·3 + c` holds coordinate `c` of joint `j`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMP1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub persons: usize,
    pub frames: usize,
    pub joints: usize,
    pub fps: f32,
    /// `persons · frames · joints · 3` values.
    pub positions: Vec<f32>,
}

impl MotionSequence {
    pub fn new(persons: usize, frames: usize, joints: usize, fps: f32, positions: Vec<f32>) -> Result<Self> {
        let want = persons * frames * joints * 3;
        if positions.len() != want {
            return Err(Error::Invalid(format!(
                "sequence of {persons}×{frames}×{joints}×3 needs {want} values, got {}",
                positions.len()
            )));
        }
        Ok(MotionSequence {
            persons,
            frames,
            joints,
            fps,
            positions,
        })
    }

    fn index(&self, person: usize, frame: usize, joint: usize) -> usize {
        ((person * self.frames + frame) * self.joints + joint) * 3
    }

    pub fn joint(&self, person: usize, frame: usize, joint: usize) -> [f32; 3] {
        let i = self.index(person, frame, joint);
        [self.positions[i], self.positions[i + 1], self.positions[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub sequences: usize,
    pub persons: usize,
    pub frames: usize,
    pub joints: usize,
    pub fps: f32,
}

impl DatasetHeader {
    pub fn payload_values(&self) -> usize {
        self.sequences * self.persons * self.frames * self.joints * 3
    }

    pub fn file_bytes(&self) -> usize {
        HEADER_BYTES + 4 * self.payload_values()
    }
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{name} = {v} does not fit the MMP1 header")))
}

/// Serializes homogeneous sequences. An empty slice yields a header with all
/// dimensions zero.
pub fn encode_dataset(sequences: &[MotionSequence]) -> Result<Vec<u8>> {
    let first = sequences.first();
    let (m, t, j, fps) = first.map_or((0, 0, 0, 0.0), |s| (s.persons, s.frames, s.joints, s.fps));
    for (i, s) in sequences.iter().enumerate() {
        if (s.persons, s.frames, s.joints) != (m, t, j) || s.fps.to_bits() != fps.to_bits() {
            return Err(Error::Invalid(format!(
                "sequence {i} is {}×{}×{} at {} fps, expected {m}×{t}×{j} at {fps} fps",
                s.persons, s.frames, s.joints, s.fps
            )));
        }
        if s.positions.len() != m * t * j * 3 {
            return Err(Error::Invalid(format!(
                "sequence {i} has a payload of the wrong length"
            )));
        }
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * sequences.len() * m * t * j * 3);
    out.extend_from_slice(MAGIC);
    for (name, v) in [
        ("version", VERSION as usize),
        ("sequence count", sequences.len()),
        ("persons", m),
        ("frames", t),
        ("joints", j),
    ] {
        out.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    out.extend_from_slice(&fps.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for s in sequences {
        for v in &s.positions {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "MMP1 header needs {HEADER_BYTES} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"MMP1\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported MMP1 version {version}, expected {VERSION}"
        )));
    }
    Ok(DatasetHeader {
        version,
        sequences: word(2) as usize,
        persons: word(3) as usize,
        frames: word(4) as usize,
        joints: word(5) as usize,
        fps: f32::from_bits(word(6)),
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<MotionSequence>)> {
    let h = decode_header(bytes)?;
    let expected = h.file_bytes();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "MMP1 payload length mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let per = h.persons * h.frames * h.joints * 3;
    let values: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            value: values[i] as f64,
            context: "MMP1 payload".into(),
        });
    }
    let sequences = if per == 0 {
        (0..h.sequences)
            .map(|_| MotionSequence::new(h.persons, h.frames, h.joints, h.fps, Vec::new()))
            .collect::<Result<_>>()?
    } else {
        values
            .chunks_exact(per)
            .map(|c| MotionSequence::new(h.persons, h.frames, h.joints, h.fps, c.to_vec()))
            .collect::<Result<_>>()?
    };
    Ok((h, sequences))
}

pub fn write_dataset(path: &Path, sequences: &[MotionSequence]) -> Result<usize> {
    let bytes = encode_dataset(sequences)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<MotionSequence>)> {
    decode_dataset(&std::fs::read(path)?)
}

/// Rest offsets (mm, z up) of the template skeleton relative to the pelvis.
/// Skeletons with `J < 15` use the first `J` joints.
pub const SKELETON: [[f64; 3]; 15] = [
    [0.0, 0.0, 0.0],       // pelvis (root)
    [0.0, 0.0, 250.0],     // spine
    [0.0, 0.0, 500.0],     // neck
    [0.0, 0.0, 650.0],     // head
    [-180.0, 0.0, 480.0],  // left shoulder
    [-200.0, 0.0, 200.0],  // left elbow
    [-210.0, 0.0, -50.0],  // left wrist
    [180.0, 0.0, 480.0],   // right shoulder
    [200.0, 0.0, 200.0],   // right elbow
    [210.0, 0.0, -50.0],   // right wrist
    [-100.0, 0.0, -50.0],  // left hip
    [-100.0, 0.0, -480.0], // left knee
    [-100.0, 0.0, -900.0], // left ankle
    [100.0, 0.0, -50.0],   // right hip
    [100.0, 0.0, -480.0],  // right knee
];

pub const ROOT_HEIGHT_MM: f64 = 950.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionMix {
    pub walk: f64,
    pub turn: f64,
    pub stop_and_go: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        MotionMix {
            walk: 1.0,
            turn: 1.0,
            stop_and_go: 1.0,
        }
    }
}

/// Generator settings, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub sequences: usize,
    pub persons: usize,
    pub frames: usize,
    pub joints: usize,
    pub fps: f32,
    pub seed: u64,
    pub mix: MotionMix,
    /// Root speed range in mm/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Largest limb oscillation amplitude in mm.
    pub limb_amplitude: f64,
    /// Largest limb oscillation frequency in Hz.
    pub limb_frequency: f64,
    /// Distance between neighbouring persons' start positions in mm.
    pub spacing: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sequences: 32,
            persons: 3,
            frames: 75,
            joints: 15,
            fps: 25.0,
            seed: 0,
            mix: MotionMix::default(),
            speed_min: 300.0,
            speed_max: 1200.0,
            limb_amplitude: 80.0,
            limb_frequency: 1.5,
            spacing: 1500.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.persons == 0 || self.frames == 0 {
            return fail("persons and frames must be positive".into());
        }
        if self.joints == 0 || self.joints > SKELETON.len() {
            return fail(format!(
                "joints must lie in 1..={}, got {}",
                SKELETON.len(),
                self.joints
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        let m = &self.mix;
        if [m.walk, m.turn, m.stop_and_go].iter().any(|w| !(*w >= 0.0)) || m.walk + m.turn + m.stop_and_go <= 0.0 {
            return fail("mix weights must be nonnegative with a positive sum".into());
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return fail("need 0 <= speed_min <= speed_max".into());
        }
        for (name, v) in [
            ("limb_amplitude", self.limb_amplitude),
            ("limb_frequency", self.limb_frequency),
            ("spacing", self.spacing),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Root trajectory family of one generated person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RootMotion {
    Walk,
    /// Constant turn rate in rad/s.
    Turn {
        rate: f64,
    },
    /// Walks, then stands still from `stop_frame` on.
    StopAndGo {
        stop_frame: usize,
    },
}

/// Limb oscillation of one joint.
#[derive(Clone, Copy, Debug)]
struct Oscillation {
    amplitude: f64,
    omega: f64,
    phase: f64,
    dir: [f64; 3],
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Upper bound on the distance of joint `j` from its root under `spec`.
pub fn limb_envelope(spec: &SynthSpec, joint: usize) -> f64 {
    let r = SKELETON[joint];
    let rest = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if joint == 0 {
        0.0
    } else {
        rest + spec.limb_amplitude
    }
}

/// Generates sequences plus the root motion used for every person.
pub fn synth_generate_labeled(spec: &SynthSpec) -> Result<(Vec<MotionSequence>, Vec<Vec<RootMotion>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dt = 1.0 / spec.fps as f64;
    let mix = [spec.mix.walk, spec.mix.turn, spec.mix.stop_and_go];
    let mix_total: f64 = mix.iter().sum();
    let (t_len, j_len, m_len) = (spec.frames, spec.joints, spec.persons);

    let mut sequences = Vec::with_capacity(spec.sequences);
    let mut labels = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let mut positions = vec![0f32; m_len * t_len * j_len * 3];
        let mut seq_labels = Vec::with_capacity(m_len);
        for p in 0..m_len {
            let pick = rng.random_range(0.0..mix_total);
            let motion = if pick < mix[0] {
                RootMotion::Walk
            } else if pick < mix[0] + mix[1] {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                RootMotion::Turn {
                    rate: sign * rng.random_range(0.3..1.2),
                }
            } else {
                let lo = (t_len / 4).max(1);
                let hi = (3 * t_len / 4).max(lo + 1);
                RootMotion::StopAndGo {
                    stop_frame: rng.random_range(lo..hi),
                }
            };
            seq_labels.push(motion);

            let speed = if spec.speed_max > spec.speed_min {
                rng.random_range(spec.speed_min..spec.speed_max)
            } else {
                spec.speed_min
            };
            let mut heading = rng.random_range(-PI..PI);
            let jitter = spec.spacing / 4.0;
            let mut root = [
                p as f64 * spec.spacing + rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
                ROOT_HEIGHT_MM,
            ];
            let osc: Vec<Oscillation> = (0..j_len)
                .map(|j| Oscillation {
                    amplitude: if j == 0 {
                        0.0
                    } else {
                        rng.random_range(0.25..=1.0) * spec.limb_amplitude
                    },
                    omega: 2.0 * PI * rng.random_range(0.3..=1.0) * spec.limb_frequency,
                    phase: rng.random_range(0.0..2.0 * PI),
                    dir: unit_vector(&mut rng),
                })
                .collect();

            for t in 0..t_len {
                let moving = match motion {
                    RootMotion::StopAndGo { stop_frame } => t < stop_frame,
                    _ => true,
                };
                if t > 0 && moving {
                    root[0] += speed * dt * heading.cos();
                    root[1] += speed * dt * heading.sin();
                    if let RootMotion::Turn { rate } = motion {
                        heading += rate * dt;
                    }
                }
                let time = t as f64 * dt;
                for (j, o) in osc.iter().enumerate() {
                    let s = o.amplitude * (o.omega * time + o.phase).sin();
                    let base = ((p * t_len + t) * j_len + j) * 3;
                    for c in 0..3 {
                        positions[base + c] = (root[c] + SKELETON[j][c] + s * o.dir[c]) as f32;
                    }
                }
            }
        }
        sequences.push(MotionSequence::new(m_len, t_len, j_len, spec.fps, positions)?);
        labels.push(seq_labels);
    }
    Ok((sequences, labels))
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<MotionSequence>> {
    Ok(synth_generate_labeled(spec)?.0)
}

/// One batch: persons of every sequence flattened into the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Dataset indices of the sequences in this batch.
    pub indices: Vec<usize>,
    pub persons: usize,
    pub joints: usize,
    /// (batch·persons, D, t)
    pub history: Tensor,
    /// (batch·persons, D, T)
    pub target: Tensor,
}

/// First `total` frames of a sequence as `(persons, D, total)` values.
fn window(seq: &MotionSequence, total: usize) -> Vec<f64> {
    let d = seq.joints * 3;
    let mut out = vec![0.0; seq.persons * d * total];
    for p in 0..seq.persons {
        for t in 0..total {
            for k in 0..d {
                out[(p * d + k) * total + t] = seq.positions[(p * seq.frames + t) * d + k] as f64;
            }
        }
    }
    out
}

/// Deterministic batches over the first `total` frames of every sequence.
/// Without a seed the dataset order is kept.
pub fn batch_iter(
    sequences: &[MotionSequence],
    batch_size: usize,
    history: usize,
    total: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if history == 0 || history > total {
        return Err(Error::Config(format!("history {history} must lie in 1..={total}")));
    }
    let Some(first) = sequences.first() else {
        return Ok(Vec::new());
    };
    let (m, j) = (first.persons, first.joints);
    for (i, s) in sequences.iter().enumerate() {
        if s.frames < total {
            return Err(Error::Config(format!(
                "sequence {i} has {} frames, fewer than the {total} required",
                s.frames
            )));
        }
        if (s.persons, s.joints) != (m, j) {
            return Err(Error::Invalid(format!("sequence {i} differs in persons or joints")));
        }
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let d = j * 3;
    order
        .chunks(batch_size)
        .map(|idx| {
            let mut full = Vec::with_capacity(idx.len() * m * d * total);
            for &i in idx {
                full.extend(window(&sequences[i], total));
            }
            let target = Tensor::new(&[idx.len() * m, d, total], full)?;
            Ok(Batch {
                indices: idx.to_vec(),
                persons: m,
                joints: j,
                history: target.slice(2, 0, history)?,
                target,
            })
        })
        .collect()
}

/// `(B·M, D, frames)` → `(B, M, J, 3, frames)`.
pub fn unflatten(x: &Tensor, persons: usize, joints: usize) -> Result<Tensor> {
    let (bm, d, f) = (x.dim(0), x.dim(1), x.dim(2));
    if d != joints * 3 || bm % persons != 0 {
        return Err(Error::Invalid(format!(
            "cannot unflatten {:?} into {persons} persons of {joints} joints",
            x.shape()
        )));
    }
    x.reshape(&[bm / persons, persons, joints, 3, f])
}

/// `(B·M, D, frames)` → `(B·M, J, 3, frames)`, the layout of the losses.
pub fn to_joint_layout(x: &Tensor, joints: usize) -> Result<Tensor> {
    x.reshape(&[x.dim(0), joints, 3, x.dim(2)])
}

/// What each flattened person is shifted by before rescaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// The root joint at the last observed frame, for every joint.
    Root,
    /// Every joint at the last observed frame, so inputs are displacements.
    #[default]
    LastPose,
}

/// Anchored, rescaled coordinates: subtract the [`Anchor`] offset of each
/// flattened person, then multiply by `scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalizer {
    pub scale: f64,
    pub anchor: Anchor,
    /// Root joint index, also used by APE.
    pub root: usize,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            scale: 0.03,
            anchor: Anchor::LastPose,
            root: 0,
        }
    }
}

/// Per-person offsets removed by [`Normalizer::normalize`].
#[derive(Clone, Debug)]
pub struct Offsets(Tensor);

impl Normalizer {
    pub fn offsets(&self, history: &Tensor) -> Result<Offsets> {
        let (n, d, t) = (history.dim(0), history.dim(1), history.dim(2));
        if self.root * 3 + 3 > d || t == 0 {
            return Err(Error::Invalid(format!(
                "root joint {} outside pose width {d}",
                self.root
            )));
        }
        let data = history.data();
        let off = Tensor::from_fn(&[n, d, 1], |i| {
            let (p, k) = (i / d, i % d);
            let source = match self.anchor {
                Anchor::Root => self.root * 3 + k % 3,
                Anchor::LastPose => k,
            };
            data[(p * d + source) * t + t - 1]
        });
        Ok(Offsets(off))
    }

    pub fn normalize(&self, x: &Tensor, off: &Offsets) -> Result<Tensor> {
        x.sub(&off.0)?.scale(self.scale)
    }

    pub fn denormalize(&self, x: &Tensor, off: &Offsets) -> Result<Tensor> {
        x.scale(1.0 / self.scale)?.add(&off.0)
    }
}

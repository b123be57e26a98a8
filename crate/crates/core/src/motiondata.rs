//! Skeletons, motion sequences, forward kinematics, synthetic motion,
//! windowing and augmentation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndtensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::so3::{project_to_so3, rotmat_from_angleaxis, AngleAxis, RotationMatrix};

/// Floats per joint rotation (a row-major 3×3 matrix).
pub const ROT_DIM: usize = 9;

pub const DEFAULT_FPS: f32 = 60.0;
pub const DEFAULT_WINDOW: usize = 120;

/// Tolerance for accepting stored rotations as valid.
const ROTATION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("frame {frame}, joint {joint}: not a valid rotation")]
    InvalidRotation { frame: usize, joint: usize },
    #[error("malformed motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MotionError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<i32>,
    offsets: Vec<[f64; 3]>,
    mirror: Vec<usize>,
}

impl Skeleton {
    /// Validates that parents are topologically ordered and that the mirror
    /// map is an involution.
    pub fn new(
        names: Vec<String>,
        parents: Vec<i32>,
        offsets: Vec<[f64; 3]>,
        mirror: Vec<usize>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(MotionError::Skeleton("no joints".into()));
        }
        if parents.len() != n || offsets.len() != n || mirror.len() != n {
            return Err(MotionError::Skeleton(format!(
                "{n} names but {} parents, {} offsets, {} mirror entries",
                parents.len(),
                offsets.len(),
                mirror.len()
            )));
        }
        for (i, &p) in parents.iter().enumerate() {
            if p < -1 || p >= i as i32 {
                return Err(MotionError::Skeleton(format!(
                    "joint {i} has parent {p}; parents must precede their children"
                )));
            }
        }
        for (i, &m) in mirror.iter().enumerate() {
            if m >= n || mirror[m] != i {
                return Err(MotionError::Skeleton(format!("mirror map is not an involution at joint {i}")));
            }
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MotionError::Skeleton("non-finite bone offset".into()));
        }
        Ok(Self {
            names,
            parents,
            offsets,
            mirror,
        })
    }

    /// Nine joints: root, spine, head, left/right collar and arm, left/right leg.
    /// Offsets in millimeters.
    pub fn desk() -> Self {
        let joints: [(&str, i32, [f64; 3], usize); 9] = [
            ("root", -1, [0.0, 0.0, 0.0], 0),
            ("spine", 0, [0.0, 250.0, 0.0], 1),
            ("head", 1, [0.0, 250.0, 0.0], 2),
            ("l_collar", 1, [150.0, 200.0, 0.0], 5),
            ("l_arm", 3, [250.0, 0.0, 0.0], 6),
            ("r_collar", 1, [-150.0, 200.0, 0.0], 3),
            ("r_arm", 5, [-250.0, 0.0, 0.0], 4),
            ("l_leg", 0, [90.0, -450.0, 0.0], 8),
            ("r_leg", 0, [-90.0, -450.0, 0.0], 7),
        ];
        Self::new(
            joints.iter().map(|j| j.0.to_string()).collect(),
            joints.iter().map(|j| j.1).collect(),
            joints.iter().map(|j| j.2).collect(),
            joints.iter().map(|j| j.3).collect(),
        )
        .expect("built-in skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[i32] {
        &self.parents
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    pub fn mirror(&self) -> &[usize] {
        &self.mirror
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        usize::try_from(self.parents[j]).ok()
    }
}

/// `T` frames of `N` local joint rotations, stored as `f32` row-major matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    skeleton: Arc<Skeleton>,
    fps: f32,
    frames: usize,
    rotations: Vec<f32>,
}

impl MotionSequence {
    /// Checks the buffer length and that every rotation is valid within 1e-5.
    pub fn new(skeleton: Arc<Skeleton>, fps: f32, rotations: Vec<f32>) -> Result<Self> {
        let seq = Self::new_unchecked(skeleton, fps, rotations)?;
        for t in 0..seq.frames {
            for j in 0..seq.joint_count() {
                if !seq.rotation(t, j).is_valid(ROTATION_TOLERANCE) {
                    return Err(MotionError::InvalidRotation { frame: t, joint: j });
                }
            }
        }
        Ok(seq)
    }

    /// Checks only the buffer length; for data known to be valid.
    pub(crate) fn new_unchecked(skeleton: Arc<Skeleton>, fps: f32, rotations: Vec<f32>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(MotionError::InvalidParameter(format!("frame rate must be positive, got {fps}")));
        }
        let per_frame = skeleton.joint_count() * ROT_DIM;
        if rotations.is_empty() || rotations.len() % per_frame != 0 {
            return Err(MotionError::Shape(format!(
                "{} values is not a positive multiple of {per_frame}",
                rotations.len()
            )));
        }
        Ok(Self {
            frames: rotations.len() / per_frame,
            skeleton,
            fps,
            rotations,
        })
    }

    /// `frames` copies of the identity pose.
    pub fn identity(skeleton: Arc<Skeleton>, fps: f32, frames: usize) -> Result<Self> {
        let n = skeleton.joint_count();
        let eye = RotationMatrix::IDENTITY.to_f32();
        let data = (0..frames * n).flat_map(|_| eye).collect();
        Self::new_unchecked(skeleton, fps, data)
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn data(&self) -> &[f32] {
        &self.rotations
    }

    pub fn into_data(self) -> Vec<f32> {
        self.rotations
    }

    /// All `N·9` values of frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let w = self.joint_count() * ROT_DIM;
        &self.rotations[t * w..(t + 1) * w]
    }

    pub fn rotation(&self, t: usize, j: usize) -> RotationMatrix {
        let o = (t * self.joint_count() + j) * ROT_DIM;
        RotationMatrix::from_f32(&self.rotations[o..o + ROT_DIM])
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(MotionError::InvalidParameter(format!(
                "frames {start}..{} out of range for length {}",
                start + len,
                self.frames
            )));
        }
        let w = self.joint_count() * ROT_DIM;
        Self::new_unchecked(
            self.skeleton.clone(),
            self.fps,
            self.rotations[start * w..(start + len) * w].to_vec(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_stm1(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        read_stm1(std::io::BufReader::new(file))
    }
}

/// Global joint positions (millimeters) for one frame of `N·9` local rotations.
pub fn fk_frame(skeleton: &Skeleton, frame: &[f32]) -> Vec<[f64; 3]> {
    let n = skeleton.joint_count();
    let mut global = Vec::with_capacity(n);
    let mut pos: Vec<[f64; 3]> = Vec::with_capacity(n);
    for j in 0..n {
        let local = RotationMatrix::from_f32(&frame[j * ROT_DIM..(j + 1) * ROT_DIM]);
        match skeleton.parent(j) {
            None => {
                global.push(local);
                pos.push([0.0; 3]);
            }
            Some(p) => {
                let gp: RotationMatrix = global[p];
                let step = gp.apply(skeleton.offsets[j]);
                let pp = pos[p];
                pos.push([pp[0] + step[0], pp[1] + step[1], pp[2] + step[2]]);
                global.push(gp.mul(&local));
            }
        }
    }
    pos
}

/// Positions of every joint at every frame, `T × N`.
pub fn forward_kinematics(seq: &MotionSequence) -> Vec<Vec<[f64; 3]>> {
    (0..seq.len()).map(|t| fk_frame(&seq.skeleton, seq.frame(t))).collect()
}

/// Writes `frame,joint,x,y,z` rows of forward-kinematics positions.
pub fn write_fk_csv<W: Write>(mut w: W, seq: &MotionSequence) -> Result<()> {
    writeln!(w, "frame,joint,x,y,z")?;
    for (t, frame) in forward_kinematics(seq).iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            writeln!(w, "{t},{j},{},{},{}", p[0], p[1], p[2])?;
        }
    }
    Ok(())
}

/// Sinusoidal rotation of one joint about a fixed axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointMotion {
    pub axis: [f64; 3],
    /// Radians.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    pub phase: f64,
}

impl JointMotion {
    pub const STILL: Self = Self {
        axis: [1.0, 0.0, 0.0],
        amplitude: 0.0,
        frequency: 0.0,
        phase: 0.0,
    };
}

/// Joint `n` at frame `t` is rotated about its axis by
/// `amplitude · sin(2π · frequency · t / fps + phase)`, then perturbed by a
/// tangent-space Gaussian of standard deviation `noise_std` per component and
/// projected back onto SO(3).
pub fn synth_motion<R: Rng + ?Sized>(
    skeleton: Arc<Skeleton>,
    frames: usize,
    fps: f32,
    spec: &[JointMotion],
    noise_std: f64,
    rng: &mut R,
) -> Result<MotionSequence> {
    let n = skeleton.joint_count();
    if frames == 0 {
        return Err(MotionError::InvalidParameter("duration must be at least one frame".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(MotionError::InvalidParameter(format!("frame rate must be positive, got {fps}")));
    }
    if spec.len() != n {
        return Err(MotionError::Shape(format!("{} joint motions for {n} joints", spec.len())));
    }
    let nyquist = fps as f64 / 2.0;
    for (j, m) in spec.iter().enumerate() {
        let axis_norm = m.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(m.amplitude.abs() < PI) {
            return Err(MotionError::InvalidParameter(format!("joint {j}: amplitude must be below π")));
        }
        if !(m.frequency >= 0.0 && m.frequency < nyquist) {
            return Err(MotionError::InvalidParameter(format!(
                "joint {j}: frequency {} Hz is at or above the Nyquist limit {nyquist} Hz",
                m.frequency
            )));
        }
        if m.amplitude != 0.0 && !(axis_norm > 1e-12) {
            return Err(MotionError::InvalidParameter(format!("joint {j}: zero rotation axis")));
        }
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(MotionError::InvalidParameter(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| MotionError::InvalidParameter(e.to_string()))?;
    let mut data = Vec::with_capacity(frames * n * ROT_DIM);
    for t in 0..frames {
        for m in spec {
            let angle = m.amplitude * (2.0 * PI * m.frequency * t as f64 / fps as f64 + m.phase).sin();
            let axis_norm = m.axis.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            let mut r = rotmat_from_angleaxis(&AngleAxis(m.axis.map(|a| a / axis_norm * angle)));
            if noise_std > 0.0 {
                let eps: [f64; 3] = std::array::from_fn(|_| noise.sample(rng));
                r = r.mul(&rotmat_from_angleaxis(&AngleAxis(eps)));
            }
            let r = project_to_so3(&r.0).expect("rotation products are full rank");
            data.extend(r.to_f32());
        }
    }
    MotionSequence::new_unchecked(skeleton, fps, data)
}

/// Per-joint motion spec of the periodic synthetic task: limbs swing at
/// 1 Hz, trunk and head sway at 0.5 Hz, and left/right partners are half a
/// cycle apart. `phase` shifts the whole clip and `amplitude_scale` scales
/// every amplitude.
pub fn periodic_spec(skeleton: &Skeleton, phase: f64, amplitude_scale: f64) -> Vec<JointMotion> {
    const LIMB_HZ: f64 = 1.0;
    const TRUNK_HZ: f64 = 0.5;
    (0..skeleton.joint_count())
        .map(|j| {
            let (axis, amplitude, frequency) = match skeleton.names[j].as_str() {
                "root" => ([0.0, 1.0, 0.0], 0.15, TRUNK_HZ),
                "spine" => ([1.0, 0.0, 0.0], 0.2, TRUNK_HZ),
                "head" => ([0.0, 1.0, 0.0], 0.3, TRUNK_HZ),
                name if name.ends_with("collar") => ([0.0, 0.0, 1.0], 0.2, LIMB_HZ),
                name if name.ends_with("arm") => ([1.0, 0.0, 0.0], 0.7, LIMB_HZ),
                name if name.ends_with("leg") => ([1.0, 0.0, 0.0], 0.5, LIMB_HZ),
                _ => ([1.0, 0.0, 0.0], 0.3, LIMB_HZ),
            };
            let mirrored = skeleton.mirror[j] < j;
            JointMotion {
                axis,
                amplitude: amplitude * amplitude_scale,
                frequency,
                phase: phase + if mirrored { PI } else { 0.0 },
            }
        })
        .collect()
}

/// Tangent-space noise used for the synthetic corpus (radians).
pub const SYNTH_NOISE_STD: f64 = 1e-3;

/// `clips` independent clips of the periodic task, each with a random phase
/// and an amplitude scale drawn from `[0.8, 1.2]`. Deterministic in `seed`.
pub fn synthetic_corpus(
    skeleton: Arc<Skeleton>,
    clips: usize,
    frames: usize,
    fps: f32,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let scale = Uniform::new_inclusive(0.8, 1.2).expect("valid range");
    (0..clips)
        .map(|_| {
            let spec = periodic_spec(&skeleton, phase.sample(&mut rng), scale.sample(&mut rng));
            synth_motion(skeleton.clone(), frames, fps, &spec, SYNTH_NOISE_STD, &mut rng)
        })
        .collect()
}

/// Overlapping windows of `length` frames every `stride` frames. Empty when
/// the sequence is shorter than `length`.
pub fn window(seq: &MotionSequence, length: usize, stride: usize) -> Result<Vec<MotionSequence>> {
    if length == 0 || stride == 0 {
        return Err(MotionError::InvalidParameter("window length and stride must be positive".into()));
    }
    if length > seq.len() {
        return Ok(Vec::new());
    }
    let count = (seq.len() - length) / stride + 1;
    (0..count).map(|i| seq.slice(i * stride, length)).collect()
}

pub fn augment_reverse(seq: &MotionSequence) -> MotionSequence {
    let w = seq.joint_count() * ROT_DIM;
    let data = seq.rotations.chunks(w).rev().flatten().copied().collect();
    MotionSequence {
        rotations: data,
        ..seq.clone()
    }
}

/// Swaps every joint with its mirror partner and reflects through the
/// sagittal plane `x = 0`: `R' = S R S` with `S = diag(-1, 1, 1)`.
pub fn augment_mirror(seq: &MotionSequence) -> MotionSequence {
    let n = seq.joint_count();
    let mirror = &seq.skeleton.mirror;
    // S R S negates exactly the entries where one of row/col is 0 and the other is not.
    const SIGN: [f32; 9] = [1.0, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0];
    let mut data = vec![0.0f32; seq.rotations.len()];
    for t in 0..seq.len() {
        for j in 0..n {
            let src = (t * n + mirror[j]) * ROT_DIM;
            let dst = (t * n + j) * ROT_DIM;
            for k in 0..ROT_DIM {
                data[dst + k] = seq.rotations[src + k] * SIGN[k];
            }
        }
    }
    MotionSequence {
        rotations: data,
        ..seq.clone()
    }
}

/// Model inputs and next-frame targets, both `B × (T-1) × N × 9`.
#[derive(Clone, Debug)]
pub struct WindowedBatch {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

/// Splits equal-length windows into frames `0..T-1` (inputs) and `1..T` (targets).
pub fn shift_targets(windows: &[MotionSequence]) -> Result<WindowedBatch> {
    let first = windows
        .first()
        .ok_or_else(|| MotionError::InvalidParameter("no windows to batch".into()))?;
    let (len, n) = (first.len(), first.joint_count());
    if len < 2 {
        return Err(MotionError::InvalidParameter(format!("window length {len} is below 2")));
    }
    let w = n * ROT_DIM;
    let mut inputs = Vec::with_capacity(windows.len() * (len - 1) * w);
    let mut targets = Vec::with_capacity(inputs.capacity());
    for seq in windows {
        if seq.len() != len || seq.joint_count() != n {
            return Err(MotionError::Shape(format!(
                "window of {}×{} in a batch of {len}×{n}",
                seq.len(),
                seq.joint_count()
            )));
        }
        inputs.extend_from_slice(&seq.rotations[..(len - 1) * w]);
        targets.extend_from_slice(&seq.rotations[w..]);
    }
    let shape = vec![windows.len(), len - 1, n, ROT_DIM];
    let to_tensor = |v| Tensor::new(shape.clone(), v).map_err(|e| MotionError::Shape(e.to_string()));
    Ok(WindowedBatch {
        inputs: to_tensor(inputs)?,
        targets: to_tensor(targets)?,
    })
}

const STM_MAGIC: &[u8; 4] = b"STM1";

/// Serializes in the little-endian `STM1` layout: magic, fps, `T`, `N`, one
/// skeleton record per joint (name, parent, offset, mirror) and the rotations.
pub fn write_stm1<W: Write>(mut w: W, seq: &MotionSequence) -> Result<()> {
    let sk = &seq.skeleton;
    w.write_all(STM_MAGIC)?;
    w.write_all(&seq.fps.to_le_bytes())?;
    w.write_all(&(seq.frames as u32).to_le_bytes())?;
    w.write_all(&(sk.joint_count() as u32).to_le_bytes())?;
    for j in 0..sk.joint_count() {
        let name = sk.names[j].as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&sk.parents[j].to_le_bytes())?;
        for c in sk.offsets[j] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.write_all(&(sk.mirror[j] as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(seq.rotations.len() * 4);
    for v in &seq.rotations {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)
        .map_err(|e| MotionError::Format(format!("truncated header: {e}")))?;
    Ok(b)
}

pub fn read_stm1<R: Read>(mut r: R) -> Result<MotionSequence> {
    if &read_array::<4, _>(&mut r)? != STM_MAGIC {
        return Err(MotionError::Format("bad magic".into()));
    }
    let fps = f32::from_le_bytes(read_array(&mut r)?);
    let frames = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if n == 0 || frames == 0 {
        return Err(MotionError::Format(format!("empty motion ({frames} frames, {n} joints)")));
    }
    let (mut names, mut parents, mut offsets, mut mirror) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if len > 4096 {
            return Err(MotionError::Format(format!("joint name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| MotionError::Format(format!("truncated joint name: {e}")))?;
        names.push(String::from_utf8(name).map_err(|e| MotionError::Format(e.to_string()))?);
        parents.push(i32::from_le_bytes(read_array(&mut r)?));
        let mut off = [0.0; 3];
        for o in &mut off {
            *o = f32::from_le_bytes(read_array(&mut r)?) as f64;
        }
        offsets.push(off);
        mirror.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
    }
    let skeleton = Arc::new(Skeleton::new(names, parents, offsets, mirror)?);
    let count = frames * n * ROT_DIM;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * 4 {
        return Err(MotionError::Format(format!(
            "expected {} rotation bytes, found {}",
            count * 4,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MotionSequence::new(skeleton, fps, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::geodesic_angle;

    fn chain() -> Arc<Skeleton> {
        Arc::new(
            Skeleton::new(
                vec!["a".into(), "b".into()],
                vec![-1, 0],
                vec![[0.0; 3], [0.0, 100.0, 0.0]],
                vec![0, 1],
            )
            .unwrap(),
        )
    }

    #[test]
    fn skeleton_validation() {
        let bad_parent = Skeleton::new(vec!["a".into()], vec![0], vec![[0.0; 3]], vec![0]);
        assert!(bad_parent.is_err());
        let bad_mirror = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![-1, 0],
            vec![[0.0; 3]; 2],
            vec![1, 1],
        );
        assert!(bad_mirror.is_err());
        assert_eq!(Skeleton::desk().joint_count(), 9);
    }

    #[test]
    fn identity_fk_accumulates_offsets() {
        let sk = Arc::new(Skeleton::desk());
        let seq = MotionSequence::identity(sk.clone(), 60.0, 1).unwrap();
        let pos = &forward_kinematics(&seq)[0];
        assert_eq!(pos[0], [0.0; 3]);
        assert_eq!(pos[2], [0.0, 500.0, 0.0]);
        assert_eq!(pos[4], [400.0, 450.0, 0.0]);
        assert_eq!(pos[8], [-90.0, -450.0, 0.0]);
    }

    #[test]
    fn fk_two_joint_chain() {
        let mut data = RotationMatrix::rot_z(PI / 2.0).to_f32().to_vec();
        data.extend(RotationMatrix::IDENTITY.to_f32());
        let seq = MotionSequence::new(chain(), 60.0, data).unwrap();
        let child = forward_kinematics(&seq)[0][1];
        assert!((child[0] + 100.0).abs() < 1e-4 && child[1].abs() < 1e-4 && child[2] == 0.0);
    }

    #[test]
    fn synth_zero_amplitude_is_identity() {
        let sk = Arc::new(Skeleton::desk());
        let spec = vec![JointMotion::STILL; 9];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = synth_motion(sk.clone(), 5, 60.0, &spec, 0.0, &mut rng).unwrap();
        assert_eq!(seq, MotionSequence::identity(sk, 60.0, 5).unwrap());
    }

    #[test]
    fn synth_single_joint_closed_form() {
        let sk = Arc::new(Skeleton::new(vec!["j".into()], vec![-1], vec![[0.0; 3]], vec![0]).unwrap());
        let spec = [JointMotion {
            axis: [0.0, 0.0, 1.0],
            amplitude: 0.5,
            frequency: 1.0,
            phase: 0.0,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = synth_motion(sk, 120, 60.0, &spec, 0.0, &mut rng).unwrap();
        for t in 0..120 {
            let expect = (0.5 * (2.0 * PI * t as f64 / 60.0).sin()).abs();
            let got = geodesic_angle(&seq.rotation(t, 0), &RotationMatrix::IDENTITY);
            assert!((got - expect).abs() < 1e-5, "t={t}: {got} vs {expect}");
        }
    }

    #[test]
    fn synth_rejects_aliasing() {
        let sk = Arc::new(Skeleton::desk());
        let mut spec = vec![JointMotion::STILL; 9];
        spec[4].frequency = 30.0;
        spec[4].amplitude = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            synth_motion(sk, 10, 60.0, &spec, 0.0, &mut rng),
            Err(MotionError::InvalidParameter(_))
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let sk = Arc::new(Skeleton::desk());
        let a = synthetic_corpus(sk.clone(), 2, 100, 60.0, 11).unwrap();
        let b = synthetic_corpus(sk, 2, 100, 60.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_counts() {
        let sk = Arc::new(Skeleton::desk());
        let seq = MotionSequence::identity(sk, 60.0, 10).unwrap();
        let ws = window(&seq, 4, 3).unwrap();
        assert_eq!(ws.len(), 3);
        assert!(window(&seq, 11, 1).unwrap().is_empty());
        assert_eq!(window(&seq, 10, 10).unwrap()[0], seq);
    }

    #[test]
    fn shift_targets_length_two() {
        let sk = Arc::new(Skeleton::desk());
        let seq = MotionSequence::identity(sk, 60.0, 1).unwrap();
        assert!(shift_targets(&[seq.clone()]).is_err());
        let two = MotionSequence::identity(seq.skeleton().clone(), 60.0, 2).unwrap();
        let b = shift_targets(&[two]).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 1, 9, 9]);
        assert_eq!(b.inputs, b.targets);
    }

    #[test]
    fn stm1_rejects_garbage() {
        assert!(read_stm1(&b"STM0"[..]).is_err());
        let sk = Arc::new(Skeleton::desk());
        let seq = MotionSequence::identity(sk, 60.0, 2).unwrap();
        let mut buf = Vec::new();
        write_stm1(&mut buf, &seq).unwrap();
        buf.pop();
        assert!(matches!(read_stm1(&buf[..]), Err(MotionError::Format(_))));
    }
}

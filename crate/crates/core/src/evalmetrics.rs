//! Angle, position and frequency-domain evaluation metrics and the
//! zero-velocity baseline.
//!
//! Predictions and targets are `S × K × N × 9` tensors: `S` sequences of `K`
//! predicted frames. A horizon of `h` frames averages over frames `1..=h`.

use std::io::Write;

use ndtensor::Tensor;
use rand::Rng;
use thiserror::Error;

use crate::motiondata::{fk_frame, MotionSequence, Skeleton, ROT_DIM};
use crate::so3::{euler_from_rotmat, geodesic_angle, wrap_angle, RotationMatrix};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Evaluation horizons in milliseconds.
pub const DEFAULT_HORIZONS_MS: [u32; 4] = [100, 200, 300, 400];

/// Additive smoothing applied to spectra before the divergence.
pub const KLD_SMOOTHING: f64 = 1e-10;

/// Frames covered by `ms` milliseconds at `fps`, rounded to the nearest frame.
pub fn horizon_frames(ms: u32, fps: f32) -> usize {
    (ms as f64 * fps as f64 / 1000.0).round() as usize
}

/// PCK thresholds: 0 to 300 mm in 10 mm steps.
pub fn default_pck_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 10.0).collect()
}

/// Repeats the last seed frame: `B × T × N × 9` seeds give `B × steps × N × 9`.
pub fn zero_velocity(seed: &Tensor<f32>, steps: usize) -> Result<Tensor<f32>> {
    let s = seed.shape();
    if s.len() != 4 || steps == 0 {
        return Err(MetricError::Shape(format!("seed {s:?} with {steps} steps")));
    }
    let (b, t, frame) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * steps * frame);
    for bi in 0..b {
        let last = &seed.data()[(bi * t + t - 1) * frame..(bi * t + t) * frame];
        for _ in 0..steps {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(vec![b, steps, s[2], s[3]], out).map_err(|e| MetricError::Shape(e.to_string()))
}

struct Layout {
    seqs: usize,
    frames: usize,
    joints: usize,
}

fn layout(pred: &Tensor<f32>, target: &Tensor<f32>, horizons: &[usize]) -> Result<Layout> {
    let s = pred.shape();
    if s != target.shape() || s.len() != 4 || s[3] != ROT_DIM {
        return Err(MetricError::Shape(format!(
            "prediction {s:?} and target {:?} must both be [S, K, N, 9]",
            target.shape()
        )));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > s[1]) {
        return Err(MetricError::InvalidParameter(format!("horizon of {h} frames outside 1..={}", s[1])));
    }
    Ok(Layout {
        seqs: s[0],
        frames: s[1],
        joints: s[2],
    })
}

fn rot(data: &[f32], idx: usize) -> RotationMatrix {
    RotationMatrix::from_f32(&data[idx * ROT_DIM..(idx + 1) * ROT_DIM])
}

/// Averages a per-(sequence, frame) error over frames `1..=h` and sequences.
fn per_horizon(l: &Layout, horizons: &[usize], per_frame: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let table: Vec<f64> = (0..l.seqs)
        .flat_map(|s| (0..l.frames).map(move |f| (s, f)))
        .map(|(s, f)| per_frame(s, f))
        .collect();
    horizons
        .iter()
        .map(|&h| {
            let total: f64 = (0..l.seqs).map(|s| table[s * l.frames..s * l.frames + h].iter().sum::<f64>()).sum();
            total / (l.seqs * h) as f64
        })
        .collect()
}

/// Per frame, the Euclidean norm of all per-joint Euler-angle differences
/// (each wrapped to `(-π, π]`).
pub fn metric_euler(pred: &Tensor<f32>, target: &Tensor<f32>, horizons: &[usize]) -> Result<Vec<f64>> {
    let l = layout(pred, target, horizons)?;
    let (p, t) = (pred.data(), target.data());
    Ok(per_horizon(&l, horizons, |s, f| {
        let mut sq = 0.0;
        for j in 0..l.joints {
            let idx = (s * l.frames + f) * l.joints + j;
            let ep = euler_from_rotmat(&rot(p, idx)).0;
            let et = euler_from_rotmat(&rot(t, idx)).0;
            for k in 0..3 {
                let d = wrap_angle(ep[k] - et[k]);
                sq += d * d;
            }
        }
        sq.sqrt()
    }))
}

/// Mean geodesic angle over joints and frames.
pub fn metric_geodesic(pred: &Tensor<f32>, target: &Tensor<f32>, horizons: &[usize]) -> Result<Vec<f64>> {
    let l = layout(pred, target, horizons)?;
    let (p, t) = (pred.data(), target.data());
    Ok(per_horizon(&l, horizons, |s, f| {
        let base = (s * l.frames + f) * l.joints;
        (0..l.joints)
            .map(|j| geodesic_angle(&rot(p, base + j), &rot(t, base + j)))
            .sum::<f64>()
            / l.joints as f64
    }))
}

/// Per-(sequence, frame, joint) position errors in millimeters.
fn position_errors(pred: &Tensor<f32>, target: &Tensor<f32>, skeleton: &Skeleton, l: &Layout) -> Result<Vec<f64>> {
    if skeleton.joint_count() != l.joints {
        return Err(MetricError::Shape(format!(
            "skeleton has {} joints, data has {}",
            skeleton.joint_count(),
            l.joints
        )));
    }
    let w = l.joints * ROT_DIM;
    let mut out = Vec::with_capacity(l.seqs * l.frames * l.joints);
    for (fp, ft) in pred.data().chunks(w).zip(target.data().chunks(w)) {
        let (pp, pt) = (fk_frame(skeleton, fp), fk_frame(skeleton, ft));
        for (a, b) in pp.iter().zip(&pt) {
            out.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
        }
    }
    Ok(out)
}

/// Mean forward-kinematics joint distance in millimeters.
pub fn metric_positional(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    skeleton: &Skeleton,
    horizons: &[usize],
) -> Result<Vec<f64>> {
    let l = layout(pred, target, horizons)?;
    let errs = position_errors(pred, target, skeleton, &l)?;
    Ok(per_horizon(&l, horizons, |s, f| {
        let o = (s * l.frames + f) * l.joints;
        errs[o..o + l.joints].iter().sum::<f64>() / l.joints as f64
    }))
}

/// Percentage of errors at or below `threshold`.
fn pck(errors: &[f64], threshold: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

/// Trapezoidal mean of PCK over a strictly increasing threshold grid.
pub fn pck_auc_of_errors(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(MetricError::InvalidParameter("no PCK thresholds".into()));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(MetricError::InvalidParameter("PCK thresholds must be strictly increasing".into()));
    }
    if errors.is_empty() {
        return Err(MetricError::InvalidParameter("no errors to score".into()));
    }
    let curve: Vec<f64> = thresholds.iter().map(|&t| pck(errors, t)).collect();
    if curve.len() == 1 {
        return Ok(curve[0]);
    }
    let span = thresholds[thresholds.len() - 1] - thresholds[0];
    let area: f64 = thresholds
        .windows(2)
        .zip(curve.windows(2))
        .map(|(t, c)| (t[1] - t[0]) * (c[0] + c[1]) / 2.0)
        .sum();
    Ok(area / span)
}

/// Area under the PCK curve (percent) over joints and frames up to each horizon.
pub fn metric_pck_auc(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    skeleton: &Skeleton,
    horizons: &[usize],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let l = layout(pred, target, horizons)?;
    let errs = position_errors(pred, target, skeleton, &l)?;
    horizons
        .iter()
        .map(|&h| {
            let subset: Vec<f64> = (0..l.seqs)
                .flat_map(|s| {
                    let o = s * l.frames * l.joints;
                    errs[o..o + h * l.joints].iter().copied()
                })
                .collect();
            pck_auc_of_errors(&subset, thresholds)
        })
        .collect()
}

/// All four metrics at one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub horizon_ms: u32,
    pub euler: f64,
    pub geodesic: f64,
    pub positional_mm: f64,
    pub pck_auc: f64,
}

/// Evaluates every metric at each millisecond horizon.
pub fn evaluate(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    skeleton: &Skeleton,
    horizons_ms: &[u32],
    fps: f32,
) -> Result<Vec<MetricRow>> {
    let frames: Vec<usize> = horizons_ms.iter().map(|&ms| horizon_frames(ms, fps)).collect();
    let euler = metric_euler(pred, target, &frames)?;
    let geodesic = metric_geodesic(pred, target, &frames)?;
    let positional = metric_positional(pred, target, skeleton, &frames)?;
    let pck = metric_pck_auc(pred, target, skeleton, &frames, &default_pck_thresholds())?;
    Ok((0..frames.len())
        .map(|i| MetricRow {
            horizon_ms: horizons_ms[i],
            euler: euler[i],
            geodesic: geodesic[i],
            positional_mm: positional[i],
            pck_auc: pck[i],
        })
        .collect())
}

/// Writes `horizon_ms,euler,geodesic,positional_mm,pck_auc` rows.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "horizon_ms,euler,geodesic,positional_mm,pck_auc")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.horizon_ms, r.euler, r.geodesic, r.positional_mm, r.pck_auc)?;
    }
    Ok(())
}

/// In-place iterative radix-2 FFT. The length must be a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n, "FFT length must be a power of two");
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = -2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (step * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `|FFT(x)|²` over all bins, zero-padding `x` to the next power of two.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len().max(1).next_power_of_two();
    let mut re = x.to_vec();
    re.resize(n, 0.0);
    let mut im = vec![0.0; n];
    fft_radix2(&mut re, &mut im);
    re.iter().zip(&im).map(|(a, b)| a * a + b * b).collect()
}

/// One normalized power spectrum per position coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PsDistribution {
    pub features: usize,
    pub bins: usize,
    pub window_len: usize,
    /// Row-major `features × bins`; each row sums to one.
    pub probs: Vec<f64>,
}

impl PsDistribution {
    pub fn feature(&self, f: usize) -> &[f64] {
        &self.probs[f * self.bins..(f + 1) * self.bins]
    }
}

/// Averages the power spectra of every joint coordinate over equal-length
/// windows and normalizes each feature to sum one. A feature with no power
/// at all is assigned to the DC bin.
pub fn ps_of_windows(windows: &[MotionSequence], skeleton: &Skeleton) -> Result<PsDistribution> {
    let first = windows
        .first()
        .ok_or_else(|| MetricError::InvalidParameter("no windows".into()))?;
    let len = first.len();
    let features = 3 * skeleton.joint_count();
    let bins = len.next_power_of_two();
    let mut power = vec![0.0; features * bins];
    for w in windows {
        if w.len() != len {
            return Err(MetricError::Shape(format!("window of {} frames among {len}-frame windows", w.len())));
        }
        if w.joint_count() != skeleton.joint_count() {
            return Err(MetricError::Shape("window skeleton does not match".into()));
        }
        let positions: Vec<Vec<[f64; 3]>> = (0..len).map(|t| fk_frame(skeleton, w.frame(t))).collect();
        for f in 0..features {
            let series: Vec<f64> = positions.iter().map(|p| p[f / 3][f % 3]).collect();
            for (acc, p) in power[f * bins..(f + 1) * bins].iter_mut().zip(power_spectrum(&series)) {
                *acc += p;
            }
        }
    }
    for row in power.chunks_mut(bins) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else {
            row.iter_mut().for_each(|p| *p = 0.0);
            row[0] = 1.0;
        }
    }
    Ok(PsDistribution {
        features,
        bins,
        window_len: len,
        probs: power,
    })
}

/// Mean over features of the Shannon entropy (nats) of each spectrum.
pub fn ps_entropy(dist: &PsDistribution) -> f64 {
    let total: f64 = dist
        .probs
        .chunks(dist.bins)
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    total / dist.features as f64
}

fn smoothed(row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().map(|p| p + KLD_SMOOTHING).sum();
    row.iter().map(|p| (p + KLD_SMOOTHING) / total).collect()
}

/// Symmetric divergence `(KL(G‖P) + KL(P‖G)) / 2` per feature after
/// smoothing both spectra, averaged over features.
pub fn ps_kld(reference: &PsDistribution, prediction: &PsDistribution) -> Result<f64> {
    if reference.features != prediction.features || reference.bins != prediction.bins {
        return Err(MetricError::Shape(format!(
            "{}×{} spectra against {}×{}",
            reference.features, reference.bins, prediction.features, prediction.bins
        )));
    }
    let mut total = 0.0;
    for f in 0..reference.features {
        let g = smoothed(reference.feature(f));
        let p = smoothed(prediction.feature(f));
        let kl_gp: f64 = g.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        let kl_pg: f64 = p.iter().zip(&g).map(|(a, b)| a * (a / b).ln()).sum();
        total += 0.5 * (kl_gp + kl_pg);
    }
    Ok(total / reference.features as f64)
}

/// Spectrum of `count` windows of `window_len` frames drawn uniformly from `test`.
pub fn reference_distribution<R: Rng + ?Sized>(
    test: &[MotionSequence],
    window_len: usize,
    count: usize,
    rng: &mut R,
) -> Result<PsDistribution> {
    let eligible: Vec<&MotionSequence> = test.iter().filter(|s| s.len() >= window_len).collect();
    let first = eligible
        .first()
        .ok_or_else(|| MetricError::InvalidParameter(format!("no test sequence has {window_len} frames")))?;
    if count == 0 || window_len == 0 {
        return Err(MetricError::InvalidParameter("reference needs a positive count and length".into()));
    }
    let starts: Vec<usize> = eligible.iter().map(|s| s.len() - window_len + 1).collect();
    let total: usize = starts.iter().sum();
    let windows = (0..count)
        .map(|_| {
            let mut u = rng.random_range(0..total);
            let mut i = 0;
            while u >= starts[i] {
                u -= starts[i];
                i += 1;
            }
            eligible[i].slice(u, window_len)
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| MetricError::InvalidParameter(e.to_string()))?;
    ps_of_windows(&windows, first.skeleton())
}

/// PS divergence and entropy of one second of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct LongTermPoint {
    pub second: usize,
    pub ps_kld: f64,
    pub ps_entropy: f64,
}

/// Cuts `rollout` into non-overlapping windows of `reference.window_len`
/// frames and compares each with `reference`.
pub fn longterm_curves(rollout: &MotionSequence, reference: &PsDistribution) -> Result<Vec<LongTermPoint>> {
    let w = reference.window_len;
    let count = rollout.len() / w;
    if count == 0 {
        return Err(MetricError::InvalidParameter(format!(
            "rollout of {} frames is shorter than one {w}-frame window",
            rollout.len()
        )));
    }
    (0..count)
        .map(|i| {
            let window = rollout
                .slice(i * w, w)
                .map_err(|e| MetricError::InvalidParameter(e.to_string()))?;
            let p = ps_of_windows(&[window], rollout.skeleton())?;
            Ok(LongTermPoint {
                second: i + 1,
                ps_kld: ps_kld(reference, &p)?,
                ps_entropy: ps_entropy(&p),
            })
        })
        .collect()
}

/// Per-second PS KLD and entropy of `rollout` against `reference_count`
/// random one-second windows of `test`.
pub fn longterm_eval<R: Rng + ?Sized>(
    rollout: &MotionSequence,
    test: &[MotionSequence],
    reference_count: usize,
    rng: &mut R,
) -> Result<Vec<LongTermPoint>> {
    let window_len = rollout.fps().round() as usize;
    let reference = reference_distribution(test, window_len, reference_count, rng)?;
    longterm_curves(rollout, &reference)
}

/// Writes `second,ps_kld,ps_entropy` rows.
pub fn write_longterm_csv<W: Write>(mut w: W, points: &[LongTermPoint]) -> Result<()> {
    writeln!(w, "second,ps_kld,ps_entropy")?;
    for p in points {
        writeln!(w, "{},{},{}", p.second, p.ps_kld, p.ps_entropy)?;
    }
    Ok(())
}

use ndtensor::Tensor;

use super::{AttentionMaps, Mode, Model, ModelError, Result};
use crate::motiondata::ROT_DIM;
use crate::so3::project_to_so3;

/// Replaces every 9-value block of `data` with its nearest rotation.
pub fn project_frames(data: &mut [f32]) -> Result<()> {
    for block in data.chunks_exact_mut(ROT_DIM) {
        let m: [f64; 9] = std::array::from_fn(|i| block[i] as f64);
        let r = project_to_so3(&m).map_err(|e| ModelError::Projection(e.to_string()))?;
        block.copy_from_slice(&r.to_f32());
    }
    Ok(())
}

/// Autoregressive prediction of `steps` frames from `seed` (`B × T_seed × N × 9`).
///
/// Each step feeds the current window, projects the prediction for the frame
/// after its last position onto SO(3), appends it and drops the oldest frame,
/// so the window keeps `T_seed` frames. `on_step` receives the attention of
/// every step. Returns `B × steps × N × 9`.
pub fn rollout(
    model: &Model,
    seed: &Tensor<f32>,
    steps: usize,
    mut on_step: Option<&mut dyn FnMut(usize, &AttentionMaps)>,
) -> Result<Tensor<f32>> {
    let s = seed.shape().to_vec();
    if s.len() != 4 || s[1] == 0 {
        return Err(ModelError::Config(format!("seed {s:?} is not [B, T, N, 9]")));
    }
    if steps == 0 {
        return Err(ModelError::Config("rollout needs at least one step".into()));
    }
    let (b, t, frame) = (s[0], s[1], s[2] * s[3]);
    if t > model.config.window {
        return Err(ModelError::Config(format!(
            "seed of {t} frames exceeds the model window {}",
            model.config.window
        )));
    }
    let mut window = seed.clone();
    let mut out = vec![0.0f32; b * steps * frame];
    for step in 0..steps {
        let pred = model.forward(&window, Mode::Eval, on_step.is_some())?;
        if let (Some(cb), Some(maps)) = (on_step.as_mut(), pred.maps.as_ref()) {
            cb(step, maps);
        }
        let pd = pred.poses.data();
        let mut next = Vec::with_capacity(window.numel());
        for bi in 0..b {
            let last = &pd[(bi * t + t - 1) * frame..(bi * t + t) * frame];
            let mut projected = last.to_vec();
            project_frames(&mut projected)?;
            out[(bi * steps + step) * frame..(bi * steps + step + 1) * frame].copy_from_slice(&projected);
            let w = &window.data()[bi * t * frame..(bi + 1) * t * frame];
            next.extend_from_slice(&w[frame..]);
            next.extend_from_slice(&projected);
        }
        window = Tensor::new(s.clone(), next)?;
    }
    Ok(Tensor::new(vec![b, steps, s[2], s[3]], out)?)
}

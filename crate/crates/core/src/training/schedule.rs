use std::f64::consts::PI;

use super::TrainConfig;

/// Warmup length in steps: the warmup share of epochs applied to
/// `total_steps`, rounded.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    if cfg.epochs == 0 {
        return 0;
    }
    let w = total_steps as f64 * cfg.warmup_epochs as f64 / cfg.epochs as f64;
    (w.round() as usize).min(total_steps)
}

/// Linear ramp from `lr_warmup_start` to `lr_peak`, then cosine decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = warmup_steps(total_steps, cfg);
    if step < warm {
        let frac = step as f64 / warm as f64;
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * frac;
    }
    let span = total_steps - warm;
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - warm).min(span) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

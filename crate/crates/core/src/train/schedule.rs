use super::TrainConfig;

/// Learning rate at `step`: linear warmup from 0 to the peak over
/// `warmup_steps`, then cosine decay to 0 at `total_steps`. Steps past the
/// end give 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step >= t {
        return 0.0;
    }
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Warmup length used for short desk runs.
pub fn desk_warmup(total_steps: usize, default: usize) -> usize {
    if total_steps < 5000 {
        100.min(total_steps.saturating_sub(1))
    } else {
        default
    }
}

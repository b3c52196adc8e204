use std::f64::consts::PI;

/// Number of linear warmup steps: `⌈warmup_ratio · total_steps⌉`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps)
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
///
/// `step == total_steps` always yields 0, even when warmup covers the whole run.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

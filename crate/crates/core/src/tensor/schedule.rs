use std::f64::consts::PI;

/// Linear warmup followed by cosine decay to zero.
///
/// Warmup ramps from `base_lr / warmup_iters` at iteration 0 to `base_lr` at
/// `warmup_iters - 1`; the cosine phase starts at `base_lr` on iteration
/// `warmup_iters` and reaches zero on the final iteration. Out-of-range
/// iterations are clamped.
pub fn cosine_warmup_lr(iter: usize, total_iters: usize, warmup_iters: usize, base_lr: f32) -> f32 {
    if total_iters == 0 {
        return base_lr;
    }
    let iter = iter.min(total_iters - 1);
    let warmup = warmup_iters.min(total_iters - 1);
    if iter < warmup {
        return (base_lr as f64 * (iter + 1) as f64 / warmup as f64) as f32;
    }
    let span = total_iters - warmup - 1;
    if span == 0 {
        return base_lr;
    }
    let progress = (iter - warmup) as f64 / span as f64;
    (base_lr as f64 * 0.5 * (1.0 + (PI * progress).cos())) as f32
}

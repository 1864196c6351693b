//! Text-mode sparklines for training traces.

use qsf_core::trainer::{moving_average, TrainTrace};

const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

/// Averages `values` into at most `width` buckets and draws one bar each.
pub fn sparkline(values: &[f64], width: usize) -> String {
    if values.is_empty() || width == 0 {
        return String::new();
    }
    let buckets = width.min(values.len());
    let means: Vec<f64> = (0..buckets)
        .map(|b| {
            let lo = b * values.len() / buckets;
            let hi = ((b + 1) * values.len() / buckets).max(lo + 1);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    means
        .iter()
        .map(|v| {
            let level = if span > 0.0 { ((v - min) / span * 7.0).round() as usize } else { 3 };
            BARS[level.min(7)]
        })
        .collect()
}

fn panel(title: &str, values: &[f64], width: usize, window: usize) -> String {
    let smoothed = moving_average(values, window);
    let first = smoothed.first().copied().unwrap_or(f64::NAN);
    let last = smoothed.last().copied().unwrap_or(f64::NAN);
    format!(
        "{title} ({} steps, smoothed over {window})\n  raw      {}\n  smoothed {}\n  first {first:.4}  last {last:.4}\n",
        values.len(),
        sparkline(values, width),
        sparkline(&smoothed, width),
    )
}

/// The reward panel when the trace carries rewards, then the objective.
pub fn render(trace: &TrainTrace, width: usize, window: usize) -> String {
    let mut out = String::new();
    let rewards = trace.mean_rewards();
    if rewards.len() == trace.len() && !rewards.is_empty() {
        out.push_str(&panel("mean reward per step", &rewards, width, window));
        out.push_str(&panel("objective", &trace.values(), width, window));
    } else {
        out.push_str(&panel("loss", &trace.values(), width, window));
    }
    out
}

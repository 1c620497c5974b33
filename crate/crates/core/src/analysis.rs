//! Switching-error sweeps, exponential fits, clipping sweeps and the
//! entropy/switching rank correlation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericFormat, QuantConfig, Quantizer};
use crate::search::TraceRecord;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid analysis spec: {0}")]
    Spec(String),
    #[error("exponential fit did not converge after {iterations} iterations")]
    FitFailed { iterations: usize, best: ExpFit },
    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("correlation undefined: {0}")]
    Undefined(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution1 {
    Gaussian,
    Laplacian,
}

impl std::str::FromStr for Distribution1 {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Distribution1::Gaussian),
            "laplacian" | "laplace" => Ok(Distribution1::Laplacian),
            _ => Err(AnalysisError::Spec(format!(
                "unknown distribution `{s}` (expected gaussian or laplacian)"
            ))),
        }
    }
}

pub const OUTLIER_RATES: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 0.0];

/// Synthetic tensor generator with outlier injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub distribution: Distribution1,
    pub outlier_rate: f64,
    /// Outliers are this multiple of the pre-injection max |x|.
    pub outlier_scale: f64,
    pub tensor_size: usize,
    pub trials: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            distribution: Distribution1::Gaussian,
            outlier_rate: 0.0,
            outlier_scale: 3.0,
            tensor_size: 10_000,
            trials: 1000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !OUTLIER_RATES.contains(&self.outlier_rate) {
            return Err(AnalysisError::Spec(format!(
                "outlier rate {} not in {{1e-1, 1e-2, 1e-3, 1e-4, 0}}",
                self.outlier_rate
            )));
        }
        if self.trials == 0 || self.tensor_size == 0 {
            return Err(AnalysisError::Spec("trials and tensor_size must be positive".into()));
        }
        if !(self.outlier_scale.is_finite() && self.outlier_scale > 0.0) {
            return Err(AnalysisError::Spec(format!("outlier scale {}", self.outlier_scale)));
        }
        Ok(())
    }
}

/// Draws one tensor. Laplacian draws use scale 1/√2 (unit variance).
/// `round(rate · size)` distinct positions are replaced by
/// `outlier_scale · max|x|`, keeping the replaced entry's sign.
pub fn synth_tensor(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.tensor_size;
    let mut x: Vec<f64> = match spec.distribution {
        Distribution1::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        Distribution1::Laplacian => {
            let b = std::f64::consts::FRAC_1_SQRT_2;
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(-0.5..0.5);
                    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                })
                .collect()
        }
    };
    let count = (spec.outlier_rate * n as f64).round() as usize;
    if count > 0 {
        let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let outlier = spec.outlier_scale * max;
        for i in rand::seq::index::sample(rng, n, count.min(n)) {
            x[i] = if x[i] < 0.0 { -outlier } else { outlier };
        }
    }
    x
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Linear-interpolated percentile (`p` in [0, 100]) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_abs(x: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    a
}

/// How the shared clipping threshold of a switching trial is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Percentile of |x| of each trial tensor.
    Percentile(f64),
    Fixed(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Percentile(99.9)
    }
}

impl ThresholdRule {
    fn threshold(&self, x: &[f64]) -> f64 {
        match *self {
            ThresholdRule::Percentile(p) => percentile_sorted(&sorted_abs(x), p),
            ThresholdRule::Fixed(t) => t,
        }
    }
}

/// Mean and standard error over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Mean RMS switching error between `formats[i]` and `reference`, one point
/// per entry of `formats` (x = its total bitwidth).
pub fn switching_sweep_formats(
    formats: &[NumericFormat],
    reference: NumericFormat,
    spec: &SynthSpec,
    rule: ThresholdRule,
    seed: u64,
) -> Result<Vec<SweepPoint>, AnalysisError> {
    spec.validate()?;
    if formats.is_empty() {
        return Err(AnalysisError::Spec("empty format range".into()));
    }
    let mut errors = vec![Vec::with_capacity(spec.trials); formats.len()];
    for trial in 0..spec.trials {
        let x = synth_tensor(spec, &mut trial_rng(seed, trial));
        let t = rule.threshold(&x);
        let cfg = QuantConfig::new(t).map_err(|e| AnalysisError::Spec(e.to_string()))?;
        let qref: Vec<f64> = {
            let q = Quantizer::new(reference, cfg);
            x.iter().map(|&v| q.apply(v)).collect()
        };
        for (f, errs) in formats.iter().zip(errors.iter_mut()) {
            let q = Quantizer::new(*f, cfg);
            let qx: Vec<f64> = x.iter().map(|&v| q.apply(v)).collect();
            errs.push(rms_diff(&qx, &qref));
        }
    }
    Ok(formats
        .iter()
        .zip(&errors)
        .map(|(f, e)| {
            let (mean, stderr) = mean_stderr(e);
            SweepPoint {
                x: f.total_bitwidth() as f64,
                mean,
                stderr,
            }
        })
        .collect())
}

/// Integer switching sweep: `Int(k1)` against `Int(k2)` for each `k1`.
pub fn switching_sweep(
    k1_range: &[u8],
    k2: u8,
    spec: &SynthSpec,
    rule: ThresholdRule,
    seed: u64,
) -> Result<Vec<SweepPoint>, AnalysisError> {
    let int = |k: u8| NumericFormat::int(k).map_err(|e| AnalysisError::Spec(e.to_string()));
    let formats = k1_range.iter().map(|&k| int(k)).collect::<Result<Vec<_>, _>>()?;
    switching_sweep_formats(&formats, int(k2)?, spec, rule, seed)
}

/// Mean RMS rounding error of `format` against the clipped tensor, under the
/// same tensors and rule.
pub fn quantization_error_mean(
    format: NumericFormat,
    spec: &SynthSpec,
    rule: ThresholdRule,
    seed: u64,
) -> Result<f64, AnalysisError> {
    spec.validate()?;
    let mut errs = Vec::with_capacity(spec.trials);
    for trial in 0..spec.trials {
        let x = synth_tensor(spec, &mut trial_rng(seed, trial));
        let t = rule.threshold(&x);
        let cfg = QuantConfig::new(t).map_err(|e| AnalysisError::Spec(e.to_string()))?;
        let q = Quantizer::new(format, cfg);
        let qx: Vec<f64> = x.iter().map(|&v| q.apply(v)).collect();
        let clipped: Vec<f64> = x.iter().map(|v| v.clamp(-t, t)).collect();
        errs.push(rms_diff(&qx, &clipped));
    }
    Ok(mean_stderr(&errs).0)
}

/// `y ≈ A · exp(−B · x) + C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// RMS residual.
    pub residual: f64,
    pub r_squared: f64,
}

impl ExpFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * (-self.b * x).exp() + self.c
    }
}

fn sse(xs: &[f64], ys: &[f64], a: f64, b: f64, c: f64) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (a * (-b * x).exp() + c - y).powi(2)).sum()
}

/// Least-squares `A`, `C` for a fixed `B`.
fn linear_ac(xs: &[f64], ys: &[f64], b: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let e: Vec<f64> = xs.iter().map(|&x| (-b * x).exp()).collect();
    let (se, see) = (e.iter().sum::<f64>(), e.iter().map(|v| v * v).sum::<f64>());
    let (sy, sey) = (ys.iter().sum::<f64>(), e.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>());
    let det = n * see - se * se;
    if det.abs() < 1e-300 {
        return (0.0, sy / n);
    }
    ((n * sey - se * sy) / det, (see * sy - se * sey) / det)
}

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if !d.is_normal() {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = v[row];
        }
        *o = det(mc) / d;
    }
    Some(out)
}

pub const FIT_MAX_ITERATIONS: usize = 500;

/// Grid over `B ∈ [0.1, 3]` with closed-form `A`, `C`, then damped
/// Gauss-Newton. Points are sorted by `x` first, so input order is irrelevant.
pub fn fit_exponential(xs: &[f64], ys: &[f64]) -> Result<ExpFit, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::Spec(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 4 {
        return Err(AnalysisError::InsufficientData { needed: 4, got: xs.len() });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Spec("non-finite fit input".into()));
    }
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for i in 0..=290 {
        let b = 0.1 + 0.01 * i as f64;
        let (a, c) = linear_ac(&xs, &ys, b);
        let s = sse(&xs, &ys, a, b, c);
        if s < best.0 {
            best = (s, a, b, c);
        }
    }
    let (mut cur, mut a, mut b, mut c) = best;
    let mut lambda = 1e-3;
    let mut converged = cur < 1e-30;
    let mut iterations = 0;
    while !converged && iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &y) in xs.iter().zip(&ys) {
            let e = (-b * x).exp();
            let r = a * e + c - y;
            let j = [e, -a * x * e, 1.0];
            for p in 0..3 {
                jtr[p] += j[p] * r;
                for q in 0..3 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for (d, row) in m.iter_mut().enumerate() {
                row[d] += lambda * (jtj[d][d] + 1e-12);
            }
            let Some(step) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (na, nb, nc) = (a - step[0], b - step[1], c - step[2]);
            let s = sse(&xs, &ys, na, nb, nc);
            if s.is_finite() && s <= cur {
                let rel = (cur - s) / cur.max(1e-300);
                let small = step.iter().zip([a, b, c]).all(|(d, v)| d.abs() <= 1e-13 * (1.0 + v.abs()));
                (a, b, c, cur) = (na, nb, nc, s);
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                converged = rel < 1e-15 || small || cur < 1e-30;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a stationary point.
            converged = true;
        }
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let fit = ExpFit {
        a,
        b,
        c,
        residual: (cur / n).sqrt(),
        r_squared: if sst > 0.0 { 1.0 - cur / sst } else if cur < 1e-20 { 1.0 } else { 0.0 },
    };
    if converged {
        Ok(fit)
    } else {
        Err(AnalysisError::FitFailed { iterations, best: fit })
    }
}

/// `count` evenly spaced percentiles from `lo` to `hi` inclusive.
pub fn percentile_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![hi];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippingResult {
    pub format: NumericFormat,
    /// `x` is the percentile, `mean` the MSE.
    pub curve: Vec<SweepPoint>,
    pub optimal_percentile: f64,
}

/// MSE of `format` with `σ` at each percentile of |x|, averaged over
/// `spec.trials` tensors.
pub fn clipping_sweep(
    format: NumericFormat,
    spec: &SynthSpec,
    grid: &[f64],
    seed: u64,
) -> Result<ClippingResult, AnalysisError> {
    spec.validate()?;
    if grid.is_empty() || grid.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
        return Err(AnalysisError::Spec("percentile grid must be non-empty and within (0, 100]".into()));
    }
    let mut mse = vec![Vec::with_capacity(spec.trials); grid.len()];
    for trial in 0..spec.trials {
        let x = synth_tensor(spec, &mut trial_rng(seed, trial));
        let sorted = sorted_abs(&x);
        for (&p, out) in grid.iter().zip(mse.iter_mut()) {
            let t = percentile_sorted(&sorted, p);
            let e = match QuantConfig::new(t) {
                Ok(cfg) => {
                    let q = Quantizer::new(format, cfg);
                    x.iter().map(|&v| (q.apply(v) - v).powi(2)).sum::<f64>() / x.len() as f64
                }
                // A zero threshold clips everything to 0.
                Err(_) => x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64,
            };
            out.push(e);
        }
    }
    let curve: Vec<SweepPoint> = grid
        .iter()
        .zip(&mse)
        .map(|(&p, e)| {
            let (mean, stderr) = mean_stderr(e);
            SweepPoint { x: p, mean, stderr }
        })
        .collect();
    let optimal_percentile = curve
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.mean <= p.mean => Some(b),
            _ => Some(p),
        })
        .map(|p| p.x)
        .expect("non-empty grid");
    Ok(ClippingResult {
        format,
        curve,
        optimal_percentile,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(AnalysisError::InsufficientData {
            needed: 2,
            got: xs.len().min(ys.len()),
        });
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(AnalysisError::Undefined("a series is constant".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

pub const MIN_CORRELATION_STEPS: usize = 100;

/// Spearman correlation between `H_M` and the realized switching magnitude
/// over the steps with a policy update.
pub fn entropy_switch_correlation(trace: &[TraceRecord]) -> Result<f64, AnalysisError> {
    let post: Vec<&TraceRecord> = trace.iter().filter(|t| t.policy_updated).collect();
    entropy_switch_correlation_raw(
        &post.iter().map(|t| t.entropy).collect::<Vec<_>>(),
        &post.iter().map(|t| t.switch_rms).collect::<Vec<_>>(),
    )
}

/// As [`entropy_switch_correlation`] on already filtered series.
pub fn entropy_switch_correlation_raw(entropy: &[f64], switching: &[f64]) -> Result<f64, AnalysisError> {
    if entropy.len() < MIN_CORRELATION_STEPS {
        return Err(AnalysisError::InsufficientData {
            needed: MIN_CORRELATION_STEPS,
            got: entropy.len(),
        });
    }
    if switching.iter().all(|&s| s == 0.0) {
        return Ok(0.0);
    }
    if entropy.iter().all(|&e| e == entropy[0]) {
        return Err(AnalysisError::Undefined("entropy is constant".into()));
    }
    spearman(entropy, switching)
}

/// Writes `x,mean,stderr` rows.
pub fn write_sweep_csv<W: Write>(w: W, x_name: &str, points: &[SweepPoint]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([x_name, "mean", "stderr"])?;
    for p in points {
        out.write_record([p.x.to_string(), p.mean.to_string(), p.stderr.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

//! Image-quality metrics (SSIM, MSE, PSNR), tabular reports, and the
//! metric-sensitivity severity study.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5). At the borders the
//! window is truncated to the image and its weights renormalized, so the
//! SSIM map has the same size as the image. Because the truncated 2D window
//! is the outer product of truncated 1D windows, filtering stays separable.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{corrupt_subject, Severity, SimConfig};
use crate::seed;
use crate::volume::{Slice, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn with_range(dynamic_range: f64) -> Self {
        SsimParams {
            dynamic_range,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::config("ssim.window", "must be odd"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("ssim.sigma", "must be positive"));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::config("ssim.k", "k1 and k2 must be positive"));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::config("ssim.dynamic_range", "must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// 1D Gaussian taps normalized to sum 1; the 2D window is their outer
    /// product and therefore also sums to 1.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as i64;
        let k: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable window with border renormalization for one image geometry.
pub(crate) struct Window {
    kernel: Vec<f64>,
    nx: usize,
    ny: usize,
    /// Sum of in-bounds taps for each x / y position.
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Window {
    pub(crate) fn new(p: &SsimParams, nx: usize, ny: usize) -> Self {
        let kernel = p.kernel();
        let norms = |n: usize| -> Vec<f64> {
            let r = (kernel.len() / 2) as i64;
            (0..n as i64)
                .map(|i| {
                    (-r..=r)
                        .filter(|o| (0..n as i64).contains(&(i + o)))
                        .map(|o| kernel[(o + r) as usize])
                        .sum()
                })
                .collect()
        };
        Window {
            norm_x: norms(nx),
            norm_y: norms(ny),
            kernel,
            nx,
            ny,
        }
    }

    fn pass(&self, src: &[f64], along_x: bool, adjoint: bool) -> Vec<f64> {
        let (n, norm) = if along_x {
            (self.nx, &self.norm_x)
        } else {
            (self.ny, &self.norm_y)
        };
        let r = (self.kernel.len() / 2) as i64;
        let mut out = vec![0.0; src.len()];
        for y in 0..self.ny {
            for x in 0..self.nx {
                let pos = if along_x { x } else { y } as i64;
                let mut acc = 0.0;
                for o in -r..=r {
                    let q = pos + o;
                    if q < 0 || q >= n as i64 {
                        continue;
                    }
                    let idx = if along_x {
                        y * self.nx + q as usize
                    } else {
                        q as usize * self.nx + x
                    };
                    let w = self.kernel[(o + r) as usize];
                    acc += if adjoint {
                        w * src[idx] / norm[q as usize]
                    } else {
                        w * src[idx]
                    };
                }
                out[y * self.nx + x] = if adjoint { acc } else { acc / norm[pos as usize] };
            }
        }
        out
    }

    /// Weighted local mean at every pixel.
    pub(crate) fn filter(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    /// Transpose of [`Window::filter`].
    pub(crate) fn filter_adjoint(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

/// Local moments needed by SSIM.
pub(crate) struct SsimTerms {
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub e_aa: Vec<f64>,
    pub e_bb: Vec<f64>,
    pub e_ab: Vec<f64>,
}

impl SsimTerms {
    pub(crate) fn compute(w: &Window, a: &[f64], b: &[f64]) -> Self {
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        SsimTerms {
            mu_a: w.filter(a),
            mu_b: w.filter(b),
            e_aa: w.filter(&prod(a, a)),
            e_bb: w.filter(&prod(b, b)),
            e_ab: w.filter(&prod(a, b)),
        }
    }

    /// Per-pixel SSIM value.
    pub(crate) fn map(&self, c1: f64, c2: f64) -> Vec<f64> {
        (0..self.mu_a.len())
            .map(|i| ssim_pixel(self.mu_a[i], self.mu_b[i], self.e_aa[i], self.e_bb[i], self.e_ab[i], c1, c2))
            .collect()
    }
}

#[inline]
pub(crate) fn ssim_pixel(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
    num / den
}

fn check_pair(a: &Slice, b: &Slice) -> Result<()> {
    a.same_dims(b)
}

/// Mean of squared differences.
pub fn mse(a: &Slice, b: &Slice) -> Result<f64> {
    check_pair(a, b)?;
    let sq: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .collect();
    Ok(compensated_sum(&sq) / sq.len() as f64)
}

/// `10 log10(L^2 / mse)`; zero error gives `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64, dynamic_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (dynamic_range * dynamic_range / mse).log10()
    }
}

pub fn psnr(a: &Slice, b: &Slice, dynamic_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, dynamic_range))
}

/// Windowed SSIM: returns the mean and the per-pixel map.
pub fn ssim(a: &Slice, b: &Slice, p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    p.validate()?;
    if a.nx < p.window || a.ny < p.window {
        return Err(Error::shape(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            a.nx, a.ny, p.window, p.window
        )));
    }
    let w = Window::new(p, a.nx, a.ny);
    let to64 = |s: &Slice| s.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let map = SsimTerms::compute(&w, &to64(a), &to64(b)).map(p.c1(), p.c2());
    let mean = compensated_sum(&map) / map.len() as f64;
    Ok((mean, map))
}

/// Neumaier-compensated summation.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Squared Pearson correlation.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::config("r_squared", "need at least 3 points"));
    }
    let n = xs.len() as f64;
    let mx = compensated_sum(xs) / n;
    let my = compensated_sum(ys) / n;
    let sxx = compensated_sum(&xs.iter().map(|x| (x - mx) * (x - mx)).collect::<Vec<_>>());
    let syy = compensated_sum(&ys.iter().map(|y| (y - my) * (y - my)).collect::<Vec<_>>());
    let sxy = compensated_sum(&xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect::<Vec<_>>());
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("r_squared: zero variance".into()));
    }
    Ok(sxy * sxy / (sxx * syy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub ssim: f64,
    pub mse: f64,
    /// `f64::INFINITY` when `mse == 0`.
    pub psnr: f64,
}

impl ImageMetrics {
    pub fn measure(estimate: &Slice, reference: &Slice, p: &SsimParams) -> Result<Self> {
        let (s, _) = ssim(estimate, reference, p)?;
        let m = mse(estimate, reference)?;
        Ok(ImageMetrics {
            ssim: s,
            mse: m,
            psnr: psnr_from_mse(m, p.dynamic_range),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// Finite values entering mean/std.
    pub count: usize,
    /// Values excluded because they were infinite.
    pub excluded_infinite: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut finite = Vec::new();
        let mut excluded = 0;
        for v in values {
            if v.is_finite() {
                finite.push(v);
            } else {
                excluded += 1;
            }
        }
        let n = finite.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                excluded_infinite: excluded,
            };
        }
        let mean = compensated_sum(&finite) / n as f64;
        let var = compensated_sum(&finite.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>())
            / n as f64;
        Aggregate {
            mean,
            std: var.sqrt(),
            count: n,
            excluded_infinite: excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub ssim: Aggregate,
    pub mse: Aggregate,
    pub psnr: Aggregate,
}

impl MetricAggregates {
    pub fn of(rows: &[ImageMetrics]) -> Self {
        MetricAggregates {
            ssim: Aggregate::of(rows.iter().map(|r| r.ssim)),
            mse: Aggregate::of(rows.iter().map(|r| r.mse)),
            psnr: Aggregate::of(rows.iter().map(|r| r.psnr)),
        }
    }
}

/// Improvement of "after" over "before": SSIM as a difference in
/// percentage points, MSE as relative reduction (%), PSNR as relative gain
/// (%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub ssim_points: f64,
    pub mse_percent: f64,
    pub psnr_percent: f64,
}

impl Improvement {
    /// `ssim` values are fractions in [0, 1].
    pub fn between(before: (f64, f64, f64), after: (f64, f64, f64)) -> Self {
        Improvement {
            ssim_points: 100.0 * (after.0 - before.0),
            mse_percent: 100.0 * (before.1 - after.1) / before.1,
            psnr_percent: 100.0 * (after.2 - before.2) / before.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject_id: String,
    pub slice_index: usize,
    /// Corruption the input came from, e.g. a severity name.
    pub condition: String,
    pub before: ImageMetrics,
    pub after: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dynamic_range: f64,
    pub rows: Vec<ReportRow>,
    pub before: MetricAggregates,
    pub after: MetricAggregates,
    pub improvement: Improvement,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "subject_id",
    "slice_index",
    "condition",
    "ssim_before",
    "mse_before",
    "psnr_before",
    "ssim_after",
    "mse_after",
    "psnr_after",
];

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        // Shortest representation that round-trips.
        format!("{v:?}")
    }
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ReportRow>, dynamic_range: f64) -> Self {
        let before: Vec<_> = rows.iter().map(|r| r.before).collect();
        let after: Vec<_> = rows.iter().map(|r| r.after).collect();
        let before = MetricAggregates::of(&before);
        let after = MetricAggregates::of(&after);
        let improvement = Improvement::between(
            (before.ssim.mean, before.mse.mean, before.psnr.mean),
            (after.ssim.mean, after.mse.mean, after.psnr.mean),
        );
        MetricsReport {
            dynamic_range,
            rows,
            before,
            after,
            improvement,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.subject_id,
                r.slice_index,
                r.condition,
                fmt_float(r.before.ssim),
                fmt_float(r.before.mse),
                fmt_float(r.before.psnr),
                fmt_float(r.after.ssim),
                fmt_float(r.after.mse),
                fmt_float(r.after.psnr),
            );
        }
        out
    }

    /// Aggregates only (rows live in the CSV).
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dynamic_range": self.dynamic_range,
            "n_images": self.rows.len(),
            "before": self.before,
            "after": self.after,
            "improvement": self.improvement,
        })
    }
}

/// Published R² values of the SSIM severity scatter plots, for reference.
pub const REFERENCE_SSIM_R2: [(&str, f64); 3] = [
    ("mild_vs_moderate", 0.9243),
    ("mild_vs_severe", 0.9667),
    ("moderate_vs_severe", 0.9191),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub subject_id: String,
    pub slice_index: usize,
    /// Indexed like [`Severity::ALL`].
    pub by_severity: [ImageMetrics; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Entry {
    pub metric: String,
    pub pair: String,
    pub r2: f64,
    pub n_points: usize,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityStudy {
    pub rows: Vec<StudyRow>,
    /// Mean metric per severity, indexed like [`Severity::ALL`].
    pub means: Vec<(Severity, MetricAggregates)>,
    pub r2: Vec<R2Entry>,
    /// Slices skipped because the clean slice is empty background.
    pub skipped_background: usize,
}

pub const METRIC_NAMES: [&str; 3] = ["ssim", "mse", "psnr"];

fn metric_value(m: &ImageMetrics, name: &str) -> f64 {
    match name {
        "ssim" => m.ssim,
        "mse" => m.mse,
        _ => m.psnr,
    }
}

impl SeverityStudy {
    /// One scatter table per metric: subject, slice, mild, moderate, severe.
    pub fn scatter_csv(&self, metric: &str) -> String {
        let mut out = String::from("subject_id,slice_index,mild,moderate,severe\n");
        for r in &self.rows {
            let v: Vec<String> = r.by_severity.iter().map(|m| fmt_float(metric_value(m, metric))).collect();
            let _ = writeln!(out, "{},{},{}", r.subject_id, r.slice_index, v.join(","));
        }
        out
    }

    pub fn mean_ssim(&self, s: Severity) -> f64 {
        self.means
            .iter()
            .find(|(sev, _)| *sev == s)
            .map(|(_, a)| a.ssim.mean)
            .unwrap_or(f64::NAN)
    }
}

/// Corrupts every subject with every preset and relates per-slice metric
/// values across severities. Background-only slices are skipped.
pub fn severity_study(
    volumes: &[(String, Volume)],
    seed: u64,
    cfg: &SimConfig,
    p: &SsimParams,
) -> Result<SeverityStudy> {
    if volumes.len() < 5 {
        return Err(Error::config(
            "volumes",
            format!("severity study needs >= 5 volumes, got {}", volumes.len()),
        ));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (vi, (id, clean)) in volumes.iter().enumerate() {
        let subject_seed = seed::mix(seed, vi as u64);
        let corrupted = Severity::ALL
            .iter()
            .map(|s| corrupt_subject(clean, subject_seed, &s.preset(), cfg).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        for z in 0..clean.dims()[2] {
            let c = clean.slice(z)?;
            if c.data.iter().all(|&v| v == 0.0) {
                skipped += 1;
                continue;
            }
            let mut by = [ImageMetrics { ssim: 0.0, mse: 0.0, psnr: 0.0 }; 3];
            for (k, vol) in corrupted.iter().enumerate() {
                by[k] = ImageMetrics::measure(&vol.slice(z)?, &c, p)?;
            }
            rows.push(StudyRow {
                subject_id: id.clone(),
                slice_index: z,
                by_severity: by,
            });
        }
    }
    let means = Severity::ALL
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let ms: Vec<_> = rows.iter().map(|r| r.by_severity[k]).collect();
            (*s, MetricAggregates::of(&ms))
        })
        .collect();
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    let mut r2 = Vec::new();
    for metric in METRIC_NAMES {
        for (a, b) in pairs {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (metric_value(&r.by_severity[a], metric), metric_value(&r.by_severity[b], metric)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let pair = format!("{}_vs_{}", Severity::ALL[a].as_str(), Severity::ALL[b].as_str());
            let reference = if metric == "ssim" {
                REFERENCE_SSIM_R2.iter().find(|(n, _)| *n == pair).map(|(_, v)| *v)
            } else {
                None
            };
            r2.push(R2Entry {
                metric: metric.to_string(),
                r2: r_squared(&xs, &ys).unwrap_or(f64::NAN),
                n_points: pts.len(),
                pair,
                reference,
            });
        }
    }
    Ok(SeverityStudy {
        rows,
        means,
        r2,
        skipped_background: skipped,
    })
}

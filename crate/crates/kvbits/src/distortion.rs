//! Exponential distortion-rate models, the exact Lloyd-Max oracle for the
//! unit Gaussian, and least-squares calibration from measured MSE points.
//!
//! The model family is `D(b) = alpha * beta^(-b)` with `alpha > 0`,
//! `beta > 1`: strictly decreasing and strictly convex in the bit-width `b`.
//! Calibration fits `ln D` against `b` by ordinary least squares, so a fit is
//! exact on data that is exactly exponential.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss;

/// One measured distortion-rate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    /// Bit-width the MSE was measured at.
    pub bits: f64,
    /// Per-element mean squared error (sum of squared errors / element count).
    pub mse: f64,
}

/// Fitted exponential distortion-rate curve for one quantizer/component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    /// MSE at b = 0 under the fit.
    pub alpha: f64,
    /// Per-bit decay factor, > 1.
    pub beta: f64,
    /// Coefficient of determination of the log-domain fit, in [0, 1].
    pub r_squared: f64,
    /// Bit-widths the model was fitted on (empty for analytic constructions).
    pub fit_bits: Vec<f64>,
}

impl DistortionModel {
    /// Build a model from known coefficients (e.g. published constants).
    pub fn from_params(alpha: f64, beta: f64) -> Result<Self> {
        let model = DistortionModel {
            alpha,
            beta,
            r_squared: 1.0,
            fit_bits: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Check the model invariants: positive finite alpha, beta > 1.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidModel(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta > 1.0) {
            return Err(Error::InvalidModel(format!(
                "beta must be finite and > 1, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Evaluate `D(b) = alpha * beta^(-b)`.
    #[inline]
    pub fn eval(&self, bits: f64) -> f64 {
        self.alpha * self.beta.powf(-bits)
    }

    /// Distortion drop from granting one extra bit at level `bits`.
    #[inline]
    pub fn one_bit_gain(&self, bits: f64) -> f64 {
        self.eval(bits) - self.eval(bits + 1.0)
    }
}

/// Evaluate a model at `bits`; free-function form of [`DistortionModel::eval`].
pub fn eval_distortion(model: &DistortionModel, bits: f64) -> f64 {
    model.eval(bits)
}

// ---------------------------------------------------------------------------
// Lloyd-Max oracle
// ---------------------------------------------------------------------------

/// Valid bit range for the Lloyd-Max oracle.
pub const LLOYD_MAX_MIN_BITS: u32 = 1;
pub const LLOYD_MAX_MAX_BITS: u32 = 8;

/// Stopping rule: maximum centroid movement below this, or the iteration cap.
const LLOYD_TOL: f64 = 1e-12;
const LLOYD_MAX_ITERS: usize = 10_000;

/// Converged Lloyd-Max scalar quantizer for the unit-variance Gaussian.
///
/// `boundaries` are the `2^bits - 1` interior cell edges in ascending order;
/// `codebook` holds the `2^bits` reconstruction levels. Cells and levels are
/// mutually consistent: each boundary is the midpoint of its neighbouring
/// levels and each level is the analytic Gaussian centroid of its cell, up to
/// the stopping tolerance.
#[derive(Debug, Clone)]
pub struct LloydMaxQuantizer {
    pub bits: u32,
    pub boundaries: Vec<f64>,
    pub codebook: Vec<f64>,
    /// Analytic per-element MSE of the final quantizer.
    pub mse: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the movement tolerance.
    pub converged: bool,
}

impl LloydMaxQuantizer {
    /// Run Lloyd iteration from quantile-initialized boundaries.
    ///
    /// Initialization at the `2^bits`-quantiles lies in the attraction basin
    /// of the unique optimum for the (log-concave) Gaussian, so the iteration
    /// converges to the global MSE-optimal quantizer.
    pub fn train(bits: u32) -> Result<Self> {
        if !(LLOYD_MAX_MIN_BITS..=LLOYD_MAX_MAX_BITS).contains(&bits) {
            return Err(Error::BitsOutOfRange {
                bits,
                min: LLOYD_MAX_MIN_BITS,
                max: LLOYD_MAX_MAX_BITS,
            });
        }
        let levels = 1usize << bits;
        let mut boundaries: Vec<f64> = (1..levels)
            .map(|j| gauss::inv_cdf(j as f64 / levels as f64))
            .collect();

        let mut prev_centroids: Option<Vec<f64>> = None;
        let mut prev_mse = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < LLOYD_MAX_ITERS {
            iterations += 1;
            let centroids = cell_centroids(&boundaries);
            let mse = quantizer_mse(&boundaries, &centroids);
            // Lloyd steps never increase distortion; tolerate only rounding.
            debug_assert!(
                mse <= prev_mse + 1e-13,
                "Lloyd iteration increased MSE: {prev_mse} -> {mse}"
            );
            prev_mse = mse;

            if let Some(prev) = &prev_centroids {
                let movement = centroids
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if movement < LLOYD_TOL {
                    converged = true;
                    prev_centroids = Some(centroids);
                    break;
                }
            }
            for j in 0..boundaries.len() {
                boundaries[j] = 0.5 * (centroids[j] + centroids[j + 1]);
            }
            prev_centroids = Some(centroids);
        }

        // Make the returned pair self-consistent: boundaries at midpoints of
        // the final codebook, MSE evaluated on exactly that quantizer.
        let codebook = prev_centroids.expect("at least one iteration ran");
        for j in 0..boundaries.len() {
            boundaries[j] = 0.5 * (codebook[j] + codebook[j + 1]);
        }
        let mse = quantizer_mse(&boundaries, &codebook);

        Ok(LloydMaxQuantizer {
            bits,
            boundaries,
            codebook,
            mse,
            iterations,
            converged,
        })
    }

    /// Nearest reconstruction level for `x`.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        let idx = self.boundaries.partition_point(|&t| t < x);
        self.codebook[idx]
    }
}

/// Analytic centroid of each cell: `(phi(a) - phi(b)) / (Phi(b) - Phi(a))`.
fn cell_centroids(boundaries: &[f64]) -> Vec<f64> {
    let m = boundaries.len() + 1;
    let mut centroids = Vec::with_capacity(m);
    for j in 0..m {
        let (a, b) = cell_edges(boundaries, j);
        let pa = if a.is_finite() { gauss::pdf(a) } else { 0.0 };
        let pb = if b.is_finite() { gauss::pdf(b) } else { 0.0 };
        let mass = gauss::cdf(b) - gauss::cdf(a);
        centroids.push((pa - pb) / mass);
    }
    centroids
}

fn cell_edges(boundaries: &[f64], j: usize) -> (f64, f64) {
    let a = if j == 0 {
        f64::NEG_INFINITY
    } else {
        boundaries[j - 1]
    };
    let b = if j == boundaries.len() {
        f64::INFINITY
    } else {
        boundaries[j]
    };
    (a, b)
}

/// Exact expected squared error of a scalar quantizer on the unit Gaussian.
///
/// Per cell `[a, b]` with level `c`:
/// `int (x-c)^2 phi(x) dx = (1 + c^2) * mass + a*phi(a) - b*phi(b) - 2c*(phi(a) - phi(b))`.
fn quantizer_mse(boundaries: &[f64], codebook: &[f64]) -> f64 {
    let mut total = 0.0;
    for (j, &c) in codebook.iter().enumerate() {
        let (a, b) = cell_edges(boundaries, j);
        let pa = if a.is_finite() { gauss::pdf(a) } else { 0.0 };
        let pb = if b.is_finite() { gauss::pdf(b) } else { 0.0 };
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let bpb = if b.is_finite() { b * pb } else { 0.0 };
        let mass = gauss::cdf(b) - gauss::cdf(a);
        total += (1.0 + c * c) * mass + apa - bpb - 2.0 * c * (pa - pb);
    }
    total
}

static LLOYD_CACHE: [OnceLock<LloydMaxQuantizer>; 8] = [
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
];

/// Shared, lazily-trained Lloyd-Max quantizer for `bits` in 1..=8.
///
/// Results are cached; behaviour is indistinguishable from retraining.
pub fn lloyd_max(bits: u32) -> Result<&'static LloydMaxQuantizer> {
    if !(LLOYD_MAX_MIN_BITS..=LLOYD_MAX_MAX_BITS).contains(&bits) {
        return Err(Error::BitsOutOfRange {
            bits,
            min: LLOYD_MAX_MIN_BITS,
            max: LLOYD_MAX_MAX_BITS,
        });
    }
    let cell = &LLOYD_CACHE[(bits - 1) as usize];
    if let Some(q) = cell.get() {
        return Ok(q);
    }
    let trained = LloydMaxQuantizer::train(bits)?;
    Ok(cell.get_or_init(|| trained))
}

/// Per-element MSE of the optimal `2^bits`-level scalar quantizer for the
/// unit-variance Gaussian.
pub fn lloyd_max_mse(bits: u32) -> Result<f64> {
    Ok(lloyd_max(bits)?.mse)
}

// ---------------------------------------------------------------------------
// Least-squares calibration
// ---------------------------------------------------------------------------

/// Fit `(alpha, beta)` by ordinary least squares of `ln(mse)` on `bits`.
///
/// The regression slope `s` gives `beta = exp(-s)` and the intercept gives
/// `alpha`. A non-decaying fit (`beta <= 1`) is a hard calibration failure:
/// downstream waterfilling divides by `ln beta`.
pub fn fit_exponential(points: &[MsePoint]) -> Result<DistortionModel> {
    for p in points {
        if !(p.mse.is_finite() && p.mse > 0.0) {
            return Err(Error::NonPositiveMse {
                bits: p.bits,
                mse: p.mse,
            });
        }
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.bits).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::NotEnoughPoints(distinct.len()));
    }

    let n = points.len() as f64;
    let mean_b = points.iter().map(|p| p.bits).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.mse.ln()).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for p in points {
        let db = p.bits - mean_b;
        sxx += db * db;
        sxy += db * (p.mse.ln() - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_b;

    let beta = (-slope).exp();
    if beta <= 1.0 {
        return Err(Error::CalibrationFailure { slope, beta });
    }
    let alpha = intercept.exp();

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in points {
        let y = p.mse.ln();
        let fit = intercept + slope * p.bits;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        // All responses equal: cannot happen with beta > 1 and >= 2 distinct
        // bit values, but keep the branch total.
        1.0
    };

    Ok(DistortionModel {
        alpha,
        beta,
        r_squared,
        fit_bits: points.iter().map(|p| p.bits).collect(),
    })
}

/// Per-point fitted/measured ratios for a model against data.
#[derive(Debug, Clone)]
pub struct FitQualityReport {
    /// `(bits, fitted / measured)` per input point, input order.
    pub ratios: Vec<(f64, f64)>,
    /// Largest `|fitted - measured| / measured` across the points.
    pub max_rel_error: f64,
    /// Bit-width where the maximum relative error occurs.
    pub max_rel_error_bits: f64,
}

/// Compare a model's predictions against measured points.
pub fn fit_quality_report(points: &[MsePoint], model: &DistortionModel) -> FitQualityReport {
    let mut ratios = Vec::with_capacity(points.len());
    let mut max_rel_error = 0.0;
    let mut max_rel_error_bits = f64::NAN;
    for p in points {
        let fitted = model.eval(p.bits);
        ratios.push((p.bits, fitted / p.mse));
        let rel = (fitted - p.mse).abs() / p.mse;
        if rel > max_rel_error {
            max_rel_error = rel;
            max_rel_error_bits = p.bits;
        }
    }
    FitQualityReport {
        ratios,
        max_rel_error,
        max_rel_error_bits,
    }
}

// ---------------------------------------------------------------------------
// Pinned reference table
// ---------------------------------------------------------------------------

/// One row of the pinned distortion reference table: bit-width, reference
/// exact Lloyd-Max MSE, reference fitted value, and their ratio.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub bits: u32,
    pub exact: f64,
    pub fitted: f64,
    pub ratio: f64,
}

/// Published reference values for the unit-Gaussian Lloyd-Max distortion
/// table and its exponential fit. `validate` recomputes the table and reports
/// any entry that disagrees with these references at three significant
/// figures.
pub const LLOYD_MAX_REFERENCE: [ReferenceRow; 6] = [
    ReferenceRow { bits: 1, exact: 3.634e-1, fitted: 3.907e-1, ratio: 1.075 },
    ReferenceRow { bits: 2, exact: 1.175e-1, fitted: 1.124e-1, ratio: 0.956 },
    ReferenceRow { bits: 3, exact: 3.455e-2, fitted: 3.231e-2, ratio: 0.935 },
    ReferenceRow { bits: 4, exact: 9.501e-3, fitted: 9.290e-3, ratio: 0.978 },
    ReferenceRow { bits: 5, exact: 2.512e-3, fitted: 2.671e-3, ratio: 1.063 },
    ReferenceRow { bits: 6, exact: 7.647e-4, fitted: 7.681e-4, ratio: 1.004 },
];

/// True iff `value` matches `expected` at three significant figures: both
/// round to the same 3-digit mantissa, or they differ by at most half a unit
/// in the third significant digit of `expected`.
pub fn matches_3sf(value: f64, expected: f64) -> bool {
    if expected == 0.0 {
        return value == 0.0;
    }
    let ulp3 = 10f64.powi(expected.abs().log10().floor() as i32 - 2);
    if (value - expected).abs() <= 0.5 * ulp3 {
        return true;
    }
    round_sf(value, 3) == round_sf(expected, 3)
}

fn round_sf(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// On-disk distortion model record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistortionModelFile {
    /// Quantizer label the model was calibrated for.
    pub quantizer: String,
    /// "key" or "value".
    pub component: String,
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
    pub fit_bits: Vec<f64>,
}

impl DistortionModelFile {
    pub fn from_model(model: &DistortionModel, quantizer: &str, component: &str) -> Self {
        DistortionModelFile {
            quantizer: quantizer.to_string(),
            component: component.to_string(),
            alpha: model.alpha,
            beta: model.beta,
            r2: model.r_squared,
            fit_bits: model.fit_bits.clone(),
        }
    }

    pub fn to_model(&self) -> Result<DistortionModel> {
        let model = DistortionModel {
            alpha: self.alpha,
            beta: self.beta,
            r_squared: self.r2,
            fit_bits: self.fit_bits.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One row of the MSE points CSV (`quantizer,component,bits,mse`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseCsvRow {
    pub quantizer: String,
    pub component: String,
    pub bits: f64,
    pub mse: f64,
}

/// Write MSE rows with the pinned header.
pub fn write_mse_csv(path: &Path, rows: &[MseCsvRow], append: bool) -> Result<()> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file);
    for row in rows {
        writer.serialize(row).map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read all rows of an MSE points CSV.
pub fn read_mse_csv(path: &Path) -> Result<Vec<MseCsvRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::parse(path, e))?);
    }
    Ok(rows)
}

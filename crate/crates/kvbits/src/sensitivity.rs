//! Per-head sensitivity maps: ingestion, validation, synthesis and the
//! summary statistics that drive allocation and gain prediction.
//!
//! A map holds one positive importance weight per (layer, head) for keys and
//! values separately. How those weights were estimated is the producer's
//! business; this module only validates and consumes them.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss;

/// Per-(layer, head) positive importance weights for keys and values.
///
/// Serialized form is the sensitivity JSON interchange file: `model` is
/// informational free text, `weights_k`/`weights_v` are `num_layers` rows of
/// `num_kv_heads` numbers each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    /// Informational model name, not interpreted.
    #[serde(default)]
    pub model: String,
    pub num_layers: usize,
    pub num_kv_heads: usize,
    pub weights_k: Vec<Vec<f64>>,
    pub weights_v: Vec<Vec<f64>>,
    /// Provenance of the weights, e.g. "gradient", "activation", "synthetic".
    pub source_label: String,
}

impl SensitivityMap {
    /// Number of (layer, head) components per side.
    pub fn components_per_side(&self) -> usize {
        self.num_layers * self.num_kv_heads
    }

    /// Validate dimensions and positivity; errors name the offending entry.
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_kv_heads == 0 {
            return Err(Error::NonPositiveDims {
                layers: self.num_layers,
                heads: self.num_kv_heads,
            });
        }
        for (grid, name, side) in [
            (&self.weights_k, "weights_k", 'K'),
            (&self.weights_v, "weights_v", 'V'),
        ] {
            if grid.len() != self.num_layers {
                return Err(Error::GridShape {
                    grid: name,
                    layers: self.num_layers,
                    heads: self.num_kv_heads,
                    row: grid.len(),
                    found: 0,
                });
            }
            for (layer, row) in grid.iter().enumerate() {
                if row.len() != self.num_kv_heads {
                    return Err(Error::GridShape {
                        grid: name,
                        layers: self.num_layers,
                        heads: self.num_kv_heads,
                        row: layer,
                        found: row.len(),
                    });
                }
                for (head, &w) in row.iter().enumerate() {
                    if !(w.is_finite() && w > 0.0) {
                        return Err(Error::InvalidWeight {
                            layer,
                            head,
                            side,
                            value: w,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Key-side weights flattened layer-major.
    pub fn flat_k(&self) -> Vec<f64> {
        self.weights_k.iter().flatten().copied().collect()
    }

    /// Value-side weights flattened layer-major.
    pub fn flat_v(&self) -> Vec<f64> {
        self.weights_v.iter().flatten().copied().collect()
    }

    /// All 2N weights, key side first, each side layer-major.
    pub fn flat_all(&self) -> Vec<f64> {
        let mut all = self.flat_k();
        all.extend(self.flat_v());
        all
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: SensitivityMap =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Load and validate a sensitivity file.
pub fn load_sensitivity(path: &Path) -> Result<SensitivityMap> {
    SensitivityMap::load(path)
}

/// Draw a synthetic map with `ln w ~ Normal(mu, sigma^2)` i.i.d. per entry.
///
/// Deterministic: the generator is ChaCha8 keyed by `seed`, and each weight is
/// `exp(mu + sigma * z)` with `z` an inverse-CDF standard normal. Entries are
/// drawn key grid first, then value grid, both layer-major, so identical
/// inputs produce byte-identical maps.
pub fn synth_lognormal(
    num_layers: usize,
    num_kv_heads: usize,
    mu: f64,
    sigma: f64,
    seed: u64,
) -> Result<SensitivityMap> {
    if num_layers == 0 || num_kv_heads == 0 {
        return Err(Error::NonPositiveDims {
            layers: num_layers,
            heads: num_kv_heads,
        });
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_grid = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..num_layers)
            .map(|_| {
                (0..num_kv_heads)
                    .map(|_| (mu + sigma * gauss::standard_normal(rng)).exp())
                    .collect()
            })
            .collect()
    };
    let weights_k = draw_grid(&mut rng);
    let weights_v = draw_grid(&mut rng);
    let map = SensitivityMap {
        model: String::new(),
        num_layers,
        num_kv_heads,
        weights_k,
        weights_v,
        source_label: "synthetic".to_string(),
    };
    map.validate()?;
    Ok(map)
}

/// Arithmetic mean, geometric mean and log-standard-deviation of a weight
/// list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityStats {
    pub arithmetic_mean: f64,
    pub geometric_mean: f64,
    /// Population standard deviation of `ln w` (zero iff all weights equal).
    pub log_std: f64,
    pub count: usize,
}

/// Compute summary statistics over positive weights.
///
/// The geometric mean is `exp(mean(ln w))` rather than an explicit product
/// root, so several hundred components cannot overflow or underflow.
pub fn stats(weights: &[f64]) -> Result<SensitivityStats> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("stats over an empty weight list"));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::InvalidWeight {
                layer: 0,
                head: i,
                side: '?',
                value: w,
            });
        }
    }
    let n = weights.len() as f64;
    let arithmetic_mean = weights.iter().sum::<f64>() / n;
    let mean_ln = weights.iter().map(|w| w.ln()).sum::<f64>() / n;
    let var_ln = weights
        .iter()
        .map(|w| {
            let d = w.ln() - mean_ln;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(SensitivityStats {
        arithmetic_mean,
        geometric_mean: mean_ln.exp(),
        log_std: var_ln.sqrt(),
        count: weights.len(),
    })
}

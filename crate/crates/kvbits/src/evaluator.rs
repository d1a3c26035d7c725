//! End-to-end synthetic validation: run real quantizers at an allocated bit
//! table over seeded per-head Gaussian data, measure the realized weighted
//! distortion, and compare against the uniform baseline and the predicted
//! gain ratio. Also hosts the exhaustive integer-optimum oracle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::{Allocation, AllocationProblem, BitAssignment, KvAllocation};
use crate::error::{Error, Result};
use crate::quantizers::{quantize_dequantize, QuantizerSpec, TensorBlock};
use crate::sensitivity::SensitivityMap;

/// Per-head realized MSE grids at the allocated bit-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerHeadMse {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Outcome of one synthetic evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Weighted distortion under the uniform baseline at the same average
    /// bits on the same data.
    pub j_uniform: f64,
    /// Weighted distortion under the supplied allocation.
    pub j_allocated: f64,
    /// `j_uniform / j_allocated`.
    pub realized_ratio: f64,
    /// AM/GM of the sensitivities, the a-priori prediction.
    pub predicted_ratio: f64,
    pub per_head_mse: PerHeadMse,
    pub seed: u64,
    /// Full input record of the producing run.
    pub config_echo: serde_json::Value,
}

impl SimulationReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Per-head MSE rows as `layer,head,side,bits,mse` CSV.
    pub fn save_per_head_csv(&self, path: &Path, alloc: &KvAllocation) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
        writer
            .write_record(["layer", "head", "side", "bits", "mse"])
            .map_err(|e| Error::parse(path, e))?;
        for (side, grid, bits) in [
            ("K", &self.per_head_mse.k, &alloc.bits_k),
            ("V", &self.per_head_mse.v, &alloc.bits_v),
        ] {
            for (l, row) in grid.iter().enumerate() {
                for (h, &mse) in row.iter().enumerate() {
                    writer
                        .write_record([
                            l.to_string(),
                            h.to_string(),
                            side.to_string(),
                            bits[l][h].to_string(),
                            format!("{mse:.9e}"),
                        ])
                        .map_err(|e| Error::parse(path, e))?;
                }
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Uniform-baseline integer bits at the same total budget: components in id
/// order receive `ceil(avg)` until the remainder is spent, the rest get
/// `floor(avg)`. Real quantizers cannot run at fractional bit-widths, so a
/// fractional average is realized by this mix.
fn uniform_integer_bits(total_bits: i64, count: usize) -> Vec<u32> {
    let floor = (total_bits / count as i64) as u32;
    let extra = (total_bits - floor as i64 * count as i64) as usize;
    (0..count)
        .map(|i| if i < extra { floor + 1 } else { floor })
        .collect()
}

/// Per-head data seed: independent streams per (layer, head, side),
/// scheduling-invariant.
fn head_seed(master: u64, layer: usize, heads: usize, head: usize, side: usize) -> u64 {
    master
        .wrapping_add(((layer * heads + head) * 2) as u64)
        .wrapping_add(side as u64)
}

/// Quantize seeded unit-Gaussian blocks per (layer, head, side) at the
/// allocated bits, accumulate the weighted objective, and evaluate the
/// uniform baseline on the identical data.
///
/// Deterministic: per-head streams derive from `seed` alone and accumulation
/// runs in id order.
pub fn simulate(
    sens: &SensitivityMap,
    spec_k: &QuantizerSpec,
    spec_v: &QuantizerSpec,
    alloc: &KvAllocation,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<SimulationReport> {
    sens.validate()?;
    let layers = sens.num_layers;
    let heads = sens.num_kv_heads;
    if alloc.bits_k.len() != layers
        || alloc.bits_v.len() != layers
        || alloc.bits_k.iter().any(|r| r.len() != heads)
        || alloc.bits_v.iter().any(|r| r.len() != heads)
    {
        return Err(Error::DimensionMismatch(format!(
            "allocation grids do not match sensitivity dims {layers}x{heads}"
        )));
    }

    let total_bits: i64 = alloc
        .bits_k
        .iter()
        .chain(alloc.bits_v.iter())
        .flatten()
        .map(|&b| b as i64)
        .sum();
    let uniform = uniform_integer_bits(total_bits, 2 * layers * heads);

    let mut j_uniform = 0.0;
    let mut j_allocated = 0.0;
    let mut mse_k = vec![vec![0.0; heads]; layers];
    let mut mse_v = vec![vec![0.0; heads]; layers];

    for (side_idx, spec, grid_bits, weights, mse_grid) in [
        (0usize, spec_k, &alloc.bits_k, &sens.weights_k, &mut mse_k),
        (1usize, spec_v, &alloc.bits_v, &sens.weights_v, &mut mse_v),
    ] {
        for layer in 0..layers {
            for head in 0..heads {
                let data_seed = head_seed(seed, layer, heads, head, side_idx);
                let block = TensorBlock::standard_gaussian(rows, cols, data_seed);
                let w = weights[layer][head];

                let recon = quantize_dequantize(&block, spec, grid_bits[layer][head])?;
                let mse_alloc = block.mse_against(&recon)?;
                mse_grid[layer][head] = mse_alloc;
                j_allocated += w * mse_alloc;

                let flat = side_idx * layers * heads + layer * heads + head;
                let ub = uniform[flat];
                let mse_unif = if ub == grid_bits[layer][head] {
                    mse_alloc
                } else {
                    let recon_u = quantize_dequantize(&block, spec, ub)?;
                    block.mse_against(&recon_u)?
                };
                j_uniform += w * mse_unif;
            }
        }
    }

    let predicted_ratio = crate::allocator::predict_gain(&sens.flat_all())?;

    Ok(SimulationReport {
        j_uniform,
        j_allocated,
        realized_ratio: j_uniform / j_allocated,
        predicted_ratio,
        per_head_mse: PerHeadMse { k: mse_k, v: mse_v },
        seed,
        config_echo: serde_json::json!({
            "rows": rows,
            "cols": cols,
            "seed": seed,
            "quantizer_k": spec_k.label,
            "quantizer_v": spec_v.label,
            "avg_bits": alloc.avg_bits,
            "budget": alloc.budget,
        }),
    })
}

/// Exhaustive search over feasible integer allocations. Verification oracle
/// for the greedy solver; guarded against oversized instances.
pub fn brute_force_integer_optimum(problem: &AllocationProblem) -> Result<Allocation> {
    let n = problem.len();
    let span = (problem.b_max - problem.b_min + 1) as u64;
    let states = (span as f64).powi(n as i32);
    if n > 8 || states > 1e7 {
        return Err(Error::TooLargeForExhaustion(format!(
            "{n} components with {span} levels each ({states:.0} states)"
        )));
    }

    let mut best_bits: Option<Vec<u32>> = None;
    let mut best_objective = f64::INFINITY;
    let mut choice = vec![problem.b_min; n];

    // Depth-first over bit choices with budget pruning. The first minimizer
    // found in id-major, ascending-bit order is kept on exact ties.
    fn dfs(
        problem: &AllocationProblem,
        idx: usize,
        remaining: i64,
        partial: f64,
        choice: &mut Vec<u32>,
        best_objective: &mut f64,
        best_bits: &mut Option<Vec<u32>>,
    ) {
        let n = problem.len();
        if idx == n {
            if remaining == 0 && partial < *best_objective {
                *best_objective = partial;
                *best_bits = Some(choice.clone());
            }
            return;
        }
        let left = (n - idx - 1) as i64;
        for b in problem.b_min..=problem.b_max {
            let after = remaining - b as i64;
            if after < left * problem.b_min as i64 || after > left * problem.b_max as i64 {
                continue;
            }
            let c = &problem.components[idx];
            choice[idx] = b;
            dfs(
                problem,
                idx + 1,
                after,
                partial + c.weight * c.model.eval(b as f64),
                choice,
                best_objective,
                best_bits,
            );
        }
    }
    dfs(
        problem,
        0,
        problem.budget,
        0.0,
        &mut choice,
        &mut best_objective,
        &mut best_bits,
    );

    let bits = best_bits.expect("feasible problem has at least one assignment");
    // Recompute the objective in id order so it is bit-identical to the
    // greedy evaluation of the same vector.
    let objective = problem.objective(&bits.iter().map(|&b| b as f64).collect::<Vec<_>>());
    Ok(Allocation {
        assignment: BitAssignment::Integer(bits),
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{
        allocate_kv_separate, greedy_allocate, Component, ComponentId,
    };
    use crate::distortion::{fit_exponential, lloyd_max_mse, DistortionModel, MsePoint};
    use crate::quantizers::Scheme;
    use crate::sensitivity::synth_lognormal;

    fn lloyd_fit_model() -> DistortionModel {
        let points: Vec<MsePoint> = (2..=6)
            .map(|b| MsePoint {
                bits: b as f64,
                mse: lloyd_max_mse(b).unwrap(),
            })
            .collect();
        fit_exponential(&points).unwrap()
    }

    #[test]
    fn uniform_bits_mixing_hits_exact_total() {
        let bits = uniform_integer_bits(10, 4);
        assert_eq!(bits, vec![3, 3, 2, 2]);
        assert_eq!(bits.iter().map(|&b| b as i64).sum::<i64>(), 10);
        let bits = uniform_integer_bits(12, 4);
        assert_eq!(bits, vec![3; 4]);
    }

    #[test]
    fn equal_weights_uniform_allocation_gives_unit_ratio() {
        let sens = synth_lognormal(2, 4, 0.0, 0.0, 3).unwrap();
        let model = lloyd_fit_model();
        let kv = allocate_kv_separate(&sens, &model, &model, 4.0, 2, 8).unwrap();
        let spec = QuantizerSpec::new(Scheme::LloydMaxGaussian, 0);
        let report = simulate(&sens, &spec, &spec, &kv, 64, 64, 42).unwrap();
        assert_eq!(report.realized_ratio, 1.0);
        assert_eq!(report.j_uniform, report.j_allocated);
        assert!((report.predicted_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulate_is_deterministic() {
        let sens = synth_lognormal(2, 2, 0.0, 0.5, 9).unwrap();
        let model = lloyd_fit_model();
        let kv = allocate_kv_separate(&sens, &model, &model, 3.0, 2, 6).unwrap();
        let spec = QuantizerSpec::new(Scheme::LloydMaxGaussian, 0);
        let a = simulate(&sens, &spec, &spec, &kv, 32, 32, 7).unwrap();
        let b = simulate(&sens, &spec, &spec, &kv, 32, 32, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn per_head_mse_tracks_lloyd_oracle() {
        let sens = synth_lognormal(1, 2, 0.0, 0.3, 5).unwrap();
        let model = lloyd_fit_model();
        let kv = allocate_kv_separate(&sens, &model, &model, 4.0, 2, 8).unwrap();
        let spec = QuantizerSpec::new(Scheme::LloydMaxGaussian, 0);
        // 2^18 elements per head
        let report = simulate(&sens, &spec, &spec, &kv, 2048, 128, 42).unwrap();
        for (l, row) in report.per_head_mse.k.iter().enumerate() {
            for (h, &mse) in row.iter().enumerate() {
                let oracle = lloyd_max_mse(kv.bits_k[l][h]).unwrap();
                assert!(
                    (mse - oracle).abs() / oracle < 0.03,
                    "({l},{h}): {mse} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn mismatched_model_never_beats_matched() {
        let sens = synth_lognormal(4, 4, 0.0, 0.8, 11).unwrap();
        let matched = lloyd_fit_model();
        // A far steeper decay, as calibrated for a different scheme family.
        let mismatched = DistortionModel::from_params(18.0, 5.1).unwrap();
        let spec = QuantizerSpec::new(Scheme::LloydMaxGaussian, 0);
        let kv_m = allocate_kv_separate(&sens, &matched, &matched, 4.0, 2, 8).unwrap();
        let kv_x = allocate_kv_separate(&sens, &mismatched, &mismatched, 4.0, 2, 8).unwrap();
        let rep_m = simulate(&sens, &spec, &spec, &kv_m, 256, 128, 42).unwrap();
        let rep_x = simulate(&sens, &spec, &spec, &kv_x, 256, 128, 42).unwrap();
        assert!(
            rep_x.j_allocated >= rep_m.j_allocated,
            "mismatched {} < matched {}",
            rep_x.j_allocated,
            rep_m.j_allocated
        );
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let sens = synth_lognormal(2, 2, 0.0, 0.5, 9).unwrap();
        let other = synth_lognormal(3, 2, 0.0, 0.5, 9).unwrap();
        let model = lloyd_fit_model();
        let kv = allocate_kv_separate(&other, &model, &model, 3.0, 2, 6).unwrap();
        let spec = QuantizerSpec::new(Scheme::LloydMaxGaussian, 0);
        assert!(matches!(
            simulate(&sens, &spec, &spec, &kv, 16, 16, 1),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn brute_force_n1_takes_clipped_budget() {
        let model = DistortionModel::from_params(1.0, 2.0).unwrap();
        let p = AllocationProblem::new(
            vec![Component {
                id: ComponentId::flat(0),
                weight: 1.0,
                model,
            }],
            6,
            1,
            8,
        )
        .unwrap();
        let a = brute_force_integer_optimum(&p).unwrap();
        assert_eq!(a.integer_bits().unwrap(), &[6]);
    }

    #[test]
    fn brute_force_confirms_hand_instance() {
        let model = DistortionModel::from_params(1.0, 2.0).unwrap();
        let components = [8.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &w)| Component {
                id: ComponentId::flat(i),
                weight: w,
                model: model.clone(),
            })
            .collect();
        let p = AllocationProblem::new(components, 5, 1, 4).unwrap();
        let b = brute_force_integer_optimum(&p).unwrap();
        assert_eq!(b.integer_bits().unwrap(), &[4, 1]);
        let g = greedy_allocate(&p).unwrap();
        assert_eq!(g.objective, b.objective);
    }

    #[test]
    fn brute_force_guards_large_instances() {
        let model = DistortionModel::from_params(1.0, 2.0).unwrap();
        let components: Vec<Component> = (0..9)
            .map(|i| Component {
                id: ComponentId::flat(i),
                weight: 1.0,
                model: model.clone(),
            })
            .collect();
        let p = AllocationProblem::new(components, 36, 1, 8).unwrap();
        assert!(matches!(
            brute_force_integer_optimum(&p),
            Err(Error::TooLargeForExhaustion(_))
        ));
    }

    #[test]
    fn floor_fraction_monotone_in_budget() {
        use crate::allocator::{continuous_allocate, floor_fraction};
        let sens = synth_lognormal(4, 8, 0.0, 0.8, 21).unwrap();
        let model = DistortionModel::from_params(1.36, 3.48).unwrap();
        let weights = sens.flat_k();
        let components: Vec<Component> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| Component {
                id: ComponentId::flat(i),
                weight: w,
                model: model.clone(),
            })
            .collect();
        let n = components.len() as i64;
        let mut prev_fraction = 1.0;
        for budget in (2 * n..=5 * n).step_by(8) {
            let p = AllocationProblem::new(components.clone(), budget, 2, 8).unwrap();
            let a = continuous_allocate(&p).unwrap();
            let frac = floor_fraction(&a, 2);
            assert!(
                frac <= prev_fraction + 1e-12,
                "budget {budget}: {frac} > {prev_fraction}"
            );
            prev_fraction = frac;
        }
    }
}

//! Bit-allocation solvers: continuous reverse waterfilling with bound
//! handling, optimal greedy integer allocation, joint 2N-component key/value
//! allocation, gain prediction and marginal-gain diagnostics.
//!
//! The objective throughout is the weighted distortion
//! `J(b) = sum_i w_i * alpha_i * beta_i^(-b_i)` subject to a total bit budget
//! and per-component bounds. For a shared model with inactive bounds the
//! continuous optimum is `b_i = b_mean + (ln w_i - mean(ln w)) / ln beta`; the
//! general case is solved by bisection on the water level followed by a
//! fix-and-repeat pass over bound-pinned components.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distortion::DistortionModel;
use crate::error::{Error, Result};
use crate::sensitivity::{stats, SensitivityMap};

/// Which cache a component belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Key,
    Value,
}

impl Side {
    pub fn letter(&self) -> char {
        match self {
            Side::Key => 'K',
            Side::Value => 'V',
        }
    }
}

/// Stable identifier of one allocation component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub head: usize,
    pub side: Side,
}

impl ComponentId {
    pub fn new(layer: usize, head: usize, side: Side) -> Self {
        ComponentId { layer, head, side }
    }

    /// Convenience id for ad-hoc problems: head index only.
    pub fn flat(index: usize) -> Self {
        ComponentId {
            layer: 0,
            head: index,
            side: Side::Key,
        }
    }
}

/// One quantization group: sensitivity weight plus its distortion model.
#[derive(Debug, Clone)]
pub struct Component {
    pub id: ComponentId,
    pub weight: f64,
    pub model: DistortionModel,
}

impl Component {
    /// Marginal weighted distortion reduction rate at continuous level `b`:
    /// `w * alpha * ln(beta) * beta^(-b)`.
    #[inline]
    fn marginal_rate(&self, bits: f64) -> f64 {
        self.weight * self.model.alpha * self.model.beta.ln() * self.model.beta.powf(-bits)
    }

    /// Gain of granting one whole bit from integer level `b`.
    #[inline]
    fn one_bit_gain(&self, bits: u32) -> f64 {
        self.weight * self.model.one_bit_gain(bits as f64)
    }
}

/// A feasible bit-allocation instance.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    pub components: Vec<Component>,
    /// Total bit budget, in whole bits.
    pub budget: i64,
    pub b_min: u32,
    pub b_max: u32,
}

impl AllocationProblem {
    pub fn new(components: Vec<Component>, budget: i64, b_min: u32, b_max: u32) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("allocation over zero components"));
        }
        if b_min < 1 || b_min > b_max || b_max > 8 {
            return Err(Error::InvalidBounds { b_min, b_max });
        }
        for c in &components {
            c.model.validate()?;
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::InvalidWeight {
                    layer: c.id.layer,
                    head: c.id.head,
                    side: c.id.side.letter(),
                    value: c.weight,
                });
            }
        }
        let n = components.len();
        let lo = n as i64 * b_min as i64;
        let hi = n as i64 * b_max as i64;
        if budget < lo || budget > hi {
            return Err(Error::InfeasibleBudget {
                budget,
                n,
                b_min,
                b_max,
                lo,
                hi,
            });
        }
        Ok(AllocationProblem {
            components,
            budget,
            b_min,
            b_max,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Average bits per component, `budget / N`.
    pub fn avg_bits(&self) -> f64 {
        self.budget as f64 / self.len() as f64
    }

    /// Weighted distortion of an arbitrary bit vector.
    pub fn objective(&self, bits: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(bits)
            .map(|(c, &b)| c.weight * c.model.eval(b))
            .sum()
    }
}

/// Solver output: per-component bit-widths plus the achieved objective.
#[derive(Debug, Clone, PartialEq)]
pub enum BitAssignment {
    Continuous(Vec<f64>),
    Integer(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub assignment: BitAssignment,
    pub objective: f64,
}

impl Allocation {
    pub fn len(&self) -> usize {
        match &self.assignment {
            BitAssignment::Continuous(v) => v.len(),
            BitAssignment::Integer(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bits as floats regardless of mode.
    pub fn bits_f64(&self) -> Vec<f64> {
        match &self.assignment {
            BitAssignment::Continuous(v) => v.clone(),
            BitAssignment::Integer(v) => v.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn integer_bits(&self) -> Option<&[u32]> {
        match &self.assignment {
            BitAssignment::Integer(v) => Some(v),
            BitAssignment::Continuous(_) => None,
        }
    }
}

/// Budget rounding used when converting an average bit target to a whole-bit
/// budget: round half to even.
pub fn round_budget(avg_bits: f64, components: usize) -> i64 {
    (avg_bits * components as f64).round_ties_even() as i64
}

// ---------------------------------------------------------------------------
// Continuous reverse waterfilling
// ---------------------------------------------------------------------------

const BUDGET_TOL: f64 = 1e-9;
const BISECT_MAX_ITERS: usize = 200;

/// Fields are public, so re-verify feasibility at solve time.
fn check_feasible(problem: &AllocationProblem) -> Result<()> {
    let n = problem.len();
    let lo = n as i64 * problem.b_min as i64;
    let hi = n as i64 * problem.b_max as i64;
    if problem.b_min < 1 || problem.b_min > problem.b_max || problem.b_max > 8 {
        return Err(Error::InvalidBounds {
            b_min: problem.b_min,
            b_max: problem.b_max,
        });
    }
    if problem.budget < lo || problem.budget > hi {
        return Err(Error::InfeasibleBudget {
            budget: problem.budget,
            n,
            b_min: problem.b_min,
            b_max: problem.b_max,
            lo,
            hi,
        });
    }
    Ok(())
}

/// Solve the continuous problem by reverse waterfilling.
///
/// Every free component sits at `b_i(lambda) = [ln(w_i a_i ln b_i) - ln
/// lambda] / ln beta_i` clipped to the bounds; `lambda` is found by bisection
/// over `[min_i rate_i(b_max), max_i rate_i(b_min)]`, then a fix-and-repeat
/// pass pins bound components and re-solves the free set in closed form until
/// the pinned set is stable. Reduces exactly to the shared-model closed form
/// when every component has the same model and no bound binds.
pub fn continuous_allocate(problem: &AllocationProblem) -> Result<Allocation> {
    let n = problem.len();
    check_feasible(problem)?;
    let b_min = problem.b_min as f64;
    let b_max = problem.b_max as f64;
    let budget = problem.budget as f64;

    if problem.b_min == problem.b_max {
        let bits = vec![b_min; n];
        let objective = problem.objective(&bits);
        return Ok(Allocation {
            assignment: BitAssignment::Continuous(bits),
            objective,
        });
    }

    // ln of each component's marginal rate at b = 0.
    let base: Vec<f64> = problem
        .components
        .iter()
        .map(|c| (c.weight * c.model.alpha * c.model.beta.ln()).ln())
        .collect();
    let ln_beta: Vec<f64> = problem
        .components
        .iter()
        .map(|c| c.model.beta.ln())
        .collect();

    let bits_at = |ln_lambda: f64| -> Vec<f64> {
        base.iter()
            .zip(&ln_beta)
            .map(|(&m0, &lb)| ((m0 - ln_lambda) / lb).clamp(b_min, b_max))
            .collect()
    };

    // Bracket the water level: at lambda_hi everything clips to b_min, at
    // lambda_lo everything clips to b_max.
    let ln_lambda_hi = base
        .iter()
        .zip(&ln_beta)
        .map(|(&m0, &lb)| m0 - b_min * lb)
        .fold(f64::NEG_INFINITY, f64::max);
    let ln_lambda_lo = base
        .iter()
        .zip(&ln_beta)
        .map(|(&m0, &lb)| m0 - b_max * lb)
        .fold(f64::INFINITY, f64::min);

    let mut lo = ln_lambda_lo;
    let mut hi = ln_lambda_hi;
    let mut bits = bits_at(lo);
    for _ in 0..BISECT_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        bits = bits_at(mid);
        let sum: f64 = bits.iter().sum();
        if (sum - budget).abs() < BUDGET_TOL {
            break;
        }
        if sum > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // Fix-and-repeat: pin components resting on a bound, re-solve the free
    // set exactly, and re-examine the pinned set. Terminates because the
    // classification stabilizes; capped defensively with the bisection
    // solution as fallback.
    let pin_tol = 1e-9;
    let mut at_lo: Vec<bool> = bits.iter().map(|&b| b <= b_min + pin_tol).collect();
    let mut at_hi: Vec<bool> = bits.iter().map(|&b| b >= b_max - pin_tol).collect();
    let mut refined = bits.clone();
    let mut stable = false;

    for _ in 0..(2 * n + 2) {
        let mut pinned_budget = 0.0;
        let mut inv_sum = 0.0;
        let mut weighted_base = 0.0;
        for i in 0..n {
            if at_lo[i] {
                pinned_budget += b_min;
            } else if at_hi[i] {
                pinned_budget += b_max;
            } else {
                inv_sum += 1.0 / ln_beta[i];
                weighted_base += base[i] / ln_beta[i];
            }
        }

        if inv_sum == 0.0 {
            // Everything pinned; valid only if the pinned budget matches.
            if (pinned_budget - budget).abs() < 0.5 {
                for i in 0..n {
                    refined[i] = if at_lo[i] { b_min } else { b_max };
                }
                stable = true;
            }
            break;
        }

        let ln_lambda = (weighted_base - (budget - pinned_budget)) / inv_sum;
        let mut changed = false;
        for i in 0..n {
            if at_lo[i] || at_hi[i] {
                continue;
            }
            let b = (base[i] - ln_lambda) / ln_beta[i];
            if b < b_min {
                at_lo[i] = true;
                changed = true;
            } else if b > b_max {
                at_hi[i] = true;
                changed = true;
            } else {
                refined[i] = b;
            }
        }
        if changed {
            continue;
        }
        // Complementary slackness: a pinned component stays pinned only if
        // the water level does not want it back inside the box.
        for i in 0..n {
            if at_lo[i] {
                refined[i] = b_min;
                if base[i] - b_min * ln_beta[i] > ln_lambda + 1e-12 {
                    at_lo[i] = false;
                    changed = true;
                }
            } else if at_hi[i] {
                refined[i] = b_max;
                if base[i] - b_max * ln_beta[i] < ln_lambda - 1e-12 {
                    at_hi[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            stable = true;
            break;
        }
    }

    let final_bits = if stable { refined } else { bits };
    let objective = problem.objective(&final_bits);
    Ok(Allocation {
        assignment: BitAssignment::Continuous(final_bits),
        objective,
    })
}

// ---------------------------------------------------------------------------
// Greedy integer allocation
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct HeapEntry {
    gain: f64,
    index: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.gain == other.gain && self.index == other.index
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on gain; exact ties go to the lowest component index so
        // runs are bit-reproducible.
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| Reverse(self.index).cmp(&Reverse(other.index)))
    }
}

/// Optimal integer allocation by greedy marginal gain.
///
/// Starts every component at `b_min` and repeatedly grants one bit to the
/// component with the largest `w_i * [D_i(b_i) - D_i(b_i + 1)]` among those
/// below `b_max`. With convex decaying models the grant gains are decreasing
/// per component, so the greedy schedule is optimal among integer
/// allocations. `O(R log N)` for `R` granted bits.
pub fn greedy_allocate(problem: &AllocationProblem) -> Result<Allocation> {
    let n = problem.len();
    check_feasible(problem)?;
    let mut bits = vec![problem.b_min; n];
    let mut remaining = problem.budget - n as i64 * problem.b_min as i64;

    let mut heap: BinaryHeap<HeapEntry> = problem
        .components
        .iter()
        .enumerate()
        .filter(|_| problem.b_min < problem.b_max)
        .map(|(i, c)| HeapEntry {
            gain: c.one_bit_gain(problem.b_min),
            index: i,
        })
        .collect();

    while remaining > 0 {
        let top = heap.pop().expect("feasible budget leaves grantable bits");
        let i = top.index;
        bits[i] += 1;
        remaining -= 1;
        if bits[i] < problem.b_max {
            heap.push(HeapEntry {
                gain: problem.components[i].one_bit_gain(bits[i]),
                index: i,
            });
        }
    }

    let objective = problem.objective(&bits.iter().map(|&b| b as f64).collect::<Vec<_>>());
    Ok(Allocation {
        assignment: BitAssignment::Integer(bits),
        objective,
    })
}

/// Marginal one-bit gains at the given levels, sorted descending, exact ties
/// by lowest component index. Components already at `b_max` are excluded.
pub fn marginal_gain_table(
    components: &[Component],
    bit_levels: &[u32],
    b_max: u32,
) -> Vec<(ComponentId, f64)> {
    let mut table: Vec<(usize, ComponentId, f64)> = components
        .iter()
        .zip(bit_levels)
        .enumerate()
        .filter(|(_, (_, &b))| b < b_max)
        .map(|(i, (c, &b))| (i, c.id, c.one_bit_gain(b)))
        .collect();
    table.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    table.into_iter().map(|(_, id, g)| (id, g)).collect()
}

// ---------------------------------------------------------------------------
// Gain prediction and realization
// ---------------------------------------------------------------------------

/// Predicted optimal-over-uniform distortion ratio: arithmetic over geometric
/// mean of the weights. Computable before any quantization happens.
pub fn predict_gain(weights: &[f64]) -> Result<f64> {
    let s = stats(weights)?;
    Ok(s.arithmetic_mean / s.geometric_mean)
}

/// Ratio of the uniform objective to the continuous optimum.
///
/// The uniform baseline is evaluated at the continuous average `budget / N`
/// (the objective is defined for real bit-widths), so budgets that do not
/// divide evenly are handled without a mixing convention.
pub fn realized_gain(problem: &AllocationProblem) -> Result<f64> {
    let avg = problem.avg_bits();
    let uniform: f64 = problem
        .components
        .iter()
        .map(|c| c.weight * c.model.eval(avg))
        .sum();
    let optimal = continuous_allocate(problem)?.objective;
    Ok(uniform / optimal)
}

/// Fraction of components resting exactly at `b_min`.
pub fn floor_fraction(allocation: &Allocation, b_min: u32) -> f64 {
    let bits = allocation.bits_f64();
    if bits.is_empty() {
        return 0.0;
    }
    let at_floor = bits
        .iter()
        .filter(|&&b| (b - b_min as f64).abs() <= 1e-9)
        .count();
    at_floor as f64 / bits.len() as f64
}

// ---------------------------------------------------------------------------
// KKT diagnostics
// ---------------------------------------------------------------------------

/// Stationarity and slackness diagnostics for a continuous allocation.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Water level estimate: mean marginal rate over free components.
    pub water_level: Option<f64>,
    /// Largest relative deviation of a free component's marginal rate from
    /// the water level.
    pub max_free_spread: f64,
    /// Largest relative excess of a floor-pinned component's rate above the
    /// water level (should be <= 0 up to tolerance).
    pub worst_floor_violation: f64,
    /// Largest relative shortfall of a ceiling-pinned component's rate below
    /// the water level (should be <= 0 up to tolerance).
    pub worst_ceiling_violation: f64,
    /// `sum(bits) - budget`.
    pub budget_residual: f64,
    pub num_free: usize,
    pub num_at_floor: usize,
    pub num_at_ceiling: usize,
}

/// Evaluate the KKT conditions of a continuous allocation.
pub fn kkt_report(problem: &AllocationProblem, allocation: &Allocation) -> KktReport {
    let bits = allocation.bits_f64();
    let b_min = problem.b_min as f64;
    let b_max = problem.b_max as f64;
    let tol = 1e-9;

    let mut free_rates = Vec::new();
    let mut floor_rates = Vec::new();
    let mut ceiling_rates = Vec::new();
    for (c, &b) in problem.components.iter().zip(&bits) {
        let rate = c.marginal_rate(b);
        if b <= b_min + tol {
            floor_rates.push(c.marginal_rate(b_min));
        } else if b >= b_max - tol {
            ceiling_rates.push(c.marginal_rate(b_max));
        } else {
            free_rates.push(rate);
        }
    }

    let water_level = if free_rates.is_empty() {
        None
    } else {
        Some(free_rates.iter().sum::<f64>() / free_rates.len() as f64)
    };

    let max_free_spread = water_level
        .map(|lambda| {
            free_rates
                .iter()
                .map(|r| (r - lambda).abs() / lambda)
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);

    // Floor-pinned components must not want more bits than the water level
    // grants: rate(b_min) <= lambda. Ceiling-pinned must still be hungry:
    // rate(b_max) >= lambda. Without free components, use the feasible band.
    let lambda_for_bounds = water_level.unwrap_or_else(|| {
        let hi = floor_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ceiling_rates.iter().copied().fold(f64::INFINITY, f64::min);
        match (hi.is_finite(), lo.is_finite()) {
            (true, true) => 0.5 * (hi + lo),
            (true, false) => hi,
            (false, true) => lo,
            (false, false) => 1.0,
        }
    });

    let worst_floor_violation = floor_rates
        .iter()
        .map(|r| (r - lambda_for_bounds) / lambda_for_bounds)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(f64::NEG_INFINITY);
    let worst_ceiling_violation = ceiling_rates
        .iter()
        .map(|r| (lambda_for_bounds - r) / lambda_for_bounds)
        .fold(f64::NEG_INFINITY, f64::max);

    KktReport {
        water_level,
        max_free_spread,
        worst_floor_violation: if floor_rates.is_empty() {
            f64::NEG_INFINITY
        } else {
            worst_floor_violation
        },
        worst_ceiling_violation: if ceiling_rates.is_empty() {
            f64::NEG_INFINITY
        } else {
            worst_ceiling_violation
        },
        budget_residual: bits.iter().sum::<f64>() - problem.budget as f64,
        num_free: free_rates.len(),
        num_at_floor: floor_rates.len(),
        num_at_ceiling: ceiling_rates.len(),
    }
}

// ---------------------------------------------------------------------------
// Key/value allocation over 2N components
// ---------------------------------------------------------------------------

/// Allocation mode: one shared per-head bit-width for both caches, or
/// independent key and value components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    Joint,
    Separate,
}

/// A solved per-head lookup table for both caches.
#[derive(Debug, Clone)]
pub struct KvAllocation {
    pub mode: KvMode,
    pub avg_bits: f64,
    pub budget: i64,
    pub b_min: u32,
    pub b_max: u32,
    pub bits_k: Vec<Vec<u32>>,
    pub bits_v: Vec<Vec<u32>>,
    pub mean_bits_k: f64,
    pub mean_bits_v: f64,
    pub objective: f64,
    pub predicted_gain_ratio: f64,
    /// The underlying flat problem, key components first (layer-major), then
    /// value components in separate mode.
    pub problem: AllocationProblem,
    pub allocation: Allocation,
}

fn grid_mean(grid: &[Vec<u32>]) -> f64 {
    let (sum, count) = grid.iter().flatten().fold((0u64, 0u64), |(s, c), &b| {
        (s + b as u64, c + 1)
    });
    sum as f64 / count as f64
}

fn to_grid(flat: &[u32], layers: usize, heads: usize) -> Vec<Vec<u32>> {
    (0..layers)
        .map(|l| flat[l * heads..(l + 1) * heads].to_vec())
        .collect()
}

/// Allocate with independent key and value components (2N in total).
///
/// The budget is `round_ties_even(avg_bits * 2N)`; components are ordered key
/// side first, each side layer-major, and solved by [`greedy_allocate`].
pub fn allocate_kv_separate(
    sens: &SensitivityMap,
    model_k: &DistortionModel,
    model_v: &DistortionModel,
    avg_bits: f64,
    b_min: u32,
    b_max: u32,
) -> Result<KvAllocation> {
    sens.validate()?;
    let layers = sens.num_layers;
    let heads = sens.num_kv_heads;
    let mut components = Vec::with_capacity(2 * layers * heads);
    for (side, grid, model) in [
        (Side::Key, &sens.weights_k, model_k),
        (Side::Value, &sens.weights_v, model_v),
    ] {
        for (l, row) in grid.iter().enumerate() {
            for (h, &w) in row.iter().enumerate() {
                components.push(Component {
                    id: ComponentId::new(l, h, side),
                    weight: w,
                    model: model.clone(),
                });
            }
        }
    }
    let budget = round_budget(avg_bits, components.len());
    let problem = AllocationProblem::new(components, budget, b_min, b_max)?;
    let allocation = greedy_allocate(&problem)?;
    let flat = allocation.integer_bits().expect("greedy is integer");
    let n = layers * heads;
    let bits_k = to_grid(&flat[..n], layers, heads);
    let bits_v = to_grid(&flat[n..], layers, heads);
    let predicted = predict_gain(&sens.flat_all())?;

    Ok(KvAllocation {
        mode: KvMode::Separate,
        avg_bits,
        budget,
        b_min,
        b_max,
        mean_bits_k: grid_mean(&bits_k),
        mean_bits_v: grid_mean(&bits_v),
        bits_k,
        bits_v,
        objective: allocation.objective,
        predicted_gain_ratio: predicted,
        problem,
        allocation,
    })
}

/// Allocate one shared per-head bit-width covering both caches.
///
/// Each head is a single component with weight `w_K + w_V`; the budget is
/// `round_ties_even(avg_bits * N)` and the resulting per-head bits apply to
/// key and value alike, so the average bits per stored element equals
/// `avg_bits`.
pub fn allocate_kv_joint(
    sens: &SensitivityMap,
    model: &DistortionModel,
    avg_bits: f64,
    b_min: u32,
    b_max: u32,
) -> Result<KvAllocation> {
    sens.validate()?;
    let layers = sens.num_layers;
    let heads = sens.num_kv_heads;
    let mut components = Vec::with_capacity(layers * heads);
    let mut combined = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let w = sens.weights_k[l][h] + sens.weights_v[l][h];
            combined.push(w);
            components.push(Component {
                id: ComponentId::new(l, h, Side::Key),
                weight: w,
                model: model.clone(),
            });
        }
    }
    let budget = round_budget(avg_bits, components.len());
    let problem = AllocationProblem::new(components, budget, b_min, b_max)?;
    let allocation = greedy_allocate(&problem)?;
    let flat = allocation.integer_bits().expect("greedy is integer");
    let bits_k = to_grid(flat, layers, heads);
    let predicted = predict_gain(&combined)?;

    Ok(KvAllocation {
        mode: KvMode::Joint,
        avg_bits,
        budget,
        b_min,
        b_max,
        mean_bits_k: grid_mean(&bits_k),
        mean_bits_v: grid_mean(&bits_k),
        bits_v: bits_k.clone(),
        bits_k,
        objective: allocation.objective,
        predicted_gain_ratio: predicted,
        problem,
        allocation,
    })
}

// ---------------------------------------------------------------------------
// Allocation file format
// ---------------------------------------------------------------------------

/// On-disk allocation lookup table. Small enough to load once and index at
/// inference time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationFile {
    pub avg_bits: f64,
    pub budget: i64,
    pub b_min: u32,
    pub b_max: u32,
    pub mode: KvMode,
    pub bits_k: Vec<Vec<u32>>,
    pub bits_v: Vec<Vec<u32>>,
    pub mean_bits_k: f64,
    pub mean_bits_v: f64,
    pub objective: f64,
    pub predicted_gain_ratio: f64,
    /// Paths of the distortion model files the table was produced from.
    pub model_refs: Vec<String>,
    /// Full flag set of the producing command.
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

impl AllocationFile {
    pub fn from_kv(kv: &KvAllocation, model_refs: Vec<String>) -> Self {
        AllocationFile {
            avg_bits: kv.avg_bits,
            budget: kv.budget,
            b_min: kv.b_min,
            b_max: kv.b_max,
            mode: kv.mode,
            bits_k: kv.bits_k.clone(),
            bits_v: kv.bits_v.clone(),
            mean_bits_k: kv.mean_bits_k,
            mean_bits_v: kv.mean_bits_v,
            objective: kv.objective,
            predicted_gain_ratio: kv.predicted_gain_ratio,
            model_refs,
            config_echo: serde_json::Value::Null,
        }
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

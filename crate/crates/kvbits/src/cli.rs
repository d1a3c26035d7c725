//! Command-line front end: calibration, fitting, allocation, gain
//! prediction, simulation and the built-in numeric self-check, wired over
//! stable file interchange (sensitivity JSON, model JSON, MSE CSV,
//! allocation JSON, report JSON).
//!
//! Every command is deterministic given its flags: seeds default to 42,
//! every stochastic path takes `--seed`, and each output file embeds the
//! producing flag set as `config_echo`. Errors go to stderr with an
//! `error:` prefix and a nonzero exit status.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::allocator::{
    allocate_kv_joint, allocate_kv_separate, AllocationFile, KvMode,
};
use crate::distortion::{
    fit_exponential, fit_quality_report, lloyd_max_mse, matches_3sf, DistortionModelFile,
    MseCsvRow, MsePoint, ReferenceRow, LLOYD_MAX_REFERENCE,
};
use crate::evaluator::simulate;
use crate::quantizers::{measure_mse, QuantizerSpec, Scheme, SyntheticDistribution};
use crate::sensitivity::{load_sensitivity, stats, synth_lognormal};

/// Mixed-precision KV-cache bit allocation toolkit.
#[derive(Debug, Parser)]
#[command(name = "kvbits", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure quantizer MSE on seeded Gaussian data and write the points CSV.
    Calibrate(CalibrateArgs),
    /// Fit an exponential distortion model from a points CSV.
    Fit(FitArgs),
    /// Solve the per-head bit allocation and write the lookup table.
    Allocate(AllocateArgs),
    /// Print gain-ratio statistics of a sensitivity file.
    PredictGain(PredictGainArgs),
    /// Run the synthetic end-to-end evaluation and write the report.
    Simulate(SimulateArgs),
    /// Recompute the Lloyd-Max distortion table and check it against the
    /// pinned reference values.
    Validate(ValidateArgs),
    /// Generate a synthetic log-normal sensitivity file.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Quantizer label (see error output for the valid set).
    #[arg(long)]
    pub quantizer: String,
    /// Comma-separated bit-widths to measure.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
    pub bits: Vec<u32>,
    /// Tokens per calibration block.
    #[arg(long, default_value_t = 4096)]
    pub rows: usize,
    /// Channels per calibration block.
    #[arg(long, default_value_t = 128)]
    pub cols: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Component column written to the CSV.
    #[arg(long, default_value = "key")]
    pub component: String,
    /// Append to an existing CSV instead of overwriting.
    #[arg(long, default_value_t = false)]
    pub append: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// MSE points CSV produced by `calibrate`.
    #[arg(long)]
    pub csv: PathBuf,
    /// Quantizer label to select rows by.
    #[arg(long)]
    pub quantizer: String,
    /// Component to select rows by ("key" or "value").
    #[arg(long, default_value = "key")]
    pub component: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AllocateArgs {
    /// Sensitivity JSON file.
    #[arg(long)]
    pub sens: PathBuf,
    /// Allocation mode; inferred from the model flags when omitted.
    #[arg(long, value_enum)]
    pub mode: Option<CliKvMode>,
    /// Shared distortion model (joint mode).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Key-side distortion model (separate mode).
    #[arg(long)]
    pub model_k: Option<PathBuf>,
    /// Value-side distortion model (separate mode).
    #[arg(long)]
    pub model_v: Option<PathBuf>,
    /// Average bits per stored element.
    #[arg(long)]
    pub avg_bits: f64,
    #[arg(long, default_value_t = 2)]
    pub b_min: u32,
    #[arg(long, default_value_t = 8)]
    pub b_max: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum CliKvMode {
    Joint,
    Separate,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictGainArgs {
    /// Sensitivity JSON file.
    #[arg(long)]
    pub sens: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Sensitivity JSON file.
    #[arg(long)]
    pub sens: PathBuf,
    /// Allocation JSON file produced by `allocate`.
    #[arg(long)]
    pub alloc: PathBuf,
    /// Key-side quantizer label.
    #[arg(long, default_value = "lloyd-max")]
    pub quantizer_k: String,
    /// Value-side quantizer label.
    #[arg(long, default_value = "lloyd-max")]
    pub quantizer_v: String,
    #[arg(long, default_value_t = 2048)]
    pub rows: usize,
    #[arg(long, default_value_t = 128)]
    pub cols: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-head MSE CSV dump.
    #[arg(long)]
    pub per_head_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Subset of bit-widths to check (default: all six).
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u32>>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub source_label: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run a parsed command. `Ok(code)` carries the process exit status.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Allocate(args) => cmd_allocate(args),
        Command::PredictGain(args) => cmd_predict_gain(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn echo<T: Serialize>(command: &str, args: &T) -> serde_json::Value {
    serde_json::json!({ "command": command, "flags": serde_json::to_value(args).unwrap() })
}

fn cmd_calibrate(args: CalibrateArgs) -> anyhow::Result<i32> {
    let scheme = Scheme::parse_label(&args.quantizer)?;
    let spec = QuantizerSpec::new(scheme, args.seed);
    let points = measure_mse(
        &spec,
        &args.bits,
        SyntheticDistribution::Gaussian,
        args.rows,
        args.cols,
        args.seed,
    )?;
    let rows: Vec<MseCsvRow> = points
        .iter()
        .map(|p| MseCsvRow {
            quantizer: args.quantizer.clone(),
            component: args.component.clone(),
            bits: p.bits,
            mse: p.mse,
        })
        .collect();
    crate::distortion::write_mse_csv(&args.out, &rows, args.append)?;
    println!(
        "calibrated {} ({}) on {}x{} gaussian data, seed {}",
        args.quantizer, args.component, args.rows, args.cols, args.seed
    );
    for p in &points {
        println!("  bits {:>2}  mse {:.6e}", p.bits, p.mse);
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<i32> {
    let rows = crate::distortion::read_mse_csv(&args.csv)?;
    let points: Vec<MsePoint> = rows
        .iter()
        .filter(|r| r.quantizer == args.quantizer && r.component == args.component)
        .map(|r| MsePoint {
            bits: r.bits,
            mse: r.mse,
        })
        .collect();
    if points.is_empty() {
        anyhow::bail!(
            "no rows for quantizer '{}' component '{}' in {}",
            args.quantizer,
            args.component,
            args.csv.display()
        );
    }
    let model = fit_exponential(&points)?;
    let file = DistortionModelFile::from_model(&model, &args.quantizer, &args.component);
    file.save(&args.out)?;
    println!(
        "fit {} ({}): alpha {:.6}  beta {:.6}  r2 {:.6}",
        args.quantizer, args.component, model.alpha, model.beta, model.r_squared
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_allocate(args: AllocateArgs) -> anyhow::Result<i32> {
    let sens = load_sensitivity(&args.sens)?;
    let mode = match (args.mode, &args.model, &args.model_k, &args.model_v) {
        (Some(CliKvMode::Joint), _, _, _) => KvMode::Joint,
        (Some(CliKvMode::Separate), _, _, _) => KvMode::Separate,
        (None, Some(_), None, None) => KvMode::Joint,
        (None, None, Some(_), Some(_)) => KvMode::Separate,
        _ => anyhow::bail!(
            "ambiguous model flags: pass --model for joint mode or --model-k/--model-v for separate mode"
        ),
    };

    let (kv, model_refs) = match mode {
        KvMode::Joint => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("joint mode requires --model"))?;
            let model = DistortionModelFile::load(path)?.to_model()?;
            let kv = allocate_kv_joint(&sens, &model, args.avg_bits, args.b_min, args.b_max)?;
            (kv, vec![path.display().to_string()])
        }
        KvMode::Separate => {
            let (pk, pv) = match (&args.model_k, &args.model_v) {
                (Some(pk), Some(pv)) => (pk, pv),
                _ => anyhow::bail!("separate mode requires --model-k and --model-v"),
            };
            let mk = DistortionModelFile::load(pk)?.to_model()?;
            let mv = DistortionModelFile::load(pv)?.to_model()?;
            let kv =
                allocate_kv_separate(&sens, &mk, &mv, args.avg_bits, args.b_min, args.b_max)?;
            (kv, vec![pk.display().to_string(), pv.display().to_string()])
        }
    };

    let mut file = AllocationFile::from_kv(&kv, model_refs);
    file.config_echo = echo("allocate", &args);
    file.save(&args.out)?;
    println!(
        "allocated budget {} over {} components ({:?} mode), bounds [{}, {}]",
        kv.budget,
        kv.problem.len(),
        kv.mode,
        kv.b_min,
        kv.b_max
    );
    println!(
        "mean bits: K {:.6}  V {:.6}   objective {:.6e}   predicted gain ratio {:.6}",
        kv.mean_bits_k, kv.mean_bits_v, kv.objective, kv.predicted_gain_ratio
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_predict_gain(args: PredictGainArgs) -> anyhow::Result<i32> {
    let sens = load_sensitivity(&args.sens)?;
    let print_side = |name: &str, weights: &[f64]| -> anyhow::Result<()> {
        let s = stats(weights)?;
        let ratio = s.arithmetic_mean / s.geometric_mean;
        println!(
            "{name:>8}: n {:>6}  AM {:.6e}  GM {:.6e}  AM/GM {:.6}  sigma(ln w) {:.6}  exp(sigma^2/2) {:.6}",
            s.count,
            s.arithmetic_mean,
            s.geometric_mean,
            ratio,
            s.log_std,
            (0.5 * s.log_std * s.log_std).exp(),
        );
        Ok(())
    };
    print_side("combined", &sens.flat_all())?;
    print_side("key", &sens.flat_k())?;
    print_side("value", &sens.flat_v())?;
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<i32> {
    let sens = load_sensitivity(&args.sens)?;
    let file = AllocationFile::load(&args.alloc)?;
    let kv = kv_from_file(&file, &sens)?;
    let spec_k = QuantizerSpec::new(Scheme::parse_label(&args.quantizer_k)?, args.seed);
    let spec_v = QuantizerSpec::new(Scheme::parse_label(&args.quantizer_v)?, args.seed);
    let mut report = simulate(&sens, &spec_k, &spec_v, &kv, args.rows, args.cols, args.seed)?;
    report.config_echo = echo("simulate", &args);
    report.save(&args.out)?;
    if let Some(csv_path) = &args.per_head_csv {
        report.save_per_head_csv(csv_path, &kv)?;
    }
    println!(
        "J_uniform {:.6e}   J_allocated {:.6e}",
        report.j_uniform, report.j_allocated
    );
    println!(
        "realized gain ratio {:.6}   predicted AM/GM {:.6}",
        report.realized_ratio, report.predicted_ratio
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Rebuild an in-memory allocation from its file form, reusing the
/// sensitivity map for weights; model parameters only affect the objective
/// echo, so the stored objective is kept.
fn kv_from_file(
    file: &AllocationFile,
    sens: &crate::sensitivity::SensitivityMap,
) -> anyhow::Result<crate::allocator::KvAllocation> {
    use crate::allocator::{AllocationProblem, BitAssignment, Component, ComponentId, Side};
    use crate::distortion::DistortionModel;

    let layers = sens.num_layers;
    let heads = sens.num_kv_heads;
    if file.bits_k.len() != layers || file.bits_v.len() != layers {
        anyhow::bail!(
            "allocation file grids ({} layers) do not match sensitivity ({} layers)",
            file.bits_k.len(),
            layers
        );
    }
    // Placeholder model: simulation uses real quantizers, not the model.
    let model = DistortionModel::from_params(1.0, 2.0)?;
    let mut components = Vec::with_capacity(2 * layers * heads);
    let mut flat = Vec::with_capacity(2 * layers * heads);
    for (side, grid, weights) in [
        (Side::Key, &file.bits_k, &sens.weights_k),
        (Side::Value, &file.bits_v, &sens.weights_v),
    ] {
        for l in 0..layers {
            if grid[l].len() != heads {
                anyhow::bail!("allocation grid row {l} does not match {heads} heads");
            }
            for h in 0..heads {
                components.push(Component {
                    id: ComponentId::new(l, h, side),
                    weight: weights[l][h],
                    model: model.clone(),
                });
                flat.push(grid[l][h]);
            }
        }
    }
    let budget: i64 = flat.iter().map(|&b| b as i64).sum();
    let b_min = flat.iter().copied().min().unwrap_or(1).min(file.b_min);
    let b_max = flat.iter().copied().max().unwrap_or(8).max(file.b_max);
    let problem = AllocationProblem::new(components, budget, b_min.max(1), b_max.min(8))?;
    let objective = file.objective;
    Ok(crate::allocator::KvAllocation {
        mode: file.mode,
        avg_bits: file.avg_bits,
        budget: file.budget,
        b_min: file.b_min,
        b_max: file.b_max,
        bits_k: file.bits_k.clone(),
        bits_v: file.bits_v.clone(),
        mean_bits_k: file.mean_bits_k,
        mean_bits_v: file.mean_bits_v,
        objective,
        predicted_gain_ratio: file.predicted_gain_ratio,
        problem,
        allocation: crate::allocator::Allocation {
            assignment: BitAssignment::Integer(flat),
            objective,
        },
    })
}

/// Outcome of one reference-table row check.
#[derive(Debug, Clone)]
pub struct RowCheck {
    pub bits: u32,
    pub computed_exact: f64,
    pub computed_fitted: f64,
    pub computed_ratio: f64,
    pub reference: ReferenceRow,
    pub exact_ok: bool,
    pub fitted_ok: bool,
    pub ratio_ok: bool,
}

/// Recompute the distortion table, fit and ratio columns, and compare each
/// against `expected` at three significant figures.
pub fn validate_against(
    bits_filter: Option<&[u32]>,
    expected: &[ReferenceRow],
) -> crate::error::Result<Vec<RowCheck>> {
    let selected: Vec<ReferenceRow> = match bits_filter {
        Some(bits) => {
            let mut rows = Vec::new();
            for &b in bits {
                let row = expected
                    .iter()
                    .find(|r| r.bits == b)
                    .copied()
                    .ok_or(crate::error::Error::BitsOutOfRange {
                        bits: b,
                        min: 1,
                        max: 6,
                    })?;
                rows.push(row);
            }
            rows
        }
        None => expected.to_vec(),
    };

    // The fit always uses the full recomputed six-point table so a subset
    // request still checks against the same fitted curve.
    let table: Vec<MsePoint> = (1..=6)
        .map(|b| {
            Ok(MsePoint {
                bits: b as f64,
                mse: lloyd_max_mse(b)?,
            })
        })
        .collect::<crate::error::Result<_>>()?;
    let model = fit_exponential(&table)?;
    let _quality = fit_quality_report(&table, &model);

    let mut checks = Vec::new();
    for row in selected {
        let exact = lloyd_max_mse(row.bits)?;
        let fitted = model.eval(row.bits as f64);
        let ratio = fitted / exact;
        checks.push(RowCheck {
            bits: row.bits,
            computed_exact: exact,
            computed_fitted: fitted,
            computed_ratio: ratio,
            reference: row,
            exact_ok: matches_3sf(exact, row.exact),
            fitted_ok: matches_3sf(fitted, row.fitted),
            ratio_ok: matches_3sf(ratio, row.ratio),
        });
    }
    Ok(checks)
}

fn cmd_validate(args: ValidateArgs) -> anyhow::Result<i32> {
    let checks = validate_against(args.bits.as_deref(), &LLOYD_MAX_REFERENCE)?;
    println!("bits  exact D(b)    fit D(b)      ratio    reference (exact/fit/ratio)  status");
    let mut failures = Vec::new();
    for c in &checks {
        let mut bad = Vec::new();
        if !c.exact_ok {
            bad.push("exact");
        }
        if !c.fitted_ok {
            bad.push("fit");
        }
        if !c.ratio_ok {
            bad.push("ratio");
        }
        println!(
            "{:>4}  {:.6e}  {:.6e}  {:.6}   {:.3e}/{:.3e}/{:.3}    {}",
            c.bits,
            c.computed_exact,
            c.computed_fitted,
            c.computed_ratio,
            c.reference.exact,
            c.reference.fitted,
            c.reference.ratio,
            if bad.is_empty() {
                "PASS".to_string()
            } else {
                format!("FAIL [{}]", bad.join(" "))
            }
        );
        if !bad.is_empty() {
            failures.push(format!("bits {} ({})", c.bits, bad.join(", ")));
        }
    }
    if failures.is_empty() {
        println!("PASS: all rows match the reference table at 3 significant figures");
        Ok(0)
    } else {
        for f in &failures {
            eprintln!("error: reference mismatch at {f}");
        }
        Ok(1)
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<i32> {
    let mut map = synth_lognormal(args.layers, args.heads, args.mu, args.sigma, args.seed)?;
    map.source_label = args.source_label.clone();
    map.save(&args.out)?;
    println!(
        "synthesized {}x{} map (mu {}, sigma {}, seed {})",
        args.layers, args.heads, args.mu, args.sigma, args.seed
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_passes_rows_one_through_four() {
        let checks = validate_against(None, &LLOYD_MAX_REFERENCE).unwrap();
        for c in &checks {
            if c.bits <= 4 {
                assert!(c.exact_ok, "bits {} exact mismatch", c.bits);
            }
        }
    }

    #[test]
    fn validate_single_row_filter() {
        let checks = validate_against(Some(&[1]), &LLOYD_MAX_REFERENCE).unwrap();
        assert_eq!(checks.len(), 1);
        assert_eq!(checks[0].bits, 1);
        assert!(checks[0].exact_ok);
        assert!((checks[0].computed_exact - 3.634e-1).abs() < 5e-4);
    }

    #[test]
    fn validate_flags_forced_wrong_reference() {
        // Harness self-test: corrupt the 1-bit reference entry and expect a
        // named failure.
        let mut table = LLOYD_MAX_REFERENCE;
        table[0].exact = 9.999e-1;
        let checks = validate_against(None, &table).unwrap();
        assert!(!checks[0].exact_ok, "corrupted row must fail");
        assert_eq!(checks[0].bits, 1);
        for c in &checks[1..4] {
            assert!(c.exact_ok);
        }
    }

    #[test]
    fn validate_rejects_unknown_bits() {
        assert!(validate_against(Some(&[7]), &LLOYD_MAX_REFERENCE).is_err());
    }
}

//! Command-line front end: operator evaluation, derivative dumps, Jacobian
//! sampling, smoothing sweeps, verification suites, and the nearest
//! correlation matrix demo.
//!
//! Exit codes: 0 on success/pass, 1 when a verification verdict fails, 2 on
//! usage, configuration, or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specop::nalgebra::DMatrix;

use specop::jacobian::{handle_from_descriptor, sample_clarke_element_opts, JacobianDescriptor};
use specop::linalg::mm::{self, MmKind};
use specop::linalg::svd_ordered;
use specop::maps::{build_map, MapDescriptor, MapRef, Signature};
use specop::ncm::{solve_ncm, NcmProblem};
use specop::spectral::{
    derivative_tables, dir_deriv_spectral, dir_deriv_spectral_sym, frechet_deriv,
    frechet_deriv_sym, BasePoint, TableConvention,
};
use specop::verify::{default_config, run_suite, SuiteConfig};

#[derive(Parser)]
#[command(name = "specop", version, about = "Spectral operators of matrices: evaluation, nonsmooth derivatives, generalized Jacobians, smoothing, verification")]
struct Cli {
    /// Grouping tolerance (relative; scaled internally by the spectral norm)
    #[arg(long, global = true, default_value_t = specop::linalg::DEFAULT_TOL_GROUP)]
    tol_group: f64,

    /// Output format for matrices
    #[arg(long, global = true, value_enum, default_value_t = Format::Mm)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Mm,
    Json,
}

#[derive(Args)]
struct MapArgs {
    /// Registered map name (identity, scalar_scale, soft_threshold,
    /// psd_projection, box_clamp, spectral_ball, frobenius_ball, abs_power)
    #[arg(long)]
    map: String,
    /// Map parameters as JSON, e.g. '{"tau": 1.0}'
    #[arg(long, default_value = "{}")]
    params: String,
}

#[derive(Args)]
struct InputArgs {
    /// Input matrix (Matrix Market)
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as symmetric (eigenvalue semantics)
    #[arg(long, default_value_t = false)]
    sym: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate G(X) and write the result
    Eval {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Frechet derivative G'(X)H at a differentiable spectrum
    Deriv {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also dump the E1/E2/F/C tables as JSON
        #[arg(long)]
        dump_tables: Option<PathBuf>,
    },
    /// Directional derivative G'(X; H) (works at nonsmooth spectra)
    Dirderiv {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample an element of the Bouligand subdifferential
    Jac {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        seed: u64,
        /// Write the reconstructible JSON descriptor here
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Apply the handle to this direction and write the image
        #[arg(long)]
        apply: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the dense matrix representation here
        #[arg(long)]
        dense: Option<PathBuf>,
        /// Proceed without the hypothesis certificate (flagged heuristic)
        #[arg(long, default_value_t = false)]
        force: bool,
        /// Rebuild from a stored descriptor instead of sampling
        #[arg(long)]
        from_descriptor: Option<PathBuf>,
    },
    /// Smoothing operator Theta(omega, X) and sweep reports
    Smooth {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Single omega: write Theta(omega, X)
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Sweep omegas (comma separated) and emit CSV rows
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a verification suite; exit 1 if any check fails
    Verify {
        /// JSON or TOML suite configuration; the built-in default when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-check CSV tables into this directory
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Nearest correlation matrix via dual semismooth Newton
    Ncm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
        /// JSON convergence log
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() {
    if let Ok(threads) = std::env::var("SPECOP_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn parse_map(args: &MapArgs, sig: Signature) -> anyhow::Result<MapRef> {
    let params: serde_json::Value = serde_json::from_str(&args.params)?;
    Ok(build_map(
        &MapDescriptor {
            name: args.map.clone(),
            params,
        },
        sig,
    )?)
}

fn read_base(input: &InputArgs) -> anyhow::Result<BasePoint> {
    if input.sym {
        Ok(BasePoint::Sym(mm::read_sym_file(&input.input)?))
    } else {
        Ok(BasePoint::Rect(mm::read_rect_file(&input.input)?))
    }
}

fn write_matrix(path: &Path, mat: &DMatrix<f64>, sym: bool, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Mm => {
            let kind = if sym { MmKind::Symmetric } else { MmKind::General };
            mm::write_matrix_file(path, mat, kind)?;
        }
        Format::Json => {
            let rows: Vec<Vec<f64>> = (0..mat.nrows())
                .map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect())
                .collect();
            let body = serde_json::json!({
                "rows": mat.nrows(),
                "cols": mat.ncols(),
                "symmetric": sym,
                "data": rows,
            });
            std::fs::write(path, serde_json::to_string_pretty(&body)?)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Eval { map, input, output } => {
            let base = read_base(&input)?;
            let g = parse_map(&map, base.map_signature())?;
            let out = base.eval(g.as_ref())?;
            write_matrix(&output, &out, input.sym, cli.format)?;
            println!(
                "eval {} on {}x{} -> {}",
                g.name(),
                out.nrows(),
                out.ncols(),
                output.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Deriv {
            map,
            input,
            direction,
            output,
            dump_tables,
        } => {
            let base = read_base(&input)?;
            let g = parse_map(&map, base.map_signature())?;
            let out = match &base {
                BasePoint::Rect(x) => {
                    let h = mm::read_rect_file(&direction)?;
                    frechet_deriv(g.as_ref(), x, &h)?.into_inner()
                }
                BasePoint::Sym(x) => {
                    let h = mm::read_sym_file(&direction)?;
                    frechet_deriv_sym(g.as_ref(), x, &h)?.into_inner()
                }
            };
            if let Some(tables_path) = dump_tables {
                let (sigma, n) = match &base {
                    BasePoint::Rect(x) => (
                        svd_ordered(x, cli.tol_group)?.sigma.as_slice().to_vec(),
                        x.cols(),
                    ),
                    BasePoint::Sym(_) => anyhow::bail!(
                        "--dump-tables emits the singular-value tables; use a rectangular input"
                    ),
                };
                let tables =
                    derivative_tables(g.as_ref(), &sigma, n, TableConvention::Differentiable)?;
                std::fs::write(&tables_path, serde_json::to_string_pretty(&tables)?)?;
            }
            write_matrix(&output, &out, input.sym, cli.format)?;
            println!("deriv {} -> {}", g.name(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Dirderiv {
            map,
            input,
            direction,
            output,
        } => {
            let base = read_base(&input)?;
            let g = parse_map(&map, base.map_signature())?;
            let out = match &base {
                BasePoint::Rect(x) => {
                    let h = mm::read_rect_file(&direction)?;
                    dir_deriv_spectral(g.as_ref(), x, &h)?.into_inner()
                }
                BasePoint::Sym(x) => {
                    let h = mm::read_sym_file(&direction)?;
                    dir_deriv_spectral_sym(g.as_ref(), x, &h)?.into_inner()
                }
            };
            write_matrix(&output, &out, input.sym, cli.format)?;
            println!("dirderiv {} -> {}", g.name(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Jac {
            map,
            input,
            seed,
            descriptor,
            apply,
            output,
            dense,
            force,
            from_descriptor,
        } => {
            let base = read_base(&input)?;
            let g = parse_map(&map, base.map_signature())?;
            let handle = match from_descriptor {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    let desc: JacobianDescriptor = serde_json::from_str(&text)?;
                    handle_from_descriptor(g.as_ref(), &base, &desc)?
                }
                None => sample_clarke_element_opts(g.as_ref(), &base, seed, force)?,
            };
            if handle.heuristic {
                eprintln!("warning: hypothesis certificate bypassed; handle is heuristic");
            }
            if let Some(path) = descriptor {
                let desc = handle.descriptor_for(&base);
                std::fs::write(&path, serde_json::to_string_pretty(&desc)?)?;
            }
            if let Some(h_path) = apply {
                let out_path = output
                    .ok_or_else(|| anyhow::anyhow!("--apply needs --output for the image"))?;
                let h = mm::read_matrix_file(&h_path)?.0;
                let img = handle.apply(&h)?;
                write_matrix(&out_path, &img, input.sym, cli.format)?;
            }
            if let Some(path) = dense {
                let d = handle.assemble_dense()?;
                write_matrix(&path, &d, false, cli.format)?;
            }
            println!(
                "jac {} seed {} provenance {:?}",
                g.name(),
                seed,
                handle.provenance
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Smooth {
            map,
            input,
            omega,
            output,
            sweep,
            csv,
            seed,
        } => {
            let base = read_base(&input)?;
            let x = match &base {
                BasePoint::Rect(x) => x.clone(),
                BasePoint::Sym(_) => {
                    anyhow::bail!("smoothing runs on rectangular inputs (drop --sym)")
                }
            };
            let g = parse_map(&map, base.map_signature())?;
            if let Some(w) = omega {
                let out_path =
                    output.ok_or_else(|| anyhow::anyhow!("--omega needs --output"))?;
                let theta = specop::smoothing::smoothing_operator(&g, w, &x)?;
                write_matrix(&out_path, theta.matrix(), false, cli.format)?;
                println!("smooth omega={w} -> {}", out_path.display());
            }
            if let Some(list) = sweep {
                let omegas: Vec<f64> = list
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()?;
                let rep = specop::verify::check_smoothing(&g, &x, &omegas, 20, seed)?;
                let mut text = String::from("omega,sup_distance,deriv_bound\n");
                for row in &rep.rows {
                    text.push_str(&format!(
                        "{:.17e},{:.17e},{:.17e}\n",
                        row.omega, row.sup_distance, row.deriv_bound
                    ));
                }
                match csv {
                    Some(path) => std::fs::write(&path, text)?,
                    None => print!("{text}"),
                }
                println!(
                    "sweep over {} omegas: nonincreasing={} within_bound={}",
                    rep.rows.len(),
                    rep.nonincreasing,
                    rep.within_theory_bound
                );
                if !rep.pass {
                    return Ok(ExitCode::from(1));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            config,
            report,
            csv_dir,
            seed,
        } => {
            let mut cfg: SuiteConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    if path.extension().map(|e| e == "toml").unwrap_or(false) {
                        toml::from_str(&text)?
                    } else {
                        serde_json::from_str(&text)?
                    }
                }
                None => default_config(),
            };
            if seed != 0 {
                cfg.seed = seed;
            }
            let rep = run_suite(&cfg)?;
            for entry in &rep.entries {
                println!(
                    "{:<18} {:<28} {:<28} {}",
                    entry.check, entry.map, entry.base_point_ref, entry.verdict
                );
            }
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            }
            if let Some(dir) = csv_dir {
                std::fs::create_dir_all(&dir)?;
                for (i, entry) in rep.entries.iter().enumerate() {
                    let name = format!("{:03}_{}.csv", i, entry.check);
                    std::fs::write(dir.join(name), entry.to_csv())?;
                }
            }
            println!("suite: {}", if rep.pass { "pass" } else { "FAIL" });
            Ok(if rep.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Ncm {
            input,
            tol,
            max_iter,
            seed,
            output,
            log,
        } => {
            let a = mm::read_sym_file(&input)?;
            let problem = NcmProblem::new(a, tol, max_iter, seed)?;
            let sol = solve_ncm(&problem)?;
            println!(
                "ncm: {} iterations, kkt residual {:.3e}, min eigenvalue {:.3e}",
                sol.iterations, sol.kkt_residual, sol.min_eigenvalue
            );
            if let Some(path) = output {
                write_matrix(&path, sol.x.matrix(), true, cli.format)?;
            }
            if let Some(path) = log {
                let body = serde_json::json!({
                    "iterations": sol.iterations,
                    "residuals": sol.residuals,
                    "kkt_residual": sol.kkt_residual,
                    "min_eigenvalue": sol.min_eigenvalue,
                    "seed": seed,
                    "dual": sol.y.as_slice(),
                });
                std::fs::write(&path, serde_json::to_string_pretty(&body)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

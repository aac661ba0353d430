use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bgest::experiment::{
    read_increments, run_mc_experiment, run_table1, write_increments, EstimatorSelection, ExperimentConfig,
    MomentSetChoice, UChoice,
};
use bgest::fisher::{fisher_limit, fisher_trajectory, FisherGrid};
use bgest::gmm::{solve_gmm, GmmOptions};
use bgest::levy_sim::{simulate_increments, SimModelSpec, StableSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bgest", version, about = "Jump activity and volatility estimation from high-frequency increments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate increments of σB + S^{α,β} (+ an optional 0.5-stable nuisance) to CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the moment estimator to an increments CSV and write the result as JSON.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Step size; defaults to horizon / rows.
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// `practical` or a positive number.
        #[arg(long, default_value = "practical")]
        u: String,
        #[arg(long, value_enum, default_value_t = SetArg::Benchmark)]
        moment_set: SetArg,
        #[arg(long, default_value_t = 0)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded Monte Carlo experiment.
    Mc(McArgs),
    /// Rescaled (r, α) Fisher block along decreasing step sizes.
    Fisher {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 1e-6)]
        h_min: f64,
        #[arg(long, default_value_t = 1e-3)]
        h_max: f64,
        #[arg(long, default_value_t = 1)]
        per_decade: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Desk-scale index and volatility error table.
    Table1 {
        #[arg(long, default_value_t = 500)]
        replications: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Also run the finest step 0.2/23400 (slow).
        #[arg(long)]
        finest: bool,
        #[arg(long, env = "BGEST_WORKERS")]
        workers: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Stable index; omit for a jump-free path.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Scale of an added symmetric 0.5-stable motion.
    #[arg(long, default_value_t = 0.0)]
    nuisance: f64,
}

impl ModelArgs {
    fn spec(&self) -> SimModelSpec {
        let mut m = match self.alpha {
            Some(a) => SimModelSpec::stable_plus_brownian(self.sigma, a, self.beta),
            None => SimModelSpec::brownian(self.sigma),
        };
        if self.nuisance > 0.0 {
            m.nuisance = Some(StableSpec { alpha: 0.5, beta: 0.0, scale: self.nuisance });
        }
        m
    }
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    h: f64,
    #[arg(long, default_value_t = 100)]
    replications: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "BGEST_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value = "practical")]
    u: String,
    #[arg(long, value_enum, default_value_t = SetArg::Benchmark)]
    moment_set: SetArg,
    /// Comma-separated subset of gmm, single, aj, trv.
    #[arg(long, default_value = "gmm,aj,trv")]
    estimators: String,
    /// Moment-set index used by the single-parameter estimator.
    #[arg(long, default_value_t = 2)]
    single_function: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    Benchmark,
    UnitGap,
}

impl From<SetArg> for MomentSetChoice {
    fn from(s: SetArg) -> Self {
        match s {
            SetArg::Benchmark => MomentSetChoice::Benchmark,
            SetArg::UnitGap => MomentSetChoice::UnitGap,
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn parse_u(s: &str) -> AnyResult<UChoice> {
    if s.eq_ignore_ascii_case("practical") {
        return Ok(UChoice::Practical);
    }
    let v: f64 = s.parse().map_err(|_| format!("--u must be 'practical' or a number, got '{s}'"))?;
    Ok(UChoice::Fixed(v))
}

fn parse_estimators(s: &str) -> AnyResult<EstimatorSelection> {
    let mut sel = EstimatorSelection { gmm: false, single: false, aj: false, trv: false };
    for name in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match name {
            "gmm" => sel.gmm = true,
            "single" => sel.single = true,
            "aj" => sel.aj = true,
            "trv" => sel.trv = true,
            other => return Err(format!("unknown estimator '{other}'").into()),
        }
    }
    Ok(sel)
}

fn write_json<T: serde::Serialize>(value: &T, path: &PathBuf) -> AnyResult<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn decade_steps(h_max: f64, h_min: f64, per_decade: usize) -> AnyResult<Vec<f64>> {
    if !(h_min > 0.0 && h_max < 1.0 && h_min <= h_max) || per_decade == 0 {
        return Err("need 0 < h-min ≤ h-max < 1 and per-decade ≥ 1".into());
    }
    let (lo, hi) = (h_min.log10(), h_max.log10());
    let k = ((hi - lo) * per_decade as f64).round() as usize;
    Ok((0..=k)
        .map(|i| if k == 0 { h_max } else { 10f64.powf(hi - (hi - lo) * i as f64 / k as f64) })
        .collect())
}

fn run(cli: Cli) -> AnyResult<()> {
    match cli.command {
        Command::Simulate { model, n, h, seed, out } => {
            let batch = simulate_increments(&model.spec(), n, h, seed)?;
            write_increments(&batch, &out)?;
            eprintln!("wrote {} increments to {}", batch.len(), out.display());
        }
        Command::Estimate { input, h, horizon, u, moment_set, restarts, out } => {
            let rows = read_increments(&input, 1.0)?.values;
            let h = h.unwrap_or(horizon / rows.len().max(1) as f64);
            let batch = bgest::levy_sim::IncrementBatch::new(h, rows, 0)?;
            let u = parse_u(&u)?.resolve(batch.len())?;
            let fset = MomentSetChoice::from(moment_set).build()?;
            let opts = GmmOptions { restarts, ..GmmOptions::default() };
            let res = solve_gmm(&batch, &fset, u, &opts)?;
            write_json(&res, &out)?;
            eprintln!("status {:?} after {} iterations", res.status, res.iterations);
        }
        Command::Mc(a) => {
            let mut cfg = ExperimentConfig::new(a.model.spec(), a.h, a.replications, a.seed);
            cfg.workers = a.workers;
            cfg.output_dir = a.out_dir;
            cfg.u = parse_u(&a.u)?;
            cfg.moment_set = a.moment_set.into();
            cfg.estimators = parse_estimators(&a.estimators)?;
            cfg.single_function = a.single_function;
            let report = run_mc_experiment(&cfg)?;
            println!("estimator  parameter  truth  mae  q25  median  q75  count");
            for s in &report.summaries {
                println!(
                    "{}  {}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {}",
                    s.estimator, s.parameter, s.truth, s.mae, s.q25, s.median, s.q75, s.count
                );
            }
            println!("failure rate {:.3}", report.failure_rate);
            if let Some(hist) = &report.histogram {
                println!("alpha CLT: asymptotic sd {:.4}, KS distance {:.4}", hist.asymptotic_sd, hist.ks_distance);
            }
        }
        Command::Fisher { alpha, r, sigma2, h_min, h_max, per_decade, out } => {
            let steps = decade_steps(h_max, h_min, per_decade)?;
            let rows = fisher_trajectory(sigma2, r, alpha, &steps, &FisherGrid::default())?;
            let mut f = fs::File::create(&out)?;
            writeln!(f, "h,i_rr,i_ra,i_aa,determinant,normalized_determinant,max_relative_gap")?;
            for row in &rows {
                writeln!(
                    f,
                    "{:e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                    row.h,
                    row.block[0][0],
                    row.block[0][1],
                    row.block[1][1],
                    row.determinant,
                    row.normalized_determinant,
                    row.max_relative_gap
                )?;
            }
            let l = fisher_limit(sigma2, r, alpha);
            eprintln!("limit [[{:.6}, {:.6}], [{:.6}, {:.6}]]", l[0][0], l[0][1], l[1][0], l[1][1]);
        }
        Command::Table1 { replications, seed, finest, workers, out_dir } => {
            let cells = run_table1(replications, seed, finest, workers, out_dir.as_deref())?;
            println!("alpha  h*23400  gmm_sigma2  trv_sigma2  gmm_alpha  aj_alpha  gmm_failures");
            let mae = |c: &bgest::experiment::TableCell, e: &str, p: &str| {
                c.report.summary(e, p).map_or("-".to_string(), |s| format!("{:.3}", s.mae))
            };
            for c in &cells {
                println!(
                    "{}  {}  {}  {}  {}  {}  {}",
                    c.alpha,
                    c.h * 23400.0,
                    mae(c, "gmm", "sigma_sq"),
                    mae(c, "trv", "sigma_sq"),
                    mae(c, "gmm", "alpha"),
                    mae(c, "aj", "alpha"),
                    c.report.gmm_failures
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on bad arguments
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

//! One function per subcommand: validate, compute, write.

use std::path::PathBuf;

use lvglass::frontier::{frontier_curve, lambda_plus, EnsembleParams};
use lvglass::gibbs::{
    free_energy_disorder_avg, gelman_rubin, mcmc_sample, quadrature_log_z, ChainConfig, DisorderSetup, Domain,
    FreeEnergyEstimate, GibbsTarget, ThermoConfig,
};
use lvglass::parisi::{
    correction_sum, correction_theta, recursion_x0_checked, saddle_search_report, ParisiArgs, ParisiMeasure,
    ParisiModel, RecursionOptions, SaddleConfig,
};
use lvglass::randmat::{lambda_simulation, truncate, InteractionMatrix};
use lvglass::rng::derive_seed;
use lvglass::rpc::{verify_prpc, LeafKind, PrpcConfig};
use lvglass::sde::{simulate, Estimate, ModelParams, Observable, SimConfig};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{csv_bytes, to_json_bytes, write_atomic, CsvCell, Envelope, OUT_DIR_ENV};
use crate::{
    Cli, CliError, Cmd, FreeEnergyArgs, FreeEnergyMethod, FrontierArgs, GibbsArgs, LambdaSimArgs, LeafArg, ModelArgs,
    ParisiEvalArgs, ParisiOptArgs, RpcArgs, SdeArgs,
};
use crate::Format;

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::Frontier(a) => frontier(cli, a),
        Cmd::LambdaSim(a) => lambda_sim(cli, a),
        Cmd::Sde(a) => sde(cli, a),
        Cmd::GibbsSample(a) => gibbs_sample(cli, a),
        Cmd::FreeEnergy(a) => free_energy(cli, a),
        Cmd::ParisiEval(a) => parisi_eval(cli, a),
        Cmd::ParisiOpt(a) => parisi_opt(cli, a),
        Cmd::RpcVerify(a) => rpc_verify(cli, a),
    }
}

fn output_path(cli: &Cli, default_name: &str) -> PathBuf {
    if let Some(p) = &cli.output {
        return p.clone();
    }
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    dir.join(default_name)
}

fn write_json<P: Serialize, R: Serialize>(
    cli: &Cli,
    command: &str,
    seed: Option<u64>,
    params: &P,
    result: &R,
) -> Result<PathBuf, CliError> {
    let path = output_path(cli, &format!("{}.json", command.replace('-', "_")));
    write_atomic(&path, &to_json_bytes(&Envelope::new(command, seed, params, result))?)?;
    Ok(path)
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("{what}: cannot parse {t:?}"))))
        .collect()
}

/// `start:stop:step` with `stop` included up to rounding.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let parts = parse_list(&text.replace(':', ","), "grid")?;
    let [start, stop, step] = parts[..] else {
        return Err(usage(format!("grid {text:?} must be start:stop:step")));
    };
    if !(step > 0.0) || stop < start || !start.is_finite() || !stop.is_finite() {
        return Err(usage(format!("grid {text:?} needs step > 0 and stop >= start")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn ensemble(kappa: f64, alpha: f64) -> Result<EnsembleParams, CliError> {
    Ok(EnsembleParams::new(kappa, alpha)?)
}

fn frontier(cli: &Cli, args: &FrontierArgs) -> Result<(), CliError> {
    let grid = parse_grid(&args.kappa_grid)?;
    let points = frontier_curve(&grid)?;
    match args.format {
        Format::Csv => {
            let rows: Vec<Vec<CsvCell>> = points
                .iter()
                .map(|p| vec![CsvCell::Real(p.kappa), CsvCell::Real(p.alpha), CsvCell::Real(p.c), CsvCell::Real(p.lambda_plus)])
                .collect();
            let bytes = csv_bytes("frontier", None, args, &["kappa", "alpha", "c", "lambda_plus"], &rows)?;
            write_atomic(&output_path(cli, "frontier.csv"), &bytes)?;
        }
        Format::Json => {
            write_json(cli, "frontier", None, args, &serde_json::json!({ "points": points }))?;
        }
    }
    Ok(())
}

fn lambda_sim(cli: &Cli, args: &LambdaSimArgs) -> Result<(), CliError> {
    if args.n == 0 || args.draws == 0 || args.restarts == 0 {
        return Err(usage("n, draws and restarts must be positive"));
    }
    let ens = ensemble(args.kappa, args.alpha)?;
    let draws = lambda_simulation(args.n, ens, args.draws, args.restarts, args.eps_sigma, cli.seed)?;
    match args.format {
        Format::Csv => {
            let rows: Vec<Vec<CsvCell>> = draws
                .iter()
                .map(|d| {
                    vec![
                        CsvCell::Int(d.n as u64),
                        CsvCell::Int(d.seed),
                        CsvCell::Real(d.kappa),
                        CsvCell::Real(d.alpha),
                        CsvCell::Real(d.lambda_max_heuristic),
                        CsvCell::Flag(d.realizable),
                    ]
                })
                .collect();
            let cols = ["n", "seed", "kappa", "alpha", "lambda_max_heuristic", "realizable_flag"];
            let bytes = csv_bytes("lambda-sim", Some(cli.seed), args, &cols, &rows)?;
            write_atomic(&output_path(cli, "lambda_sim.csv"), &bytes)?;
        }
        Format::Json => {
            let mean = draws.iter().map(|d| d.lambda_max_heuristic).sum::<f64>() / draws.len() as f64;
            let result = serde_json::json!({
                "draws": draws,
                "mean_lambda_max": mean,
                "lambda_plus": lambda_plus(ens).lambda_plus,
            });
            write_json(cli, "lambda-sim", Some(cli.seed), args, &result)?;
        }
    }
    Ok(())
}

fn sample_sigma(n: usize, model: &ModelArgs, seed: u64) -> Result<InteractionMatrix, CliError> {
    if n == 0 {
        return Err(usage("n must be positive"));
    }
    Ok(InteractionMatrix::sample(n, ensemble(model.kappa, model.alpha)?, seed)?)
}

#[derive(Serialize)]
struct Average {
    observable: String,
    value: f64,
    std_error: f64,
}

impl Average {
    fn new(observable: String, e: Estimate) -> Self {
        Self {
            observable,
            value: e.value,
            std_error: e.std_error,
        }
    }
}

fn sde(cli: &Cli, args: &SdeArgs) -> Result<(), CliError> {
    let kinds: Vec<&str> = args.observables.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if kinds.is_empty() {
        return Err(usage("the observable list is empty"));
    }
    if args.record_every == 0 {
        return Err(usage("record-every must be positive"));
    }
    let mut observables = Vec::new();
    for kind in &kinds {
        for i in 0..args.n {
            observables.push(match *kind {
                "mean" => Observable::Mean(i),
                "second-moment" => Observable::SecondMoment(i),
                "logmean" => Observable::LogMean(i),
                other => return Err(usage(format!("unknown observable {other:?}"))),
            });
        }
    }
    let sigma = sample_sigma(args.n, &args.model, derive_seed(cli.seed, 0))?;
    let params = ModelParams::new(sigma, args.model.phi, args.model.temperature)?;
    let config = SimConfig {
        record_every: args.record_every,
        observables: observables.clone(),
        burn_in: args.burn_in,
        ..SimConfig::new(args.dt, args.t_end)
    };
    let x0 = DVector::from_element(args.n, args.x0);
    let traj = simulate(&params, &config, &x0, derive_seed(cli.seed, 1))?;

    let averages: Vec<Average> = if traj.exploded {
        Vec::new()
    } else {
        observables
            .iter()
            .map(|o| Ok(Average::new(o.name(), traj.average(*o)?)))
            .collect::<Result<_, lvglass::Error>>()?
    };
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=args.n).map(|i| format!("x_{i}")));
    let rows: Vec<Vec<CsvCell>> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, x)| std::iter::once(CsvCell::Real(*t)).chain(x.iter().map(|v| CsvCell::Real(*v))).collect())
        .collect();
    let result = serde_json::json!({
        "observables": kinds,
        "final_time": traj.final_time(),
        "exploded": traj.exploded,
        "explosion_time": traj.explosion_time,
        "averages": averages,
    });
    let json_path = write_json(cli, "sde", Some(cli.seed), args, &result)?;
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    write_atomic(&json_path.with_extension("csv"), &csv_bytes("sde", Some(cli.seed), args, &cols, &rows)?)?;
    if traj.exploded {
        return Err(CliError::NotConverged(format!(
            "trajectory exploded at t = {}",
            traj.explosion_time.unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

fn parse_domain(text: &str) -> Result<Domain, CliError> {
    let edge = |v: &str| -> Result<f64, CliError> {
        v.parse::<f64>()
            .ok()
            .filter(|a| *a > 0.0 && a.is_finite())
            .ok_or_else(|| usage(format!("domain edge {v:?} must be a positive number")))
    };
    match text.split_once(':') {
        None if text == "orthant" => Ok(Domain::Orthant),
        Some(("box", a)) => Ok(Domain::Box { a: edge(a)? }),
        Some(("ball", a)) => Ok(Domain::Ball { a: edge(a)? }),
        _ => Err(usage(format!("domain {text:?} must be orthant, box:A or ball:A"))),
    }
}

fn pooled(estimates: &[Estimate]) -> Estimate {
    let k = estimates.len() as f64;
    Estimate {
        value: estimates.iter().map(|e| e.value).sum::<f64>() / k,
        std_error: estimates.iter().map(|e| e.std_error * e.std_error).sum::<f64>().sqrt() / k,
    }
}

fn gibbs_sample(cli: &Cli, args: &GibbsArgs) -> Result<(), CliError> {
    if args.chains == 0 || args.samples == 0 || args.thin == 0 {
        return Err(usage("chains, samples and thin must be positive"));
    }
    let sigma = sample_sigma(args.n, &args.model, derive_seed(cli.seed, 0))?;
    let params = ModelParams::new(sigma, args.model.phi, args.model.temperature)?;
    params.require_gibbs()?;
    let target = GibbsTarget::new(params, parse_domain(&args.domain)?, args.field)?;
    let config = ChainConfig {
        burn_in: args.burn_in,
        samples: args.samples,
        thin: args.thin,
        ..ChainConfig::default()
    };
    let chains = (0..args.chains)
        .into_par_iter()
        .map(|c| mcmc_sample(&target, &config, None, derive_seed(cli.seed, 1 + c as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut coordinates = Vec::new();
    for i in 0..args.n {
        let stat = |f: &dyn Fn(f64) -> f64| pooled(&chains.iter().map(|s| s.mean(|x| f(x[i]))).collect::<Vec<_>>());
        let traces: Vec<Vec<f64>> = chains.iter().map(|s| s.samples.iter().map(|x| x[i]).collect()).collect();
        coordinates.push(serde_json::json!({
            "index": i + 1,
            "mean": Average::new("mean".into(), stat(&|v| v)),
            "second_moment": Average::new("second-moment".into(), stat(&|v| v * v)),
            "logmean": Average::new("logmean".into(), stat(&|v| v.ln())),
            "gelman_rubin": if chains.len() > 1 { Some(gelman_rubin(&traces)) } else { None },
        }));
    }
    let result = serde_json::json!({
        "acceptance_rates": chains.iter().map(|s| s.acceptance_rate).collect::<Vec<_>>(),
        "proposal_scales": chains.iter().map(|s| s.proposal_scale).collect::<Vec<_>>(),
        "coordinates": coordinates,
    });
    let path = write_json(cli, "gibbs-sample", Some(cli.seed), args, &result)?;
    if args.write_samples {
        let mut cols = vec!["chain".to_string(), "index".to_string()];
        cols.extend((1..=args.n).map(|i| format!("x_{i}")));
        let rows: Vec<Vec<CsvCell>> = chains
            .iter()
            .enumerate()
            .flat_map(|(c, s)| {
                s.samples.iter().enumerate().map(move |(k, x)| {
                    [CsvCell::Int(c as u64), CsvCell::Int(k as u64)]
                        .into_iter()
                        .chain(x.iter().map(|v| CsvCell::Real(*v)))
                        .collect()
                })
            })
            .collect();
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        write_atomic(&path.with_extension("csv"), &csv_bytes("gibbs-sample", Some(cli.seed), args, &cols, &rows)?)?;
    }
    Ok(())
}

fn free_energy(cli: &Cli, args: &FreeEnergyArgs) -> Result<(), CliError> {
    if args.n == 0 || args.replicas == 0 {
        return Err(usage("n and replicas must be positive"));
    }
    let ens = ensemble(args.model.kappa, args.model.alpha)?;
    let setup = DisorderSetup {
        n: args.n,
        ensemble: ens,
        phi: args.model.phi,
        temperature: args.model.temperature,
        replicas: args.replicas,
        eps_sigma: args.eps_sigma,
    };
    // the T < φ check first, for a clear message
    ModelParams::new(InteractionMatrix::zeros(args.n), args.model.phi, args.model.temperature)?.require_gibbs()?;
    let estimate = match args.method {
        FreeEnergyMethod::Thermo => {
            let config = ThermoConfig {
                points: args.points,
                refine: !args.no_refine,
                chain: ChainConfig {
                    burn_in: args.burn_in,
                    samples: args.samples,
                    ..ChainConfig::default()
                },
            };
            free_energy_disorder_avg(&setup, &config, cli.seed)?
        }
        FreeEnergyMethod::Quadrature => quadrature_average(&setup, cli.seed)?,
    };
    write_json(cli, "free-energy", Some(cli.seed), args, &estimate)?;
    Ok(())
}

/// Disorder average of the quadrature `n⁻¹ log Z`, seeded like the thermodynamic estimate.
fn quadrature_average(setup: &DisorderSetup, seed: u64) -> Result<FreeEnergyEstimate, CliError> {
    if setup.n > 3 {
        return Err(usage("quadrature free energy supports n <= 3"));
    }
    let per_draw = (0..setup.replicas)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let sigma = InteractionMatrix::sample(setup.n, setup.ensemble, s)?;
            let (tilde, kept) = truncate(&sigma, setup.eps_sigma)?;
            let params = ModelParams::new(tilde, setup.phi, setup.temperature)?;
            let target = GibbsTarget::new(params, Domain::Orthant, None)?;
            Ok((quadrature_log_z(&target, 1e-10)? / setup.n as f64, kept, s))
        })
        .collect::<Result<Vec<_>, lvglass::Error>>()?;
    let r = per_draw.len() as f64;
    let value = per_draw.iter().map(|p| p.0).sum::<f64>() / r;
    let std_error = if per_draw.len() > 1 {
        (per_draw.iter().map(|p| (p.0 - value).powi(2)).sum::<f64>() / ((r - 1.0) * r)).sqrt()
    } else {
        0.0
    };
    Ok(FreeEnergyEstimate {
        n: setup.n,
        value,
        std_error,
        replicas: per_draw.len(),
        schedule: Vec::new(),
        seeds: per_draw.iter().map(|p| p.2).collect(),
        truncation_frequency: per_draw.iter().filter(|p| !p.1).count() as f64 / r,
    })
}

/// Contents of the `parisi-eval` argument file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParisiEvalInput {
    pub temperature: Option<f64>,
    pub beta: Option<f64>,
    pub kappa: f64,
    pub alpha: f64,
    pub phi: f64,
    pub a: f64,
    #[serde(default)]
    pub h: f64,
    #[serde(default)]
    pub gamma: f64,
    pub lambdas: Vec<f64>,
    pub atoms: Vec<f64>,
    pub order: Option<usize>,
}

fn beta_of(temperature: Option<f64>, beta: Option<f64>) -> Result<f64, CliError> {
    match (temperature, beta) {
        (Some(t), None) if t > 0.0 => Ok(1.0 / t),
        (None, Some(b)) => Ok(b),
        (Some(_), None) => Err(usage("temperature must be positive")),
        _ => Err(usage("give exactly one of temperature and beta")),
    }
}

fn parisi_eval(cli: &Cli, args: &ParisiEvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.args)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.args.display())))?;
    let input: ParisiEvalInput =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", args.args.display())))?;
    let model = ParisiModel::new(beta_of(input.temperature, input.beta)?, input.kappa, input.alpha, input.phi)?;
    let zeta = ParisiMeasure::new(input.lambdas.clone(), input.atoms.clone())?;
    let pargs = ParisiArgs {
        a: input.a,
        h: input.h,
        gamma: input.gamma,
        model,
    };
    let x0 = recursion_x0_checked(
        &zeta,
        &pargs,
        RecursionOptions {
            order: input.order.unwrap_or(RecursionOptions::default().order),
            check_doubling: true,
        },
    )?;
    let cov = model.covariance();
    let correction = correction_sum(&zeta, &cov);
    let parisi_value = x0.value - correction;
    let objective = parisi_value - input.gamma * zeta.d() - 0.5 * model.beta * model.alpha * input.h * input.h;
    let result = serde_json::json!({
        "objective": objective,
        "parisi_value": parisi_value,
        "x0": x0.value,
        "correction_sum": correction,
        "correction_theta": correction_theta(&zeta, &cov),
        "d": zeta.d(),
        "doubling_change": x0.doubling_change,
        "flagged": x0.flagged,
    });
    write_json(cli, "parisi-eval", None, &input, &result)?;
    Ok(())
}

fn parisi_opt(cli: &Cli, args: &ParisiOptArgs) -> Result<(), CliError> {
    let m = &args.model;
    if !(m.temperature > 0.0) {
        return Err(usage("temperature must be positive"));
    }
    let lp = lambda_plus(ensemble(m.kappa, m.alpha)?).lambda_plus;
    if !(lp < 1.0) {
        return Err(usage(format!("the saddle formula needs lambda_plus(kappa, alpha) < 1, got {lp}")));
    }
    let model = ParisiModel::new(1.0 / m.temperature, m.kappa, m.alpha, m.phi)?;
    let config = SaddleConfig {
        levels: args.levels,
        order: args.order,
        outer_max_evals: args.max_evals,
        inner_max_sweeps: args.inner_sweeps,
        residual_tol: args.tol,
        start: None,
    };
    let r = saddle_search_report(&model, &config)?;
    let result = serde_json::json!({
        "converged": r.converged,
        "value": if r.converged { Some(r.value) } else { None },
        "best_value": r.value,
        "a": r.a,
        "d": r.d,
        "h": r.h,
        "gamma": r.gamma,
        "lambdas": r.zeta.lambdas(),
        "atoms": r.zeta.atoms(),
        "inner_residuals": r.inner_residuals,
        "outer_residuals": r.outer_residuals,
        "max_residual": r.max_residual,
        "evaluations": r.evaluations,
        "lambda_plus": lp,
    });
    write_json(cli, "parisi-opt", None, args, &result)?;
    if !r.converged {
        return Err(CliError::NotConverged(format!(
            "saddle residual {} exceeds {}",
            r.max_residual, args.tol
        )));
    }
    Ok(())
}

fn rpc_verify(cli: &Cli, args: &RpcArgs) -> Result<(), CliError> {
    let m = &args.model;
    if !(m.temperature > 0.0) {
        return Err(usage("temperature must be positive"));
    }
    let model = ParisiModel::new(1.0 / m.temperature, m.kappa, m.alpha, m.phi)?;
    let zeta = ParisiMeasure::new(parse_list(&args.lambdas, "lambdas")?, parse_list(&args.atoms, "atoms")?)?;
    let leaf = match args.leaf {
        LeafArg::Constant => LeafKind::Constant { value: args.value },
        LeafArg::Linear => LeafKind::Linear { offset: args.value },
        LeafArg::Telescoped => LeafKind::Telescoped,
        LeafArg::MuBeta => LeafKind::MuBeta {
            a: args.a,
            h: args.h,
            gamma: args.gamma,
        },
    };
    let config = PrpcConfig {
        branching: args.branching,
        replicas: args.replicas,
    };
    let report = verify_prpc(&zeta, &model, leaf, config, cli.seed)?;
    write_json(cli, "rpc-verify", Some(cli.seed), args, &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let g = parse_grid("0.05:0.7:0.05").unwrap();
        assert_eq!(g.len(), 14);
        assert!((g[13] - 0.7).abs() < 1e-12);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn domains() {
        assert_eq!(parse_domain("orthant").unwrap(), Domain::Orthant);
        assert_eq!(parse_domain("box:3").unwrap(), Domain::Box { a: 3.0 });
        assert_eq!(parse_domain("ball:2.5").unwrap(), Domain::Ball { a: 2.5 });
        assert!(parse_domain("box:-1").is_err());
        assert!(parse_domain("cube:1").is_err());
    }
}

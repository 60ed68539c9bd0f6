use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cliff_core::diffgraph::OpKind;
use cliff_core::evalkit::{
    argmin_by, detect_thresholds, landscape_csv, landscape_sweep, mcc, quantized_agreement, univariate_sweep,
};
use cliff_core::experiment::{run_experiment, ExperimentReport, SeedOutcome};
use cliff_core::io::{fmt_float, write_atomic};
use cliff_core::matrix::Matrix;
use cliff_core::selfcheck::SelfCheck;
use cliff_core::synthdata::{generate_with, Dataset};
use cliff_core::trainer::{metrics_csv, train_with, Params};
use cliff_core::Error;

use crate::config::RunConfig;
use crate::{EvalArgs, ExperimentArgs, Failure, GenArgs, GradcheckArgs, LandscapeArgs, TrainArgs};

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?.resolve()?)
}

fn refuse_overwrite(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(path)?)
}

pub fn gen(args: GenArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.dataset_seed = seed;
    }
    refuse_overwrite(&args.out, args.force)?;
    let ds = generate_with(&cfg.synth, cfg.dataset_seed, cfg.grid.clone(), cfg.mixing.clone())?;
    ds.save(&args.out)?;
    println!(
        "wrote {} ({} rows, {} factors)",
        args.out.display(),
        ds.z.rows,
        ds.z.cols
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Outcome {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        let plan = cliff_core::experiment::SeedPlan {
            dataset_seed: cfg.dataset_seed,
            init_seed: seed,
            zeta_seed: seed,
        };
        cfg = cfg.with_seed_plan(plan);
    }
    let params_path = args.out.join("params.json");
    refuse_overwrite(&params_path, args.force)?;
    let ds = load_dataset(&args.data)?;
    if ds.x.cols != cfg.encoder.input_dim() {
        return Err(Failure::Usage(format!(
            "dataset has {} observed columns, encoder expects {}",
            ds.x.cols,
            cfg.encoder.input_dim()
        )));
    }
    let initial = Params::init(&cfg.encoder, cfg.init_seed)?;
    write_atomic(&args.out.join("config.resolved.json"), cfg.to_json()?.as_bytes())?;
    write_atomic(
        &args.out.join("initial_params.json"),
        initial.to_json()?.as_bytes(),
    )?;
    let result = train_with(&ds.x, initial, &cfg.train, |m| {
        if m.epoch % 100 == 0 {
            eprintln!(
                "epoch {:>5}  total {:.6}  l_uni {:.6}  l_biv {:.6}  l_kl_uni {:.6}",
                m.epoch, m.total, m.l_uni, m.l_biv, m.l_kl_uni
            );
        }
    });
    match result {
        Ok(r) => {
            write_atomic(&args.out.join("metrics.csv"), metrics_csv(&r.metrics).as_bytes())?;
            write_atomic(&params_path, r.params.to_json()?.as_bytes())?;
            println!("wrote {} ({} epochs)", params_path.display(), r.metrics.len());
            Ok(())
        }
        Err(f) => {
            write_atomic(&args.out.join("metrics.csv"), metrics_csv(&f.metrics).as_bytes())?;
            if let Some(p) = &f.last_good {
                write_atomic(&args.out.join("params_last_good.json"), p.to_json()?.as_bytes())?;
            }
            Err(f.error.into())
        }
    }
}

fn encode_dataset(params: &Params, ds: &Dataset) -> Result<Matrix, Failure> {
    if ds.z.cols == 0 {
        return Err(Failure::Usage(
            "dataset has no z_ columns to evaluate against".into(),
        ));
    }
    Ok(params.encode_plain(&ds.x)?)
}

pub fn eval(args: EvalArgs) -> Outcome {
    let cfg = load_config(args.config.as_deref())?;
    let text = std::fs::read_to_string(&args.params)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.params.display())))?;
    let params = Params::from_json(&text)?;
    let ds = load_dataset(&args.data)?;
    let recovered = encode_dataset(&params, &ds)?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.params
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let mcc_path = out.join("mcc.json");
    refuse_overwrite(&mcc_path, args.force)?;

    let report = mcc(&ds.z, &recovered)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let thresholds = match &ds.meta {
        Some(meta) => {
            let detected = detect_thresholds(&recovered, &cfg.detector)?;
            Some(quantized_agreement(&ds.z, &meta.grid, &recovered, &detected)?)
        }
        None => {
            eprintln!("warning: no dataset sidecar; reporting MCC only");
            None
        }
    };
    write_json(&mcc_path, &report)?;
    if let Some(t) = &thresholds {
        write_json(&out.join("thresholds.json"), t)?;
    }
    let agreement = thresholds
        .as_ref()
        .map_or("n/a".to_string(), |t| format!("{:.4}", t.agreement));
    println!("mcc {:.4} agreement {agreement}", report.mcc);
    Ok(())
}

pub fn landscape(args: LandscapeArgs) -> Outcome {
    let cfg = load_config(args.config.as_deref())?;
    let step = args.step.unwrap_or(cfg.landscape.step_deg);
    refuse_overwrite(&args.out, args.force)?;
    let ds = load_dataset(&args.data)?;
    let latents = if ds.z.cols > 0 { &ds.z } else { &ds.x };
    if latents.cols != 2 {
        return Err(Failure::Usage(format!(
            "landscape sweeps need a 2-factor dataset, got {}",
            latents.cols
        )));
    }
    let rows = landscape_sweep(latents, step, cfg.weights(), cfg.zeta_seed)?;
    write_atomic(&args.out, landscape_csv(&rows).as_bytes())?;
    if let Some(path) = &args.univariate_out {
        let uni = univariate_sweep(latents, step, &cfg.weights().kernel)?;
        let mut csv = String::from("theta_deg,l_uni\n");
        for r in &uni {
            csv.push_str(&format!("{},{}\n", fmt_float(r.theta_deg), fmt_float(r.l_uni)));
        }
        write_atomic(path, csv.as_bytes())?;
    }
    if let Some(k) = argmin_by(&rows, |r| r.total) {
        println!(
            "{} cells; total minimised at ({}°, {}°)",
            rows.len(),
            rows[k].theta1_deg,
            rows[k].theta2_deg
        );
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Outcome {
    let cfg = load_config(args.config.as_deref())?;
    let negate = args
        .negate_backward
        .as_deref()
        .map(str::parse::<OpKind>)
        .transpose()?;
    let check = SelfCheck {
        weights: cliff_core::criterion::CliffWeights {
            kernel: cfg.weights().kernel.clone(),
            ..cliff_core::criterion::CliffWeights::with_lambdas(1.0, 1.0, 1.0)
        },
        fd_step: cfg.gradcheck.fd_step,
        tolerance: cfg.gradcheck.tolerance,
        negate,
    };
    let seeds = if args.seed.is_empty() {
        vec![0]
    } else {
        args.seed.clone()
    };
    let mut failed = Vec::new();
    for &seed in &seeds {
        for &n in &cfg.gradcheck.batch_sizes {
            for &d in &cfg.gradcheck.factor_counts {
                for c in check.run(n, d, seed)? {
                    let verdict = if c.passed { "pass" } else { "FAIL" };
                    println!(
                        "seed {seed} n {n:>3} d {d} {:<9} max_rel_error {:.3e} {verdict}",
                        c.term.name(),
                        c.max_rel_error
                    );
                    if !c.passed && !failed.contains(&c.term.name()) {
                        failed.push(c.term.name());
                    }
                }
            }
        }
    }
    if failed.is_empty() {
        println!("all terms within {:e}", check.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn write_seed_outputs(dir: &Path, cfg: &RunConfig, outcome: &SeedOutcome) -> Result<(), Failure> {
    match outcome {
        Ok(run) => {
            let cfg = cfg.clone().with_seed_plan(run.plan);
            write_atomic(&dir.join("config.resolved.json"), cfg.to_json()?.as_bytes())?;
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&run.metrics).as_bytes())?;
            write_atomic(&dir.join("params.json"), run.params.to_json()?.as_bytes())?;
            write_json(&dir.join("mcc.json"), &run.mcc)?;
            write_json(&dir.join("thresholds.json"), &run.thresholds)?;
        }
        Err(f) => {
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&f.metrics).as_bytes())?;
            write_atomic(&dir.join("error.txt"), format!("{}\n", f.error).as_bytes())?;
        }
    }
    Ok(())
}

pub fn experiment(args: ExperimentArgs) -> Outcome {
    let cfg = load_config(args.config.as_deref())?;
    let base = match args.seed {
        Some(s) => cliff_core::experiment::SeedPlan::uniform(s),
        None => cfg.seed_plan(),
    };
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be ≥ 1".into()));
    }
    let summary_path = args.out.join("summary.json");
    refuse_overwrite(&summary_path, args.force)?;
    let plans: Vec<_> = (0..args.seeds).map(|k| base.offset(k)).collect();
    let write_errors = Mutex::new(Vec::new());
    let outcomes = run_experiment(&cfg.experiment_spec(), &plans, args.workers, |outcome| {
        let plan = match outcome {
            Ok(run) => run.plan,
            Err(f) => f.plan,
        };
        let dir = args.out.join(format!("seed_{}", plan.dataset_seed));
        match outcome {
            Ok(run) => eprintln!(
                "seed {}: mcc {:.2} agreement {:.3}",
                plan.dataset_seed, run.mcc.mcc, run.thresholds.agreement
            ),
            Err(f) => eprintln!("seed {}: failed: {}", plan.dataset_seed, f.error),
        }
        if let Err(e) = write_seed_outputs(&dir, &cfg, outcome) {
            write_errors.lock().expect("poisoned").push(e);
        }
    })?;
    if let Some(e) = write_errors.into_inner().expect("poisoned").into_iter().next() {
        return Err(e);
    }
    let report = ExperimentReport::from_outcomes(&outcomes);
    write_json(&summary_path, &report)?;
    match report.mcc_summary {
        Some(s) => println!(
            "mcc {:.2} ± {:.2} (standard error, {} runs)",
            s.mean, s.std_err, s.n
        ),
        None => println!("no run completed"),
    }
    let numerical = outcomes
        .iter()
        .any(|o| matches!(o, Err(f) if f.error.is_numerical()));
    if numerical {
        return Err(Failure::Numerical(format!(
            "{} of {} runs failed",
            report.failures.len(),
            outcomes.len()
        )));
    }
    if let Some((plan, msg)) = report.failures.first() {
        return Err(Failure::Usage(format!("run {} failed: {msg}", plan.dataset_seed)));
    }
    Ok(())
}

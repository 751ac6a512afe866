use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use tcs_core::metrics::{beta_costs, experiment_metrics, summarize, write_json, write_metrics_csv,
    write_transactions_csv, write_trips_csv, RunSummary};
use tcs_core::optimizer::write_history_csv;
use tcs_core::{
    bo_loop, load_scenario, run_experiment, toll_profile, ChoiceSets, ExperimentResult, RunOptions,
    Scenario, ScenarioConfig, TollParams, TollProfile,
};

use crate::{parse_toll_params, Mode, RunArgs};

/// Where the toll for a `toll` run comes from.
#[derive(Debug, Clone)]
enum TollSource {
    Curve(TollParams),
    File(TollProfile),
}

impl TollSource {
    fn profile(&self) -> TollProfile {
        match self {
            TollSource::Curve(p) => toll_profile(p),
            TollSource::File(t) => t.clone(),
        }
    }

    fn tariff(&self) -> Option<(f64, f64, f64)> {
        match self {
            TollSource::Curve(p) => Some(p.as_tuple()),
            TollSource::File(_) => None,
        }
    }
}

pub fn run(args: &RunArgs) -> Result<()> {
    if args.replications < 1 {
        bail!("--replications must be at least 1");
    }
    if args.mode == Mode::Compare {
        return compare(args);
    }
    if !args.dirs.is_empty() {
        bail!("positional directories are only accepted by compare");
    }
    let config = load_config(args)?;
    let toll = toll_source(args)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    if args.replications == 1 {
        run_one(args, config, toll.as_ref(), &args.out)?;
        println!("wrote {}", args.out.display());
        return Ok(());
    }

    let results: Vec<Result<RunSummary>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..args.replications)
            .map(|r| {
                let mut cfg = config.clone();
                cfg.seed = config.seed.wrapping_add(r as u64);
                let dir = args.out.join(format!("rep-{r}"));
                let toll = toll.clone();
                s.spawn(move || {
                    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    run_one(args, cfg, toll.as_ref(), &dir)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("replication thread panicked")))
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_json(&args.out.join("summary.json"), &aggregate(&summaries)?)?;
    println!("wrote {} replications under {}", summaries.len(), args.out.display());
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut config = match &args.scenario {
        Some(p) => load_scenario(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(days) = args.days {
        config.days = days;
    }
    if let Some(t) = args.threshold {
        config.tcs.profit_threshold = t;
    }
    if let Some(n) = args.iterations {
        config.bo.iterations = n;
    }
    config.validate()?;
    Ok(config)
}

fn toll_source(args: &RunArgs) -> Result<Option<TollSource>> {
    let source = match (&args.params, &args.toll_file) {
        (Some(p), _) => Some(TollSource::Curve(parse_toll_params(p)?)),
        (None, Some(f)) => Some(TollSource::File(TollProfile::read_csv(f)?)),
        (None, None) => None,
    };
    match (args.mode, &source) {
        (Mode::Toll, None) => bail!("toll mode needs --params or --toll-file"),
        (Mode::Base | Mode::Bo, Some(_)) => bail!("--params/--toll-file only apply to toll mode"),
        _ => Ok(source),
    }
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions {
        log_allocations: args.emit_transactions,
    }
}

fn run_one(args: &RunArgs, config: ScenarioConfig, toll: Option<&TollSource>, dir: &Path) -> Result<RunSummary> {
    let scenario = Scenario::build(config)?;
    let sets = ChoiceSets::build(&scenario)?;
    fs::write(dir.join("scenario.toml"), scenario.config.to_toml())
        .with_context(|| format!("writing {}", dir.join("scenario.toml").display()))?;

    let base_options = match args.mode {
        Mode::Base => options(args),
        _ => RunOptions::default(),
    };
    let base = run_experiment(&scenario, &sets, &TollProfile::zero(), base_options)?;
    match args.mode {
        Mode::Base => write_run(args, &scenario, "base", &base, None, None, dir),
        Mode::Toll => {
            let toll = toll.expect("checked by toll_source");
            let profile = toll.profile();
            profile.write_csv(&dir.join("toll_profile.csv"))?;
            let run = run_experiment(&scenario, &sets, &profile, options(args))?;
            write_run(args, &scenario, "toll", &run, Some(&base), toll.tariff(), dir)
        }
        Mode::Bo => {
            let outcome = bo_loop(&scenario, &sets, &base)?;
            write_history_csv(&dir.join("bo_history.csv"), &outcome)?;
            let profile = toll_profile(&outcome.best);
            profile.write_csv(&dir.join("toll_profile.csv"))?;
            // Deterministic replay of the incumbent for the full output set.
            let run = run_experiment(&scenario, &sets, &profile, options(args))?;
            write_run(args, &scenario, "bo", &run, Some(&base), Some(outcome.best.as_tuple()), dir)
        }
        Mode::Compare => unreachable!("handled before scenario construction"),
    }
}

fn write_run(
    args: &RunArgs,
    scenario: &Scenario,
    label: &str,
    run: &ExperimentResult,
    base: Option<&ExperimentResult>,
    tariff: Option<(f64, f64, f64)>,
    dir: &Path,
) -> Result<RunSummary> {
    let cfg = &scenario.config;
    let betas = beta_costs(&cfg.choice, &scenario.population);
    let metrics = experiment_metrics(run, base, &betas)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    write_trips_csv(&dir.join("trips.csv"), run)?;
    if args.emit_transactions {
        write_transactions_csv(&dir.join("transactions.csv"), run)?;
    }
    let summary = summarize(
        label,
        cfg.seed,
        run,
        &metrics,
        cfg.bo.welfare_window,
        cfg.tcs.profit_threshold,
        tariff,
        run.is_stable(&cfg.learning),
    );
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Mean and population std of every numeric summary field across replications.
fn aggregate(summaries: &[RunSummary]) -> Result<Value> {
    let rows: Vec<Map<String, Value>> = summaries
        .iter()
        .map(|s| match serde_json::to_value(s) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => bail!("summary is not an object"),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_>>()?;
    let mut metrics = Map::new();
    for key in rows[0].keys() {
        if key == "seed" {
            continue;
        }
        let values: Option<Vec<f64>> = rows.iter().map(|r| r.get(key).and_then(Value::as_f64)).collect();
        if let Some(v) = values {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            metrics.insert(key.clone(), serde_json::json!({ "mean": mean, "std": std }));
        }
    }
    Ok(serde_json::json!({
        "label": summaries[0].label,
        "replications": summaries.len(),
        "seeds": summaries.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "stable": summaries.iter().filter(|s| s.stable).count(),
        "metrics": metrics,
    }))
}

fn compare(args: &RunArgs) -> Result<()> {
    if args.dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let summaries: Vec<RunSummary> = args
        .dirs
        .iter()
        .map(|d| {
            let path = d.join("summary.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let table = comparison_table(&summaries);
    print!("{table}");
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("compare.csv"), comparison_csv(&summaries))
        .with_context(|| format!("writing {}", args.out.join("compare.csv").display()))?;
    Ok(())
}

type Row = (&'static str, fn(&RunSummary) -> String);

fn rows() -> Vec<Row> {
    fn f(v: f64) -> String {
        format!("{v:.4}")
    }
    vec![
        ("label", |s| s.label.clone()),
        ("threshold", |s| f(s.profit_threshold)),
        ("tariff", |s| match s.tariff {
            Some((a, m, sd)) => format!("{a:.4}/{:02}:{:02}/{sd:.0}", (m / 60.0) as u32, (m % 60.0).round() as u32),
            None => "-".into(),
        }),
        ("sells", |s| format!("{:.1}", s.sells)),
        ("buys", |s| format!("{:.1}", s.buys)),
        ("traded_credits", |s| format!("{:.1}", s.traded_credits)),
        ("buyback_travelers", |s| format!("{:.1}", s.buyback_travelers)),
        ("welfare_gain", |s| s.welfare_gain_per_capita.map(f).unwrap_or("-".into())),
        ("final_price", |s| f(s.final_price)),
        ("peak_tti", |s| f(s.peak_tti)),
        ("peak_accumulation", |s| format!("{:.1}", s.peak_accumulation)),
        ("utility_per_capita", |s| f(s.utility_per_capita)),
        ("stable", |s| s.stable.to_string()),
    ]
}

fn comparison_table(summaries: &[RunSummary]) -> String {
    let mut out = String::new();
    for (name, get) in rows() {
        out.push_str(&format!("{name:<20}"));
        for s in summaries {
            out.push_str(&format!(" {:>18}", get(s)));
        }
        out.push('\n');
    }
    out
}

fn comparison_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::new();
    for (name, get) in rows() {
        out.push_str(name);
        for s in summaries {
            out.push(',');
            out.push_str(&get(s));
        }
        out.push('\n');
    }
    out
}

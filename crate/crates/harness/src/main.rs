use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use reprog_core::data::save_dataset;
use reprog_core::models::accuracy;
use reprog_core::CoreError;
use reprog_harness::config::{Config, ConfigError};
use reprog_harness::lab::Lab;
use reprog_harness::report::ScenarioReport;
use reprog_harness::scenario::{self, ScenarioOutput};
use reprog_harness::selftest;

enum Failure {
    Config(String),
    Numeric(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(e) => Failure::Io(e.to_string()),
            e if e.is_config() => Failure::Config(e.to_string()),
            e => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

const SCENARIO_COMMANDS: [(&str, &str); 7] = [
    ("gen-data", "Write the synthetic datasets as RPGD files"),
    ("train-source", "Train (or reuse) the target and surrogate classifiers"),
    ("train-encoder", "Train (or reuse) the similarity encoder"),
    ("calibrate", "Calibrate the detector threshold on benign traffic"),
    ("attack-whitebox", "White-box reprogramming per training size, with the black-box comparison"),
    ("attack-blackbox", "Zeroth-order attack against the stateful detector"),
    ("attack-surrogate", "Surrogate program fine-tuned against the stateful detector"),
];

fn cli() -> Command {
    let keys = Config::keys();
    let with_keys = |mut cmd: Command| {
        cmd = cmd
            .arg(Arg::new("config").long("config").value_name("FILE").help("TOML config file"))
            .arg(
                Arg::new("seed")
                    .long("seed")
                    .required(true)
                    .value_parser(clap::value_parser!(u64))
                    .help("Master seed"),
            );
        for (key, info) in &keys {
            cmd = cmd.arg(
                Arg::new(key.clone())
                    .long(key.clone())
                    .value_name("VALUE")
                    .help(format!("[{}] default {}", info.section, info.default)),
            );
        }
        cmd
    };
    let mut cmd = Command::new("reprog")
        .about("Adversarial reprogramming attacks against a stateful query detector")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SCENARIO_COMMANDS {
        cmd = cmd.subcommand(with_keys(Command::new(name).about(about)));
    }
    cmd.subcommand(
        Command::new("report").about("Print saved scenario CSVs as tables").arg(
            Arg::new("files")
                .required(true)
                .action(ArgAction::Append)
                .value_parser(clap::value_parser!(PathBuf)),
        ),
    )
    .subcommand(Command::new("selftest").about("Fast internal consistency checks"))
}

fn load_config(m: &ArgMatches) -> Result<Config, Failure> {
    let base = match m.get_one::<String>("config") {
        Some(p) => Config::load(Path::new(p))?,
        None => Config::default(),
    };
    let keys = Config::keys();
    let overrides: Vec<(&str, &str)> = keys
        .keys()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.as_str(), v.as_str())))
        .collect();
    Ok(base.with_overrides(overrides)?)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn emit(lab: &Lab, out: ScenarioOutput) -> Result<(), Failure> {
    let dir = PathBuf::from(&lab.cfg.run.out);
    let report = &out.report;
    write(&dir.join(format!("{}.csv", report.kind.name())), &report.to_csv())?;
    for (name, text) in &out.files {
        write(&dir.join(name), text)?;
    }
    match lab.cfg.run.format.as_str() {
        "console" => print!("{}", report.to_console()),
        _ => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn run_scenario(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m)?;
    let seed = *m.get_one::<u64>("seed").expect("required");
    let store = cfg.run.artifacts.clone();
    let lab = Lab::new(cfg, seed).with_store(store);
    let out = PathBuf::from(&lab.cfg.run.out);
    match name {
        "gen-data" => {
            std::fs::create_dir_all(&out)?;
            save_dataset(out.join("source.rpgd"), lab.source_data()?)?;
            save_dataset(out.join("benign.rpgd"), lab.benign_data()?)?;
            for &tr in &lab.cfg.data.train_sizes {
                save_dataset(out.join(format!("target-train-{tr}.rpgd")), &lab.target_train(tr)?)?;
            }
            save_dataset(out.join("target-test.rpgd"), lab.target_test()?)?;
            println!("datasets written to {}", out.display());
        }
        "train-source" => {
            for (role, clf) in [("target", lab.classifier()?), ("surrogate", lab.surrogate()?)] {
                let acc = accuracy(clf, lab.source_data()?)?;
                println!("{role} classifier: source accuracy {acc:.4}");
            }
        }
        "train-encoder" => {
            let (similar, dissimilar) = lab.encoder_heldout_distances()?;
            let acc = lab.encoder_heldout_accuracy()?;
            println!("encoder held-out pair accuracy {acc:.4}");
            println!("mean distance similar {similar:.4} dissimilar {dissimilar:.4}");
        }
        "calibrate" => {
            let cal = lab.calibration()?;
            let text = scenario::calibration_csv(cal.k, cal.target_fpr, cal.rho, cal.achieved_fpr);
            write(&out.join("calibration.csv"), &text)?;
            print!("{text}");
            println!("re-stream fpr {}", lab.restream_fpr()?);
        }
        "attack-whitebox" => emit(&lab, scenario::run_table3_analog(&lab)?)?,
        "attack-blackbox" => emit(&lab, scenario::run_table4_analog(&lab)?)?,
        "attack-surrogate" => emit(&lab, scenario::run_table5_analog(&lab)?)?,
        _ => unreachable!("unknown scenario command {name}"),
    }
    Ok(())
}

fn report(m: &ArgMatches) -> Result<(), Failure> {
    for path in m.get_many::<PathBuf>("files").expect("required") {
        let text = std::fs::read_to_string(path)?;
        let report = ScenarioReport::parse_csv(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        for (i, row) in report.rows.iter().enumerate() {
            if let (Some(s), Some(r)) = (row.sigma_star, row.recomputed_sigma_star()) {
                if (s - r).abs() > 1e-12 {
                    return Err(Failure::Numeric(format!("{} row {i}: sigma* {s} but D, Q, k give {r}", path.display())));
                }
            }
        }
        print!("{}", report.to_console());
    }
    Ok(())
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let (name, sub) = m.subcommand().expect("subcommand required");
    let result = match name {
        "report" => report(sub),
        "selftest" => selftest::run().map_err(Failure::Numeric),
        _ => run_scenario(name, sub),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::from(1)
        }
    }
}

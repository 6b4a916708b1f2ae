//! Command-line entry point: training, sampling, cost benchmarking,
//! ablation sweeps, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numeric abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use commands::CmdError;

const USAGE: &str = "\
usage: dis <command> [options]

commands:
  train    --config <file> --out <dir> [--seed N] [--steps N]
  sample   <checkpoint> --out <dir> [--n N] [--steps N] [--cfg-scale S]
           [--seed N] [--class C] [--raw-weights]
  bench    [--J 64,128,256,512] [--D 384] [--N 16] [--out <csv>] [--configs]
  ablate   --axis <patch|skip|cond|scale> --config <file> --out <dir>
  inspect  <checkpoint>

exit codes: 0 ok, 1 usage/config error, 2 numeric abort";

struct Args {
    positional: Vec<String>,
    flags: Vec<(String, Option<String>)>,
}

impl Args {
    fn parse(argv: &[String]) -> Args {
        let mut positional = Vec::new();
        let mut flags = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let a = &argv[i];
            if let Some(name) = a.strip_prefix("--") {
                let value = if i + 1 < argv.len() && !argv[i + 1].starts_with("--") {
                    i += 1;
                    Some(argv[i].clone())
                } else {
                    None
                };
                flags.push((name.to_string(), value));
            } else {
                positional.push(a.clone());
            }
            i += 1;
        }
        Args { positional, flags }
    }

    fn flag(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| v.as_deref())
    }

    fn has(&self, name: &str) -> bool {
        self.flags.iter().any(|(n, _)| n == name)
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CmdError> {
        match self.flag(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CmdError::Config(format!("--{name}: cannot parse '{v}'"))),
        }
    }

    fn require(&self, name: &str) -> Result<&str, CmdError> {
        self.flag(name)
            .ok_or_else(|| CmdError::Config(format!("missing required --{name}")))
    }

    fn check_known(&self, allowed: &[&str]) -> Result<(), CmdError> {
        for (n, _) in &self.flags {
            if !allowed.contains(&n.as_str()) {
                return Err(CmdError::Config(format!("unknown flag --{n}")));
            }
        }
        Ok(())
    }
}

fn dispatch(cmd: &str, args: &Args) -> Result<(), CmdError> {
    match cmd {
        "train" => {
            args.check_known(&["config", "out", "seed", "steps"])?;
            let config = PathBuf::from(args.require("config")?);
            let out = PathBuf::from(args.require("out")?);
            commands::cmd_train(
                &config,
                &out,
                args.parsed::<u64>("seed")?,
                args.parsed::<usize>("steps")?,
            )
        }
        "sample" => {
            args.check_known(&[
                "out",
                "n",
                "steps",
                "cfg-scale",
                "seed",
                "class",
                "raw-weights",
            ])?;
            let ckpt = args
                .positional
                .first()
                .ok_or_else(|| CmdError::Config("sample needs a checkpoint path".into()))?;
            let out = args
                .flag("out")
                .map(PathBuf::from)
                .unwrap_or_else(|| commands::default_out_dir("samples"));
            commands::cmd_sample(
                &PathBuf::from(ckpt),
                &out,
                args.parsed::<usize>("n")?.unwrap_or(4),
                args.parsed::<usize>("steps")?.unwrap_or(250),
                args.parsed::<f64>("cfg-scale")?.unwrap_or(1.0),
                args.parsed::<u64>("seed")?.unwrap_or(0),
                args.parsed::<usize>("class")?,
                args.has("raw-weights"),
            )
        }
        "bench" => {
            args.check_known(&["J", "D", "N", "out", "configs"])?;
            let j_list = match args.flag("J") {
                Some(s) => commands::parse_j_list(s)?,
                None => vec![64, 128, 256, 512],
            };
            commands::cmd_bench(
                &j_list,
                args.parsed::<usize>("D")?.unwrap_or(384),
                args.parsed::<usize>("N")?.unwrap_or(16),
                args.flag("out").map(PathBuf::from).as_deref(),
                args.has("configs"),
            )
        }
        "ablate" => {
            args.check_known(&["axis", "config", "out"])?;
            let axis = args.require("axis")?.to_string();
            let config = PathBuf::from(args.require("config")?);
            let out = PathBuf::from(args.require("out")?);
            commands::cmd_ablate(&axis, &config, &out)
        }
        "inspect" => {
            args.check_known(&[])?;
            let ckpt = args
                .positional
                .first()
                .ok_or_else(|| CmdError::Config("inspect needs a checkpoint path".into()))?;
            commands::cmd_inspect(&PathBuf::from(ckpt))
        }
        other => Err(CmdError::Config(format!("unknown command '{other}'"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(1);
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let args = Args::parse(&argv[1..]);
    match dispatch(cmd, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if matches!(e, CmdError::Config(_)) && e.message().contains("unknown command") {
                eprintln!("\n{USAGE}");
            }
            ExitCode::from(e.code() as u8)
        }
    }
}

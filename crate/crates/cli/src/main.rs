use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use fieldlearn::ansatz::find_transformation;
use fieldlearn::diffops::parse_operator;
use fieldlearn::model::{save_model, Family};
use fieldlearn::study::{self, run_single, run_study, write_outputs, StudyConfig, StudyKind};
use fieldlearn::{Error, TrainConfig};

#[derive(Parser)]
#[command(name = "fieldlearn", version, about = "Learn vector fields with operator-constrained networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study; writes results.csv, timings.csv and manifest.json
    Study {
        /// data-size, net-size, lambda-sweep, regularization, strain-demo, affine-demo or external-field
        id: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Search for a transform G with C G = 0
    Ansatz {
        /// Constraint operator, e.g. "[dx1, dx2]"
        #[arg(long)]
        constraint: String,
        #[arg(long, default_value_t = 1)]
        max_degree: usize,
        #[arg(long, default_value_t = 1)]
        potential_dim: usize,
        /// Defaults to the highest dx index in the constraint
        #[arg(long)]
        input_dim: Option<usize>,
        /// One attempt at exactly these bounds instead of growing degree, then potential dimension
        #[arg(long)]
        exact: bool,
    },
    /// Train one model and report its error
    Train {
        /// constrained or standard
        #[arg(long)]
        model: String,
        /// divfree, strain, affine or csv:<path>
        #[arg(long)]
        field: String,
        /// Training configuration (JSON)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        measurements: Option<usize>,
        /// Hidden widths, e.g. 100,50
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for the loss trace and model bundle
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic curl-free 3D dataset as CSV
    Synth {
        #[arg(long, default_value_t = 16_000)]
        points: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> fieldlearn::Result<()> {
    match cmd {
        Command::Study {
            id,
            config,
            out,
            trials,
            epochs,
        } => {
            let kind: StudyKind = id.parse()?;
            let mut cfg = match config {
                Some(p) => StudyConfig::load(&p)?,
                None => StudyConfig::new(kind),
            };
            if cfg.study != kind {
                return Err(Error::Config(format!(
                    "config describes study {}, command asked for {}",
                    cfg.study.as_str(),
                    kind.as_str()
                )));
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let start = Instant::now();
            let result = run_study(&cfg)?;
            write_outputs(&result, &cfg, &out, start.elapsed().as_secs_f64())?;
            println!("{:<28} {:<12} {:>5} {:>14} {:>14}", "setting", "family", "runs", "median_rmse", "median_viol");
            for s in result.settings() {
                for fam in [Family::Constrained, Family::Standard] {
                    let n = result.select(&s, fam).count();
                    if n > 0 {
                        println!(
                            "{:<28} {:<12} {:>5} {:>14.6e} {:>14.6e}",
                            s,
                            fam.as_str(),
                            n,
                            result.median_rmse(&s, fam),
                            result.median_violation(&s, fam)
                        );
                    }
                }
            }
            let aborted = result.rows.iter().filter(|r| r.status != "ok").count();
            if aborted > 0 {
                eprintln!("{aborted} run(s) aborted; see the status column");
            }
            println!("wrote {}", out.join("results.csv").display());
            Ok(())
        }
        Command::Ansatz {
            constraint,
            max_degree,
            potential_dim,
            input_dim,
            exact,
        } => {
            let c = parse_operator(&constraint, input_dim)?;
            if potential_dim == 0 {
                return Err(Error::Config("potential dimension must be at least 1".into()));
            }
            let attempts: Vec<(usize, usize)> = if exact {
                vec![(max_degree, potential_dim)]
            } else {
                (0..=max_degree)
                    .flat_map(|d| (1..=potential_dim).map(move |k| (d, k)))
                    .collect()
            };
            for (d, k) in attempts {
                if let Some(g) = find_transformation(&c, d, k) {
                    eprintln!("degree {d}, potential dimension {k}");
                    println!("{g}");
                    return Ok(());
                }
            }
            println!("NOT FOUND");
            Ok(())
        }
        Command::Train {
            model,
            field,
            config,
            measurements,
            hidden,
            sigma,
            seed,
            epochs,
            out,
        } => {
            let family: Family = model.parse()?;
            let mut cfg = match field.as_str() {
                "divfree" => StudyConfig::new(StudyKind::DataSize),
                "affine" => StudyConfig::new(StudyKind::AffineDemo),
                "strain" => StudyConfig::new(StudyKind::StrainDemo),
                f => match f.strip_prefix("csv:") {
                    Some(path) => {
                        let mut c = StudyConfig::new(StudyKind::ExternalField);
                        c.csv = Some(PathBuf::from(path));
                        c
                    }
                    None => return Err(Error::Config(format!("unknown field {f:?}"))),
                },
            };
            cfg.trials = 1;
            cfg.base_seed = seed;
            if let Some(p) = config {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg.train = serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.measurements = Some(vec![measurements.unwrap_or(match cfg.study {
                StudyKind::DataSize => 500,
                StudyKind::ExternalField => 500,
                _ => 200,
            })]);
            if let Some(h) = hidden {
                let widths = h
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad hidden widths {h:?}")))?;
                cfg.hidden = Some(widths);
            }
            cfg.noise_sigma = sigma;
            let t = run_single(&cfg, family)?;
            let Some(report) = t.report else {
                return Err(Error::NonFinite {
                    epoch: t
                        .row
                        .status
                        .rsplit(' ')
                        .next()
                        .and_then(|e| e.parse().ok())
                        .unwrap_or(0),
                });
            };
            println!("family      {}", family.as_str());
            println!("epochs      {}", report.epochs());
            println!("val_loss    {:e}", report.val_loss.last().copied().unwrap_or(f64::NAN));
            println!("rmse        {:e}", t.row.rmse);
            println!("violation   {:e}", t.row.violation);
            println!("exact       {}", if t.row.exact { "PASS" } else { "FAIL" });
            if !t.row.detail.is_empty() {
                println!("detail      {}", t.row.detail);
            }
            println!("seconds     {:.2}", report.seconds);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report.write_csv(&dir.join("train_report.csv"))?;
                save_model(t.model.as_ref(), &dir.join("model"), seed)?;
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Synth {
            points,
            sigma,
            seed,
            out,
        } => {
            let data = study::synthetic_curl_free(points, sigma, seed)?;
            data.save_csv(&out)?;
            println!("wrote {} rows to {}", data.len(), out.display());
            Ok(())
        }
    }
}

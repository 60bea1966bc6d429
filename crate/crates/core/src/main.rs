use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use brepler_core::annotate::{MockReplies, MockServer};
use brepler_core::annotate::RemoteClient;
use brepler_core::brep::parse_brep;
use brepler_core::modifier::{edit, EditOptions, ModifierConfig, Task, TrainConfig};
use brepler_core::pipeline::{
    edit_record, evaluate_dirs, load_checkpoint, save_checkpoint, train_on_dataset, write_edit, write_targets, Localizer,
};
use brepler_core::render::{BBox2D, Viewpoint};
use brepler_core::service::{default_workers, serve_blocking, ServiceState};
use brepler_core::synth::{build_dataset, Dataset, Direction, Split};
use brepler_core::validity::validity_report;

#[derive(Parser)]
#[command(name = "brepler", version, about = "Synthesize, train, edit and score B-rep edit pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirArg {
    Delete,
    Add,
}

impl From<DirArg> for Direction {
    fn from(d: DirArg) -> Self {
        match d {
            DirArg::Delete => Direction::Delete,
            DirArg::Add => Direction::Add,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LocalizerArg {
    Oracle,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of edit pairs.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Features stacked per base shape (1..=5).
        #[arg(long, default_value_t = 1)]
        ops: usize,
    },
    /// Train the latent modifier.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Encoder and decoder depth.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Memorize the first N training records instead of a full run.
        #[arg(long)]
        overfit: Option<usize>,
        #[arg(long, value_enum, default_value_t = DirArg::Delete)]
        direction: DirArg,
        /// Train to reproduce the source model.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        no_positional: bool,
    },
    /// Apply a trained modifier.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset for record-driven edits.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Single record id; without it every record of `--split` is edited.
        #[arg(long)]
        record: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Only the first N records of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Free-standing model edited with an explicit box and prompt.
        #[arg(long)]
        model: Option<PathBuf>,
        /// x_min,y_min,x_max,y_max in normalized image coordinates.
        #[arg(long)]
        bbox: Option<String>,
        #[arg(long)]
        prompt: Option<String>,
        /// Camera direction x,y,z for `--model` edits.
        #[arg(long, default_value = "1,1,1")]
        view: String,
        #[arg(long, value_enum, default_value_t = LocalizerArg::Oracle)]
        localizer: LocalizerArg,
        #[arg(long, value_enum, default_value_t = DirArg::Delete)]
        direction: DirArg,
        /// Output directory (record edits) or file (model edits).
        #[arg(long)]
        out: PathBuf,
        /// Also write ground-truth targets here.
        #[arg(long)]
        gt_out: Option<PathBuf>,
    },
    /// Score predicted models against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Edit worker pool size; defaults to the CPU count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the canned localizer/annotator used by tests.
    MockMllm {
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: String,
    },
    /// Check a `.brj` file; exits 0 iff the model is valid.
    Validate { path: PathBuf },
}

fn parse_floats<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{what}: expected {N} comma-separated numbers"))?;
    v.try_into().map_err(|_| anyhow::anyhow!("{what}: expected {N} numbers"))
}

fn remote_client() -> Result<RemoteClient> {
    Ok(RemoteClient::from_env()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { count, seed, out, ops } => {
            let t = Instant::now();
            let manifest = build_dataset(count, seed, &out, ops)?;
            println!(
                "{} records (train {}, val {}, test {}) in {:.1}s, manifest sha256 {}",
                manifest.count,
                manifest.splits.train,
                manifest.splits.val,
                manifest.splits.test,
                t.elapsed().as_secs_f64(),
                manifest.records_sha256
            );
        }
        Command::Train {
            data,
            out,
            width,
            heads,
            layers,
            lr,
            batch,
            seed,
            max_epochs,
            overfit,
            direction,
            identity,
            no_positional,
        } => {
            let dataset = Dataset::load(&data)?;
            let mut config = match overfit {
                Some(n) => brepler_core::pipeline::overfit_config(seed, n, 2000),
                None => ModifierConfig {
                    seed,
                    train: TrainConfig::default(),
                    ..ModifierConfig::default()
                },
            };
            config.width = width;
            config.heads = heads;
            config.encoder_layers = layers;
            config.decoder_layers = layers;
            config.positional = !no_positional;
            config.direction = direction.into();
            config.task = if identity { Task::Identity } else { Task::Edit };
            if let Some(lr) = lr {
                config.train.learning_rate = lr;
            }
            if let Some(b) = batch {
                config.train.batch_size = b;
            }
            if let Some(e) = max_epochs {
                config.train.max_epochs = e;
                if overfit.is_some() {
                    config.train.patience = e;
                }
            }
            let (params, report) = train_on_dataset(&dataset, &config, overfit)?;
            save_checkpoint(&out, &params)?;
            let report_path = out.with_extension("report.json");
            fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
            println!(
                "{} epochs, {} steps, loss {:.6e} -> train {:.6e} / val {:.6e}, {:.1}s; checkpoint {}",
                report.epochs.len(),
                report.steps,
                report.initial_loss,
                report.final_train_loss,
                report.final_val_loss,
                report.wall_time_secs,
                out.display()
            );
        }
        Command::Edit {
            checkpoint,
            data,
            record,
            split,
            limit,
            model,
            bbox,
            prompt,
            view,
            localizer,
            direction,
            out,
            gt_out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let direction: Direction = direction.into();
            let client = if localizer == LocalizerArg::Remote { Some(remote_client()?) } else { None };
            let loc = match &client {
                Some(c) => Localizer::Remote(c),
                None => Localizer::Oracle,
            };
            if let Some(path) = model {
                let m = parse_brep(&fs::read_to_string(&path)?)?;
                let view = Viewpoint::from_direction(parse_floats::<3>(&view, "--view")?.into(), 0)?;
                let (bbox, instruct) = match (&bbox, &prompt, &client) {
                    (Some(b), Some(p), None) => {
                        let [a, b2, c, d] = parse_floats::<4>(b, "--bbox")?;
                        (BBox2D::new(a, b2, c, d)?, p.clone())
                    }
                    (_, Some(p), Some(c)) => {
                        let r = c.localize(&brepler_core::render::render_model(&m, &view), p)?;
                        (r.bbox, r.instruct_prompt)
                    }
                    _ => bail!("--model edits need --prompt plus --bbox (oracle) or --localizer remote"),
                };
                let o = edit(&m, &view, &bbox, &instruct, &params, &EditOptions::default())?;
                fs::write(&out, brepler_core::brep::serialize_brep(&o.model))?;
                println!("{}", serde_json::to_string(&o.report)?);
                return Ok(ExitCode::SUCCESS);
            }
            let data = data.context("--data or --model is required")?;
            let dataset = Dataset::load(&data)?;
            let mut records = match &record {
                Some(id) => vec![dataset.get(id).with_context(|| format!("unknown record {id}"))?],
                None => dataset.split(split.into()),
            };
            if let Some(n) = limit {
                records.truncate(n);
            }
            let (mut ok, mut valid) = (0, 0);
            for r in &records {
                let e = edit_record(r, direction, &params, loc, &EditOptions::default());
                if let Ok(o) = &e.outcome {
                    ok += 1;
                    valid += usize::from(o.report.valid);
                }
                write_edit(&out, &e)?;
            }
            if let Some(gt) = gt_out {
                write_targets(&gt, &records, direction)?;
            }
            println!("edited {} records: {ok} produced a model, {valid} valid", records.len());
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate_dirs(&pred, &gt)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
            let table = report.table();
            fs::write(out.join("eval.txt"), &table)?;
            print!("{table}");
        }
        Command::Serve {
            addr,
            data,
            checkpoint,
            workers,
        } => {
            let params = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let remote = RemoteClient::from_env().ok();
            let mut state = ServiceState::new(params, remote, workers.unwrap_or_else(default_workers));
            if let Some(d) = data {
                state.add_dataset(&Dataset::load(&d)?);
            }
            println!("listening on http://{addr}");
            serve_blocking(&addr, state)?;
        }
        Command::MockMllm { addr } => {
            let server = MockServer::start(&addr, MockReplies::default())?;
            println!("mock localizer on {}", server.url());
            server.wait();
        }
        Command::Validate { path } => {
            let m = parse_brep(&fs::read_to_string(&path)?)?;
            let report = validity_report(&m);
            println!("{}", serde_json::to_string(&report)?);
            return Ok(if report.valid { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

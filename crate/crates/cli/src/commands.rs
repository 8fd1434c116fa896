//! Subcommand definitions and dispatch.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedgan::cascade::write_refresh_csv;
use fedgan::diffcore::{Rng, Tensor};
use fedgan::federation::{deserialize_generator, serialize_generator, serve, Selector};
use fedgan::fusion::{sample_pairs, PairedDataset};
use fedgan::gan::write_history_csv;
use fedgan::synthdata::write_csv;

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::pipeline::{self, DemoOutcome, RegistryHandle};
use crate::render::{component_marks, render_ppm};

#[derive(Parser, Debug)]
#[command(name = "fedgan", version, about = "Federated GAN fusion experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=7`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Sample the demo's real paired data to real.csv.
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one location's GAN on its own data and save the generator.
    TrainLocal {
        /// Zero-based location index.
        #[arg(long, default_value_t = 0)]
        location: usize,
        /// Also upload under this id.
        #[arg(long)]
        upload: Option<String>,
    },
    /// Upload a model file.
    Upload {
        #[arg(long)]
        id: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "cli")]
        creator: String,
    },
    /// Fetch a model file.
    Fetch {
        #[arg(long)]
        id: String,
        /// Defaults to the latest version.
        #[arg(long)]
        version: Option<u32>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Serve the registry at `registry.endpoint`.
    Serve,
    /// Fuse frozen registry models with a new generator on paired data.
    Fuse {
        /// Frozen model ids, in slot order.
        #[arg(long = "frozen", required = true)]
        frozen: Vec<String>,
        /// Start the trainable slot from this registry model.
        #[arg(long)]
        warm_start: Option<String>,
        /// Upload the trained generator under this id.
        #[arg(long)]
        publish: Option<String>,
    },
    /// Train G1, fuse G2 onto it, then run the refreshing stage-2 loop for G3.
    Cascade,
    /// Score a sample file against the oracle.
    Eval {
        #[arg(long)]
        input: PathBuf,
    },
    /// Scatter-plot a sample file as PPM.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "plot.ppm")]
        output: String,
    },
    /// Run the configured demo end to end.
    Demo,
}

pub fn load_config(global: &Global) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &global.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

/// Reads a CSV sample file written by this tool into 2-D components.
pub fn read_samples(path: &Path) -> Result<PairedDataset> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let width = reader.headers()?.len();
    if width == 0 || width % 2 != 0 {
        bail!("{}: expected an even number of columns, got {width}", path.display());
    }
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        for field in record.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f32>()
                    .with_context(|| format!("{}: row {}: {field:?}", path.display(), i + 2))?,
            );
        }
    }
    let rows = data.len() / width;
    if rows == 0 {
        bail!("{}: no rows", path.display());
    }
    let t = Tensor::matrix(rows, width, data)?;
    Ok(PairedDataset::new(t, vec![2; width / 2])?)
}

fn rows_f64(data: &PairedDataset) -> Vec<Vec<f64>> {
    data.samples()
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn stage_demo_outputs(out: &mut Outputs, o: &DemoOutcome) -> Result<()> {
    out.write_with("metrics.csv", |b| write_history_csv(&o.history, b))?;
    for (k, h) in o.client_histories.iter().enumerate() {
        out.write_with(&format!("metrics_client{}.csv", k + 1), |b| write_history_csv(h, b))?;
    }
    if let Some(h) = &o.stage1_history {
        out.write_with("metrics_stage1.csv", |b| write_history_csv(h, b))?;
    }
    out.write_with("pairs.csv", |b| write_csv(&o.samples, b))?;
    out.write("eval.csv", &o.evaluation.to_csv())?;
    if let Some(log) = &o.refresh_log {
        out.write_with("refresh_log.csv", |b| write_refresh_csv(log, b))?;
    }
    out.write("plot.ppm", &render_ppm(&component_marks(&rows_f64(&o.samples)))?)?;
    Ok(())
}

fn finish(out: Outputs, aborted: Option<String>) -> Result<()> {
    if let Some(reason) = aborted {
        bail!("run aborted ({reason}); outputs left with the .partial suffix in {}", out.dir().display());
    }
    out.commit()?;
    Ok(())
}

/// Runs one parsed invocation. Outputs go to `out.dir`.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let mut out = Outputs::create(&cfg.out_dir)?;
    out.write_final("config.resolved", cfg.resolved().as_bytes())?;
    match &cli.command {
        Command::GenData { n } => {
            let mut c = cfg.clone();
            if let Some(n) = n {
                c.fusion.samples = *n;
            }
            out.write_with("real.csv", |b| write_csv(&pipeline::paired_data(&c, c.demo), b))?;
            finish(out, None)
        }
        Command::TrainLocal { location, upload } => {
            let data = pipeline::location_data(&cfg, cfg.demo, *location)?;
            let client = pipeline::LocalClient::train(&cfg, data, cfg.seed + *location as u64)?;
            out.write_with("metrics.csv", |b| write_history_csv(client.history(), b))?;
            let bytes = serialize_generator(client.generator());
            out.write(&format!("location{}.fgn", location + 1), &bytes)?;
            if let Some(id) = upload {
                let v = RegistryHandle::persistent(&cfg)?
                    .connect()?
                    .upload(id, &format!("location{}", location + 1), &bytes)
                    .with_context(|| format!("uploading {id}"))?;
                println!("{id} v{v}");
            }
            finish(out, None)
        }
        Command::Upload { id, model, creator } => {
            let bytes = std::fs::read(model).with_context(|| format!("reading {}", model.display()))?;
            let v = RegistryHandle::persistent(&cfg)?
                .connect()?
                .upload(id, creator, &bytes)
                .with_context(|| format!("uploading {id}"))?;
            println!("{id} v{v}");
            finish(out, None)
        }
        Command::Fetch { id, version, output } => {
            let selector = version.map_or(Selector::Latest, Selector::Version);
            let env = RegistryHandle::persistent(&cfg)?
                .connect()?
                .fetch(id, selector)
                .with_context(|| format!("fetching {id}"))?;
            std::fs::write(output, &env.payload).with_context(|| format!("writing {}", output.display()))?;
            println!("{id} v{}", env.version);
            finish(out, None)
        }
        Command::Serve => {
            let ep = cfg
                .registry_endpoint
                .clone()
                .ok_or_else(|| anyhow!("serve requires registry.endpoint"))?;
            let registry = Arc::new(pipeline::local_registry(&cfg)?);
            let server = serve(registry, ep.as_str()).with_context(|| format!("binding {ep}"))?;
            println!("serving on {}", server.addr());
            server.wait();
            Ok(())
        }
        Command::Fuse {
            frozen,
            warm_start,
            publish,
        } => {
            let reg = RegistryHandle::persistent(&cfg)?.connect()?;
            let fetch = |id: &str| -> Result<_> {
                let env = reg.fetch(id, Selector::Latest).with_context(|| format!("fetching {id}"))?;
                Ok(deserialize_generator(&env.payload).with_context(|| format!("decoding {id}"))?)
            };
            let gens = frozen.iter().map(|id| fetch(id)).collect::<Result<Vec<_>>>()?;
            let warm = warm_start.as_deref().map(fetch).transpose()?;
            let data = pipeline::paired_data(&cfg, cfg.demo);
            if data.component_dims().len() != gens.len() + 1 {
                bail!(
                    "demo {} pairs {} components; got {} frozen models",
                    cfg.demo,
                    data.component_dims().len(),
                    gens.len()
                );
            }
            let (net, history) = pipeline::fuse(&cfg, &gens, warm, &data)?;
            let samples = sample_pairs(&net, cfg.eval.samples, &mut Rng::new(cfg.seed, pipeline::streams::EVAL_PAIRS))?;
            out.write_with("metrics.csv", |b| write_history_csv(&history, b))?;
            out.write_with("pairs.csv", |b| write_csv(&samples, b))?;
            out.write("eval.csv", &pipeline::evaluate_rows(&cfg, &samples)?.to_csv())?;
            let bytes = serialize_generator(net.trainable());
            out.write("fused.fgn", &bytes)?;
            if let Some(id) = publish {
                let v = reg.upload(id, "fusion", &bytes).with_context(|| format!("uploading {id}"))?;
                println!("{id} v{v}");
            }
            finish(out, None)
        }
        Command::Cascade => {
            let mut c = cfg.clone();
            c.demo = crate::config::Demo::Future;
            let outcome = pipeline::future(&c, &RegistryHandle::from_config(&c)?)?;
            stage_demo_outputs(&mut out, &outcome)?;
            finish(out, outcome.aborted)
        }
        Command::Eval { input } => {
            let data = read_samples(input)?;
            out.write("eval.csv", &pipeline::evaluate_rows(&cfg, &data)?.to_csv())?;
            finish(out, None)
        }
        Command::Render { input, output } => {
            let data = read_samples(input)?;
            out.write(output, &render_ppm(&component_marks(&rows_f64(&data)))?)?;
            finish(out, None)
        }
        Command::Demo => {
            let outcome = pipeline::run_demo(&cfg)?;
            stage_demo_outputs(&mut out, &outcome)?;
            finish(out, outcome.aborted)
        }
    }
}

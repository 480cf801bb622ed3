use crate::args::*;
use crate::ppm;
use augsearch_core::checkpoint::{self, CheckpointError};
use augsearch_core::gradcheck;
use augsearch_core::policy::PolicyError;
use augsearch_core::policy_file::PolicyFileError;
use augsearch_core::search::{ablation_grid, distance_estimate, recovery, AblationAxis};
use augsearch_core::synthetic::SyntheticError;
use augsearch_core::{
    make_synthetic, DataError, DatasetBundle, GroundTruth, Policy, PolicyFile, SearchError, Searcher,
    SyntheticSpec,
};
use serde::Serialize;
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: Box<CliError>,
    },
    #[error("synthetic spec: {0}")]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    PolicyFile(#[from] PolicyFileError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

/// Runs a file loader and names the file in any error.
fn from_file<T, E: Into<CliError>>(path: &Path, load: impl FnOnce(&Path) -> std::result::Result<T, E>) -> Result<T> {
    load(path).map_err(|e| CliError::Input {
        path: path.display().to_string(),
        source: Box::new(e.into()),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The first output line of every run: the command and all resolved
/// settings.
fn announce(command: &str, settings: serde_json::Value) {
    println!("{}", json!({ "command": command, "resolved": settings }));
}

struct Inputs {
    source: DatasetBundle,
    target: Option<DatasetBundle>,
    truth: Option<GroundTruth>,
    synthetic: Option<SyntheticSpec>,
}

fn load_inputs(args: &DataArgs) -> Result<Inputs> {
    let mut inputs = if let Some(spec) = &args.input.synthetic {
        let spec: SyntheticSpec = spec.parse()?;
        let (source, target, truth) = make_synthetic(&spec)?;
        Inputs {
            source,
            target: Some(target),
            truth: Some(truth),
            synthetic: Some(spec),
        }
    } else {
        let path = args.input.data.as_ref().expect("clap requires an input");
        Inputs {
            source: from_file(path, DatasetBundle::load)?,
            target: args.target.as_deref().map(|t| from_file(t, DatasetBundle::load)).transpose()?,
            truth: None,
            synthetic: None,
        }
    };
    if let Some(n) = args.subset {
        inputs.source = inputs.source.subset(n, args.subset_seed)?;
        log::info!("training subset per-class counts: {:?}", inputs.source.class_counts());
    }
    Ok(inputs)
}

fn input_json(args: &DataArgs, inputs: &Inputs) -> serde_json::Value {
    json!({
        "data": args.input.data,
        "synthetic": inputs.synthetic,
        "target": args.target,
        "subset": args.subset,
        "subset_seed": args.subset_seed,
        "source_images": inputs.source.len(),
        "source_class_counts": inputs.source.class_counts(),
        "target_images": inputs.target.as_ref().map(|t| t.len()),
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Search(c) => search(c),
        Command::Apply(c) => apply(c),
        Command::Render(c) => render(c),
        Command::Gradcheck(c) => gradcheck_cmd(c),
        Command::Ablate(c) => ablate(c),
        Command::Compare(c) => compare(c),
        Command::Synthesize(c) => synthesize(c),
    }
}

fn search(c: SearchCmd) -> Result<ExitCode> {
    let inputs = load_inputs(&c.data)?;
    let mut searcher = match &c.resume {
        Some(path) => {
            let mut state = from_file(path, checkpoint::load)?;
            // Only the run length may change on resume.
            if let Some(e) = c.search.epochs {
                state.config.epochs = e;
            }
            if let Some(m) = c.search.max_steps {
                state.config.max_steps = Some(m);
            }
            Searcher::resume(state, &inputs.source, inputs.target.as_ref())?
        }
        None => Searcher::new(c.search.resolve(), &inputs.source, inputs.target.as_ref())?,
    };
    announce(
        "search",
        json!({
            "config": searcher.state.config,
            "input": input_json(&c.data, &inputs),
            "out": c.out,
            "log": c.log,
            "checkpoint": c.checkpoint,
            "checkpoint_every": c.checkpoint_every,
            "resume": c.resume,
            "start_step": searcher.state.step,
            "total_steps": searcher.total_steps(),
        }),
    );

    let mut log = match &c.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => None,
    };
    while !searcher.is_done() {
        let report = searcher.step()?;
        if let (Some(w), Some(p)) = (log.as_mut(), c.log.as_ref()) {
            writeln!(w, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(io_err(p))?;
        }
        if let (Some(every), Some(path)) = (c.checkpoint_every, c.checkpoint.as_ref()) {
            if every > 0 && searcher.state.step % every == 0 {
                checkpoint::save(&searcher.state, path)?;
            }
        }
    }
    if let (Some(mut w), Some(p)) = (log, c.log.as_ref()) {
        w.flush().map_err(io_err(p))?;
    }
    if let Some(path) = &c.checkpoint {
        checkpoint::save(&searcher.state, path)?;
    }
    let outcome = searcher.finish();
    PolicyFile::from_policy(&outcome.policy).save(&c.out)?;
    let rec = inputs.truth.as_ref().and_then(|t| recovery(&outcome.policy, t));
    println!(
        "{}",
        json!({
            "steps": outcome.history.len(),
            "final": outcome.history.last(),
            "policy": c.out,
            "recovery": rec,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn apply(c: ApplyCmd) -> Result<ExitCode> {
    announce("apply", serde_json::to_value(&c).expect("serializes"));
    let policy = from_file(&c.policy, PolicyFile::load)?.to_policy()?;
    let data = from_file(&c.data, DatasetBundle::load)?;
    let (images, traces) = policy.apply_inference(&data.images, c.chunk_size, c.seed)?;
    let out = DatasetBundle::new(format!("{}-augmented", data.name), images, data.labels.clone(), data.class_count)?;
    out.save(&c.out)?;
    let applied: usize = traces
        .iter()
        .flat_map(|t| &t.stages)
        .map(|s| s.applied.iter().filter(|&&a| a).count())
        .sum();
    println!(
        "{}",
        json!({ "images": out.len(), "chunks": traces.len(), "ops_applied": applied, "out": c.out })
    );
    Ok(ExitCode::SUCCESS)
}

fn render(c: RenderCmd) -> Result<ExitCode> {
    announce("render", serde_json::to_value(&c).expect("serializes"));
    let data = from_file(&c.data, DatasetBundle::load)?;
    let count = c.count.min(data.len());
    let originals = data.images.narrow0(0, count).expect("count within range");
    let augmented = match &c.policy {
        Some(p) => {
            let policy: Policy = from_file(p, PolicyFile::load)?.to_policy()?;
            Some(policy.apply_inference(&originals, c.chunk_size, c.seed)?)
        }
        None => None,
    };
    std::fs::create_dir_all(&c.out_dir).map_err(io_err(&c.out_dir))?;
    let mut trace = String::new();
    let mut written = Vec::new();
    for i in 0..count {
        let panels: Vec<_> = match &augmented {
            Some((aug, _)) => vec![&originals, aug],
            None => vec![&originals],
        };
        let bytes = ppm::encode_row(&panels, i).map_err(io_err(&c.out_dir))?;
        let path: PathBuf = c.out_dir.join(format!("image_{i:04}.ppm"));
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
        trace.push_str(&format!("image {i} (label {})", data.labels[i]));
        match &augmented {
            Some((_, traces)) => {
                let t = traces.iter().find(|t| (t.start..t.start + t.len).contains(&i)).expect("covered");
                trace.push_str(&format!(": sub-policy {}", t.sub_policy));
                for s in &t.stages {
                    let state = if s.applied[i - t.start] { "applied" } else { "skipped" };
                    trace.push_str(&format!(", {} mu={:.4} {state}", s.op.name(), s.magnitude));
                }
            }
            None => trace.push_str(": original only"),
        }
        trace.push('\n');
    }
    let trace_path = c.out_dir.join("trace.txt");
    std::fs::write(&trace_path, trace).map_err(io_err(&trace_path))?;
    println!("{}", json!({ "images": written, "trace": trace_path }));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(c: GradcheckCmd) -> Result<ExitCode> {
    announce("gradcheck", serde_json::to_value(&c).expect("serializes"));
    let rows = gradcheck::run_suite(c.op);
    print!("{}", gradcheck::format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn ablate(c: AblateCmd) -> Result<ExitCode> {
    let inputs = load_inputs(&c.data)?;
    let axis: AblationAxis = c.axis.into();
    let values = c.values.clone().unwrap_or_else(|| match axis {
        AblationAxis::SubPolicies => vec![1, 2, 4, 8],
        AblationAxis::Stages => vec![1, 2, 3, 4],
    });
    let config = c.search.resolve();
    announce(
        "ablate",
        json!({
            "config": config,
            "axis": axis,
            "values": values,
            "input": input_json(&c.data, &inputs),
            "out": c.out,
        }),
    );
    let report = ablation_grid(
        &config,
        axis,
        &values,
        &inputs.source,
        inputs.target.as_ref(),
        inputs.truth.as_ref(),
    )?;
    for row in &report.rows {
        println!("{}", serde_json::to_string(row).expect("row serializes"));
    }
    println!("{}", json!({ "trend": report.trend }));
    if let Some(path) = &c.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Comparison {
    unaugmented: f64,
    trained_policy: f64,
    random_policy: f64,
}

fn compare(c: CompareCmd) -> Result<ExitCode> {
    let inputs = load_inputs(&c.data)?;
    announce(
        "compare",
        json!({
            "policy": c.policy,
            "critic_steps": c.critic_steps,
            "batch_size": c.batch_size,
            "chunk_size": c.chunk_size,
            "seed": c.seed,
            "input": input_json(&c.data, &inputs),
        }),
    );
    let trained = from_file(&c.policy, PolicyFile::load)?.to_policy()?;
    let mut rng = augsearch_core::rng::stream(c.seed, &[augsearch_core::rng::purpose::POLICY_INIT]);
    let random = Policy::random(&trained.ops, trained.l(), trained.k(), trained.lambda, trained.eta, &mut rng)?;
    let real = &inputs.target.as_ref().unwrap_or(&inputs.source).images;
    let source = &inputs.source.images;
    let estimate = |fake: &augsearch_autodiff::Tensor| distance_estimate(real, fake, c.critic_steps, c.batch_size, c.seed);
    let (with_trained, _) = trained.apply_inference(source, c.chunk_size, c.seed)?;
    let (with_random, _) = random.apply_inference(source, c.chunk_size, c.seed)?;
    let result = Comparison {
        unaugmented: estimate(source)?,
        trained_policy: estimate(&with_trained)?,
        random_policy: estimate(&with_random)?,
    };
    println!("{}", serde_json::to_string(&result).expect("serializes"));
    Ok(ExitCode::SUCCESS)
}

fn synthesize(c: SynthesizeCmd) -> Result<ExitCode> {
    let spec: SyntheticSpec = c.synthetic.parse()?;
    announce(
        "synthesize",
        json!({ "synthetic": spec, "source_out": c.source_out, "target_out": c.target_out }),
    );
    let (source, target, truth) = make_synthetic(&spec)?;
    source.save(&c.source_out)?;
    target.save(&c.target_out)?;
    println!("{}", json!({ "images": source.len(), "ground_truth": truth }));
    Ok(ExitCode::SUCCESS)
}

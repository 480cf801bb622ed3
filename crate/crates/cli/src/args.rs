use augsearch_core::search::AblationAxis;
use augsearch_core::{OpKind, ParamMap, SearchConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "augsearch", version, about = "Differentiable augmentation policy search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search for a policy and write it as JSON.
    Search(SearchCmd),
    /// Apply a policy in inference mode to an AUG1 dataset.
    Apply(ApplyCmd),
    /// Write originals (and augmented versions) as PPM images.
    Render(RenderCmd),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckCmd),
    /// Repeat the search over several sub-policy or stage counts.
    Ablate(AblateCmd),
    /// Estimate how close a trained and a random policy bring the source
    /// to the target distribution.
    Compare(CompareCmd),
    /// Write a synthetic source/target pair as AUG1 files.
    Synthesize(SynthesizeCmd),
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false, id = "input")]
pub struct InputArgs {
    /// AUG1 dataset of source images.
    #[arg(long, group = "input")]
    pub data: Option<PathBuf>,
    /// Synthetic pair, e.g. `rotated_pair:angle=20,n=256,seed=0`.
    #[arg(long, group = "input")]
    pub synthetic: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// AUG1 dataset supplying the real batches; defaults to the source.
    #[arg(long, conflicts_with = "synthetic")]
    pub target: Option<PathBuf>,
    /// Train on a uniform random subset of this many source images.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "subset")]
    pub subset_seed: u64,
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    s.parse::<OpKind>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MapArg {
    Sigmoid,
    Direct,
}

/// Search hyperparameters; unset flags take the library defaults.
#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Stop after this many steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Number of sub-policies L.
    #[arg(short = 'L', long = "sub-policies")]
    pub l: Option<usize>,
    /// Operations per sub-policy K.
    #[arg(short = 'K', long = "stages")]
    pub k: Option<usize>,
    /// Relaxed Bernoulli temperature.
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Mixture softmax temperature.
    #[arg(long)]
    pub eta: Option<f32>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    /// Classification loss weight.
    #[arg(long)]
    pub cls_coef: Option<f32>,
    #[arg(long)]
    pub gp_coef: Option<f32>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Critic updates per policy update.
    #[arg(long)]
    pub critic_steps: Option<usize>,
    /// Comma-separated candidate operations.
    #[arg(long, value_delimiter = ',', value_parser = parse_op)]
    pub ops: Option<Vec<OpKind>>,
    #[arg(long, value_enum)]
    pub param_map: Option<MapArg>,
}

impl SearchArgs {
    pub fn resolve(&self) -> SearchConfig {
        let d = SearchConfig::default();
        SearchConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            max_steps: self.max_steps.or(d.max_steps),
            l: self.l.unwrap_or(d.l),
            k: self.k.unwrap_or(d.k),
            lambda: self.lambda.unwrap_or(d.lambda),
            eta: self.eta.unwrap_or(d.eta),
            lr: self.lr.unwrap_or(d.lr),
            betas: (self.beta1.unwrap_or(d.betas.0), self.beta2.unwrap_or(d.betas.1)),
            adam_eps: d.adam_eps,
            cls_coef: self.cls_coef.unwrap_or(d.cls_coef),
            gp_coef: self.gp_coef.unwrap_or(d.gp_coef),
            chunk_size: self.chunk_size.unwrap_or(d.chunk_size),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            critic_steps: self.critic_steps.unwrap_or(d.critic_steps),
            ops: self.ops.clone().unwrap_or(d.ops),
            param_map: match self.param_map {
                Some(MapArg::Sigmoid) => ParamMap::Sigmoid,
                Some(MapArg::Direct) => ParamMap::Direct,
                None => d.param_map,
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct SearchCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Policy JSON output.
    #[arg(long, default_value = "policy.json")]
    pub out: PathBuf,
    /// Line-delimited JSON progress log, one record per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Checkpoint written at the end of the run (and periodically with
    /// `--checkpoint-every`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint. Its stored configuration is used except
    /// for `--epochs` and `--max-steps`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ApplyCmd {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Augmented AUG1 output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct RenderCmd {
    #[arg(long)]
    pub data: PathBuf,
    /// Without a policy only the originals are written.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of images to render.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckCmd {
    /// Check only this operation.
    #[arg(long, value_parser = parse_op)]
    pub op: Option<OpKind>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    /// Vary L.
    SubPolicies,
    /// Vary K.
    Stages,
}

impl From<AxisArg> for AblationAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::SubPolicies => AblationAxis::SubPolicies,
            AxisArg::Stages => AblationAxis::Stages,
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated values; defaults to 1,2,4,8 for sub-policies and
    /// 1,2,3,4 for stages.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub policy: PathBuf,
    /// Critic updates used for each distance estimate.
    #[arg(long, default_value_t = 300)]
    pub critic_steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthesizeCmd {
    #[arg(long)]
    pub synthetic: String,
    #[arg(long)]
    pub source_out: PathBuf,
    #[arg(long)]
    pub target_out: PathBuf,
}

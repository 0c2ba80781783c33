use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "graphadapt", version, about = "Graph adapter, low-rank update, prompt and metric tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Similarity-graph adapter
    #[command(subcommand)]
    Dsga(DsgaCommand),
    /// Low-rank projection update
    #[command(subcommand)]
    Lora(LoraCommand),
    /// Point prompts from a foreground mask
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Candidate instance masks
    #[command(subcommand)]
    Instances(InstancesCommand),
    /// Training objective
    #[command(subcommand)]
    Loss(LossCommand),
    /// Evaluation metrics
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Trainable-parameter accounting
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Write a complete synthetic run to a directory
    Demo(DemoArgs),
    /// Foreground-to-instance stage on files
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Subcommand)]
pub enum DsgaCommand {
    Forward(DsgaForward),
}

#[derive(Args)]
pub struct DsgaForward {
    /// Embedding field `[B, H, W, D]`
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of parameter tensors
    #[arg(long)]
    pub params: PathBuf,
    /// Adapter or pipeline configuration; defaults sized to the input
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub emit_graph: Option<PathBuf>,
    /// Overrides the configured dropout seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum LoraCommand {
    Apply(LoraApply),
}

#[derive(Args)]
pub struct LoraApply {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub rank: usize,
    /// Defaults to the rank
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Subcommand)]
pub enum PromptsCommand {
    Generate(PromptsGenerate),
}

#[derive(Args)]
pub struct PromptsGenerate {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub nmin: usize,
    #[arg(long, default_value_t = 1024)]
    pub nmax: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum InstancesCommand {
    Dedup(InstancesDedup),
}

#[derive(Args)]
pub struct InstancesDedup {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub iou_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum LossCommand {
    Eval(LossEval),
    EmaSim(EmaSim),
}

#[derive(Args)]
pub struct LossEval {
    /// Probability map `[H, W]` (TNS1) or graymap
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "1,1,1")]
    pub weights: String,
    #[arg(long, default_value_t = 2.0)]
    pub focal_gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub focal_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub dice_smooth: f64,
    /// Also write the gradient with respect to the prediction
    #[arg(long)]
    pub grad: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EmaSim {
    /// One contribution triple per line: `[c1, c2, c3]` or
    /// `{"focal": .., "dice": .., "boundary": ..}`
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long, default_value = "1,1,1")]
    pub weights: String,
    /// Treat the trace as raw loss values and scale-normalize them
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum MetricsCommand {
    Saliency(MetricsSaliency),
    Instances(MetricsInstances),
}

#[derive(Args)]
pub struct MetricsSaliency {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Keep the 256-level threshold curve in each row
    #[arg(long)]
    pub curves: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MetricsInstances {
    #[arg(long)]
    pub pred_manifest: PathBuf,
    #[arg(long)]
    pub gt_manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum AuditCommand {
    Params(AuditParams),
}

#[derive(Args)]
pub struct AuditParams {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 8)]
    pub max_dim: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb one operation's analytic gradient (harness self-test)
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum PipelineCommand {
    Run(PipelineRun),
}

#[derive(Args)]
pub struct PipelineRun {
    /// Foreground mask
    #[arg(long)]
    pub mask: PathBuf,
    /// External candidates; the built-in flood-fill realizer is used otherwise
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

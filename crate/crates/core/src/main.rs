use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metalora::harness::eval::report_flops_table;
use metalora::harness::{Method, PipelineConfig, Workspace};
use metalora::lora::load_model;
use metalora::vit::{PrunePlan, ViTConfig};
use metalora::Result;

/// Data-free meta-LoRA distillation on a desk-scale ViT.
#[derive(Parser, Debug)]
#[command(name = "metalora", version)]
struct Cli {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the meta-train and meta-test toy datasets.
    GenData {
        #[arg(long)]
        images_per_class: Option<usize>,
    },
    /// Pretrain the backbone, then tune one LoRA teacher per class subset.
    Pretune {
        #[arg(long)]
        teachers: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Synthesize a task per teacher by inversion.
    Invert {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        alpha_r: Option<f64>,
    },
    /// Distill the teachers into one meta-LoRA.
    MetaTrain(MetaArgs),
    /// Episodic evaluation of the configured methods.
    Eval(EvalArgs),
    /// Analytical FLOPs (and optionally measured throughput) per plan.
    Flops {
        /// Pruning plan in `layer:pruned` notation, e.g. "11:0.75"; repeatable.
        #[arg(long)]
        plan: Vec<String>,
        /// Input sparse ratio; repeatable.
        #[arg(long)]
        sparse_ratio: Vec<f64>,
        /// Use the ViT-B/16 shape instead of the configured model.
        #[arg(long)]
        vit_b: bool,
        /// Time each row on the pretrained backbone.
        #[arg(long)]
        timing: bool,
    },
    /// Every stage in order.
    All {
        #[command(flatten)]
        meta: MetaArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args, Debug)]
struct MetaArgs {
    #[arg(long = "meta-iterations")]
    iterations: Option<usize>,
    /// Meta-train on masked (sparse) tokens.
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    p_interp: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Prune this fraction of tokens after the first block at inference.
    #[arg(long)]
    eval_sparse_ratio: Option<f64>,
    /// Comma-separated subset of meta_lora,nn_baseline,loras_avg_nn,random_lora.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl MetaArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.meta.iterations, self.iterations);
        set(&mut cfg.meta.p_interp, self.p_interp);
        cfg.meta.sparse |= self.sparse;
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        let e = &mut cfg.eval;
        set(&mut e.episodes, self.episodes);
        set(&mut e.n_way, self.n);
        set(&mut e.k_shot, self.k);
        set(&mut e.q_query, self.q);
        set(&mut e.sparse_ratio, self.eval_sparse_ratio);
        if !self.methods.is_empty() {
            e.methods = self.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    let ws = Workspace::new(&cli.out);
    match &cli.cmd {
        Command::GenData { images_per_class } => {
            set(&mut cfg.data.images_per_class, *images_per_class);
            cfg.validate()?;
            let (train, test) = ws.gen_data(&cfg)?;
            println!("meta-train: {} images, {} classes", train.len(), train.num_classes());
            println!("meta-test:  {} images, {} classes", test.len(), test.num_classes());
        }
        Command::Pretune { teachers, max_steps } => {
            set(&mut cfg.teachers.count, *teachers);
            set(&mut cfg.teachers.tuning.max_steps, *max_steps);
            cfg.validate()?;
            for (i, t) in ws.pretune(&cfg)?.iter().enumerate() {
                println!("teacher {:>3} {:?} accuracy {:.3} steps {}", i, t.head.class_names, t.train_accuracy, t.steps);
            }
        }
        Command::Invert { iterations, lr, alpha_r } => {
            set(&mut cfg.inversion.iterations, *iterations);
            set(&mut cfg.inversion.lr, *lr);
            set(&mut cfg.inversion.alpha_r, *alpha_r);
            cfg.validate()?;
            let tasks = ws.invert(&cfg)?;
            println!("wrote {} tasks under {}", tasks.len(), ws.root.join("tasks").display());
        }
        Command::MetaTrain(args) => {
            args.apply(&mut cfg);
            cfg.validate()?;
            let out = ws.meta_train(&cfg)?;
            let last = out.log.last().map_or(f64::NAN, |r| r.loss);
            println!("meta-trained {} iterations, final loss {:.4}", out.log.len(), last);
        }
        Command::Eval(args) => {
            args.apply(&mut cfg)?;
            cfg.validate()?;
            print!("{}", ws.eval(&cfg)?);
        }
        Command::Flops { plan, sparse_ratio, vit_b, timing } => {
            let model = if *vit_b { ViTConfig::vit_b16() } else { cfg.vit.clone() };
            let plans = if plan.is_empty() { cfg.flops.plans.clone() } else { plan.clone() };
            let plans = plans.iter().map(|p| PrunePlan::parse_pruned(p)).collect::<Result<Vec<_>>>()?;
            let ratios = if sparse_ratio.is_empty() && plan.is_empty() { cfg.flops.sparse_ratios.clone() } else { sparse_ratio.clone() };
            let vit = if *timing && !*vit_b { Some(load_model(&ws.backbone())?) } else { None };
            let table = report_flops_table(
                &model,
                &plans,
                &ratios,
                vit.as_ref(),
                timing.then_some((cfg.flops.timing_batch, cfg.flops.timing_runs)),
            )?;
            print!("{}", table);
        }
        Command::All { meta, eval } => {
            meta.apply(&mut cfg);
            eval.apply(&mut cfg)?;
            cfg.validate()?;
            print!("{}", ws.all(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            ExitCode::from(1)
        }
    }
}

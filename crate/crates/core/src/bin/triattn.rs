use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use triattn::data::{gen_synthetic, read_jsonl, write_jsonl, Dataset, SyntheticSpec};
use triattn::grad::{gradcheck_report, Dims, GradcheckRequest};
use triattn::harness::{
    ablation_config, matched_grid, run_ablation, run_layer_sweep, DEFAULT_SEEDS, MATCHED_VARIANTS,
};
use triattn::init::seeded;
use triattn::model::{evaluate, train, Mode, SavedModel, TanConfig};
use triattn::tensor::{mode3_matricize, Matrix, Vector};
use triattn::tri::{tri_attend_traced, TriParams, TriVariant, ValueIntegration};
use triattn::{Error, Result};

#[derive(Parser)]
#[command(name = "triattn", version, about = "Tri-attention toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic vs finite-difference gradients; prints a JSON report.
    Gradcheck(GradcheckArgs),
    /// Writes `<out>.train.jsonl` and `<out>.test.jsonl`.
    Gen(GenArgs),
    /// Trains one configuration and reports test scores.
    Train(TrainArgs),
    /// bi / c-bi / tri grid over seeds; CSV report.
    Ablate(AblateArgs),
    /// Tri-attention accuracy for layer counts 1..=N; CSV report.
    Sweep(SweepArgs),
    /// Prints a worked I=2, J=2, D=3 tri-attention evaluation.
    Demo(DemoArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Defaults to every variant.
    #[arg(long)]
    variant: Option<TriVariant>,
    /// Defaults to every integration.
    #[arg(long)]
    integration: Option<ValueIntegration>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    keys: usize,
    #[arg(long, default_value_t = 2)]
    ctx: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SpecArgs {
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 1.0)]
    gate_strength: f64,
}

impl SpecArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: self.vocab,
            seq_len: self.seq_len,
            n_train: self.n_train,
            n_test: self.n_test,
            gate_strength: self.gate_strength,
            seed,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    spec: SpecArgs,
}

/// Overrides applied on top of `--config` or the built-in settings.
#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON model configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    variant: Option<TriVariant>,
    #[arg(long)]
    integration: Option<ValueIntegration>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ModelArgs {
    fn config(&self, fallback: TanConfig) -> Result<TanConfig> {
        let mut cfg = match &self.config {
            Some(path) => TanConfig::from_json_file(path)?,
            None => fallback,
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.integration = v.default_integration();
        }
        if let Some(i) = self.integration {
            cfg.integration = i;
        }
        if let Some(n) = self.layers {
            cfg.layers = n;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset prefix written by `gen`; synthetic data from the seed otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    /// Where to save the trained model (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    spec: SpecArgs,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Largest layer count.
    #[arg(long = "max-layers", default_value_t = 4)]
    max_layers: usize,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    spec: SpecArgs,
    /// CSV destination, plus one `<stem>.<variant>.plot.csv` per variant.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "tdp")]
    variant: TriVariant,
    #[arg(long)]
    integration: Option<ValueIntegration>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let variants = a.variant.map_or(TriVariant::ALL.to_vec(), |v| vec![v]);
    let integrations = a.integration.map_or(ValueIntegration::ALL.to_vec(), |i| vec![i]);
    let seeds = a.seed.map_or(a.seeds.clone(), |s| vec![s]);
    let dims = Dims { d: a.dim, i: a.keys, j: a.ctx };
    let mut reports = Vec::new();
    for &v in &variants {
        for &i in &integrations {
            for &s in &seeds {
                reports.push(gradcheck_report(&GradcheckRequest::new(v, i, dims, s))?);
            }
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    let doc = json!({ "pass": pass, "reports": reports });
    emit(&format!("{}\n", serde_json::to_string_pretty(&doc)?), a.out.as_deref())?;
    Ok(pass)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let d = gen_synthetic(&a.spec.spec(a.seed))?;
    let (tr, te) = (with_suffix(&a.out, ".train.jsonl"), with_suffix(&a.out, ".test.jsonl"));
    write_jsonl(&tr, &d.train)?;
    write_jsonl(&te, &d.test)?;
    println!("{} ({} examples)", tr.display(), d.train.len());
    println!("{} ({} examples)", te.display(), d.test.len());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.model.config(TanConfig::default())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = match &a.data {
        Some(prefix) => Dataset {
            train: read_jsonl(&with_suffix(prefix, ".train.jsonl"))?,
            test: read_jsonl(&with_suffix(prefix, ".test.jsonl"))?,
        },
        None => gen_synthetic(&a.spec.spec(cfg.seed))?,
    };
    let outcome = train(&cfg, &data.train)?;
    for m in &outcome.epochs {
        println!("epoch {:>3}  loss {:.6}  train_acc {:.4}", m.epoch, m.loss, m.accuracy);
    }
    let scores = evaluate(&outcome.state, &cfg, &data.test)?;
    println!("test accuracy {:.4}  f1 {:.4}", scores.accuracy, scores.f1);
    if let Some(path) = &a.out {
        SavedModel::new(cfg, outcome.state).save(path)?;
        println!("saved {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.model.config(ablation_config())?;
    let variants = a.model.variant.map_or(MATCHED_VARIANTS.to_vec(), |v| vec![v]);
    let mut cells = matched_grid(&variants);
    if let Some(m) = a.model.mode {
        cells.retain(|c| c.mode == m);
    }
    if let Some(i) = a.model.integration {
        for c in cells.iter_mut() {
            c.integration = i;
        }
    }
    let seeds = a.seeds.clone().unwrap_or(DEFAULT_SEEDS.to_vec());
    let report = run_ablation(&cfg, &cells, &a.spec.spec(0), &seeds)?;
    for o in &report.oracles {
        eprintln!(
            "seed {}: rule oracle {:.4}, overlap baseline {:.4}",
            o.seed, o.rule_accuracy, o.overlap_accuracy
        );
    }
    emit(&report.to_csv(), a.out.as_deref())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.model.config(ablation_config())?;
    let variants = a.model.variant.map_or(TriVariant::ALL.to_vec(), |v| vec![v]);
    let layers: Vec<usize> = (1..=a.max_layers).collect();
    let seeds = a.seeds.clone().unwrap_or(DEFAULT_SEEDS.to_vec());
    let report = run_layer_sweep(&cfg, &variants, &layers, &a.spec.spec(0), &seeds)?;
    match &a.out {
        Some(path) => {
            for p in report.write(path)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
        None => emit(&report.to_csv(), None),
    }
}

fn print_matrix(name: &str, m: &Matrix) {
    println!("{name} (columns):");
    for (c, col) in m.columns().iter().enumerate() {
        println!("  [{c}] {}", fmt_vec(col));
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:>10.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_demo(a: &DemoArgs) -> Result<()> {
    let integration = a.integration.unwrap_or(a.variant.default_integration());
    let q = Vector::from(vec![1.0, 0.0, -1.0]);
    let keys = Matrix::from_cols(&[[0.5, 1.0, 0.0], [1.0, -0.5, 0.5]])?;
    let values = Matrix::from_cols(&[[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]])?;
    let ctx = Matrix::from_cols(&[[1.0, 1.0, 1.0], [0.5, -1.0, 2.0]])?;
    let params = TriParams::init(a.variant, integration, 3, &mut seeded(a.seed))?;
    let t = tri_attend_traced(&q, &keys, &values, &ctx, a.variant, integration, &params)?;

    println!("variant {}  integration {}  I=2 J=2 D=3", a.variant, integration);
    println!("q: {}", fmt_vec(q.as_slice()));
    print_matrix("K", &keys);
    print_matrix("V", &values);
    print_matrix("C", &ctx);
    println!("score grid F(q, k_i, c_j):");
    for i in 0..t.scores.rows() {
        let row: Vec<f64> = (0..t.scores.cols()).map(|j| t.scores.get(i, j)).collect();
        println!("  i={i} {}", fmt_vec(&row));
    }
    println!("attention weights alpha_ij:");
    for i in 0..t.weights.rows() {
        let row: Vec<f64> = (0..t.weights.cols()).map(|j| t.weights.get(i, j)).collect();
        println!("  i={i} {}", fmt_vec(&row));
    }
    println!("sum of weights: {:.12}", t.weights.sum());
    println!("contextual values v^c_(i,j) (column m = i*J + j):");
    let vm = mode3_matricize(&t.values);
    for (m, col) in vm.columns().iter().enumerate() {
        println!("  m={m} (i={}, j={}) {}", m / 2, m % 2, fmt_vec(col));
    }
    println!("embedding q_new^c: {}", fmt_vec(t.embedding.as_slice()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|pass| {
            if !pass {
                eprintln!("gradcheck failed");
            }
            pass
        }),
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Demo(a) => cmd_demo(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

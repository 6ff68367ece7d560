use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use object_novelty::mkd::MaskMode;
use object_novelty::runner::{
    report_per_class, run_experiment, DataSource, DefendToggle, Method, ResultTable, RunConfig, RunContext,
};
use object_novelty::splits::{save_scenes, synthetic_dataset};

#[derive(Parser)]
#[command(name = "object-novelty", version, about = "Object-level novelty detection with masked distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the split and write its manifest.
    Split(Common),
    /// Dense prototype tuning of the teacher (stage 1).
    Defend(Common),
    /// Masked distillation into a fresh student (stage 2).
    Distill(Common),
    /// Score the test set.
    Score(Common),
    /// AUROC reports from the test scores.
    Eval(Common),
    /// The full pipeline.
    Run(Common),
    /// Per-class document from result tables of one setting.
    Report {
        /// `results.json` files written by `run`.
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        /// Directory for `per_class.csv` and `per_class.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the toy teacher on synthetic glyphs.
    Pretrain(Common),
    /// Render the configured synthetic data set to PNG files.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    Off,
    On,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Random,
    Guided,
    Sampled,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the toy configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated normal category ids.
    #[arg(long, value_delimiter = ',')]
    normal: Option<Vec<u32>>,
    #[arg(long, value_enum)]
    defend: Option<Toggle>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    defend_epochs: Option<usize>,
    #[arg(long)]
    distill_epochs: Option<usize>,
    #[arg(long, value_enum)]
    mask_mode: Option<Mode>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    heatmaps: Option<usize>,
    /// Any other field as `dotted.path=value` (TOML literal).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().with_context(|| format!("`{key}`: `{p}` is not a table"))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().with_context(|| format!("`{key}` is not inside a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::toy(),
        };
        if !self.set.is_empty() {
            let mut v = toml::Value::try_from(&cfg)?;
            for kv in &self.set {
                let (k, val) = kv.split_once('=').with_context(|| format!("`{kv}` is not KEY=VALUE"))?;
                set_path(&mut v, k.trim(), parse_literal(val.trim()))?;
            }
            cfg = v.try_into()?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(n) = &self.normal {
            cfg.split.normal = n.iter().copied().collect();
        }
        if let Some(t) = self.defend {
            cfg.stages.defend = match t {
                Toggle::Off => DefendToggle::Off,
                Toggle::On => DefendToggle::On,
                Toggle::Both => DefendToggle::Both,
            };
        }
        if let Some(a) = &self.arch {
            cfg.backbone.arch = a.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.backbone.checkpoint = Some(c.clone());
        }
        if let Some(k) = self.prototypes {
            cfg.defend.prototypes = Some(k);
        }
        if let Some(e) = self.defend_epochs {
            cfg.defend.epochs = e;
        }
        if let Some(e) = self.distill_epochs {
            cfg.distill.epochs = e;
        }
        if let Some(m) = self.mask_mode {
            cfg.distill.mask_mode = match m {
                Mode::None => MaskMode::None,
                Mode::Random => MaskMode::Random,
                Mode::Guided => MaskMode::Guided,
                Mode::Sampled => MaskMode::Sampled,
            };
        }
        if let Some(r) = self.mask_ratio {
            cfg.distill.mask_ratio = r;
        }
        if let Some(h) = self.heatmaps {
            cfg.heatmaps = h;
        }
        Ok(cfg)
    }
}

fn per_unit(common: &Common, f: impl Fn(&mut RunContext, &object_novelty::splits::SplitSpec, Method) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut ctx = RunContext::prepare(common.load()?)?;
    let methods = Method::for_toggle(ctx.cfg.stages.defend);
    for spec in ctx.units()? {
        for &m in &methods {
            f(&mut ctx, &spec, m)?;
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Split(c) => {
            let ctx = RunContext::prepare(c.load()?)?;
            for spec in ctx.units()? {
                let s = ctx.stage_split(&spec)?;
                println!(
                    "{} {}: {} train, {} test, excluded {:?}",
                    spec.setting,
                    ctx.unit_id(&spec),
                    s.train.len(),
                    s.test.len(),
                    s.excluded_categories
                );
            }
        }
        Command::Defend(c) => {
            let mut ctx = RunContext::prepare(c.load()?)?;
            for spec in ctx.units()? {
                let p = ctx.stage_defend(&spec)?;
                println!("{}", p.display());
            }
        }
        Command::Distill(c) => per_unit(&c, |ctx, spec, m| {
            let p = ctx.stage_distill(spec, m)?;
            println!("{}", p.display());
            Ok(())
        })?,
        Command::Score(c) => per_unit(&c, |ctx, spec, m| {
            let r = ctx.stage_score(spec, m)?;
            println!("{} {} {}: {} scores", spec.setting, ctx.unit_id(spec), m.tag(), r.len());
            Ok(())
        })?,
        Command::Eval(c) => per_unit(&c, |ctx, spec, m| {
            let r = ctx.stage_eval(spec, m)?;
            println!(
                "{} {} {}: AUROC {:.4} (rank test p = {:.3e})",
                spec.setting,
                ctx.unit_id(spec),
                m.tag(),
                r.auroc,
                r.rank_test_p
            );
            Ok(())
        })?,
        Command::Run(c) => {
            let table = run_experiment(c.load()?)?;
            print!("{}", report_per_class(std::slice::from_ref(&table))?.text());
        }
        Command::Report { tables, out } => {
            let tables: Vec<ResultTable> = tables
                .iter()
                .map(|p| ResultTable::read_json(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<_>>()?;
            let rep = report_per_class(&tables)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("per_class.csv"), rep.csv()?)?;
                std::fs::write(dir.join("per_class.txt"), rep.text())?;
            }
            print!("{}", rep.text());
        }
        Command::Pretrain(c) => {
            let mut cfg = c.load()?;
            cfg.backbone.checkpoint = None;
            let mut ctx = RunContext::prepare(cfg)?;
            ctx.base_teacher()?;
            println!("{}", ctx.out.join("teacher/pretrained.safetensors").display());
        }
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let DataSource::Synthetic { scenes, train, test } = &cfg.data else {
                bail!("the configured data source is not synthetic");
            };
            let all = synthetic_dataset(scenes, *train, *test)?;
            save_scenes(&out, &all)?;
            println!("{} scenes written to {}", all.len(), out.display());
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use prunas_core::data::Dataset;
use prunas_core::easiness::{
    aggregate_profiles, confusion_matrix, profile_network, read_prediction_log, train_reference,
    EasinessProfile, DEFAULT_BINS, REFERENCE_NETS,
};
use prunas_core::nn::{Block, Scaffold, SpaceSpec};
use prunas_core::search::{
    ablate as run_ablation, ablation_csv, finetune as run_finetune, mean_std, write_logit_history,
    AblationMode, SearchConfig, Searcher,
};
use prunas_core::seed;
use prunas_core::supernet::{ArchDescriptor, Supernet};
use prunas_core::train::{predict_probs, FitConfig};
use serde_json::json;

use crate::inputs::{parse_shape, seed_list, DataArgs, Seeds};
use crate::run::{InputFile, Run, RunSpec};
use crate::Fail;

#[derive(Args, Clone, Debug)]
pub struct OutArgs {
    /// Output directory; defaults to a hash-named directory under
    /// $PRUNAS_OUT_ROOT (or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn with_path(path: &Path) -> impl Fn(prunas_core::Error) -> Fail + '_ {
    move |e| {
        let f = Fail::from(e);
        Fail {
            code: f.code,
            msg: format!("{}: {}", path.display(), f.msg),
        }
    }
}

fn load_config(path: &Path) -> Result<SearchConfig, Fail> {
    if !path.exists() {
        return Err(Fail::input(format!("{}: no such file", path.display())));
    }
    let cfg = SearchConfig::load(path).map_err(with_path(path))?;
    Ok(cfg)
}

/// Ranking from `--profile`, else the config's profile, else identity.
fn ranking(
    flag: Option<&Path>,
    cfg: &SearchConfig,
    data: &Dataset,
) -> Result<(Vec<usize>, Option<InputFile>), Fail> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.profile.as_ref().map(PathBuf::from));
    let k = data.num_classes();
    let Some(path) = path else {
        warn!("no easiness profile given; classes are taken in id order");
        return Ok(((0..k).collect(), None));
    };
    if !path.exists() {
        return Err(Fail::input(format!("{}: no such file", path.display())));
    }
    let p = EasinessProfile::load(&path).map_err(with_path(&path))?;
    if p.classes != k {
        return Err(Fail::input(format!(
            "{}: profile covers {} classes, dataset has {k}",
            path.display(),
            p.classes
        )));
    }
    Ok((p.ranking, Some(InputFile::hash(&path)?)))
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Prediction logs (`sample_id,true_label,p_0..p_{K-1}`) to profile
    /// instead of training reference networks.
    #[arg(long, num_args = 1.., conflicts_with_all = ["data", "synth"])]
    pub pred_logs: Vec<PathBuf>,
    /// Number of reference networks to train.
    #[arg(long, default_value_t = 2)]
    pub nets: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn profile(a: ProfileArgs) -> Result<(), Fail> {
    let mut profiles = Vec::new();
    let mut sets: Vec<(Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    let inputs;
    if !a.pred_logs.is_empty() {
        let mut files = Vec::new();
        for path in &a.pred_logs {
            if !path.exists() {
                return Err(Fail::input(format!("{}: no such file", path.display())));
            }
            let (probs, labels) = read_prediction_log(path).map_err(with_path(path))?;
            let k = a.data.classes.or(probs.first().map(Vec::len)).unwrap_or(0);
            let name = path
                .file_stem()
                .map_or("log".into(), |s| s.to_string_lossy().to_string());
            let p = EasinessProfile::from_predictions(&probs, &labels, k, a.bins, &name)
                .map_err(with_path(path))?;
            profiles.push(p);
            sets.push((probs, labels));
            files.push(InputFile::hash(path)?);
        }
        inputs = files;
    } else {
        if !a.data.is_set() {
            return Err(Fail::input("give --data, --synth or --pred-logs"));
        }
        if a.nets == 0 || a.nets > REFERENCE_NETS {
            return Err(Fail::input(format!("--nets must be in 1..={REFERENCE_NETS}")));
        }
        let (data, files) = a.data.load()?;
        inputs = files;
        for v in 0..a.nets {
            info!("training reference network {v} for {} epochs", a.epochs);
            let net = train_reference(&data, v, a.epochs, a.seed)?;
            profiles.push(profile_network(&net, &data, a.bins, &format!("reference-{v}"))?);
            sets.push((predict_probs(&net, &data)?, data.labels().to_vec()));
        }
    }
    let agg = aggregate_profiles(&profiles)?;
    for w in &agg.warnings {
        warn!("{w}");
    }

    let config = json!({
        "command": "profile",
        "nets": if a.pred_logs.is_empty() { a.nets } else { a.pred_logs.len() },
        "epochs": a.epochs,
        "bins": a.bins,
        "seed": a.seed,
        "from_logs": !a.pred_logs.is_empty(),
    });
    let mut run = Run::open(RunSpec {
        command: "profile",
        config_text: pretty(&config),
        inputs,
        seeds: vec![a.seed],
        out: a.out.out,
        force: a.out.force,
    })?;
    agg.save(run.path("profile.json"))?;
    run.record("profile.json")?;

    // confusion summed over networks, rows and columns in easiness order
    let k = agg.classes;
    let mut total = vec![vec![0u64; k]; k];
    for (probs, labels) in &sets {
        for (r, row) in confusion_matrix(probs, labels, &agg.ranking).iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                total[r][c] += v;
            }
        }
    }
    let mut csv = String::from("true\\pred");
    for c in &agg.ranking {
        csv.push_str(&format!(",{c}"));
    }
    csv.push('\n');
    for (r, row) in total.iter().enumerate() {
        csv.push_str(&agg.ranking[r].to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    run.write("confusion.csv", csv.as_bytes())?;

    println!("{:>6} {:>10} {:>6}", "class", "entropy", "n");
    for &c in &agg.ranking {
        let p = &agg.per_class[c];
        println!("{:>6} {:>10.4} {:>6}", c, p.score, p.n);
    }
    let dir = run.finish()?;
    println!("profile written to {}", dir.join("profile.json").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Search config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Easiness profile; overrides the config's `profile`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use all classes in every phase.
    #[arg(long)]
    pub no_schedule: bool,
    /// Never prune candidates.
    #[arg(long)]
    pub no_prune: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn search(a: SearchArgs) -> Result<(), Fail> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_schedule {
        cfg.schedule = false;
    }
    if a.no_prune {
        cfg.prune = false;
    }
    cfg.validate().map_err(with_path(&a.config))?;
    let (data, mut inputs) = a.data.load()?;
    let (ranking, prof) = ranking(a.profile.as_deref(), &cfg, &data)?;
    inputs.extend(prof);
    inputs.insert(0, InputFile::hash(&a.config)?);

    let mut run = Run::open(RunSpec {
        command: "search",
        config_text: cfg.canonical_json()?,
        inputs,
        seeds: vec![cfg.seed],
        out: a.out.out,
        force: a.out.force,
    })?;
    let mut s = Searcher::new(&cfg, &data, &ranking)?;
    let result = s.run(None);
    // the log is flushed even when the run fails
    run.write("log.csv", s.log.to_csv()?.as_bytes())?;
    write_logit_history(&s.history, run.path("logits.csv"))?;
    run.record("logits.csv")?;
    let arch = match result {
        Ok(arch) => arch,
        Err(e) => {
            let dir = run.finish()?;
            eprintln!("partial log written to {}", dir.join("log.csv").display());
            return Err(e.into());
        }
    };
    run.write("arch.json", arch.to_json()?.as_bytes())?;
    let layers: Vec<String> = arch
        .layers
        .iter()
        .map(|c| format!("{}/{}", c.block, c.op))
        .collect();
    println!("layers: {}", layers.join(" "));
    println!("flops: {}", arch.flops);
    let dir = run.finish()?;
    println!("architecture written to {}", dir.join("arch.json").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Architecture descriptor produced by `search`.
    #[arg(long)]
    pub arch: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Held-out samples per class for reporting top-1.
    #[arg(long, default_value_t = 5)]
    pub per_class_val: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Training seeds: `0`, `1,2,3` or `0..5`.
    #[arg(long, default_value = "0", value_parser = seed_list)]
    pub seeds: Seeds,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn finetune(a: FinetuneArgs) -> Result<(), Fail> {
    if !a.arch.exists() {
        return Err(Fail::input(format!("{}: no such file", a.arch.display())));
    }
    let arch = ArchDescriptor::load(&a.arch).map_err(with_path(&a.arch))?;
    let (data, mut inputs) = a.data.load()?;
    inputs.insert(0, InputFile::hash(&a.arch)?);
    if a.batch_size == 0 || a.epochs == 0 {
        return Err(Fail::input("--epochs and --batch-size must be positive"));
    }
    let seeds = a.seeds.0.clone();
    let config = json!({
        "command": "finetune",
        "epochs": a.epochs,
        "lr": a.lr,
        "momentum": a.momentum,
        "weight_decay": a.weight_decay,
        "batch_size": a.batch_size,
        "per_class_val": a.per_class_val,
        "split_seed": a.split_seed,
        "seeds": seeds,
    });
    let split = data.split_train_val(a.per_class_val, a.split_seed)?;
    let mut run = Run::open(RunSpec {
        command: "finetune",
        config_text: pretty(&config),
        inputs,
        seeds: seeds.clone(),
        out: a.out.out,
        force: a.out.force,
    })?;
    let many = seeds.len() > 1;
    let mut top1 = Vec::new();
    for &s in &seeds {
        let fit = FitConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            seed: s,
        };
        let (mut net, m) = run_finetune(&arch, &split, &fit)?;
        let suffix = if many { format!("-seed{s}") } else { String::new() };
        let metrics = json!({
            "seed": s,
            "top1": m.top1,
            "flops": m.flops,
            "params": m.params,
            "epochs": m.epochs,
        });
        run.write(&format!("metrics{suffix}.json"), pretty(&metrics).as_bytes())?;
        let ckpt = format!("weights{suffix}.ckpt");
        prunas_tensor::checkpoint::save(run.path(&ckpt), &net.entries())
            .map_err(|e| Fail::runtime(format!("{ckpt}: {e}")))?;
        run.record(&ckpt)?;
        println!(
            "seed {s}: top1 {:.4} flops {} params {}",
            m.top1, m.flops, m.params
        );
        top1.push(m.top1);
    }
    if many {
        let (mean, std) = mean_std(&top1);
        let summary = json!({ "seeds": seeds, "top1": top1, "top1_mean": mean, "top1_std": std });
        run.write("summary.json", pretty(&summary).as_bytes())?;
        println!("top1 {mean:.4} +- {std:.4} over {} seeds", seeds.len());
    }
    run.finish()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Preset name or a JSON space file.
    #[arg(long, conflicts_with = "arch")]
    pub space: Option<String>,
    /// Architecture descriptor; prints its chosen cells.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Input shape `C,H,W`.
    #[arg(long, value_parser = parse_shape)]
    pub input: Option<[usize; 3]>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
}

fn load_space(s: &str) -> Result<SpaceSpec, Fail> {
    let path = Path::new(s);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Fail::input(format!("{s}: {e}")))?;
        let space: SpaceSpec = serde_json::from_str(&text).map_err(|e| Fail::input(format!("{s}: {e}")))?;
        space.validate().map_err(with_path(path))?;
        return Ok(space);
    }
    SpaceSpec::preset(s).map_err(Fail::from)
}

pub fn flops(a: FlopsArgs) -> Result<(), Fail> {
    if let Some(path) = &a.arch {
        if !path.exists() {
            return Err(Fail::input(format!("{}: no such file", path.display())));
        }
        let arch = ArchDescriptor::load(path).map_err(with_path(path))?;
        let s = &arch.scaffold;
        let scaffold = Scaffold::new(a.input.unwrap_or(s.input), s.stem, s.stages.clone(), s.classes)?;
        let mut rng = seed::stream(0, seed::Stream::Init);
        println!(
            "{:>5} {:>12} {:>8} {:>16} {:>12}",
            "layer", "input", "c_out/s", "choice", "flops"
        );
        let mut total = scaffold.fixed_flops();
        for (slot, c) in scaffold.slots().iter().zip(&arch.layers) {
            let b = Block::build(c.block, c.op, slot.c_in, slot.c_out, slot.stride, &mut rng)?;
            let f = b.flops(slot.input)?;
            total += f;
            let [ci, h, w] = slot.input;
            println!(
                "{:>5} {:>12} {:>8} {:>16} {:>12}",
                slot.index,
                format!("{ci}x{h}x{w}"),
                format!("{}/{}", slot.c_out, slot.stride),
                format!("{}/{}", c.block, c.op),
                f
            );
        }
        println!("fixed {}", scaffold.fixed_flops());
        println!("total {total}");
        return Ok(());
    }
    let name = a.space.as_deref().unwrap_or("mobile");
    let space = load_space(name)?;
    let input = a.input.unwrap_or([1, 16, 16]);
    let scaffold = Scaffold::new(input, space.stem, space.stages.clone(), a.classes)?;
    let mut rng = seed::stream(0, seed::Stream::Init);
    let net = Supernet::build(&space, scaffold, 1.0, &mut rng)?;
    let labels: Vec<String> = space
        .candidates()
        .iter()
        .map(|(b, o)| format!("{b}/{o}"))
        .collect();
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(10);
    let mut head = format!("{:>5} {:>12}", "layer", "input");
    for l in &labels {
        head.push_str(&format!(" {l:>width$}"));
    }
    println!("{head}");
    for (slot, row) in net.scaffold().slots().iter().zip(&net.costs.layers) {
        let [c, h, w] = slot.input;
        let mut line = format!("{:>5} {:>12}", slot.index, format!("{c}x{h}x{w}"));
        for v in row {
            line.push_str(&format!(" {v:>width$}"));
        }
        println!("{line}");
    }
    let fixed = net.costs.fixed;
    let min: u64 = net
        .costs
        .layers
        .iter()
        .map(|r| r.iter().min().copied().unwrap_or(0))
        .sum();
    let max: u64 = net
        .costs
        .layers
        .iter()
        .map(|r| r.iter().max().copied().unwrap_or(0))
        .sum();
    let mean: f64 = net
        .costs
        .layers
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64 / r.len().max(1) as f64)
        .sum();
    println!("fixed {fixed}");
    println!("single-path min {} max {}", fixed + min, fixed + max);
    println!("uniform expected {:.1}", fixed as f64 + mean);
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated modes.
    #[arg(long, default_value = "easy-to-all,hard-to-all,small-only,all-only")]
    pub modes: String,
    #[arg(long, default_value = "0", value_parser = seed_list)]
    pub seeds: Seeds,
    /// Fine-tune epochs for each derived architecture.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn ablate(a: AblateArgs) -> Result<(), Fail> {
    let mut cfg = load_config(&a.config)?;
    let modes: Vec<AblationMode> = a
        .modes
        .split(',')
        .map(|m| m.trim().parse::<AblationMode>())
        .collect::<Result<_, _>>()?;
    let (data, mut inputs) = a.data.load()?;
    let (ranking, prof) = ranking(a.profile.as_deref(), &cfg, &data)?;
    inputs.extend(prof);
    inputs.insert(0, InputFile::hash(&a.config)?);
    let config = json!({
        "command": "ablate",
        "search": serde_json::from_str::<serde_json::Value>(&cfg.canonical_json()?)
            .map_err(|e| Fail::runtime(e.to_string()))?,
        "modes": modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "seeds": a.seeds.0,
        "finetune_epochs": a.epochs,
    });
    let mut run = Run::open(RunSpec {
        command: "ablate",
        config_text: pretty(&config),
        inputs,
        seeds: a.seeds.0.clone(),
        out: a.out.out,
        force: a.out.force,
    })?;
    let mut rows = Vec::new();
    for &s in &a.seeds.0 {
        cfg.seed = s;
        info!("ablation seed {s}");
        rows.extend(run_ablation(
            &cfg,
            &data,
            &ranking,
            &modes,
            &prunas_core::search::default_fit(a.epochs, s),
        )?);
    }
    run.write("ablation.csv", ablation_csv(&rows)?.as_bytes())?;
    println!(
        "{:>12} {:>5} {:>8} {:>10} {:>8} {:>10}",
        "mode", "seed", "top1", "flops", "params", "forwards"
    );
    for r in &rows {
        println!(
            "{:>12} {:>5} {:>8.4} {:>10} {:>8} {:>10}",
            r.mode.name(),
            r.seed,
            r.top1,
            r.flops,
            r.params,
            r.sample_forwards
        );
    }
    let dir = run.finish()?;
    println!("results written to {}", dir.join("ablation.csv").display());
    Ok(())
}

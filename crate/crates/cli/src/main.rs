use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dnrselect::imaging::{rasterize_gbuffer, Dataset, DatasetSpec, Image, Split};
use dnrselect::loss::{psnr, ssim_metric};
use dnrselect::render::render_view;
use dnrselect::scene::{Camera, ToyScene, Vec3};
use dnrselect::train::{
    ablate_with, ablation_csv, default_budgets, load_checkpoint, run_pipeline, sweep_csv, sweep_with, trend_audit,
    write_run, SelectorKind, Switch, TrainConfig, TrainData,
};

#[derive(Parser)]
#[command(name = "dnrselect", version, about = "View selection for deferred neural rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy scene into a train/probe/test dataset.
    GenData(GenData),
    /// Select views, train the coarse model, fine-tune and evaluate.
    Train(Train),
    /// Train and evaluate every (budget, method) pair.
    Sweep(Sweep),
    /// Full method plus one run per switch.
    Ablate(Ablate),
    /// Render views from a checkpoint.
    Render(Render),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "cube")]
    scene: String,
    #[arg(long, default_value_t = 40)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Root directory; the dataset lands in `<out>/<scene>/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory containing `cameras.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate and print the resolved config, then stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated view budgets; defaults to the standard ladder below the pool size.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "rl,random,farthest")]
    methods: Vec<String>,
    /// Largest tolerated PSNR drop between consecutive budgets, in dB.
    #[arg(long, default_value_t = 1.0)]
    slack: f64,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    switches: Vec<String>,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split to render when no camera is given.
    #[arg(long, default_value = "test")]
    split: String,
    /// `ex,ey,ez` or `ex,ey,ez:tx,ty,tz` (target defaults to the origin).
    #[arg(long)]
    camera: Option<String>,
    /// Also write prediction | ground truth | error composites.
    #[arg(long)]
    composite: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = DatasetSpec::new(ToyScene::from_name(&a.scene)?, a.views, a.resolution);
    spec.seed = a.seed;
    let ds = Dataset::generate(&spec)?;
    let dir = ds.write(&a.out)?;
    println!(
        "{}: {} train, {} probe, {} test views",
        dir.display(),
        ds.train.len(),
        ds.probe.len(),
        ds.test.len()
    );
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<TrainData> {
    let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(TrainData::from_dataset(&ds)?)
}

/// Resolved config on stdout for `--dry-run`; true when the caller should stop.
fn dry_run(run: &RunArgs, cfg: &TrainConfig) -> bool {
    if run.dry_run {
        print!("{}", cfg.to_toml());
    }
    run.dry_run
}

fn train(a: Train) -> Result<()> {
    let cfg = resolve(&a.run)?;
    if dry_run(&a.run, &cfg) {
        return Ok(());
    }
    let data = load_data(&a.run.data)?;
    let run = run_pipeline(&cfg, &data)?;
    write_run(&run, &data, &a.run.out)?;
    println!(
        "selected {:?}; test psnr {:.3} ssim {:.4}",
        run.log.selected,
        run.log.mean_psnr(),
        run.log.mean_ssim()
    );
    Ok(())
}

fn parse_method(s: &str) -> Result<SelectorKind> {
    match s {
        "rl" => Ok(SelectorKind::Rl),
        "random" => Ok(SelectorKind::Random),
        "farthest" => Ok(SelectorKind::Farthest),
        other => bail!("unknown method {other:?} (expected rl, random or farthest)"),
    }
}

fn sweep(a: Sweep) -> Result<()> {
    let cfg = resolve(&a.run)?;
    let methods = a.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
    if dry_run(&a.run, &cfg) {
        return Ok(());
    }
    let data = load_data(&a.run.data)?;
    let budgets = if a.budgets.is_empty() { default_budgets(data.pool.len()) } else { a.budgets };
    if budgets.is_empty() {
        bail!("pool of {} views admits no default budget", data.pool.len());
    }
    let rows = sweep_with(&cfg, &data, &budgets, &methods, |row, run| {
        write_run(run, &data, &a.run.out.join(format!("{}_m{}", row.method.name(), row.budget)))?;
        println!("m={} {}: psnr {:.3} ssim {:.4}", row.budget, row.method.name(), row.mean_psnr, row.mean_ssim);
        Ok(())
    })?;
    std::fs::write(a.run.out.join("sweep.csv"), sweep_csv(&rows))?;
    let flags = trend_audit(&rows, a.slack);
    let mut report = String::from("method,budget,previous,drop_db\n");
    for f in &flags {
        report += &format!("{},{},{},{}\n", f.method.name(), f.budget, f.previous, f.drop);
        println!("trend: {} drops {:.3} dB from m={} to m={}", f.method.name(), f.drop, f.previous, f.budget);
    }
    std::fs::write(a.run.out.join("trend.csv"), report)?;
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let cfg = resolve(&a.run)?;
    let switches = a.switches.iter().map(|s| Switch::parse(s)).collect::<Result<Vec<_>, _>>()?;
    if dry_run(&a.run, &cfg) {
        return Ok(());
    }
    let data = load_data(&a.run.data)?;
    let rows = ablate_with(&cfg, &data, &switches, |row, run| {
        write_run(run, &data, &a.run.out.join(&row.name))?;
        println!("{}: psnr {:.3} ssim {:.4}", row.name, row.mean_psnr, row.mean_ssim);
        Ok(())
    })?;
    std::fs::write(a.run.out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(())
}

fn parse_vec3(s: &str) -> Result<Vec3> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("bad number {t:?} in camera spec")))
        .collect::<Result<Vec<_>>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => bail!("camera spec needs three finite coordinates, got {s:?}"),
    }
}

fn parse_camera(spec: &str, ds: &Dataset) -> Result<Camera> {
    let (eye, target) = match spec.split_once(':') {
        Some((e, t)) => (parse_vec3(e)?, parse_vec3(t)?),
        None => (parse_vec3(spec)?, Vec3::zeros()),
    };
    Ok(Camera::look_at(eye, target, ds.spec.intrinsics())?)
}

fn render(a: Render) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint, None)?.checkpoint;
    let ds = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    std::fs::create_dir_all(&a.out)?;
    if let Some(spec) = &a.camera {
        let cam = parse_camera(spec, &ds)?;
        let gb = rasterize_gbuffer(&ds.mesh()?, &cam);
        let img = render_view(&ckpt.model, &gb, &cam)?;
        img.write_png(&a.out.join("camera.png"))?;
        img.write_pfm(&a.out.join("camera.pfm"))?;
        return Ok(());
    }
    let split = Split::ALL
        .into_iter()
        .find(|s| s.name() == a.split)
        .ok_or_else(|| anyhow!("unknown split {:?} (expected train, probe or test)", a.split))?;
    let mut csv = String::from("view,psnr,ssim\n");
    for v in ds.split(split) {
        let img = render_view(&ckpt.model, &v.gbuffer, &v.camera)?;
        let (p, s) = (psnr(&img.to_tensor(), &v.ray_traced.to_tensor()), ssim_metric(&img.to_tensor(), &v.ray_traced.to_tensor())?);
        csv += &format!("{},{},{}\n", v.label, p, s);
        img.write_png(&a.out.join(format!("{}.png", v.label)))?;
        img.write_pfm(&a.out.join(format!("{}.pfm", v.label)))?;
        if a.composite {
            Image::composite(&img, &v.ray_traced)?.write_png(&a.out.join(format!("{}.cmp.png", v.label)))?;
        }
        println!("{}: psnr {:.3} ssim {:.4}", v.label, p, s);
    }
    std::fs::write(a.out.join("render.csv"), csv)?;
    Ok(())
}

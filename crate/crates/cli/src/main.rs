use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgebin_core::bench::{measure, memory_estimate};
use edgebin_core::binctl::{read_trace, run_scenario, write_log, BinEvent, ControllerConfig, Outcome};
use edgebin_core::data::{load_image, resize_bilinear, split, to_batch, Manifest};
use edgebin_core::eval::{confusion, metrics, read_predictions};
use edgebin_core::format;
use edgebin_core::graph::{infer_shapes, Graph};
use edgebin_core::passes::{check_target, optimize, DeployReport, Pass, TargetProfile};
use edgebin_core::power::{emit_energy_curve, feasibility, IrradiationSeries, PowerProfile, SolarRig};
use edgebin_core::quant::{calibrate, quantize, Scheme};
use edgebin_core::zoo::{build, param_count, Family, ModelSpec};
use edgebin_core::{ExecPath, Tensor, WasteClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "edgebin", version, about = "Build, optimize, quantize and run waste classifiers for edge targets")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "EDGEBIN_SEED", default_value_t = 0)]
    seed: u64,
    /// Print human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a MobileNet with seeded random weights.
    BuildModel(BuildArgs),
    /// Run graph passes and report deployability.
    Optimize(OptimizeArgs),
    /// Convert weights to f16 or i8.
    Quantize(QuantizeArgs),
    /// Classify one image or tensor.
    Run(RunArgs),
    /// Time repeated inference.
    Bench(BenchArgs),
    /// Confusion matrix and scores from a truth,pred CSV.
    Metrics(MetricsArgs),
    /// Stratified train/val/test split of a manifest.
    SplitDataset(SplitArgs),
    /// Replay an event trace through the bin controller.
    SimulateBin(BinArgs),
    /// Solar and battery budget for a device.
    PowerBudget(PowerArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 1.0)]
    alpha: f32,
    /// Input resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "224x224", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 7)]
    classes: usize,
    /// Prepend a bilinear resize to this WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_res)]
    resize_to: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "k210")]
    target: TargetProfile,
    #[arg(long, default_value = "fold,fuse,replace", value_parser = parse_passes)]
    passes: PassList,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scheme: Scheme,
    /// Directory of .tensor or .ppm calibration inputs.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Seeded uniform inputs to calibrate on when no directory is given.
    #[arg(long, default_value_t = 8)]
    calib_random: usize,
    #[arg(long, default_value = "k210")]
    target: TargetProfile,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// A .ppm image or a .tensor file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "opt")]
    path: ExecPath,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "opt")]
    path: ExecPath,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Split convolution rows across threads.
    #[arg(long)]
    parallel: bool,
    /// Accepted for symmetry; JSON is already the default.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Comma-separated class order; defaults to the seven waste classes.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    ratios: [f64; 3],
    /// Directory for train.csv, val.csv and test.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BinArgs {
    /// CSV trace with rows event,label,confidence.
    #[arg(long, required_unless_present = "live")]
    script: Option<PathBuf>,
    /// JSON controller config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the action log CSV here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Classify images with a model and feed the results as events.
    #[arg(long, requires_all = ["model", "images"], conflicts_with = "script")]
    live: bool,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct PowerArgs {
    #[arg(long, default_value_t = 1600.0)]
    area_cm2: f64,
    #[arg(long, default_value_t = 0.22)]
    efficiency: f64,
    #[arg(long, default_value_t = 48.0)]
    battery_wh: f64,
    /// Battery charge/discharge efficiency applied to harvested energy.
    #[arg(long, default_value_t = 1.0)]
    round_trip: f64,
    /// Active draw in watts; overrides --device.
    #[arg(long)]
    load_w: Option<f64>,
    #[arg(long, default_value = "k210", value_parser = ["k210", "jetson_nano"])]
    device: String,
    /// month,h CSV in Wh/m²/day; a synthetic year when omitted.
    #[arg(long)]
    irradiation: Option<PathBuf>,
    /// Write the month,h,e_day_wh curve here.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Clone)]
struct PassList(Vec<Pass>);

fn parse_passes(s: &str) -> Result<PassList, String> {
    Pass::parse_list(s).map(PassList)
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 ratios, got {}", v.len()))
}

fn load_model(path: &Path) -> Result<Graph> {
    let g = format::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(infer_shapes(&g)?)
}

fn save_model(g: &Graph, path: &Path) -> Result<usize> {
    let bytes = format::encode(g)?;
    fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes.len())
}

fn input_shape(g: &Graph) -> Result<Vec<usize>> {
    g.input_shape().map(<[usize]>::to_vec).context("model has no input")
}

/// Load a `.tensor` as is, or a `.ppm` resized to the model input.
fn load_input(path: &Path, shape: &[usize]) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "tensor") {
        return Ok(format::load_tensor(path)?);
    }
    let img = load_image(path).with_context(|| format!("reading {}", path.display()))?;
    let (h, w) = (shape[1], shape[2]);
    let img = if img.shape()[..2] == [h, w] { img } else { resize_bilinear(&img, (w, h))? };
    Ok(to_batch(img))
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f32(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).expect("shape matches")
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    files.retain(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)));
    files.sort();
    Ok(files)
}

fn probabilities(g: &Graph, out: &Tensor) -> Vec<(String, f32)> {
    let labels = &g.metadata().class_labels;
    out.to_f32()
        .iter()
        .copied()
        .enumerate()
        .map(|(i, p)| (labels.get(i).cloned().unwrap_or_else(|| i.to_string()), p))
        .collect()
}

struct Output {
    json: serde_json::Value,
    table: String,
}

fn output(value: &impl Serialize, table: String) -> Result<Output> {
    Ok(Output {
        json: serde_json::to_value(value)?,
        table,
    })
}

fn deploy_table(r: &DeployReport) -> String {
    let mut s = format!(
        "target        {}\nfits          {}\nweight bytes  {}\n",
        r.target, r.fits, r.weight_bytes
    );
    for v in &r.violations {
        s += &format!("violation     {v}\n");
    }
    if !r.host_fallback.is_empty() {
        s += &format!("host fallback {}\n", r.host_fallback.join(", "));
    }
    s
}

fn build_model(a: BuildArgs, seed: u64) -> Result<Output> {
    let mut spec = ModelSpec::new(a.family, a.alpha, a.res.0, a.res.1, a.classes);
    if let Some((w, h)) = a.resize_to {
        spec = spec.with_resize(w, h);
    }
    let g = build(&spec, seed)?;
    let file_bytes = save_model(&g, &a.out)?;
    let params = param_count(&g);
    let table = format!(
        "model       {}\nparameters  {params}\nweights     {} bytes\nfile        {} ({file_bytes} bytes)\n",
        g.metadata().name,
        g.weight_bytes(),
        a.out.display()
    );
    let v = json!({
        "model": g.metadata().name,
        "spec": spec,
        "seed": seed,
        "params": params,
        "weight_bytes": g.weight_bytes(),
        "file_bytes": file_bytes,
        "out": a.out,
    });
    output(&v, table)
}

fn optimize_cmd(a: OptimizeArgs) -> Result<Output> {
    let g = load_model(&a.model)?;
    let (opt, reports) = optimize(&g, &a.passes.0, &a.target)?;
    save_model(&opt, &a.out)?;
    let deploy = check_target(&opt, &a.target);
    let mut table = String::from("pass              before  after  rewrites\n");
    for r in &reports {
        table += &format!("{:<16} {:>7} {:>6} {:>9}\n", r.pass, r.nodes_before, r.nodes_after, r.fused);
        for d in &r.diagnostics {
            table += &format!("  {d}\n");
        }
    }
    table += &deploy_table(&deploy);
    output(&json!({ "passes": reports, "deploy": deploy }), table)
}

fn quantize_cmd(a: QuantizeArgs, seed: u64) -> Result<Output> {
    let g = load_model(&a.model)?;
    let stats = match a.scheme {
        Scheme::F16 => None,
        Scheme::I8 => {
            let shape = input_shape(&g)?;
            let data: Vec<Tensor> = match &a.calib {
                Some(dir) => sorted_files(dir, &["tensor", "ppm"])?
                    .iter()
                    .map(|p| load_input(p, &shape))
                    .collect::<Result<_>>()?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..a.calib_random).map(|_| random_input(&mut rng, &shape)).collect()
                }
            };
            Some(calibrate(&g, &data)?)
        }
    };
    let (q, diags) = quantize(&g, stats.as_ref(), a.scheme)?;
    save_model(&q, &a.out)?;
    let deploy = check_target(&q, &a.target);
    let diagnostics: Vec<String> = diags.iter().map(ToString::to_string).collect();
    let mut table = format!(
        "scheme        {}\nweights       {} -> {} bytes\n",
        a.scheme,
        g.weight_bytes(),
        q.weight_bytes()
    );
    for d in &diagnostics {
        table += &format!("warning       {d}\n");
    }
    table += &deploy_table(&deploy);
    let v = json!({
        "scheme": a.scheme,
        "weight_bytes_before": g.weight_bytes(),
        "weight_bytes": q.weight_bytes(),
        "diagnostics": diagnostics,
        "deploy": deploy,
    });
    output(&v, table)
}

fn run_cmd(a: RunArgs) -> Result<Output> {
    let g = load_model(&a.model)?;
    let x = load_input(&a.input, &input_shape(&g)?)?;
    let (out, elapsed) = edgebin_core::bench::time(|| edgebin_core::run(&g, &x, a.path));
    let mut probs = probabilities(&g, &out?);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    probs.truncate(a.top_k.max(1));
    let table = probs.iter().map(|(l, p)| format!("{l:<10} {p:.4}\n")).collect();
    let top: Vec<_> = probs
        .iter()
        .map(|(label, p)| json!({ "label": label, "probability": p }))
        .collect();
    let v = json!({ "path": a.path, "latency_s": elapsed.as_secs_f64(), "top": top });
    output(&v, table)
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<Output> {
    let g = load_model(&a.model)?;
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(seed), &input_shape(&g)?);
    let r = measure(&g, &x, a.path, a.iters, a.warmup, a.parallel)?;
    let mem = memory_estimate(&g)?;
    let table = format!(
        "model     {} ({} path{})\nlatency   mean {:.2} ms  p50 {:.2} ms  p95 {:.2} ms\nthroughput {:.2} IPS\nweights   {} bytes\npeak act  {} bytes\n",
        r.model,
        r.path,
        if r.parallel { ", parallel" } else { "" },
        r.latency.mean * 1e3,
        r.latency.p50 * 1e3,
        r.latency.p95 * 1e3,
        r.ips,
        mem.weight_bytes,
        mem.peak_activation_bytes
    );
    output(&r, table)
}

fn metrics_cmd(a: MetricsArgs) -> Result<Output> {
    let file = fs::File::open(&a.predictions).with_context(|| format!("opening {}", a.predictions.display()))?;
    let (truths, preds) = read_predictions(file)?;
    let labels = a
        .labels
        .unwrap_or_else(|| WasteClass::ALL.iter().map(|c| c.to_string()).collect());
    let cm = confusion(&labels, &preds, &truths)?;
    let m = metrics(&cm)?;
    let table = format!("{}\n{}", cm.to_table(), m.to_table());
    output(&json!({ "confusion": cm, "metrics": m }), table)
}

fn split_cmd(a: SplitArgs, seed: u64) -> Result<Output> {
    let m = Manifest::load(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let s = split(&m, a.ratios, seed)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut parts = serde_json::Map::new();
    let mut table = String::from("part   items  per class\n");
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        part.save(a.out_dir.join(format!("{name}.csv")))?;
        let counts = part.class_counts();
        let per: Vec<String> = counts.iter().map(|(c, n)| format!("{c}={n}")).collect();
        table += &format!("{name:<6} {:>5}  {}\n", part.len(), per.join(" "));
        parts.insert(name.into(), json!({ "items": part.len(), "per_class": counts }));
    }
    let v = json!({ "seed": seed, "ratios": a.ratios, "total": m.len(), "splits": parts });
    output(&v, table)
}

fn live_events(model: &Path, images: &Path) -> Result<Vec<BinEvent>> {
    let g = load_model(model)?;
    let shape = input_shape(&g)?;
    let p = edgebin_core::plan(&g, ExecPath::Optimized)?;
    let mut events = Vec::new();
    for path in sorted_files(images, &["ppm"])? {
        let out = p.run(&load_input(&path, &shape)?)?;
        let (label, confidence) = probabilities(&g, &out)
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .context("model produced no scores")?;
        let label: WasteClass = label
            .parse()
            .with_context(|| format!("model label {label:?} is not a waste class"))?;
        events.push(BinEvent::classified(label, confidence.clamp(0.0, 1.0)));
        events.push(BinEvent::Tick);
    }
    Ok(events)
}

fn simulate_cmd(a: BinArgs) -> Result<Output> {
    let cfg: ControllerConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ControllerConfig::default(),
    };
    cfg.validate()?;
    let events = match (&a.script, a.live) {
        (_, true) => live_events(a.model.as_deref().expect("required"), a.images.as_deref().expect("required"))?,
        (Some(p), false) => read_trace(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        (None, false) => bail!("--script is required"),
    };
    let result = run_scenario(&events, &cfg);
    if let Some(path) = &a.log {
        write_log(&result.log, fs::File::create(path)?)?;
    }
    let mut csv = Vec::new();
    write_log(&result.log, &mut csv)?;
    let rejected = result
        .log
        .iter()
        .filter(|e| matches!(e.outcome, Outcome::Rejected { .. }))
        .count();
    let doors: Vec<_> = result
        .doors_opened()
        .map(|(i, c)| json!({ "index": i, "container": c }))
        .collect();
    let table = format!(
        "{}events {}  doors {}  rejected {}  final state {}\n",
        String::from_utf8(csv)?,
        events.len(),
        doors.len(),
        rejected,
        result.final_state
    );
    let v = json!({
        "config": cfg,
        "events": events.len(),
        "doors_opened": doors,
        "rejected": rejected,
        "final_state": result.final_state,
        "log": result.log,
    });
    output(&v, table)
}

fn power_cmd(a: PowerArgs) -> Result<Output> {
    let mut rig = SolarRig::from_cm2(a.area_cm2, a.efficiency, a.battery_wh)?;
    rig.round_trip = a.round_trip;
    rig.validate()?;
    let series = match &a.irradiation {
        Some(p) => IrradiationSeries::from_csv(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => IrradiationSeries::synthetic(),
    };
    let mut profile = match a.device.as_str() {
        "jetson_nano" => PowerProfile::jetson_nano(),
        _ => PowerProfile::k210(),
    };
    if let Some(w) = a.load_w {
        if w.is_nan() || w <= 0.0 {
            bail!("--load-w must be positive, got {w}");
        }
        profile = PowerProfile::new("custom", w, 0.0)?;
    }
    let r = feasibility(&rig, &series, &profile)?;
    if let Some(p) = &a.curve {
        emit_energy_curve(&rig, &series, fs::File::create(p)?)?;
    }
    let mut table = String::from("month      H (Wh/m²)   E (Wh/day)  sustainable W\n");
    for m in &r.months {
        table += &format!("{:<10} {:>10.1} {:>12.2} {:>14.3}\n", m.month, m.h, m.e_day_wh, m.sustainable_w);
    }
    table += &format!(
        "worst month {} sustains {:.3} W against {:.3} W: {}\nbattery alone lasts {:.1} h\n",
        r.worst_month,
        r.worst_sustainable_w,
        r.load_w,
        if r.feasible { "feasible" } else { "infeasible" },
        r.battery_hours
    );
    output(&r, table)
}

fn dispatch(cli: Cli) -> Result<Output> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildModel(a) => build_model(a, seed),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Quantize(a) => quantize_cmd(a, seed),
        Command::Run(a) => run_cmd(a),
        Command::Bench(a) => bench_cmd(a, seed),
        Command::Metrics(a) => metrics_cmd(a),
        Command::SplitDataset(a) => split_cmd(a, seed),
        Command::SimulateBin(a) => simulate_cmd(a),
        Command::PowerBudget(a) => power_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pretty = cli.pretty;
    match dispatch(cli) {
        Ok(out) => {
            let text = if pretty {
                out.table
            } else {
                serde_json::to_string(&out.json).expect("json value serializes") + "\n"
            };
            let mut stdout = io::stdout().lock();
            if stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

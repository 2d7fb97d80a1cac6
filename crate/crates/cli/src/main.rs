use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use frontnet::augment::{self, AugmentConfig, LabeledImage};
use frontnet::control::{run_experiment, trajectory_csv, ControlConfig, ScenarioScript, Source};
use frontnet::cost_model::{self, default_grid, reference_anchors, sweep_csv, Anchor};
use frontnet::engine::{image_rtensor, image_tensor, prepare_frame};
use frontnet::graph::table_report;
use frontnet::planner::audit::audit;
use frontnet::planner::{memory_report_csv, PlanError};
use frontnet::quantizer::WeightRounding;
use frontnet::tensor::write_qtensor;
use frontnet::{
    analyze, calibrate, CalibrationSet, CostParams, DeploymentPlan, FloatModel, GrayImage, IntEngine, MemoryHierarchy, NetGraph,
    PlanOptions, QuantizedGraph, Variant, WeightPolicy,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failures with their own exit status. Anything else exits 1.
#[derive(Debug, Error)]
enum Failure {
    #[error("{}: file not found", .0.display())]
    NotFound(PathBuf),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Constraint(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::NotFound(_) => 3,
            Failure::Schema(_) => 4,
            Failure::Constraint(_) => 5,
        }
    }
}

fn schema(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    Failure::Schema(format!("{}: {e}", path.display())).into()
}

#[derive(Parser)]
#[command(name = "frontnet", version, about = "Quantize, deploy, cost and fly small pose-estimation CNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print parameter, MAC and memory figures per network.
    Analyze {
        /// 160x32, 160x16, 80x32 or all.
        #[arg(long, default_value = "all")]
        net: String,
        /// Analyze a graph JSON instead of a built-in variant.
        #[arg(long, conflicts_with = "net")]
        graph: Option<PathBuf>,
    },
    /// Write a graph JSON and seeded random float weights.
    GenWeights {
        #[arg(long)]
        net: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate and convert a float model to an 8-bit integer graph.
    Quantize(QuantizeArgs),
    /// Run the integer engine on one frame.
    Infer {
        #[arg(long)]
        qgraph: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_activations: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Tile layers into L1 and place buffers in L2.
    Plan(PlanArgs),
    /// Evaluate latency, power and energy over the frequency grid.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        /// Fitted parameters (output of `fit`) or a bare parameter object.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit cost-model parameters to measured anchors.
    Fit {
        /// JSON list of anchors; the built-in set when omitted.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        mem: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop following run with one observation source.
    Simulate {
        /// 160x32, 160x16, 80x32 or mocap.
        #[arg(long)]
        net: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Produce augmented copies of a labelled image set.
    Augment {
        /// Directory of PGM frames, taken in file-name order.
        #[arg(long)]
        images: PathBuf,
        /// x,y,z,theta rows matching the frames.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long, required_unless_present = "net")]
    graph: Option<PathBuf>,
    #[arg(long, conflicts_with = "graph")]
    net: Option<Variant>,
    #[arg(long)]
    weights: PathBuf,
    /// Directory of calibration frames (PGM).
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_rounding, default_value = "nearest")]
    rounding: WeightRounding,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, required_unless_present = "net")]
    qgraph: Option<PathBuf>,
    #[arg(long, conflicts_with = "qgraph")]
    net: Option<Variant>,
    #[arg(long)]
    mem: Option<PathBuf>,
    #[arg(long, default_value = "streamed")]
    policy: WeightPolicy,
    #[arg(long)]
    no_fuse_pool: bool,
    #[arg(long)]
    out: PathBuf,
    /// Per-node L2 table as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_rounding(s: &str) -> Result<WeightRounding, String> {
    match s {
        "nearest" => Ok(WeightRounding::Nearest),
        "floor" => Ok(WeightRounding::Floor),
        _ => Err(format!("unknown rounding {s:?} (expected nearest or floor)")),
    }
}

/// Inputs, seed and tool version stamped into every artifact.
#[derive(Debug, Default, Serialize)]
struct Provenance {
    tool: String,
    inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl Provenance {
    fn new(seed: Option<u64>) -> Self {
        Self { tool: format!("frontnet {VERSION}"), inputs: BTreeMap::new(), seed }
    }

    /// Records a file, or a directory as the hash of its sorted file names and contents.
    fn input(&mut self, path: &Path) -> Result<()> {
        let mut h = Sha256::new();
        if path.is_dir() {
            for f in sorted_files(path, None)? {
                h.update(f.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
                h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
            }
        } else {
            h.update(read(path)?);
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        self.inputs.insert(name, hex::encode(h.finalize()));
        Ok(())
    }

    fn comment_lines(&self) -> String {
        let mut s = format!("# {}\n", self.tool);
        for (name, hash) in &self.inputs {
            s += &format!("# input {name} sha256={hash}\n");
        }
        if let Some(seed) = self.seed {
            s += &format!("# seed {seed}\n");
        }
        s
    }

    fn one_line(&self) -> String {
        self.comment_lines().lines().map(|l| l.trim_start_matches("# ")).collect::<Vec<_>>().join("; ")
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Failure::NotFound(path.to_path_buf()).into());
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    require(path)?;
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| schema(path, e))
}

fn sorted_files(dir: &Path, ext: Option<&str>) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut files = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_file() && ext.is_none_or(|x| p.extension().is_some_and(|e| e.eq_ignore_ascii_case(x))) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Serializes `body` with a `provenance` field added at the top level.
fn write_json(path: &Path, prov: &Provenance, body: impl Serialize) -> Result<()> {
    let mut v = serde_json::to_value(body)?;
    let obj = v.as_object_mut().context("artifact body must be a JSON object")?;
    obj.insert("provenance".into(), serde_json::to_value(prov)?);
    write(path, serde_json::to_string_pretty(&v)? + "\n")
}

fn write_csv(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    write(path, prov.comment_lines() + body)
}

fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = read(path)?;
    GrayImage::from_pgm(&bytes).map_err(|e| schema(path, e))
}

/// Uses a frame as-is when it already matches the network input, otherwise
/// crops and scales it like a camera frame.
fn network_input(frame: &GrayImage, g: &NetGraph, path: &Path) -> Result<GrayImage> {
    let s = g.input_shape;
    if (frame.width, frame.height) == (s.w, s.h) {
        return Ok(frame.clone());
    }
    let Some(v) = g.variant else {
        return Err(schema(path, format!("{}x{} frame does not match the {}x{} graph input", frame.width, frame.height, s.w, s.h)));
    };
    prepare_frame(frame, v).map_err(|e| schema(path, e))
}

#[derive(Serialize, serde::Deserialize)]
struct PlanDoc {
    graph: NetGraph,
    plan: DeploymentPlan,
}

fn plan_failure(e: PlanError) -> anyhow::Error {
    match e {
        PlanError::Hierarchy(_) | PlanError::Policy(_) => Failure::Schema(e.to_string()).into(),
        _ => Failure::Constraint(e.to_string()).into(),
    }
}

fn cmd_analyze(net: &str, graph: Option<&Path>) -> Result<()> {
    let rows: Vec<(String, NetGraph)> = match graph {
        Some(p) => {
            let g: NetGraph = read_json(p)?;
            let name = g.variant.map_or_else(|| p.display().to_string(), |v| v.to_string());
            vec![(name, frontnet::infer_shapes(&g).map_err(|e| schema(p, e))?)]
        }
        None if net == "all" => Variant::ALL.iter().map(|v| (v.to_string(), v.build())).collect(),
        None => {
            let v: Variant = net.parse().map_err(|e| Failure::Schema(format!("--net: {e}")))?;
            vec![(v.to_string(), v.build())]
        }
    };
    let stats = rows.into_iter().map(|(n, g)| Ok((n, analyze(&g)?))).collect::<Result<Vec<_>>>()?;
    print!("{}", table_report(&stats));
    Ok(())
}

fn cmd_gen_weights(net: Variant, seed: u64, out: &Path) -> Result<()> {
    let model = FloatModel::random(net.build(), seed)?;
    model.save_weights(out)?;
    let prov = Provenance::new(Some(seed));
    write_json(&out.join("graph.json"), &prov, &model.graph)?;
    println!("wrote {} and weights for {net}", out.join("graph.json").display());
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let mut prov = Provenance::new(None);
    let graph = match (&a.graph, a.net) {
        (Some(p), _) => {
            prov.input(p)?;
            let g: NetGraph = read_json(p)?;
            frontnet::infer_shapes(&g).map_err(|e| schema(p, e))?
        }
        (None, Some(v)) => v.build(),
        (None, None) => bail!("--graph or --net is required"),
    };
    require(&a.weights)?;
    prov.input(&a.weights)?;
    let model = FloatModel::load_weights(graph, &a.weights).map_err(|e| schema(&a.weights, e))?;
    let frames = sorted_files(&a.calib, Some("pgm"))?;
    if frames.is_empty() {
        return Err(schema(&a.calib, "no .pgm calibration frames"));
    }
    prov.input(&a.calib)?;
    let inputs =
        frames.iter().map(|f| Ok(image_rtensor(&network_input(&read_pgm(f)?, &model.graph, f)?))).collect::<Result<Vec<_>>>()?;
    let alphas = calibrate(&model, &CalibrationSet::new(inputs))?;
    let qg = frontnet::quantizer::convert_with(&model, &alphas, a.rounding)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    qg.save(&a.out)?;
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&a.out)?)?;
    write_json(&a.out, &prov, doc)?;
    println!("quantized {} layers from {} calibration frames into {}", model.graph.layers.len(), frames.len(), a.out.display());
    Ok(())
}

fn load_qgraph(path: &Path) -> Result<QuantizedGraph> {
    require(path)?;
    QuantizedGraph::load(path).map_err(|e| schema(path, e))
}

fn cmd_infer(qgraph: &Path, image: &Path, out: &Path, dump: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let qg = load_qgraph(qgraph)?;
    let frame = read_pgm(image)?;
    let mut prov = Provenance::new(None);
    prov.input(qgraph)?;
    prov.input(image)?;
    let input = image_tensor(&network_input(&frame, &qg.graph, image)?);
    let mut engine = IntEngine::new(&qg);
    if let Some(t) = threads {
        engine = engine.with_threads(t)?;
    }
    let r = if dump.is_some() { engine.infer_with_snapshots(&input)? } else { engine.infer(&input)? };
    let vals = r.values();
    let body = match r.pose {
        Some(p) => format!("x,y,z,theta\n{:.6},{:.6},{:.6},{:.6}\n", p.x, p.y, p.z, p.theta),
        None => {
            let head: Vec<String> = (0..vals.len()).map(|i| format!("out{i}")).collect();
            let row: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            format!("{}\n{}\n", head.join(","), row.join(","))
        }
    };
    write_csv(out, &prov, &body)?;
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, (t, l)) in r.snapshots.iter().zip(&qg.graph.layers).enumerate() {
            let name = format!("{i:02}_{}.qtns", l.name);
            write_qtensor(&dir.join(&name), t)?;
            files.push(name);
        }
        write_json(&dir.join("manifest.json"), &prov, serde_json::json!({ "activations": files }))?;
    }
    print!("{body}");
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let mut prov = Provenance::new(None);
    let graph = match (&a.qgraph, a.net) {
        (Some(p), _) => {
            prov.input(p)?;
            load_qgraph(p)?.graph
        }
        (None, Some(v)) => v.build(),
        (None, None) => bail!("--qgraph or --net is required"),
    };
    let mem = match &a.mem {
        Some(p) => {
            prov.input(p)?;
            read_json(p)?
        }
        None => MemoryHierarchy::default(),
    };
    let p = frontnet::plan(&graph, &mem, PlanOptions { policy: a.policy, fuse_pool: !a.no_fuse_pool }).map_err(plan_failure)?;
    let report = audit(&graph, &p).map_err(|errs| Failure::Constraint(format!("plan audit failed: {}", errs.join("; "))))?;
    write_json(&a.out, &prov, PlanDoc { graph, plan: p.clone() })?;
    if let Some(r) = &a.report {
        write_csv(r, &prov, &memory_report_csv(&p))?;
    }
    print!("{}", frontnet::planner::memory_report_table(&p));
    println!("peak L2 {} B of {} B, audit checked {} tiles", p.peak_l2(), mem.l2_bytes, report.tiles);
    Ok(())
}

fn load_params(path: &Path) -> Result<CostParams> {
    let v: serde_json::Value = read_json(path)?;
    let v = v.get("params").cloned().unwrap_or(v);
    let p: CostParams = serde_json::from_value(v).map_err(|e| schema(path, e))?;
    p.validate().map_err(|e| schema(path, e))?;
    Ok(p)
}

fn cmd_sweep(plan: &Path, params: Option<&Path>, out: &Path) -> Result<()> {
    let mut prov = Provenance::new(None);
    prov.input(plan)?;
    let doc: PlanDoc = read_json(plan)?;
    let params = match params {
        Some(p) => {
            prov.input(p)?;
            load_params(p)?
        }
        None => CostParams::default(),
    };
    let s = cost_model::sweep(&doc.graph, &doc.plan, &default_grid(), &params)?;
    write_csv(out, &prov, &sweep_csv(&s))?;
    for (what, r) in [("min energy", s.energy_optimum()), ("max throughput", s.throughput_optimum())] {
        println!(
            "{what}: FC {} MHz, CL {} MHz, {:.2} V: {:.1} fps, {:.1} mW, {:.3} mJ/frame",
            r.op.f_fc,
            r.op.f_cl,
            r.op.vdd,
            r.fps,
            r.power_mw(),
            r.mj_frame
        );
    }
    Ok(())
}

fn cmd_fit(anchors: Option<&Path>, mem: Option<&Path>, out: &Path) -> Result<()> {
    let mut prov = Provenance::new(None);
    let anchors: Vec<Anchor> = match anchors {
        Some(p) => {
            prov.input(p)?;
            read_json(p)?
        }
        None => reference_anchors(),
    };
    let mem = match mem {
        Some(p) => {
            prov.input(p)?;
            read_json(p)?
        }
        None => MemoryHierarchy::default(),
    };
    let cal = cost_model::calibrate_anchors(&anchors, &mem, &CostParams::default())?;
    write_json(out, &prov, serde_json::json!({ "anchors": anchors, "calibration": cal, "params": cal.params }))?;
    println!("fitted {} parameters in {} iterations, rms relative residual {:.4}", cost_model::FITTED.len(), cal.iterations, cal.rms);
    Ok(())
}

fn cmd_simulate(
    net: &str,
    seed: u64,
    config: Option<&Path>,
    scenario: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let src: Source = net.parse().map_err(|e| Failure::Schema(format!("--net: {e}")))?;
    let mut prov = Provenance::new(Some(seed));
    let cfg = match config {
        Some(p) => {
            prov.input(p)?;
            let c: ControlConfig = read_json(p)?;
            c.validate().map_err(|e| schema(p, e))?;
            c
        }
        None => ControlConfig::default(),
    };
    let script = match scenario {
        Some(p) => {
            prov.input(p)?;
            read_json(p)?
        }
        None => ScenarioScript::default(),
    };
    let (log, m) = run_experiment(&script, &src.noise(seed), src.rate(), &cfg)?;
    write_csv(out, &prov, &trajectory_csv(&log))?;
    if let Some(p) = metrics {
        write_json(p, &prov, serde_json::json!({ "source": src.to_string(), "rate_hz": src.rate(), "metrics": m, "clamps_ok": log.clamps_ok }))?;
    }
    println!(
        "{src} @ {} Hz: median e_xy {:.3} m, median e_theta {:.2} deg, {} of {} phases",
        src.rate(),
        m.median_e_xy,
        m.median_e_theta,
        m.phases_completed,
        script.phases.len()
    );
    Ok(())
}

fn cmd_augment(images: &Path, labels: &Path, out: &Path, seed: u64, copies: usize, config: Option<&Path>) -> Result<()> {
    use rand::SeedableRng;

    let mut prov = Provenance::new(Some(seed));
    let mut cfg = match config {
        Some(p) => {
            prov.input(p)?;
            read_json::<AugmentConfig>(p)?
        }
        None => AugmentConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate().map_err(|e| Failure::Schema(e.to_string()))?;
    let frames = sorted_files(images, Some("pgm"))?;
    require(labels)?;
    prov.input(images)?;
    prov.input(labels)?;
    let poses = augment::read_labels(labels).map_err(|e| schema(labels, e))?;
    if poses.len() != frames.len() {
        return Err(schema(labels, format!("{} labels for {} frames", poses.len(), frames.len())));
    }
    fs::create_dir_all(out)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let stamp = prov.one_line();
    let mut out_labels = Vec::new();
    for (k, (f, label)) in frames.iter().zip(&poses).enumerate() {
        let src = LabeledImage { image: read_pgm(f)?, label: *label };
        for c in 0..copies {
            let a = augment::augment(&src, &cfg, &mut rng).map_err(|e| schema(f, e))?;
            a.image.write_pgm(&out.join(format!("{k:05}_{c:02}.pgm")), Some(&stamp))?;
            out_labels.push(a.label);
        }
    }
    let mut body = Vec::new();
    augment::write_labels(&mut body, &out_labels)?;
    write_csv(&out.join("labels.csv"), &prov, &String::from_utf8(body)?)?;
    println!("wrote {} augmented frames to {}", out_labels.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Analyze { net, graph } => cmd_analyze(&net, graph.as_deref()),
        Cmd::GenWeights { net, seed, out } => cmd_gen_weights(net, seed, &out),
        Cmd::Quantize(a) => cmd_quantize(&a),
        Cmd::Infer { qgraph, image, out, dump_activations, threads } => {
            cmd_infer(&qgraph, &image, &out, dump_activations.as_deref(), threads)
        }
        Cmd::Plan(a) => cmd_plan(&a),
        Cmd::Sweep { plan, params, out } => cmd_sweep(&plan, params.as_deref(), &out),
        Cmd::Fit { anchors, mem, out } => cmd_fit(anchors.as_deref(), mem.as_deref(), &out),
        Cmd::Simulate { net, seed, config, scenario, out, metrics } => {
            cmd_simulate(&net, seed, config.as_deref(), scenario.as_deref(), &out, metrics.as_deref())
        }
        Cmd::Augment { images, labels, out, seed, copies, config } => {
            cmd_augment(&images, &labels, &out, seed, copies, config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Failure>().map_or(1, Failure::code))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_lines_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.txt");
        fs::write(&f, "abc").unwrap();
        let mut p = Provenance::new(Some(7));
        p.input(&f).unwrap();
        assert_eq!(
            p.comment_lines(),
            format!(
                "# frontnet {VERSION}\n# input in.txt sha256=ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad\n# seed 7\n"
            )
        );
        assert!(matches!(
            p.input(&dir.path().join("missing")).unwrap_err().downcast_ref::<Failure>(),
            Some(Failure::NotFound(_))
        ));
    }

    #[test]
    fn rounding_names() {
        assert_eq!(parse_rounding("floor").unwrap(), WeightRounding::Floor);
        assert!(parse_rounding("up").is_err());
    }
}

//! `gatepark`: operator command line and gate service.
//!
//! Exit codes are the same for every command: 0 on success, 1 when the
//! command ran but the outcome is a domain failure (dirty dataset, denied
//! scenario under `--expect-grant`), 2 for usage and input errors.

mod live;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gatepark::backend::{serve, serve_tcp, OracleDetector, ReferenceBackend};
use gatepark::barrier::{serve_sim, serve_sim_tcp, BarrierSim, TRAVEL_MS};
use gatepark::clock::{Clock, SimClock, WallClock};
use gatepark::config::AppConfig;
use gatepark::dataset::{
    dataset_stats, materialize, scan_dataset, validate_dataset, DatasetManifest, Split, SplitRatios,
};
use gatepark::face::{enroll, load_embedding, Source};
use gatepark::gate::{parse_scenario, SimulatedGate};
use gatepark::imaging::{read_pnm, write_pnm};
use gatepark::loss::{loss_total, parse_grid, synthetic_grid_set, toy_train, trace_csv, LossWeights, ToyModel};
use gatepark::metrics::{evaluate, load_scenes, parse_predictions};
use gatepark::occupancy::{analyze_frame, generate_synthetic_lot, load_slotmap, render_overlay};
use gatepark::plate::{read_plate, register_vehicle};
use gatepark::store::{Collection, Fields, Store, Value};

#[derive(Parser)]
#[command(name = "gatepark", version, about = "Vehicle entrance and parking management")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, split or summarize a YOLO-format dataset.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Evaluate predictions against ground-truth labels.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Composite detection loss between two grid files.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Loss weights `loc,obj,cls`.
        #[arg(long, default_value = "1,1,1")]
        weights: String,
    },
    /// Train the toy linear predictor on the synthetic grid set.
    TrainToy {
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "1,1,1")]
        weights: String,
        /// Write the per-epoch loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Drive the gate controller.
    #[command(subcommand)]
    Gate(GateCmd),
    /// Run the barrier simulator on a TCP port or standard streams.
    BarrierSim(BarrierSimArgs),
    /// Serve inference backends.
    #[command(subcommand)]
    Backend(BackendCmd),
    /// Parking slot occupancy from camera frames.
    #[command(subcommand)]
    Lot(LotCmd),
    /// Inspect and edit the registry store.
    Registry(RegistryArgs),
    /// Show or check the effective configuration.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Report missing pairs, bad label lines and unknown classes.
    Validate { root: PathBuf },
    /// Shuffle into train/val/test with a seed.
    Split {
        root: PathBuf,
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the split manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Copy the items into a split layout under this directory.
        #[arg(long)]
        materialize: Option<PathBuf>,
    },
    /// Per-class and per-split record counts.
    Stats {
        root: PathBuf,
        /// Use this split manifest instead of the on-disk layout.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GateCmd {
    /// Run a scenario on the simulated clock (or the live service).
    Run(GateRunArgs),
}

#[derive(Args)]
struct GateRunArgs {
    #[arg(long, required_unless_present = "live")]
    scenario: Option<PathBuf>,
    /// Bind configured endpoints and accept event lines on the listen port.
    #[arg(long, conflicts_with = "scenario")]
    live: bool,
    /// Directory holding scenario frames and sidecars. Defaults to the
    /// scenario file's directory.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Store directory, overriding `store.dir`. Scenario mode needs either
    /// this or a config file.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Write the barrier transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Exit 1 unless at least one session was granted and none denied.
    #[arg(long)]
    expect_grant: bool,
}

#[derive(Args)]
struct BarrierSimArgs {
    /// TCP port on 127.0.0.1; 0 picks a free one. Without it the simulator
    /// talks over standard input and output.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value_t = TRAVEL_MS)]
    travel_ms: u64,
    /// Report a vehicle passing this long after the barrier is fully open.
    #[arg(long)]
    auto_pass_ms: Option<u64>,
    /// Close by itself this long after a pass.
    #[arg(long)]
    auto_close_ms: Option<u64>,
}

#[derive(Subcommand)]
enum BackendCmd {
    /// The deterministic reference backend for all four ops.
    ServeReference {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// TCP port on 127.0.0.1; 0 picks a free one. Without it requests are
        /// read from standard input.
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Subcommand)]
enum LotCmd {
    /// Classify every slot in one frame.
    Analyze {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        slots: Option<PathBuf>,
        #[arg(long)]
        render: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        timestamp_ms: u64,
    },
    /// One state line per frame, in the order given.
    Watch {
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        slots: Option<PathBuf>,
        /// Spacing of the frame timestamps.
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
        /// Write `<frame stem>.overlay.ppm` snapshots here.
        #[arg(long)]
        render_dir: Option<PathBuf>,
    },
    /// Generate a synthetic lot frame and its slot map.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "slots", default_value_t = 5)]
        count: usize,
        /// Occupied slot ids, e.g. `1,3`.
        #[arg(long, value_delimiter = ',')]
        occupied: Vec<u32>,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
}

#[derive(Args)]
struct RegistryArgs {
    /// Store directory (overrides `store.dir`).
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: RegistryCmd,
}

#[derive(Subcommand)]
enum RegistryCmd {
    AddVehicle {
        plate: String,
        #[arg(long, default_value = "car")]
        class: String,
        /// Employee ids allowed to drive this vehicle.
        #[arg(long = "driver")]
        drivers: Vec<String>,
    },
    AddEmployee {
        id: String,
        #[arg(long)]
        name: String,
    },
    EnrollFace {
        id: String,
        /// Embedding file, one value per line.
        #[arg(long)]
        embedding: PathBuf,
    },
    /// Create the slot collection with `count` free slots.
    InitSlots { count: usize },
    /// List a collection (vehicles by default).
    List {
        #[arg(default_value = "vehicles")]
        collection: String,
    },
    /// The audit log.
    Events,
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print every key with its effective value.
    Show,
    /// Validate paths, ranges and the port; exit 2 on failure.
    Check,
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => AppConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o).with_context(|| format!("--set {o}"))?;
    }
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Dataset(c) => dataset(c),
        Command::Eval { truth, preds, iou } => eval(&truth, &preds, iou),
        Command::Loss { pred, target, weights } => loss(&pred, &target, &weights),
        Command::TrainToy {
            images,
            lr,
            epochs,
            seed,
            weights,
            trace,
        } => {
            let w = LossWeights::parse(&weights)?;
            let data = synthetic_grid_set(images, seed);
            let outcome = toy_train(
                ToyModel::zeros(data.feature_dim, data.classes),
                &data,
                lr,
                epochs,
                seed,
                w,
            )?;
            let first = outcome.trace.first().expect("initial loss").total;
            let last = outcome.trace.last().expect("initial loss").total;
            println!("initial {first}");
            println!("final {last}");
            println!("ratio {}", last / first);
            if let Some(p) = trace {
                fs::write(&p, trace_csv(&outcome.trace)).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gate(GateCmd::Run(a)) => gate_run(cfg, cli.config.is_some(), a),
        Command::BarrierSim(a) => barrier_sim(a),
        Command::Backend(BackendCmd::ServeReference {
            root,
            sigma,
            seed,
            dim,
            port,
        }) => {
            if !(sigma >= 0.0 && sigma.is_finite()) || dim == 0 {
                bail!("--sigma must be a non-negative number and --dim positive");
            }
            let mut backend = ReferenceBackend::new(root);
            backend.detector = OracleDetector { sigma, seed };
            backend.embed_dim = dim;
            match port {
                Some(p) => {
                    let listener = TcpListener::bind(("127.0.0.1", p))?;
                    announce(&listener)?;
                    serve_tcp(listener, Arc::new(backend))?;
                }
                None => {
                    let n = serve(&backend, std::io::stdin().lock(), std::io::stdout().lock())?;
                    log::info!("served {n} requests");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Lot(c) => lot(&cfg, c),
        Command::Registry(a) => registry(&cfg, a),
        Command::Config(ConfigCmd::Show) => {
            print!("{}", cfg.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Config(ConfigCmd::Check) => {
            cfg.validate()?;
            println!("ok");
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Prints the bound address so callers that asked for port 0 can find it.
fn announce(listener: &TcpListener) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening {}", listener.local_addr()?)?;
    out.flush()?;
    Ok(())
}

fn dataset(cmd: DatasetCmd) -> Result<ExitCode> {
    match cmd {
        DatasetCmd::Validate { root } => {
            let scan = scan_dataset(&root)?;
            let report = validate_dataset(&scan);
            for f in &report.findings {
                println!("{f}");
            }
            if report.is_clean() {
                println!("clean: {} items", scan.items().len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{} findings", report.findings.len());
                Ok(ExitCode::from(1))
            }
        }
        DatasetCmd::Split {
            root,
            ratios,
            seed,
            out,
            materialize: into,
        } => {
            let ratios = SplitRatios::parse(&ratios)?;
            let scan = scan_dataset(&root)?;
            let manifest = DatasetManifest::split(scan.items(), scan.class_map.clone(), ratios, seed)?;
            if let Some(p) = &out {
                fs::write(p, manifest.to_text()).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(dir) = &into {
                materialize(&manifest, dir)?;
            }
            let (tr, va, te) = manifest.splits.sizes();
            println!("train {tr}");
            println!("val {va}");
            println!("test {te}");
            Ok(ExitCode::SUCCESS)
        }
        DatasetCmd::Stats { root, manifest } => {
            let scan = scan_dataset(&root)?;
            let manifest = match manifest {
                Some(p) => DatasetManifest::from_text(&read_text(&p)?, scan.items(), scan.class_map.clone())?,
                None => scan.manifest(),
            };
            let stats = dataset_stats(&manifest)?;
            for (name, n) in &stats.per_class {
                println!("class {name} {n}");
            }
            for split in Split::ALL {
                let c = &stats.per_split[&split];
                println!("split {split} images {} records {}", c.images, c.records);
            }
            println!("total {}", stats.total_records);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn eval(truth: &Path, preds: &Path, iou: f64) -> Result<ExitCode> {
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou must be in (0, 1]");
    }
    let preds = parse_predictions(&read_text(preds)?).with_context(|| format!("{}", preds.display()))?;
    let scenes: Vec<_> = load_scenes(truth, &preds)?.into_iter().map(|(_, s)| s).collect();
    let names = scan_dataset(truth)?.class_map;
    print!("{}", evaluate(&scenes, iou).render_table(&names));
    Ok(ExitCode::SUCCESS)
}

fn loss(pred: &Path, target: &Path, weights: &str) -> Result<ExitCode> {
    let w = LossWeights::parse(weights)?;
    let p = parse_grid(&read_text(pred)?).with_context(|| format!("{}", pred.display()))?;
    let t = parse_grid(&read_text(target)?).with_context(|| format!("{}", target.display()))?;
    let b = loss_total(&p.into_pred(), &t.into_target()?, w)?;
    let mut s = String::new();
    let _ = writeln!(s, "loc {}", b.loc);
    let _ = writeln!(s, "obj {} (obj {} noobj {})", b.obj, b.obj_e1, b.obj_e2);
    let _ = writeln!(s, "cls {}", b.cls);
    let _ = writeln!(s, "total {}", b.total);
    print!("{s}");
    Ok(ExitCode::SUCCESS)
}

fn open_store(cfg: &AppConfig, flag: Option<PathBuf>, clock: Arc<dyn Clock>) -> Result<Store> {
    let dir = flag.unwrap_or_else(|| cfg.store_dir.clone());
    Store::open(&dir, clock).with_context(|| format!("opening store {}", dir.display()))
}

fn gate_run(mut cfg: AppConfig, from_file: bool, a: GateRunArgs) -> Result<ExitCode> {
    if a.live {
        if let Some(s) = a.store {
            cfg.store_dir = s;
        }
        if let Some(f) = a.frames {
            cfg.frame_root = f.clone();
            cfg.reference_root = f;
        }
        cfg.validate()?;
        return live::run(cfg);
    }
    let scenario = a.scenario.expect("clap requires --scenario without --live");
    let events = parse_scenario(&read_text(&scenario)?).with_context(|| format!("{}", scenario.display()))?;
    let frames = a
        .frames
        .unwrap_or_else(|| scenario.parent().map(Path::to_path_buf).unwrap_or_default());
    cfg.frame_root = frames.clone();
    cfg.reference_root = frames.clone();
    let clock = SimClock::new(0);
    let store_dir = a.store.or(from_file.then(|| cfg.store_dir.clone()));
    let store = match store_dir {
        Some(d) => {
            Store::open(&d, Arc::new(clock.clone())).with_context(|| format!("opening store {}", d.display()))?
        }
        None => bail!("gate run needs a store: pass --store or a config with store.dir"),
    };
    let mut gate = SimulatedGate::new(cfg.gate.clone(), store, cfg.backends()?, clock, &frames)?;
    gate.run(&events)?;
    let trace = gate.trace_text();
    print!("{trace}");
    if let Some(p) = &a.transcript {
        fs::write(p, gate.transcript_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.expect_grant {
        let states: Vec<&str> = trace.lines().filter_map(|l| l.split(' ').nth(3)).collect();
        let granted = states.contains(&"Granted");
        let denied = states.iter().any(|s| s.starts_with("Denied"));
        if !granted || denied {
            eprintln!("expected a grant: granted={granted} denied={denied}");
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn barrier_sim(a: BarrierSimArgs) -> Result<ExitCode> {
    let mut sim = BarrierSim::new(a.travel_ms);
    sim.auto_pass_ms = a.auto_pass_ms;
    sim.auto_close_ms = a.auto_close_ms;
    let clock: Arc<dyn Clock> = Arc::new(WallClock::new());
    match a.port {
        Some(p) => {
            let listener = TcpListener::bind(("127.0.0.1", p))?;
            announce(&listener)?;
            serve_sim_tcp(listener, Arc::new(Mutex::new(sim)), clock)?;
        }
        None => serve_sim(&mut sim, clock.as_ref(), std::io::stdin(), std::io::stdout(), 20)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn slot_map_path(cfg: &AppConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let p = flag
        .or_else(|| cfg.slot_map.clone())
        .context("no slot map: pass --slots or set lot.slot_map")?;
    if !p.is_file() {
        bail!("slot map {} not found", p.display());
    }
    Ok(p)
}

fn lot(cfg: &AppConfig, cmd: LotCmd) -> Result<ExitCode> {
    let params = &cfg.occupancy;
    params.validate()?;
    match cmd {
        LotCmd::Analyze {
            frame,
            slots,
            render,
            timestamp_ms,
        } => {
            let map = load_slotmap(slot_map_path(cfg, slots)?)?;
            let img = read_pnm(&frame).with_context(|| format!("reading {}", frame.display()))?;
            let state = analyze_frame(&img, &map, params, timestamp_ms)?;
            print!("{}", state.report());
            if let Some(out) = render {
                write_pnm(&out, &render_overlay(&img, &state, &map))?;
            }
        }
        LotCmd::Watch {
            frames,
            slots,
            interval_ms,
            render_dir,
        } => {
            let map = load_slotmap(slot_map_path(cfg, slots)?)?;
            if let Some(d) = &render_dir {
                fs::create_dir_all(d)?;
            }
            let mut out = std::io::stdout().lock();
            for (i, f) in frames.iter().enumerate() {
                let img = read_pnm(f).with_context(|| format!("reading {}", f.display()))?;
                let state = analyze_frame(&img, &map, params, i as u64 * interval_ms)?;
                writeln!(out, "{}", state.state_line())?;
                out.flush()?;
                if let Some(d) = &render_dir {
                    let stem = f
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    write_pnm(
                        d.join(format!("{stem}.overlay.ppm")),
                        &render_overlay(&img, &state, &map),
                    )?;
                }
            }
        }
        LotCmd::Synth {
            seed,
            count,
            occupied,
            frame,
            map,
        } => {
            let lot = generate_synthetic_lot(seed, count, &occupied)?;
            write_pnm(&frame, &lot.frame)?;
            fs::write(&map, lot.map.to_text()).with_context(|| format!("writing {}", map.display()))?;
            let ids: Vec<String> = lot.occupied().iter().map(u32::to_string).collect();
            println!("occupied {}", ids.join(","));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Num(n) => n.to_string(),
        Value::List(l) => l.join(","),
    }
}

fn format_doc(id: &str, fields: &Fields) -> String {
    let mut line = id.to_string();
    for (k, v) in fields {
        // Face templates are long; their length is enough for a listing.
        if k.starts_with("embedding.") {
            let _ = write!(line, " {k}=<{} values>", v.as_list().map_or(0, <[String]>::len));
            continue;
        }
        let _ = write!(line, " {k}={}", format_value(v));
    }
    line
}

fn registry(cfg: &AppConfig, a: RegistryArgs) -> Result<ExitCode> {
    let mut store = open_store(cfg, a.store, Arc::new(WallClock::new()))?;
    match a.command {
        RegistryCmd::AddVehicle { plate, class, drivers } => {
            let canonical = read_plate(&plate).with_context(|| format!("plate {plate:?}"))?;
            register_vehicle(&mut store, &canonical, &class, &drivers)?;
            println!("{}", canonical.canonical());
        }
        RegistryCmd::AddEmployee { id, name } => {
            store.put(
                Collection::Employees,
                &id,
                Fields::from([("name".to_string(), Value::from(name.as_str()))]),
            )?;
            println!("{id}");
        }
        RegistryCmd::EnrollFace { id, embedding } => {
            if store.get(Collection::Employees, &id).is_none() {
                bail!("no employee {id:?}");
            }
            let e = load_embedding(&embedding, cfg.gate.face_dim, Source::Enrollment)?;
            let n = enroll(&mut store, &id, &e)?;
            println!("{id} templates {n}");
        }
        RegistryCmd::InitSlots { count } => {
            store.init_slots(count)?;
            let (free, assigned) = store.slot_counts();
            println!("free {free} assigned {assigned}");
        }
        RegistryCmd::List { collection } => {
            let c = Collection::parse(&collection)?;
            for (id, fields) in store.list(c) {
                println!("{}", format_doc(id.as_str(), fields));
            }
        }
        RegistryCmd::Events => {
            for (id, fields) in store.list(Collection::Events) {
                println!("{}", format_doc(id.as_str(), fields));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlp_core::coop_service::{encode_message, run_offline, serve, write_metrics, MetricsRow, ServeOptions, SimOptions};
use vlp_core::occ_link::{decode_chips, encode_uid, ChipSequence, DecodeError};
use vlp_core::rs_camera::{read_pgm, render_view, write_pgm, PgmError};
use vlp_core::scene::{load_scenario, Pose, Scenario, SceneError, Vec3};
use vlp_core::vision::{decode_roi, detect_rois, extract_profile, VisionConfig};

#[derive(Parser)]
#[command(name = "vlpsim", version, about = "Rolling-shutter visible light positioning simulator")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON; the built-in default layout when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live simulation and serve fixes to clients.
    Serve {
        #[command(flatten)]
        scene: ScenarioArgs,
        /// Line-protocol (newline-delimited JSON over TCP) address.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Console and WebSocket address [default: TCP port + 1].
        #[arg(long)]
        ws_bind: Option<String>,
        /// No console, no WebSocket endpoint.
        #[arg(long)]
        headless: bool,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
    },
    /// Run the simulation offline and write per-tick metrics.
    Simulate {
        #[command(flatten)]
        scene: ScenarioArgs,
        #[arg(long, default_value_t = 300)]
        ticks: u64,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the message stream (one JSON object per line).
        #[arg(long)]
        messages: Option<PathBuf>,
    },
    /// Render one camera frame to a binary PGM.
    Render {
        #[command(flatten)]
        scene: ScenarioArgs,
        /// Agent whose camera is rendered [default: first agent].
        #[arg(long)]
        agent: Option<String>,
        /// Frame start time, seconds.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Camera position x,y,z in meters (overrides the agent's).
        #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
        position: Option<[f64; 3]>,
        /// Camera roll,pitch,yaw in degrees (overrides the agent's).
        #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
        orientation_deg: Option<[f64; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode lamp UIDs from a PGM frame or a chip string.
    Decode {
        /// PGM image.
        #[arg(required_unless_present = "chips", conflicts_with = "chips")]
        image: Option<PathBuf>,
        /// Chip string of 0s and 1s instead of an image.
        #[arg(long)]
        chips: Option<String>,
    },
    /// Print the chip sequence transmitted for a UID.
    Encode {
        uid: u8,
        /// Number of back-to-back frames.
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
    /// Per-frame positioning accuracy as CSV.
    Eval {
        #[command(flatten)]
        scene: ScenarioArgs,
        #[arg(long, default_value_t = 300)]
        ticks: u64,
        /// CSV output [default: standard output].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 2 if any frame after the warm-up has no fix.
        #[arg(long)]
        strict: bool,
        /// Ticks ignored by --strict while lamp identities are acquired.
        #[arg(long, default_value_t = 30)]
        warmup: u64,
    },
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated numbers".to_string())
}

enum Failure {
    Usage(String),
    Domain(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Domain(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Domain(m) | Failure::Io(m) => m,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn load(args: &ScenarioArgs) -> Result<Scenario, Failure> {
    let mut s = match &args.scenario {
        None => Scenario::default(),
        Some(p) => load_scenario(p).map_err(|e| match e {
            SceneError::Io(_) => Failure::Io(format!("{}: {e}", p.display())),
            _ => Failure::Usage(format!("{}: {e}", p.display())),
        })?,
    };
    if let Some(seed) = args.seed {
        s.rng_seed = seed;
    }
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn cmd_serve(scene: &ScenarioArgs, bind: String, ws_bind: Option<String>, headless: bool, ticks: Option<u64>) -> Result<(), Failure> {
    let scenario = load(scene)?;
    let opts = ServeOptions {
        bind,
        ws_bind,
        headless,
        max_ticks: ticks,
        ..ServeOptions::default()
    };
    let handle = serve(scenario, &opts).map_err(|e| Failure::Io(e.to_string()))?;
    eprintln!("line protocol on {}", handle.tcp_addr());
    if let Some(a) = handle.ws_addr() {
        eprintln!("console on http://{a}/");
    }
    handle.wait();
    Ok(())
}

fn cmd_simulate(scene: &ScenarioArgs, ticks: u64, out: &Path, messages: Option<&Path>) -> Result<(), Failure> {
    let scenario = load(scene)?;
    let records = run_offline(scenario, ticks, SimOptions::default());
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from).collect();
    let mut w = create(out)?;
    write_metrics(&rows, &mut w)?;
    w.flush()?;
    if let Some(path) = messages {
        let mut w = create(path)?;
        for r in &records {
            w.write_all(encode_message(&r.message).as_bytes())?;
        }
        w.flush()?;
    }
    let fixes = rows.iter().filter(|r| r.err_m.is_some()).count();
    eprintln!("{} ticks, {} records, {} with a fix", ticks, rows.len(), fixes);
    Ok(())
}

fn cmd_render(
    scene: &ScenarioArgs,
    agent: Option<&str>,
    time: f64,
    position: Option<[f64; 3]>,
    orientation_deg: Option<[f64; 3]>,
    out: &Path,
) -> Result<(), Failure> {
    let scenario = load(scene)?;
    let spec = match agent {
        Some(id) => scenario.agent(id).ok_or_else(|| Failure::Usage(format!("no agent {id:?} in scenario")))?,
        None => scenario.agents.first().ok_or_else(|| Failure::Usage("scenario has no agents".into()))?,
    };
    let mut pose = spec.pose;
    if let Some(p) = position {
        pose.position = Vec3::new(p[0], p[1], p[2]);
    }
    if let Some(o) = orientation_deg {
        pose = Pose::new(pose.position, o[0].to_radians(), o[1].to_radians(), o[2].to_radians());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
    let frame = render_view(&scenario, &pose, &spec.camera, time, &mut rng);
    let mut w = create(out)?;
    write_pgm(&frame.image, &mut w)?;
    w.flush()?;
    info!("rendered {}x{} frame for {}", frame.image.width, frame.image.height, spec.agent_id);
    Ok(())
}

fn report_decode_error(e: DecodeError) -> String {
    match e {
        // a lamp that never switches off carries no preamble
        DecodeError::DegenerateProfile => "NoSync: no stripes in the lamp image (unmodulated?)".into(),
        DecodeError::NoSync => "NoSync: no preamble found".into(),
        DecodeError::InvalidManchester { confidence } => format!("InvalidManchester: confidence {confidence:.3}"),
        DecodeError::NeedMoreRows(n) => format!("NeedMoreRows: {n} chips visible, a single frame needs 42"),
    }
}

fn cmd_decode(image: Option<&Path>, chips: Option<&str>) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    if let Some(text) = chips {
        let seq: ChipSequence = text.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
        let r = decode_chips(&seq.chips).map_err(|e| Failure::Domain(report_decode_error(e)))?;
        writeln!(
            out,
            "uid {} (0x{:02X}) confidence {:.3} sync_offset {} chips_consumed {}",
            r.uid, r.uid, r.confidence, r.sync_offset, r.chips_consumed
        )?;
        return Ok(());
    }
    let path = image.expect("clap requires an image or --chips");
    let file = File::open(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let img = read_pgm(io::BufReader::new(file)).map_err(|e| match e {
        PgmError::Io(e) => Failure::Io(format!("{}: {e}", path.display())),
        other => Failure::Io(format!("{}: {other}", path.display())),
    })?;
    let cfg = VisionConfig::default();
    let rois = detect_rois(&img, &cfg);
    if rois.is_empty() {
        return Err(Failure::Domain("NoSync: no lamp found in the image".into()));
    }
    let mut first_err = None;
    let mut decoded = 0;
    for (i, roi) in rois.iter().enumerate() {
        let (u, v) = roi.centroid;
        let result = extract_profile(&img, roi, &cfg)
            .map_err(|_| DecodeError::DegenerateProfile)
            .and_then(|p| decode_roi(&p));
        match result {
            Ok(r) => {
                decoded += 1;
                writeln!(
                    out,
                    "roi {i} centroid ({u:.2}, {v:.2}) diameter {:.2} px: uid {} (0x{:02X}) confidence {:.3}",
                    roi.equiv_diameter, r.uid, r.uid, r.confidence
                )?;
            }
            Err(e) => {
                let msg = report_decode_error(e);
                eprintln!("roi {i} centroid ({u:.2}, {v:.2}) diameter {:.2} px: {msg}", roi.equiv_diameter);
                first_err.get_or_insert(msg);
            }
        }
    }
    match (decoded, first_err) {
        (0, Some(msg)) => Err(Failure::Domain(msg)),
        _ => Ok(()),
    }
}

fn cmd_encode(uid: u8, frames: usize) -> Result<(), Failure> {
    let one = encode_uid(uid).to_string();
    writeln!(io::stdout().lock(), "{}", one.repeat(frames))?;
    Ok(())
}

fn cmd_eval(scene: &ScenarioArgs, ticks: u64, out: Option<&Path>, strict: bool, warmup: u64) -> Result<(), Failure> {
    let scenario = load(scene)?;
    let n_agents = scenario.agents.len() as u64;
    let records = run_offline(scenario, ticks, SimOptions::default());
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "timestamp_s", "agent_id", "truth_x", "truth_y", "truth_z", "fix_x", "fix_y", "fix_z", "scheme",
        "residual_px", "n_leds",
    ])?;
    let mut missing = 0;
    for (i, r) in records.iter().enumerate() {
        let p = r.truth.position;
        let t = r.t_ms as f64 / 1000.0;
        let mut row = vec![t.to_string(), r.agent_id.clone(), p.x.to_string(), p.y.to_string(), p.z.to_string()];
        match &r.fix {
            Some(f) => row.extend([
                f.position.x.to_string(),
                f.position.y.to_string(),
                f.position.z.to_string(),
                f.scheme.as_str().to_string(),
                f.residual_px.to_string(),
                f.n_leds.to_string(),
            ]),
            None => {
                if i as u64 / n_agents.max(1) >= warmup {
                    missing += 1;
                }
                row.extend(["", "", "", "", "", "0"].map(String::from));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    if strict && missing > 0 {
        return Err(Failure::Domain(format!("NoFix in {missing} frame(s) after warm-up")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { scene, bind, ws_bind, headless, ticks } => cmd_serve(&scene, bind, ws_bind, headless, ticks),
        Command::Simulate { scene, ticks, out, messages } => cmd_simulate(&scene, ticks, &out, messages.as_deref()),
        Command::Render { scene, agent, time, position, orientation_deg, out } => cmd_render(
            &scene,
            agent.as_deref(),
            time,
            position,
            orientation_deg,
            &out,
        ),
        Command::Decode { image, chips } => cmd_decode(image.as_deref(), chips.as_deref()),
        Command::Encode { uid, frames } => cmd_encode(uid, frames),
        Command::Eval { scene, ticks, out, strict, warmup } => cmd_eval(&scene, ticks, out.as_deref(), strict, warmup),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("vlpsim: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

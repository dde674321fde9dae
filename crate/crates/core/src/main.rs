//! `qkdsim`: command-line front end.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use timebin_qkd::experiment::config::{ExperimentConfig, FreeParam, Scale};
use timebin_qkd::experiment::exchange::{dump_first_block, run_exchange, run_role, Endpoint, Role, RoleReport};
use timebin_qkd::experiment::optimize::optimize;
use timebin_qkd::experiment::report::{dump_summary, parse_report, render, AnyReport, Format};
use timebin_qkd::experiment::sweep::{sweep, SweepPoint};
use timebin_qkd::linksim::records::read_dump;
use timebin_qkd::{Error, Result};

#[derive(Parser)]
#[command(name = "qkdsim", version, about = "Time-bin QKD link simulator and post-processing stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-process key exchange over an in-memory channel.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Also write the first simulated block as a record dump.
        #[arg(long, value_name = "PATH")]
        dump_records: Option<PathBuf>,
    },
    /// One exchange per attenuation point, e.g. `36,38,40` or `35@spad-35db`.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        points: Vec<SweepPoint>,
    },
    /// Choose source parameters that maximize the predicted key rate.
    Optimize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Free parameters (mu1, mu2, pmu1, pzalice).
        #[arg(long, value_delimiter = ',', default_value = "mu1,mu2")]
        free: Vec<FreeParam>,
        #[arg(long, default_value = "text")]
        format: Format,
    },
    /// Alice's half of a two-process exchange over TCP.
    Alice(RoleArgs),
    /// Bob's half of a two-process exchange over TCP.
    Bob(RoleArgs),
    /// Re-render a JSON run or sweep report, or summarize a record dump.
    Report {
        file: PathBuf,
        #[arg(long, default_value = "text")]
        format: Format,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; defaults apply without one.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    blocks: Option<u64>,
    #[arg(long, value_name = "DB")]
    attenuation: Option<f64>,
    /// Detector preset (snspd, spad-30db, spad-35db, spad-40db, spad-151km, ideal).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    scale: Option<Scale>,
    /// Enable the planned phase and delay drift.
    #[arg(long)]
    drift: bool,
    /// Optimize these parameters before running.
    #[arg(long, value_delimiter = ',')]
    optimize: Vec<FreeParam>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = self.blocks {
            c.blocks = b;
        }
        if let Some(a) = self.attenuation {
            c.channel.attenuation_db = a;
        }
        if let Some(p) = &self.preset {
            c.detectors.preset = p.clone();
        }
        if let Some(s) = self.scale {
            c.scale = s;
        }
        c.drift |= self.drift;
        if !self.optimize.is_empty() {
            c.optimize = self.optimize.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Format written to stdout.
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "endpoint", required = true, multiple = false)]
struct RoleArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, group = "endpoint", value_name = "ADDR")]
    listen: Option<String>,
    #[arg(long, group = "endpoint", value_name = "ADDR")]
    connect: Option<String>,
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn emit(report: &AnyReport, cfg: &ExperimentConfig, out: &OutputArgs) -> Result<()> {
    print!("{}", render(report, out.format)?);
    let targets = [
        (out.csv.as_ref().or(cfg.output.csv.as_ref()), Format::Csv),
        (out.json.as_ref().or(cfg.output.json.as_ref()), Format::Json),
        (out.text.as_ref().or(cfg.output.text.as_ref()), Format::Text),
    ];
    for (path, f) in targets {
        if let Some(p) = path {
            write(p, &render(report, f)?)?;
        }
    }
    Ok(())
}

fn role_text(r: &RoleReport) -> String {
    let mut s = format!("{} finished {} block(s) of {}\n", r.role, r.rows.len(), r.scenario);
    for b in &r.rows {
        s += &format!(
            "block {}: QBER_z {:.3} %, phi_z {:.3} %, lambda {}, {} secret bits, key sha256 {}\n",
            b.block,
            100.0 * b.qber_z,
            100.0 * b.phi_z,
            b.lambda,
            b.secret_bits,
            b.key_digest
        );
    }
    s + &format!("SKR {:.3} kbps, transcript {}\n", r.aggregate.skr_kbps, r.transcript)
}

fn run_role_cmd(a: &RoleArgs, role: Role) -> Result<()> {
    let cfg = a.cfg.load()?;
    let endpoint = match (&a.listen, &a.connect) {
        (Some(l), _) => Endpoint::Listen(l.clone()),
        (_, Some(c)) => Endpoint::Connect(c.clone()),
        _ => unreachable!("clap requires one endpoint"),
    };
    let r = run_role(&cfg, role, &endpoint)?;
    let json = serde_json::to_string_pretty(&r).map_err(|e| Error::Config(e.to_string()))? + "\n";
    match a.format {
        Format::Json => print!("{json}"),
        _ => print!("{}", role_text(&r)),
    }
    if let Some(p) = &a.json {
        write(p, &json)?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { cfg, out, dump_records } => {
            let c = cfg.load()?;
            if let Some(p) = dump_records {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
                dump_first_block(&c, &mut f)?;
            }
            let r = run_exchange(&c)?;
            emit(&AnyReport::Run(Box::new(r)), &c, &out)
        }
        Command::Sweep { cfg, out, points } => {
            let c = cfg.load()?;
            emit(&AnyReport::Sweep(sweep(&c, &points)), &c, &out)
        }
        Command::Optimize { cfg, free, format } => {
            let c = cfg.load()?;
            let r = optimize(&c.system()?, &free)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::Config(e.to_string()))?),
                _ => {
                    let p = r.system.params;
                    println!("mu1 = {:.4}\nmu2 = {:.4}\np_mu1 = {:.4}\np_z_alice = {:.4}", p.mu1, p.mu2, p.p_mu1, p.p_z_alice);
                    println!(
                        "predicted SKR {:.3} kbps (start {:.3} kbps), RKR {:.2} kbps, QBER_z {:.2} %, phi_z {:.2} %, {} evaluations",
                        r.prediction.skr / 1e3,
                        r.start_skr / 1e3,
                        r.prediction.rkr / 1e3,
                        100.0 * r.prediction.qber_z,
                        100.0 * r.prediction.phi_z,
                        r.evaluations
                    );
                }
            }
            Ok(())
        }
        Command::Alice(a) => run_role_cmd(&a, Role::Alice),
        Command::Bob(a) => run_role_cmd(&a, Role::Bob),
        Command::Report { file, format } => {
            let mut bytes = Vec::new();
            std::fs::File::open(&file)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", file.display())))?;
            if bytes.starts_with(b"TBQR") {
                print!("{}", dump_summary(&read_dump(&mut bytes.as_slice())?));
            } else {
                let text = String::from_utf8(bytes).map_err(|_| Error::Config("report is not UTF-8".into()))?;
                print!("{}", render(&parse_report(&text)?, format)?);
            }
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Abort(_) | Error::Protocol(_) | Error::Wire(_) | Error::Timeout | Error::Closed => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKDSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qkdsim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

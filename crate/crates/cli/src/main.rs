use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gpopf::acpf::{check_limits, net_injections, solve_pf, PfOptions};
use gpopf::feeder::{
    fixtures, gen_scenarios, load_feeder, read_scenarios_csv, write_scenarios_csv, FeederModel, Scenario,
    ScenarioConfig, V0Mode,
};
use gpopf::gp::{FitOptions, ModelFile};
use gpopf::harness::dataset::{build_dataset, read_jsonl, write_jsonl, DatasetOptions, OpfRecord, Target};
use gpopf::harness::pipeline::{fit_target, stride_indices, train_surrogate, RfConfig};
use gpopf::harness::{run_pipeline, Method, PipelineConfig, Surrogate};
use gpopf::lopf::{build_rx, solve_lopf, LopfOptions};
use gpopf::opf::{build_socp, Layout};
use gpopf::Error;
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "gpopf", version, about = "Learn optimal inverter setpoints on radial feeders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic grid conditions.
    Scenarios {
        #[command(subcommand)]
        cmd: ScenariosCmd,
    },
    /// Solve the conic OPF.
    Opf {
        #[command(subcommand)]
        cmd: OpfCmd,
    },
    /// Build labeled OPF datasets.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Fit and train a surrogate for one target.
    Train(TrainArgs),
    /// Predict a target with a trained model.
    Predict(PredictArgs),
    /// AC power flow under given inverter setpoints.
    Pf {
        #[command(subcommand)]
        cmd: PfCmd,
    },
    /// Linearized OPF baseline.
    Lopf {
        #[command(subcommand)]
        cmd: LopfCmd,
    },
    /// Config-driven experiment pipeline.
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
}

#[derive(Args)]
struct FeederArgs {
    /// `feeder13`, `feeder123` or a feeder JSON file.
    #[arg(long, default_value = "feeder13")]
    feeder: String,
}

impl FeederArgs {
    fn load(&self) -> anyhow::Result<FeederModel> {
        Ok(match self.feeder.as_str() {
            "feeder13" => fixtures::feeder13(),
            "feeder123" => fixtures::feeder123(),
            p => load_feeder(p).map_err(|e| Error::Config(format!("feeder {p}: {e}")))?,
        })
    }
}

#[derive(Subcommand)]
enum ScenariosCmd {
    Generate {
        #[command(flatten)]
        feeder: FeederArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings as JSON; defaults to 7:00-20:00 at 1-minute steps.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OpfCmd {
    Solve {
        #[command(flatten)]
        feeder: FeederArgs,
        /// Scenario CSV (`t,bus,p_load,q_load,pg_cap`).
        #[arg(long)]
        theta_file: PathBuf,
        /// Pin the substation voltage (pu).
        #[arg(long)]
        fix_v0: Option<f64>,
        #[arg(long, default_value_t = 1e-8)]
        kkt_tol: f64,
        /// Solved records as JSON lines; stdout by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write inverter setpoints (`t,bus,pg,qg`).
        #[arg(long)]
        setpoints_out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build {
        #[command(flatten)]
        feeder: FeederArgs,
        /// Scenario CSV; a generated day is used when absent.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Seed of the generated day.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        with_sensitivities: bool,
        /// Drop degenerate instances instead of keeping them without gradients.
        #[arg(long)]
        drop_degenerate: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    feeder: FeederArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// `pg:<bus>`, `qg:<bus>` or `v:<bus>`.
    #[arg(long)]
    target: Target,
    #[arg(long, default_value = "gp", value_parser = parse_method)]
    method: Method,
    /// Train only on instances every this many minutes; all instances by default.
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long, default_value_t = 1600)]
    rf_dim: usize,
    #[arg(long, default_value_t = 0)]
    rf_seed: u64,
    #[arg(long, default_value_t = 0)]
    fit_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s.parse::<Method>() {
        Ok(Method::Lopf) => Err("lopf is not a trainable method".into()),
        r => r.map_err(|e| e.to_string()),
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    feeder: FeederArgs,
    #[arg(long)]
    model: PathBuf,
    /// Scenario CSV, or a dataset `.jsonl`.
    #[arg(long)]
    theta_file: PathBuf,
    /// CSV output (`t,mean,std`); stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PfCmd {
    Check {
        #[command(flatten)]
        feeder: FeederArgs,
        #[arg(long)]
        theta_file: PathBuf,
        /// Inverter setpoints (`t,bus,pg,qg`).
        #[arg(long)]
        setpoints: PathBuf,
        /// Allowed deviation from 1 pu.
        #[arg(long, default_value_t = 0.03)]
        band: f64,
        /// Substation voltage (pu); the feeder's fixed value or 1 otherwise.
        #[arg(long)]
        v0: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LopfCmd {
    Solve {
        #[command(flatten)]
        feeder: FeederArgs,
        #[arg(long)]
        theta_file: PathBuf,
        /// Weight the loss proxy by one half.
        #[arg(long)]
        half_loss: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Exit with status 4 when a property check fails.
        #[arg(long)]
        self_check: bool,
        /// Drop degenerate instances instead of keeping them without gradients.
        #[arg(long)]
        drop_degenerate: bool,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SetpointRow {
    t: f64,
    bus: u32,
    pg: f64,
    qg: f64,
}

fn output(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn std::io::Write>> {
    Ok(match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn read_scenarios(f: &FeederModel, p: &Path) -> anyhow::Result<Vec<Scenario>> {
    let s = read_scenarios_csv(f, p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    if s.is_empty() {
        bail!(Error::Config(format!("{}: no instances", p.display())));
    }
    Ok(s)
}

fn read_records(p: &Path) -> anyhow::Result<Vec<OpfRecord>> {
    read_jsonl(p).map_err(|e| Error::Config(format!("dataset {}: {e}", p.display())).into())
}

fn scenario_config(p: &Option<PathBuf>) -> anyhow::Result<ScenarioConfig> {
    match p {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_str(&s).map_err(|e| Error::Config(e.to_string()))?)
        }
        None => Ok(ScenarioConfig::default()),
    }
}

/// Setpoints keyed by the bit pattern of `t`, in inverter order.
fn read_setpoints(f: &FeederModel, p: &Path) -> anyhow::Result<BTreeMap<u64, (DVector<f64>, DVector<f64>)>> {
    let mut r = csv::Reader::from_path(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    let mut out: BTreeMap<u64, (DVector<f64>, DVector<f64>)> = BTreeMap::new();
    for row in r.deserialize() {
        let row: SetpointRow = row.map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let k = f
            .bus_number(row.bus)
            .and_then(|b| f.inverter_at(b))
            .ok_or_else(|| Error::Config(format!("setpoint for bus {} without an inverter", row.bus)))?;
        let e = out
            .entry(row.t.to_bits())
            .or_insert_with(|| (DVector::from_element(f.ng(), f64::NAN), DVector::from_element(f.ng(), f64::NAN)));
        e.0[k] = row.pg;
        e.1[k] = row.qg;
    }
    Ok(out)
}

fn write_setpoints(
    f: &FeederModel,
    w: Box<dyn std::io::Write>,
    rows: impl Iterator<Item = (f64, DVector<f64>, DVector<f64>)>,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for (t, pg, qg) in rows {
        for (k, inv) in f.inverters.iter().enumerate() {
            w.serialize(SetpointRow { t, bus: f.bus_ids[inv.bus - 1], pg: pg[k], qg: qg[k] })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Scenarios { cmd: ScenariosCmd::Generate { feeder, seed, config, out } } => {
            let f = feeder.load()?;
            let set = gen_scenarios(&f, &scenario_config(&config)?, seed)?;
            write_scenarios_csv(&f, &set.scenarios, &out)?;
            eprintln!("{} instances written to {}", set.scenarios.len(), out.display());
        }
        Cmd::Opf { cmd: OpfCmd::Solve { feeder, theta_file, fix_v0, kkt_tol, out, setpoints_out } } => {
            let mut f = feeder.load()?;
            if let Some(v) = fix_v0 {
                f.v0_mode = V0Mode::Fixed(v * v);
            }
            let sc = read_scenarios(&f, &theta_file)?;
            let ps = build_socp(&f);
            let mut opts = DatasetOptions::default();
            opts.solve.kkt_tol = kkt_tol;
            let (recs, sum) = build_dataset(&f, &ps, &sc, &[], &opts);
            if let Some((i, e)) = sum.failed.first() {
                bail!(Error::Numerical(format!("instance {i} (t = {}): {e}", sc[*i].t)));
            }
            let mut w = output(&out)?;
            for r in &recs {
                serde_json::to_writer(&mut w, r)?;
                writeln!(w)?;
            }
            if let Some(p) = setpoints_out {
                let lay = Layout { n: f.n(), ng: f.ng() };
                let rows = recs.iter().map(|r| {
                    (
                        r.t,
                        DVector::from_fn(f.ng(), |k, _| r.x[lay.pg(k)]),
                        DVector::from_fn(f.ng(), |k, _| r.x[lay.qg(k)]),
                    )
                });
                write_setpoints(&f, output(&Some(p))?, rows)?;
            }
            eprintln!("{} instances solved, {} not exact", recs.len(), sum.inexact);
        }
        Cmd::Dataset { cmd: DatasetCmd::Build { feeder, scenarios, seed, with_sensitivities, drop_degenerate, out } } => {
            let f = feeder.load()?;
            let sc = match scenarios {
                Some(p) => read_scenarios(&f, &p)?,
                None => gen_scenarios(&f, &ScenarioConfig::default(), seed)?.scenarios,
            };
            let ps = build_socp(&f);
            let want = vec![with_sensitivities; sc.len()];
            let (mut recs, sum) = build_dataset(&f, &ps, &sc, &want, &DatasetOptions::default());
            if drop_degenerate {
                recs.retain(|r| !r.degenerate);
            }
            if recs.is_empty() {
                bail!(Error::Numerical("no instance solved".into()));
            }
            write_jsonl(&recs, &out)?;
            eprintln!(
                "{} instances ({} failed, {} inexact, {} degenerate) in {:.1}s",
                recs.len(),
                sum.failed.len(),
                sum.inexact,
                sum.degenerate,
                sum.seconds
            );
        }
        Cmd::Train(a) => {
            let f = a.feeder.load()?;
            let recs = read_records(&a.dataset)?;
            let row = a.target.index(&f).map_err(|e| Error::Config(e.to_string()))?;
            let idx: Vec<usize> = match a.stride {
                Some(s) => stride_indices(&recs.iter().map(|r| r.t).collect::<Vec<_>>(), s),
                None => (0..recs.len()).collect(),
            };
            let opts = FitOptions { seed: a.fit_seed, ..Default::default() };
            let fit = fit_target(&recs, &idx, a.target, row, a.method.needs_grads(), &opts)?;
            let rf = RfConfig { d: a.rf_dim, seed: a.rf_seed };
            let (model, dropped) = train_surrogate(a.method, &recs, &idx, row, &fit, &rf)?;
            let file = model.to_file();
            std::fs::write(&a.out, serde_json::to_string(&file)?)?;
            eprintln!(
                "{} {}: {} samples ({dropped} without gradients left out), {:?}",
                a.method,
                a.target,
                idx.len() - dropped,
                file.hyperparams
            );
        }
        Cmd::Predict(a) => {
            let mf: ModelFile = serde_json::from_str(&std::fs::read_to_string(&a.model)?)
                .map_err(|e| Error::Config(format!("model {}: {e}", a.model.display())))?;
            let model = Surrogate::from_file(&mf)?;
            let inputs: Vec<(f64, DVector<f64>)> = if a.theta_file.extension().is_some_and(|e| e == "jsonl") {
                read_records(&a.theta_file)?.iter().map(|r| (r.t, r.theta_vec())).collect()
            } else {
                let f = a.feeder.load()?;
                read_scenarios(&f, &a.theta_file)?.iter().map(|s| (s.t, s.conditions.theta())).collect()
            };
            if let Some((_, th)) = inputs.first() {
                if th.len() != mf.thetas.first().map_or(th.len(), |t| t.len()) {
                    bail!(Error::Config(format!("model expects θ of length {}", mf.thetas[0].len())));
                }
            }
            let mut w = csv::Writer::from_writer(output(&a.out)?);
            w.write_record(["t", "mean", "std"])?;
            for (t, th) in &inputs {
                let p = model.predict(th);
                w.write_record([t.to_string(), p.mean.to_string(), p.std().to_string()])?;
            }
            w.flush()?;
        }
        Cmd::Pf { cmd: PfCmd::Check { feeder, theta_file, setpoints, band, v0, out } } => {
            let f = feeder.load()?;
            let sc = read_scenarios(&f, &theta_file)?;
            let sp = read_setpoints(&f, &setpoints)?;
            let v0 = v0.map(|v| v * v).or(f.fixed_v0()).unwrap_or(1.0);
            let mut w = csv::Writer::from_writer(output(&out)?);
            w.write_record(["t", "worst_deviation", "voltage_violations", "current_violations", "pf_residual"])?;
            let mut bad = 0;
            for s in &sc {
                let Some((pg, qg)) = sp.get(&s.t.to_bits()) else {
                    bail!(Error::Config(format!("no setpoints for t = {}", s.t)));
                };
                if pg.iter().chain(qg.iter()).any(|v| v.is_nan()) {
                    bail!(Error::Config(format!("incomplete setpoints at t = {}", s.t)));
                }
                let (p, q) = net_injections(&f, &s.conditions.theta(), pg, qg)?;
                let st = solve_pf(&f, &p, &q, v0, &PfOptions::default())?;
                let lim = check_limits(&st, &f, band);
                bad += usize::from(!lim.ok());
                w.write_record([
                    s.t.to_string(),
                    lim.worst_deviation.to_string(),
                    lim.voltage_violations.len().to_string(),
                    lim.current_violations.len().to_string(),
                    st.residual.to_string(),
                ])?;
            }
            w.flush()?;
            eprintln!("{bad} of {} instances outside limits", sc.len());
        }
        Cmd::Lopf { cmd: LopfCmd::Solve { feeder, theta_file, half_loss, out } } => {
            let f = feeder.load()?;
            let sc = read_scenarios(&f, &theta_file)?;
            let v0 = f.fixed_v0().unwrap_or(1.0);
            let model = build_rx(&f, v0);
            let opts = LopfOptions { half_loss, v0, ..Default::default() };
            let sols = sc
                .iter()
                .map(|s| solve_lopf(&f, &model, &s.conditions.theta(), &opts).map(|x| (s.t, x.pg, x.qg)))
                .collect::<gpopf::Result<Vec<_>>>()?;
            write_setpoints(&f, output(&out)?, sols.into_iter())?;
        }
        Cmd::Pipeline { cmd: PipelineCmd::Run { config, self_check, drop_degenerate } } => {
            let mut cfg = PipelineConfig::load(&config)?;
            cfg.drop_degenerate |= drop_degenerate;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let rep = run_pipeline(&cfg)?;
            for r in &rep.results {
                println!("{:<8} {:<9} mean RPE {:.4}", r.target.to_string(), r.method.name(), r.mean_rpe);
            }
            let checks = rep.self_check();
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if self_check && checks.iter().any(|c| !c.pass) {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(g) if g.is_config() => ExitCode::from(2),
                Some(g) if g.is_solver() => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

//! Command-line entry point.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checker::{self, AnalysisFile, CheckError, DEFAULT_STATE_CAP};
use crate::ingest::{self, IngestError, Severity};
use crate::model::{canonical_json, EnvironmentGraph};
use crate::mtl::{self, MtlError};
use crate::property::{self, Bindings, Polarity, Property, PropertyError, PropertyRecord, Strategy};
use crate::runtime::{self, Engine, Latency, PlanStep, ReportRecord, RuntimeError, RuntimeMessage};
use crate::simgen::{self, Injection, Scenario, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_CAP: i32 = 4;
pub const EXIT_REPLAY: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "envguard",
    version,
    about = "Compile, check and enforce safety properties over a device environment"
)]
pub struct Cli {
    /// Print progress records on standard error (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an environment snapshot from space and device descriptions.
    BuildEnv {
        /// Space description file, or a directory of them.
        #[arg(long)]
        spaces: PathBuf,
        /// Device description directory, or a single file.
        #[arg(long)]
        devices: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a property file against an environment snapshot.
    CompileProps {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        props: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Author property files interactively.
    Props {
        #[command(subcommand)]
        command: PropsCommand,
    },
    /// Parse a temporal formula and print its tree and trigger/timer/condition split.
    ParseMtl {
        formula: String,
        /// Property id used in the printed trigger/timer/condition split.
        #[arg(long, default_value_t = 0)]
        id: u32,
    },
    /// Build violation and resolution tables for compiled properties.
    Analyze {
        #[arg(long)]
        env: PathBuf,
        /// Compiled properties, or a plain property file.
        #[arg(long)]
        props: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Largest environment automaton explored per property.
        #[arg(long, env = "ENVGUARD_STATE_CAP", default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic trace with labeled violations.
    Simulate {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        analysis: PathBuf,
        /// Scenario file; without it, uniform background traffic is used.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated days, for the uniform scenario.
        #[arg(long, default_value_t = 1)]
        days: u64,
        /// Background messages per day, for the uniform scenario.
        #[arg(long, default_value_t = 200.0)]
        per_day: f64,
        /// Injected violations per property, for the uniform scenario.
        #[arg(long, default_value_t = 1)]
        inject: usize,
    },
    /// Replay a trace through the engine and write a report.
    Replay {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        analysis: PathBuf,
        /// Trace log; `-` reads standard input.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Process messages as they arrive and inject one tick per second of
        /// wall-clock silence.
        #[arg(long)]
        live: bool,
        /// Leave latency out of the report so that reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
        /// Check the report against a label file written by `simulate`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Summarize a report: per-property counts and latency percentiles.
    Report {
        report: PathBuf,
        /// Per-property CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Per-message latency CSV output.
        #[arg(long)]
        latency_csv: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PropsCommand {
    /// Walk through templates and environment-derived choices on the terminal.
    Wizard {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Replace the strategy of one property, `ID=strategy`.
    #[arg(long = "strategy", value_name = "ID=STRATEGY")]
    pub strategy: Vec<String>,
}

impl Overrides {
    fn parse(&self) -> Result<BTreeMap<u32, Strategy>, Failure> {
        let mut out = BTreeMap::new();
        for item in &self.strategy {
            let (id, name) = item
                .split_once('=')
                .ok_or_else(|| Failure::schema("E_OVERRIDE", format!("expected ID=STRATEGY, got `{item}`")))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Failure::schema("E_OVERRIDE", format!("bad property id in `{item}`")))?;
            let strategy: Strategy = serde_json::from_value(json!(name.trim()))
                .map_err(|_| Failure::schema("E_OVERRIDE", format!("unknown strategy in `{item}`")))?;
            out.insert(id, strategy);
        }
        Ok(out)
    }
}

fn apply_overrides<T>(
    items: &mut [T],
    overrides: &BTreeMap<u32, Strategy>,
    id: impl Fn(&T) -> u32,
    set: impl Fn(&mut T, Strategy),
) -> Result<(), Failure> {
    let known: BTreeSet<u32> = items.iter().map(&id).collect();
    for pid in overrides.keys() {
        if !known.contains(pid) {
            return Err(Failure::schema(
                "E_OVERRIDE",
                format!("override names unknown property {pid}"),
            ));
        }
    }
    for item in items.iter_mut() {
        if let Some(s) = overrides.get(&id(item)) {
            set(item, *s);
        }
    }
    Ok(())
}

/// A failed command: exit code plus one diagnostic record.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub diagnostic: serde_json::Value,
}

impl Failure {
    fn new(code: i32, tag: &str, message: impl Into<String>) -> Self {
        Self {
            code,
            diagnostic: json!({"severity": "error", "code": tag, "message": message.into()}),
        }
    }

    fn schema(tag: &str, message: impl Into<String>) -> Self {
        Self::new(EXIT_SCHEMA, tag, message)
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Syntax { line, column, .. } => Failure {
                code: EXIT_SCHEMA,
                diagnostic: json!({"severity": "error", "code": "E_SYNTAX", "message": e.to_string(), "line": line, "column": column}),
            },
            IngestError::Io { .. } => Failure::schema("E_IO", e.to_string()),
            _ => Failure::schema("E_SCHEMA", e.to_string()),
        }
    }
}

impl From<MtlError> for Failure {
    fn from(e: MtlError) -> Self {
        let mut d = json!({"severity": "error", "code": "E_PARSE", "message": e.to_string()});
        if let Some(p) = e.position() {
            d["line"] = json!(p.line);
            d["column"] = json!(p.col);
        }
        Failure {
            code: EXIT_PARSE,
            diagnostic: d,
        }
    }
}

impl From<PropertyError> for Failure {
    fn from(e: PropertyError) -> Self {
        match e {
            PropertyError::Mtl(m) => m.into(),
            other => Failure::schema("E_PROPERTY", other.to_string()),
        }
    }
}

impl From<CheckError> for Failure {
    fn from(e: CheckError) -> Self {
        match e {
            CheckError::StateSpaceLimit { .. } => Failure::new(EXIT_CAP, "E_STATE_CAP", e.to_string()),
            CheckError::Mtl(m) => m.into(),
            other => Failure::schema("E_ANALYSIS", other.to_string()),
        }
    }
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::BadTrace { line, .. } => Failure {
                code: EXIT_PARSE,
                diagnostic: json!({"severity": "error", "code": "E_TRACE", "message": e.to_string(), "line": line}),
            },
            other => Failure::new(EXIT_REPLAY, "E_RUNTIME", other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Runtime(r) => r.into(),
            SimError::InfeasibleInjection { .. } => Failure::schema("E_INFEASIBLE", e.to_string()),
            SimError::InvalidScenario(_) => Failure::schema("E_SCENARIO", e.to_string()),
        }
    }
}

struct Io<'a> {
    stdin: Box<dyn BufRead + Send>,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    verbose: u8,
}

impl Io<'_> {
    fn diag(&mut self, record: &serde_json::Value) {
        let _ = writeln!(self.stderr, "{record}");
    }

    fn info(&mut self, message: impl Into<String>) {
        if self.verbose > 0 {
            let record = json!({"severity": "info", "message": message.into()});
            self.diag(&record);
        }
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(argv: I, stdin: Box<dyn BufRead + Send>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                return EXIT_SCHEMA;
            }
            let _ = write!(stdout, "{text}");
            return EXIT_OK;
        }
    };
    let mut io = Io {
        stdin,
        stdout,
        stderr,
        verbose: cli.verbose,
    };
    match dispatch(cli.command, &mut io) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            io.diag(&f.diagnostic);
            f.code
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::schema("E_IO", format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::schema("E_IO", format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.as_os_str() == "-" || path.exists() {
        Ok(())
    } else {
        Err(Failure::schema("E_IO", format!("{} does not exist", path.display())))
    }
}

fn load_env(path: &Path) -> Result<EnvironmentGraph, Failure> {
    EnvironmentGraph::from_snapshot(&read(path)?).map_err(|e| Failure::schema("E_SNAPSHOT", e.to_string()))
}

fn load_analysis(path: &Path) -> Result<AnalysisFile, Failure> {
    Ok(AnalysisFile::from_text(&read(path)?)?)
}

/// Reads either compiled properties or an authored property file.
fn load_properties(path: &Path, graph: &EnvironmentGraph) -> Result<Vec<Property>, Failure> {
    let text = read(path)?;
    if let Ok(props) = serde_json::from_str::<Vec<Property>>(&text) {
        return Ok(props);
    }
    let records = property::parse_property_file(&text)?;
    Ok(property::compile_properties(&records, graph)?)
}

fn dispatch(command: Command, io: &mut Io) -> Result<(), Failure> {
    match command {
        Command::BuildEnv { spaces, devices, out } => build_env(&spaces, &devices, &out, io),
        Command::CompileProps {
            env,
            props,
            out,
            overrides,
        } => {
            require(&env)?;
            require(&props)?;
            let overrides = overrides.parse()?;
            let graph = load_env(&env)?;
            let mut records = property::parse_property_file(&read(&props)?)?;
            apply_overrides(&mut records, &overrides, |r| r.id, |r, s| r.strategy = s)?;
            let compiled = property::compile_properties(&records, &graph)?;
            io.info(format!("compiled {} properties", compiled.len()));
            write_file(&out, &canonical_json(&compiled))
        }
        Command::Props {
            command: PropsCommand::Wizard { env, out },
        } => {
            require(&env)?;
            let graph = load_env(&env)?;
            let records = wizard(&graph, io)?;
            write_file(&out, &canonical_json(&records))
        }
        Command::ParseMtl { formula, id } => {
            let ast = mtl::parse_str(&formula)?;
            let spec = mtl::to_trace_spec(id, &ast).ok();
            let text = canonical_json(&json!({
                "formula": mtl::render(&ast),
                "ast": ast,
                "trace_spec": spec,
            }));
            let _ = io.stdout.write_all(text.as_bytes());
            Ok(())
        }
        Command::Analyze {
            env,
            props,
            out,
            state_cap,
            overrides,
        } => {
            require(&env)?;
            require(&props)?;
            let overrides = overrides.parse()?;
            let graph = load_env(&env)?;
            let mut props = load_properties(&props, &graph)?;
            apply_overrides(&mut props, &overrides, |p| p.id, |p, s| p.strategy = s)?;
            let records = checker::analyze_all(&props, &graph, state_cap)?;
            for w in checker::unresolvable_warnings(&records) {
                let _ = writeln!(io.stderr, "{w}");
            }
            io.info(format!("analyzed {} properties", records.len()));
            write_file(&out, &AnalysisFile { records }.to_text())
        }
        Command::Simulate {
            env,
            analysis,
            scenario,
            out,
            labels,
            seed,
            days,
            per_day,
            inject,
        } => {
            require(&env)?;
            require(&analysis)?;
            let graph = load_env(&env)?;
            let records = load_analysis(&analysis)?.records;
            let mut scenario = match scenario {
                Some(path) => serde_json::from_str::<Scenario>(&read(&path)?)
                    .map_err(|e| Failure::schema("E_SCENARIO", e.to_string()))?,
                None => {
                    let mut s = Scenario::uniform(&graph, seed.unwrap_or(0), days, per_day);
                    s.injections = records
                        .iter()
                        .map(|r| Injection {
                            property: r.property_id,
                            count: inject,
                        })
                        .filter(|i| i.count > 0)
                        .collect();
                    s
                }
            };
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let trace = simgen::generate_trace(&graph, &records, &scenario)?;
            io.info(format!(
                "generated {} messages with {} labeled violations",
                trace.messages.len(),
                trace.violation_count()
            ));
            write_file(&out, &trace.trace_text())?;
            write_file(&labels, &trace.labels_text())
        }
        Command::Replay {
            env,
            analysis,
            trace,
            out,
            live,
            no_timing,
            labels,
        } => {
            require(&env)?;
            require(&analysis)?;
            require(&trace)?;
            let graph = load_env(&env)?;
            let records = load_analysis(&analysis)?.records;
            let mut engine = Engine::new(graph, &records)?;
            engine.set_timing(!no_timing);
            let lines = if live {
                replay_live(&mut engine, &trace, io)?
            } else {
                let text = if trace.as_os_str() == "-" {
                    let mut text = String::new();
                    io.stdin
                        .read_to_string(&mut text)
                        .map_err(|e| Failure::schema("E_IO", format!("stdin: {e}")))?;
                    text
                } else {
                    read(&trace)?
                };
                let messages = runtime::parse_trace(&text)?;
                runtime::replay(&mut engine, &messages)?
            };
            let mut text = lines.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            write_file(&out, &text)?;
            if let Some(labels) = labels {
                check_labels(&text, &read(&labels)?, io)?;
            }
            Ok(())
        }
        Command::Report {
            report,
            csv,
            latency_csv,
        } => {
            require(&report)?;
            let summary = summarize(&read(&report)?)?;
            let _ = io.stdout.write_all(summary.text().as_bytes());
            if let Some(p) = csv {
                write_file(&p, &summary.property_csv())?;
            }
            if let Some(p) = latency_csv {
                write_file(&p, &summary.latency_csv())?;
            }
            Ok(())
        }
    }
}

fn build_env(spaces: &Path, devices: &Path, out: &Path, io: &mut Io) -> Result<(), Failure> {
    require(spaces)?;
    require(devices)?;
    let spaces = ingest::load_spaces(spaces)?;
    let devices = ingest::load_devices(devices)?;
    let graph = ingest::build_representation(&spaces, &devices)?;
    let diagnostics = ingest::validate_representation(&graph);
    let mut failed = false;
    for d in &diagnostics {
        failed |= d.severity == Severity::Error;
        let record = serde_json::to_value(d).expect("diagnostic serializes");
        io.diag(&record);
    }
    if failed {
        return Err(Failure::schema("E_VALIDATION", "environment failed validation"));
    }
    io.info(format!(
        "{} spaces, {} devices, {} events, {} actions",
        graph.spaces.len(),
        graph.devices.len(),
        graph.events.len(),
        graph.actions.len()
    ));
    write_file(out, &graph.snapshot())
}

fn replay_live(engine: &mut Engine, trace: &Path, io: &mut Io) -> Result<Vec<String>, Failure> {
    let (tx, rx) = mpsc::channel::<String>();
    let reader: Box<dyn BufRead + Send> = if trace.as_os_str() == "-" {
        std::mem::replace(&mut io.stdin, Box::new(std::io::empty()))
    } else {
        let f = fs::File::open(trace).map_err(|e| Failure::schema("E_IO", format!("{}: {e}", trace.display())))?;
        Box::new(std::io::BufReader::new(f))
    };
    std::thread::spawn(move || {
        for line in reader.lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut lines = Vec::new();
    let mut index = 0usize;
    let mut line_no = 0usize;
    loop {
        let received = rx.recv_timeout(Duration::from_secs(1));
        let message = match received {
            Ok(line) => {
                line_no += 1;
                match runtime::parse_trace(&line).map_err(|e| match e {
                    RuntimeError::BadTrace { message, .. } => RuntimeError::BadTrace { line: line_no, message },
                    other => other,
                })? {
                    mut v if v.len() == 1 => v.remove(0),
                    _ => continue,
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => match engine.clock() {
                Some(c) => RuntimeMessage::tick(c + 1000),
                None => continue,
            },
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        };
        let outcome = engine.ingest(&message)?;
        for r in runtime::report_records(index, &message, &outcome) {
            lines.push(r.to_line());
        }
        if outcome.violations().next().is_some() {
            io.info(format!("violation at message {index}"));
        }
        index += 1;
    }
    Ok(lines)
}

/// Compares a report's violations with a label file.
fn check_labels(report: &str, labels: &str, io: &mut Io) -> Result<(), Failure> {
    let file: simgen::LabelFile =
        serde_json::from_str(labels).map_err(|e| Failure::schema("E_LABELS", e.to_string()))?;
    let mut found: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for line in report.lines() {
        if let Ok(ReportRecord::Verdict { index, verdict }) = serde_json::from_str::<ReportRecord>(line) {
            if let Some(p) = verdict.property_id {
                found.entry(index).or_default().insert(p);
            }
        }
    }
    let expected: usize = file.labels.values().map(BTreeSet::len).sum();
    let mut hits = 0usize;
    let mut false_positives = 0usize;
    for (index, ids) in &found {
        let want = file.labels.get(index);
        for id in ids {
            if want.is_some_and(|w| w.contains(id)) {
                hits += 1;
            } else {
                false_positives += 1;
            }
        }
    }
    let recall = if expected == 0 {
        1.0
    } else {
        hits as f64 / expected as f64
    };
    let record = json!({
        "severity": "info",
        "code": "I_LABELS",
        "labeled": expected,
        "detected": hits,
        "false_positives": false_positives,
        "recall": recall,
    });
    io.diag(&record);
    if hits != expected || false_positives > 0 {
        return Err(Failure::new(EXIT_REPLAY, "E_LABELS", "report disagrees with labels"));
    }
    Ok(())
}

/// Reads one latency component.
type Phase = fn(&Latency) -> f64;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PropertyCounts {
    pub violations: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub plans: usize,
    pub resolved: usize,
    pub notified: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub messages: usize,
    pub ok_messages: usize,
    pub intercepted: usize,
    pub properties: BTreeMap<u32, PropertyCounts>,
    /// Per message: index and latency.
    pub latencies: Vec<(usize, Latency)>,
}

/// Nearest-rank percentile of an unsorted sample; zero when empty.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

impl Summary {
    fn phase(&self, f: fn(&Latency) -> f64) -> Vec<f64> {
        self.latencies.iter().map(|(_, l)| f(l)).collect()
    }

    pub fn text(&self) -> String {
        let mut out = format!(
            "messages={} ok={} intercepted={}\n",
            self.messages, self.ok_messages, self.intercepted
        );
        out.push_str("property,violations,spatial,temporal,plans,resolved,notified\n");
        for (id, c) in &self.properties {
            out.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                c.violations, c.spatial, c.temporal, c.plans, c.resolved, c.notified
            ));
        }
        out.push_str("phase,p50_us,p90_us,p99_us,max_us\n");
        let phases: [(&str, Phase); 4] = [
            ("update", |l| l.update_us),
            ("identify", |l| l.identify_us),
            ("resolve", |l| l.resolve_us),
            ("total", |l| l.total_us),
        ];
        for (name, f) in phases {
            let v = self.phase(f);
            out.push_str(&format!(
                "{name},{:.1},{:.1},{:.1},{:.1}\n",
                percentile(&v, 50.0),
                percentile(&v, 90.0),
                percentile(&v, 99.0),
                percentile(&v, 100.0)
            ));
        }
        out
    }

    pub fn property_csv(&self) -> String {
        let mut out = String::from("property,violations,spatial,temporal,plans,resolved,notified\n");
        for (id, c) in &self.properties {
            out.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                c.violations, c.spatial, c.temporal, c.plans, c.resolved, c.notified
            ));
        }
        out
    }

    pub fn latency_csv(&self) -> String {
        let mut out = String::from("index,update_us,identify_us,resolve_us,total_us\n");
        for (i, l) in &self.latencies {
            out.push_str(&format!(
                "{i},{:.3},{:.3},{:.3},{:.3}\n",
                l.update_us, l.identify_us, l.resolve_us, l.total_us
            ));
        }
        out
    }
}

/// Folds report lines into per-property counts and latencies.
pub fn summarize(report: &str) -> Result<Summary, Failure> {
    let mut s = Summary::default();
    for (n, line) in report.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ReportRecord = serde_json::from_str(line).map_err(|e| Failure {
            code: EXIT_SCHEMA,
            diagnostic: json!({"severity": "error", "code": "E_REPORT", "message": e.to_string(), "line": n + 1}),
        })?;
        match record {
            ReportRecord::Message {
                index,
                intercepted,
                violations,
                latency,
                ..
            } => {
                s.messages += 1;
                if violations == 0 {
                    s.ok_messages += 1;
                }
                if intercepted {
                    s.intercepted += 1;
                }
                if let Some(l) = latency {
                    s.latencies.push((index, l));
                }
            }
            ReportRecord::Verdict { verdict, .. } => {
                if let Some(id) = verdict.property_id {
                    let c = s.properties.entry(id).or_default();
                    c.violations += 1;
                    match verdict.kind {
                        runtime::VerdictKind::SpatialViolation => c.spatial += 1,
                        runtime::VerdictKind::TemporalViolation => c.temporal += 1,
                        runtime::VerdictKind::Ok => {}
                    }
                }
            }
            ReportRecord::Plan { plan, .. } => {
                let c = s.properties.entry(plan.plan.property_id).or_default();
                c.plans += 1;
                let notifies = plan.notification.is_some()
                    || plan.plan.steps.iter().any(|st| matches!(st, PlanStep::Notify { .. }));
                if notifies {
                    c.notified += 1;
                }
                let acts = plan.plan.steps.iter().any(|st| !matches!(st, PlanStep::Notify { .. }));
                if acts && plan.acks.iter().all(|a| a.ok) {
                    c.resolved += 1;
                }
            }
            ReportRecord::Timer { .. } | ReportRecord::Resolution { .. } => {}
        }
    }
    Ok(s)
}

/// Wizard choices derived from the graph, in the order offered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Candidates {
    pub effects: Vec<String>,
    pub states: Vec<String>,
    pub occurrences: Vec<String>,
}

pub fn wizard_candidates(graph: &EnvironmentGraph) -> Candidates {
    use crate::model::EffectKind;
    let mut effects = BTreeSet::new();
    for a in &graph.actions {
        for e in &a.effects {
            let suffix = match &e.effect {
                EffectKind::Increase => "Up".to_string(),
                EffectKind::Decrease => "Down".to_string(),
                EffectKind::Set { value } => value.clone(),
            };
            let name: String = e
                .state_name
                .split('_')
                .map(|w| {
                    let mut c = w.chars();
                    c.next()
                        .map(|f| f.to_uppercase().chain(c).collect::<String>())
                        .unwrap_or_default()
                })
                .collect();
            effects.insert(format!("{}.{}_{}", e.affected_space, name, suffix));
        }
    }
    let mut states = Vec::new();
    for (id, s) in &graph.spaces {
        for (name, slot) in &s.states {
            for v in &slot.domain {
                states.push(format!("{id}.{name}={v}"));
            }
        }
    }
    for (id, d) in &graph.devices {
        for (name, slot) in &d.state {
            for v in &slot.domain {
                states.push(format!("{id}.{name}={v}"));
            }
        }
    }
    let mut occurrences = BTreeSet::new();
    for e in &graph.events {
        occurrences.insert(format!("event({}.{})", e.location, e.event_type));
    }
    for a in &graph.actions {
        occurrences.insert(format!("action({}.{})", a.location, a.action_type));
    }
    Candidates {
        effects: effects.into_iter().collect(),
        states,
        occurrences: occurrences.into_iter().collect(),
    }
}

const TEMPLATE_TITLES: [&str; 8] = [
    "effects together (effect, effect, ...)",
    "effect under states",
    "states together",
    "event or action under states",
    "effect duration",
    "effect within a time of entering states",
    "states within a time of an event or action",
    "state duration",
];

fn prompt(io: &mut Io, text: &str) -> Option<String> {
    let _ = write!(io.stdout, "{text}");
    let _ = io.stdout.flush();
    let mut line = String::new();
    match io.stdin.read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line.trim().to_string()),
    }
}

fn pick_many(io: &mut Io, title: &str, items: &[String]) -> Option<Vec<String>> {
    let _ = writeln!(io.stdout, "{title}:");
    for (i, item) in items.iter().enumerate() {
        let _ = writeln!(io.stdout, "  {}) {item}", i + 1);
    }
    loop {
        let answer = prompt(io, "choose numbers separated by commas: ")?;
        let picked: Option<Vec<String>> = answer
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .and_then(|n| items.get(n.wrapping_sub(1)).cloned())
            })
            .collect();
        match picked {
            Some(v) => return Some(v),
            None => {
                let _ = writeln!(io.stdout, "not a valid choice");
            }
        }
    }
}

fn pick_one<T: Clone>(io: &mut Io, title: &str, items: &[(String, T)]) -> Option<T> {
    let _ = writeln!(io.stdout, "{title}:");
    for (i, (label, _)) in items.iter().enumerate() {
        let _ = writeln!(io.stdout, "  {}) {label}", i + 1);
    }
    loop {
        let answer = prompt(io, "choose a number: ")?;
        if let Some((_, v)) = answer.parse::<usize>().ok().and_then(|n| items.get(n.wrapping_sub(1))) {
            return Some(v.clone());
        }
        let _ = writeln!(io.stdout, "not a valid choice");
    }
}

fn wizard(graph: &EnvironmentGraph, io: &mut Io) -> Result<Vec<PropertyRecord>, Failure> {
    let candidates = wizard_candidates(graph);
    let mut records: Vec<PropertyRecord> = Vec::new();
    while let Some(record) = wizard_record(&candidates, records.len() as u32 + 1, io) {
        match property::compile_record(&record, graph) {
            Ok(_) => records.push(record),
            Err(e) => {
                let _ = writeln!(io.stdout, "rejected: {e}");
            }
        }
        match prompt(io, "add another property? [y/N] ") {
            Some(a) if a.eq_ignore_ascii_case("y") => {}
            _ => break,
        }
    }
    Ok(records)
}

fn wizard_record(c: &Candidates, id: u32, io: &mut Io) -> Option<PropertyRecord> {
    let templates: Vec<(String, u8)> = TEMPLATE_TITLES
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_string(), i as u8 + 1))
        .collect();
    let template = pick_one(io, "template", &templates)?;
    let polarities: Vec<(String, Polarity)> = property::template_polarities(template)?
        .into_iter()
        .map(|p| {
            (
                serde_json::to_value(p)
                    .expect("polarity")
                    .as_str()
                    .expect("name")
                    .to_string(),
                p,
            )
        })
        .collect();
    let polarity = pick_one(io, "polarity", &polarities)?;
    let mut bindings = Bindings::default();
    if matches!(template, 1 | 2 | 5 | 6) {
        bindings.effects = pick_many(io, "effects", &c.effects)?;
    }
    if template != 1 && template != 5 {
        bindings.states = pick_many(io, "states", &c.states)?;
    }
    if matches!(template, 4 | 7) {
        let items: Vec<(String, String)> = c.occurrences.iter().map(|o| (o.clone(), o.clone())).collect();
        bindings.occurrence = Some(pick_one(io, "event or action", &items)?);
    }
    let time = if template >= 5 {
        loop {
            let answer = prompt(io, "time in seconds: ")?;
            match answer.parse::<u64>() {
                Ok(t) if t > 0 => break Some(t),
                _ => {
                    let _ = writeln!(io.stdout, "enter a positive whole number");
                }
            }
        }
    } else {
        None
    };
    let strategies: Vec<(String, Strategy)> = [
        Strategy::InterceptOrRevoke,
        Strategy::ModifyState,
        Strategy::InterceptAndReplace,
        Strategy::NotifyOnly,
    ]
    .into_iter()
    .map(|s| {
        (
            serde_json::to_value(s)
                .expect("strategy")
                .as_str()
                .expect("name")
                .to_string(),
            s,
        )
    })
    .collect();
    let strategy = pick_one(io, "strategy", &strategies)?;
    let description = prompt(io, "description (optional): ")?;
    Some(PropertyRecord {
        id,
        description: (!description.is_empty()).then_some(description),
        template: Some(template),
        polarity: Some(polarity),
        bindings,
        time,
        formula: None,
        strategy,
    })
}

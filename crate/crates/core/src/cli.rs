//! Command line: the short-flag contract, long-form tunables, environment and
//! settings-file defaults, dispatch and exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::delta_sync::{serve_agent, DEFAULT_BLOCK_SIZE, MIN_BLOCK_SIZE};
use crate::hostkeys::{default_known_hosts_path, KnownHosts};
use crate::orchestrator::{self, BuildReport, BuildRequest, Progress, RunConfig, RunError, DEFAULT_AGENT_COMMAND, DEFAULT_POLL_INTERVAL, DEFAULT_REMOTE_BASE};
use crate::session_graph::{parse_catalog, SessionCatalog};
use crate::transport::loopback::LoopbackConnection;
use crate::transport::ssh::SshOptions;
use crate::transport::{Connection, Endpoint, ProxySpec, TransportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BUILD_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONNECT: i32 = 3;
pub const EXIT_SYNC_FAILED: i32 = 4;

pub const ENV_REMOTE_HOST: &str = "REMOTE_BUILD_REMOTE_HOST";
pub const ENV_REMOTE_BASE: &str = "REMOTE_BUILD_REMOTE_BASE";
pub const ENV_SETTINGS: &str = "REMOTE_BUILD_SETTINGS";
pub const ENV_POLL_INTERVAL: &str = "REMOTE_BUILD_POLL_INTERVAL";
pub const ENV_BLOCK_SIZE: &str = "REMOTE_BUILD_BLOCK_SIZE";
pub const ENV_ARTIFACT_ROOT: &str = "REMOTE_BUILD_ARTIFACT_ROOT";
pub const ENV_LOCAL_ROOT: &str = "REMOTE_BUILD_LOCAL_ROOT";
pub const ENV_KNOWN_HOSTS: &str = "REMOTE_BUILD_KNOWN_HOSTS";
pub const ENV_SYNC_JOBS: &str = "REMOTE_BUILD_SYNC_JOBS";
pub const ENV_AGENT_COMMAND: &str = "REMOTE_BUILD_AGENT_COMMAND";

/// Keys a settings file may define.
pub const SETTINGS_KEYS: &[&str] = &[
    ENV_REMOTE_HOST,
    ENV_REMOTE_BASE,
    ENV_POLL_INTERVAL,
    ENV_BLOCK_SIZE,
    ENV_ARTIFACT_ROOT,
    ENV_LOCAL_ROOT,
    ENV_KNOWN_HOSTS,
    ENV_SYNC_JOBS,
    ENV_AGENT_COMMAND,
];

pub fn usage() -> String {
    "\
Usage: remote_build [OPTIONS] SESSIONS ...

  Options are:
    -B DIR       base directory for remote Isabelle installations (default:
                 $REMOTE_BUILD_REMOTE_BASE, or if former not set ~)
    -d DIR       include session directory
    -r HOST      remote host name (default: $REMOTE_BUILD_REMOTE_HOST)
    -o OPTION    add option for remote isabelle call, e.g., -o -d -o '$ISAFOR'
    -i           incremental: only synchronize heap images that are newly
                 built on the remote host (default: synchronize all session
                 heaps together with their ancestors)
    -P PROXY     connect to remote host via proxy jump; PROXY may either be a
                 HOST or a specification HOST:PORT (default PORT: 2222)
    -v           be verbose

  Build and copy heap images, observing implicit settings:

  REMOTE_BUILD_REMOTE_HOST=\"...\"
  REMOTE_BUILD_REMOTE_BASE=\"...\"
"
    .to_string()
}

/// Long-form options, shown by `--help`.
pub fn long_usage() -> String {
    "\
  Additional options:
    --poll-interval SECS   seconds between remote listings (default: 2)
    --block-size BYTES     delta block size (default: 2048, minimum 64)
    --artifact-root DIR    remote heap directory (default: BASE/heaps)
    --local-root DIR       local heap directory (default: ~/heaps)
    --known-hosts FILE     known hosts file (default: ~/.ssh/known_hosts)
    --sync-jobs N          concurrent file transfers (default: 1)
    --identity FILE        private key to try, repeatable
    --agent-command CMD    sync agent on the remote host (default: remote_build)
    --remote-port PORT     SSH port of the remote host (default: 22)
    --settings FILE        settings file with KEY=VALUE lines
    --loopback DIR         run against DIR on this machine instead of a host
"
    .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_err<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

/// Resolved tunables beyond the short-flag surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Tunables {
    pub poll_interval: Duration,
    pub block_size: u32,
    pub artifact_root: Option<String>,
    pub local_root: Option<PathBuf>,
    pub known_hosts: Option<PathBuf>,
    pub sync_jobs: usize,
    pub identities: Vec<PathBuf>,
    pub agent_command: String,
    pub loopback: Option<PathBuf>,
}

impl Default for Tunables {
    fn default() -> Self {
        Tunables {
            poll_interval: DEFAULT_POLL_INTERVAL,
            block_size: DEFAULT_BLOCK_SIZE,
            artifact_root: None,
            local_root: None,
            known_hosts: None,
            sync_jobs: 1,
            identities: Vec::new(),
            agent_command: DEFAULT_AGENT_COMMAND.to_string(),
            loopback: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Build(Box<BuildRequest>, Box<Tunables>),
    Agent(PathBuf),
    Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedInvocation {
    pub mode: Mode,
    pub warnings: Vec<String>,
}

pub type Env = BTreeMap<String, String>;

fn env_value<'a>(env: &'a Env, key: &str) -> Option<&'a str> {
    env.get(key).map(String::as_str).filter(|v| !v.is_empty())
}

#[derive(Default)]
struct LongFlags {
    poll_interval: Option<String>,
    block_size: Option<String>,
    artifact_root: Option<String>,
    local_root: Option<String>,
    known_hosts: Option<String>,
    sync_jobs: Option<String>,
    identities: Vec<String>,
    agent_command: Option<String>,
    remote_port: Option<String>,
    loopback: Option<String>,
}

const LONG_WITH_VALUE: &[&str] = &[
    "poll-interval",
    "block-size",
    "artifact-root",
    "local-root",
    "known-hosts",
    "sync-jobs",
    "identity",
    "agent-command",
    "remote-port",
    "settings",
    "loopback",
];

/// Parses the command line. `env` supplies defaults for absent flags.
pub fn parse_args(argv: &[String], env: &Env) -> Result<ParsedInvocation, UsageError> {
    if argv.first().map(String::as_str) == Some("agent") {
        return match argv {
            [_, root] => Ok(ParsedInvocation {
                mode: Mode::Agent(PathBuf::from(root)),
                warnings: Vec::new(),
            }),
            _ => usage_err("agent mode takes exactly one argument: the artifact root"),
        };
    }

    let mut warnings = Vec::new();
    let mut base = None;
    let mut dirs = Vec::new();
    let mut host = None;
    let mut opts = Vec::new();
    let mut incremental = false;
    let mut proxy = None;
    let mut verbose = false;
    let mut long = LongFlags::default();

    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        i += 1;
        if arg == "--" {
            break;
        }
        if let Some(name) = arg.strip_prefix("--") {
            let (name, inline) = match name.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (name, None),
            };
            if name == "help" {
                return Ok(ParsedInvocation {
                    mode: Mode::Usage,
                    warnings,
                });
            }
            if !LONG_WITH_VALUE.contains(&name) {
                return usage_err(format!("unknown option --{name}"));
            }
            let value = match inline {
                Some(v) => v,
                None => match argv.get(i) {
                    Some(v) => {
                        i += 1;
                        v.clone()
                    }
                    None => return usage_err(format!("option --{name} requires an argument")),
                },
            };
            match name {
                "poll-interval" => long.poll_interval = Some(value),
                "block-size" => long.block_size = Some(value),
                "artifact-root" => long.artifact_root = Some(value),
                "local-root" => long.local_root = Some(value),
                "known-hosts" => long.known_hosts = Some(value),
                "sync-jobs" => long.sync_jobs = Some(value),
                "identity" => long.identities.push(value),
                "agent-command" => long.agent_command = Some(value),
                "remote-port" => long.remote_port = Some(value),
                "loopback" => long.loopback = Some(value),
                // Read before parsing; see `settings_path`.
                "settings" => {}
                _ => unreachable!("listed long option"),
            }
            continue;
        }
        if arg.len() < 2 || !arg.starts_with('-') {
            i -= 1;
            break;
        }
        let flags: Vec<char> = arg[1..].chars().collect();
        let mut k = 0;
        while k < flags.len() {
            let c = flags[k];
            k += 1;
            match c {
                'i' => incremental = true,
                'v' => verbose = true,
                'h' => {
                    return Ok(ParsedInvocation {
                        mode: Mode::Usage,
                        warnings,
                    })
                }
                'B' | 'd' | 'r' | 'o' | 'P' => {
                    let rest: String = flags[k..].iter().collect();
                    let value = if !rest.is_empty() {
                        rest
                    } else {
                        match argv.get(i) {
                            Some(v) => {
                                i += 1;
                                v.clone()
                            }
                            None => return usage_err(format!("option -{c} requires an argument")),
                        }
                    };
                    k = flags.len();
                    match c {
                        'B' => base = Some(value),
                        'd' => dirs.push(value),
                        'r' => host = Some(value),
                        'o' => {
                            if value.chars().any(char::is_whitespace) {
                                warnings.push(format!(
                                    "-o takes a single word; `{value}` is passed as one argument"
                                ));
                            }
                            opts.push(value)
                        }
                        _ => {
                            proxy = Some(ProxySpec::parse(&value).map_err(|e| UsageError(format!("bad -P value: {e}")))?)
                        }
                    }
                }
                other => return usage_err(format!("unknown option -{other}")),
            }
        }
    }
    let sessions: Vec<String> = argv[i..].to_vec();

    if sessions.is_empty() {
        return usage_err("no sessions given");
    }
    if let Some(bad) = sessions.iter().find(|s| s.is_empty() || s.chars().any(char::is_whitespace)) {
        return usage_err(format!("invalid session name `{bad}`"));
    }

    let remote_port = match long.remote_port.take() {
        Some(p) => match p.parse::<u16>() {
            Ok(p) if p != 0 => p,
            _ => return usage_err(format!("invalid --remote-port `{p}`")),
        },
        None => 22,
    };
    let tunables = resolve_tunables(long, env)?;
    let host_spec = match host.or_else(|| env_value(env, ENV_REMOTE_HOST).map(str::to_string)) {
        Some(h) if !h.is_empty() => h,
        _ if tunables.loopback.is_some() => "localhost".to_string(),
        _ => return usage_err(format!("no remote host: use -r HOST or set {ENV_REMOTE_HOST}")),
    };
    let (user, host_name) = match host_spec.rsplit_once('@') {
        Some((u, h)) if !u.is_empty() => (u.to_string(), h.to_string()),
        _ => (default_user(env), host_spec.clone()),
    };
    let remote = Endpoint::new(host_name, remote_port, user).map_err(|e| UsageError(e.to_string()))?;
    let remote_base = base
        .filter(|b| !b.is_empty())
        .or_else(|| env_value(env, ENV_REMOTE_BASE).map(str::to_string))
        .unwrap_or_else(|| DEFAULT_REMOTE_BASE.to_string());

    let request = BuildRequest {
        sessions,
        session_dirs: dirs,
        remote,
        remote_base,
        remote_opts: opts,
        incremental,
        proxy,
        verbose,
    };
    Ok(ParsedInvocation {
        mode: Mode::Build(Box::new(request), Box::new(tunables)),
        warnings,
    })
}

fn default_user(env: &Env) -> String {
    env_value(env, "USER")
        .or_else(|| env_value(env, "LOGNAME"))
        .unwrap_or("root")
        .to_string()
}

fn pick(flag: Option<String>, env: &Env, key: &str) -> Option<String> {
    flag.or_else(|| env_value(env, key).map(str::to_string))
}

fn resolve_tunables(long: LongFlags, env: &Env) -> Result<Tunables, UsageError> {
    let mut t = Tunables::default();
    if let Some(v) = pick(long.poll_interval, env, ENV_POLL_INTERVAL) {
        t.poll_interval = match v.parse::<f64>() {
            Ok(secs) if secs.is_finite() && secs > 0.0 && secs <= 86_400.0 => Duration::from_secs_f64(secs),
            _ => return usage_err(format!("invalid poll interval `{v}`")),
        };
    }
    if let Some(v) = pick(long.block_size, env, ENV_BLOCK_SIZE) {
        t.block_size = match v.parse::<u32>() {
            Ok(b) if b >= MIN_BLOCK_SIZE => b,
            _ => return usage_err(format!("invalid block size `{v}` (minimum {MIN_BLOCK_SIZE})")),
        };
    }
    if let Some(v) = pick(long.sync_jobs, env, ENV_SYNC_JOBS) {
        t.sync_jobs = match v.parse::<usize>() {
            Ok(n) if (1..=64).contains(&n) => n,
            _ => return usage_err(format!("invalid sync job count `{v}` (1 to 64)")),
        };
    }
    t.artifact_root = pick(long.artifact_root, env, ENV_ARTIFACT_ROOT);
    t.local_root = pick(long.local_root, env, ENV_LOCAL_ROOT).map(PathBuf::from);
    t.known_hosts = pick(long.known_hosts, env, ENV_KNOWN_HOSTS).map(PathBuf::from);
    if let Some(cmd) = pick(long.agent_command, env, ENV_AGENT_COMMAND) {
        t.agent_command = cmd;
    }
    t.identities = long.identities.into_iter().map(PathBuf::from).collect();
    t.loopback = long.loopback.map(PathBuf::from);
    Ok(t)
}

/// Settings file named by `--settings` (before the first session argument)
/// or by the environment.
pub fn settings_path(argv: &[String], env: &Env) -> Option<PathBuf> {
    let mut found = None;
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        if arg == "--" || !arg.starts_with('-') || arg == "-" {
            break;
        }
        if let Some(v) = arg.strip_prefix("--settings=") {
            found = Some(PathBuf::from(v));
        } else if arg == "--settings" {
            found = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(name) = arg.strip_prefix("--") {
            if !name.contains('=') && LONG_WITH_VALUE.contains(&name) {
                i += 1;
            }
        } else if arg.len() == 2 && "BdroP".contains(&arg[1..]) {
            i += 1;
        }
        i += 1;
    }
    found.or_else(|| env_value(env, ENV_SETTINGS).map(PathBuf::from))
}

/// Parses `KEY=VALUE` lines. Values may be wrapped in single or double
/// quotes; `#` starts a comment line. Unknown keys produce warnings.
pub fn parse_settings(text: &str) -> (Env, Vec<String>) {
    let mut out = Env::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line = line.strip_prefix("export ").unwrap_or(line);
        let Some((key, value)) = line.split_once('=') else {
            warnings.push(format!("settings line {}: expected KEY=VALUE", n + 1));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let value = ['"', '\'']
            .iter()
            .find_map(|q| value.strip_prefix(*q).and_then(|v| v.strip_suffix(*q)))
            .unwrap_or(value);
        if !SETTINGS_KEYS.contains(&key) {
            warnings.push(format!("settings line {}: unknown key {key}", n + 1));
            continue;
        }
        out.insert(key.to_string(), value.to_string());
    }
    (out, warnings)
}

/// Environment layered over settings: real variables win.
pub fn merge_settings(env: &Env, settings: Env) -> Env {
    let mut merged = settings;
    for (k, v) in env {
        if !v.is_empty() || !merged.contains_key(k) {
            merged.insert(k.clone(), v.clone());
        }
    }
    merged
}

/// Expands `$VAR`, `${VAR}` and a leading `~` from `env`.
pub fn expand_local(path: &str, env: &Env) -> Result<String, String> {
    let lookup = |name: &str| {
        env.get(name)
            .cloned()
            .ok_or_else(|| format!("undefined variable ${name} in `{path}`"))
    };
    let mut out = String::new();
    let mut rest = path;
    if rest == "~" || rest.starts_with("~/") {
        out.push_str(&lookup("HOME")?);
        rest = &rest[1..];
    }
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        let (name, tail) = if let Some(braced) = after.strip_prefix('{') {
            match braced.find('}') {
                Some(end) => (&braced[..end], &braced[end + 1..]),
                None => return Err(format!("unterminated ${{ in `{path}`")),
            }
        } else {
            let end = after
                .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or(after.len());
            (&after[..end], &after[end..])
        };
        if name.is_empty() {
            out.push('$');
        } else {
            out.push_str(&lookup(name)?);
        }
        rest = tail;
    }
    out.push_str(rest);
    Ok(out)
}

impl BuildRequest {
    /// Command line that parses back into this request (with an empty
    /// environment).
    pub fn to_argv(&self) -> Vec<String> {
        let mut argv = Vec::new();
        argv.push("-B".to_string());
        argv.push(self.remote_base.clone());
        for d in &self.session_dirs {
            argv.push("-d".to_string());
            argv.push(d.clone());
        }
        argv.push("-r".to_string());
        argv.push(format!("{}@{}", self.remote.user, self.remote.host));
        if self.remote.port != 22 {
            argv.push(format!("--remote-port={}", self.remote.port));
        }
        for o in &self.remote_opts {
            argv.push(format!("-o{o}"));
        }
        if self.incremental {
            argv.push("-i".to_string());
        }
        if let Some(p) = &self.proxy {
            argv.push("-P".to_string());
            argv.push(format!("{}:{}", p.host, p.forward_port));
        }
        if self.verbose {
            argv.push("-v".to_string());
        }
        argv.push("--".to_string());
        argv.extend(self.sessions.iter().cloned());
        argv
    }
}

/// Loads the catalogs named by `-d`, after local variable expansion.
pub fn load_catalog(req: &BuildRequest, env: &Env) -> Result<SessionCatalog, String> {
    let dirs = req
        .session_dirs
        .iter()
        .map(|d| expand_local(d, env).map(PathBuf::from))
        .collect::<Result<Vec<_>, _>>()?;
    parse_catalog(&dirs).map_err(|e| e.to_string())
}

pub fn exit_code_for(report: &BuildReport) -> i32 {
    if report.exit_status != 0 {
        EXIT_BUILD_FAILED
    } else if report.sync_failures() > 0 {
        EXIT_SYNC_FAILED
    } else {
        EXIT_OK
    }
}

fn home(env: &Env) -> Option<PathBuf> {
    env_value(env, "HOME").map(PathBuf::from)
}

/// Runs an invocation to completion and returns the process exit code.
pub async fn execute(argv: &[String], env: &Env, progress: Option<Progress>) -> i32 {
    let mut env = env.clone();
    let mut settings_warnings = Vec::new();
    if let Some(path) = settings_path(argv, &env) {
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let (settings, warnings) = parse_settings(&text);
                settings_warnings = warnings;
                env = merge_settings(&env, settings);
            }
            Err(e) => {
                eprintln!("remote_build: cannot read settings file {}: {e}", path.display());
                return EXIT_USAGE;
            }
        }
    }
    let parsed = match parse_args(argv, &env) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("remote_build: {e}\n\n{}", usage());
            return EXIT_USAGE;
        }
    };
    let (req, tunables) = match parsed.mode {
        Mode::Usage => {
            print!("{}\n{}", usage(), long_usage());
            return EXIT_OK;
        }
        Mode::Agent(root) => return run_agent(&root).await,
        Mode::Build(req, tunables) => (req, tunables),
    };
    let progress = progress.unwrap_or(Progress::Console { verbose: req.verbose });
    for w in settings_warnings.iter().chain(&parsed.warnings) {
        progress.info(&format!("warning: {w}"));
    }

    let catalog = match load_catalog(&req, &env) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("remote_build: {e}");
            return EXIT_USAGE;
        }
    };
    if !req.incremental {
        if let Err(e) = catalog.sync_set(&req.sessions, false, &Default::default()) {
            eprintln!("remote_build: {e}; add its session directory with -d, or use -i");
            return EXIT_USAGE;
        }
    }

    let local_root = tunables
        .local_root
        .clone()
        .or_else(|| home(&env).map(|h| h.join("heaps")))
        .unwrap_or_else(|| PathBuf::from("heaps"));
    let cfg = RunConfig {
        poll_interval: tunables.poll_interval,
        block_size: tunables.block_size,
        artifact_root: tunables.artifact_root.clone(),
        local_root,
        sync_jobs: tunables.sync_jobs,
        agent_command: tunables.agent_command.clone(),
    };

    let conn = match open_connection(&req, &tunables, &env).await {
        Ok(c) => c,
        Err(e) => {
            eprintln!("remote_build: {e}");
            return EXIT_CONNECT;
        }
    };
    match orchestrator::run(conn, &req, &catalog, &cfg, &progress).await {
        Ok(report) => {
            let code = exit_code_for(&report);
            if code == EXIT_SYNC_FAILED {
                progress.info(&format!("{} file(s) failed to synchronize", report.sync_failures()));
            }
            code
        }
        Err(RunError::Transport(e)) => {
            eprintln!("remote_build: {e}");
            EXIT_CONNECT
        }
        Err(e) => {
            eprintln!("remote_build: {e}");
            EXIT_SYNC_FAILED
        }
    }
}

async fn open_connection(req: &BuildRequest, tunables: &Tunables, env: &Env) -> Result<Arc<dyn Connection>, TransportError> {
    if let Some(root) = &tunables.loopback {
        return Ok(Arc::new(LoopbackConnection::new(root.clone())));
    }
    let path = tunables
        .known_hosts
        .clone()
        .or_else(|| default_known_hosts_path(home(env).as_deref()));
    let store = match &path {
        Some(p) => KnownHosts::load(p).map_err(|e| TransportError::Connect {
            stage: crate::transport::Stage::Direct,
            target: p.display().to_string(),
            detail: format!("cannot read known hosts file: {e}"),
        })?,
        None => KnownHosts::default(),
    };
    let mut opts = SshOptions::with_home(home(env).as_deref());
    let mut identities = tunables.identities.clone();
    identities.append(&mut opts.identity_files);
    opts.identity_files = identities;
    orchestrator::connect(req, Arc::new(store), &opts).await
}

async fn run_agent(root: &Path) -> i32 {
    match serve_agent(tokio::io::stdin(), tokio::io::stdout(), root).await {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("remote_build agent: {e}");
            EXIT_BUILD_FAILED
        }
    }
}

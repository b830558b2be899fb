//! `known_hosts` parsing and the host-key acceptance policy.
//!
//! Only RSA host keys are accepted. Hosts reached on a port other than 22 are
//! looked up under the bracketed `[host]:port` form, which is also how the
//! target of a proxy tunnel is found: it is keyed as `[localhost]:<port>`
//! while the stored key must be the target machine's.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KeyType {
    Rsa,
    Ecdsa,
    Ed25519,
    Other(String),
}

impl KeyType {
    /// Maps an OpenSSH key type name such as `ssh-rsa` to a [`KeyType`].
    pub fn from_name(name: &str) -> KeyType {
        match name {
            "ssh-rsa" | "rsa-sha2-256" | "rsa-sha2-512" => KeyType::Rsa,
            n if n.starts_with("ecdsa-sha2-") => KeyType::Ecdsa,
            "ssh-ed25519" => KeyType::Ed25519,
            other => KeyType::Other(other.to_string()),
        }
    }

    pub fn is_supported(&self) -> bool {
        *self == KeyType::Rsa
    }
}

impl fmt::Display for KeyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyType::Rsa => f.write_str("RSA"),
            KeyType::Ecdsa => f.write_str("ECDSA"),
            KeyType::Ed25519 => f.write_str("ED25519"),
            KeyType::Other(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownHostsEntry {
    /// Either a plain host name or `[host]:port`.
    pub host_pattern: String,
    pub key_type: KeyType,
    /// Key type exactly as written in the file, e.g. `ecdsa-sha2-nistp256`.
    pub key_type_name: String,
    pub key_base64: String,
    /// Decoded public key blob in SSH wire encoding.
    pub key_blob: Vec<u8>,
    pub comment: Option<String>,
}

impl KnownHostsEntry {
    pub fn is_hashed(&self) -> bool {
        self.host_pattern.starts_with('|')
    }

    pub fn to_line(&self) -> String {
        let mut line = format!("{} {} {}", self.host_pattern, self.key_type_name, self.key_base64);
        if let Some(c) = &self.comment {
            line.push(' ');
            line.push_str(c);
        }
        line
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedKnownHosts {
    pub entries: Vec<KnownHostsEntry>,
    /// Number of non-blank, non-comment lines that could not be used.
    pub skipped: usize,
}

/// Lenient parser: unusable lines are counted in
/// [`ParsedKnownHosts::skipped`] and otherwise ignored.
pub fn parse_known_hosts(text: &str) -> ParsedKnownHosts {
    let mut out = ParsedKnownHosts::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Some(entries) => out.entries.extend(entries),
            None => out.skipped += 1,
        }
    }
    out
}

fn parse_line(line: &str) -> Option<Vec<KnownHostsEntry>> {
    // Markers such as @revoked and @cert-authority are not supported.
    if line.starts_with('@') {
        return None;
    }
    let mut fields = line.split_whitespace();
    let patterns = fields.next()?;
    let key_type_name = fields.next()?;
    let key_base64 = fields.next()?;
    let rest: Vec<&str> = fields.collect();
    let comment = (!rest.is_empty()).then(|| rest.join(" "));

    let key_blob = STANDARD.decode(key_base64).ok()?;
    let key_type = KeyType::from_name(key_type_name);
    let entries: Vec<KnownHostsEntry> = patterns
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| KnownHostsEntry {
            host_pattern: p.to_string(),
            key_type: key_type.clone(),
            key_type_name: key_type_name.to_string(),
            key_base64: key_base64.to_string(),
            key_blob: key_blob.clone(),
            comment: comment.clone(),
        })
        .collect();
    (!entries.is_empty()).then_some(entries)
}

/// The pattern under which `host:port` is recorded in `known_hosts`.
pub fn host_pattern(host: &str, port: u16) -> String {
    if port == 22 {
        host.to_string()
    } else {
        format!("[{host}]:{port}")
    }
}

/// Entries recorded for `host` on `port`. Hashed patterns never match.
pub fn lookup(entries: &[KnownHostsEntry], host: &str, port: u16) -> Vec<KnownHostsEntry> {
    let wanted = host_pattern(host, port);
    entries
        .iter()
        .filter(|e| !e.is_hashed() && e.host_pattern.eq_ignore_ascii_case(&wanted))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyResult {
    Accepted,
    Rejected,
    UnknownHost,
    UnsupportedKeyType,
}

impl VerifyResult {
    pub fn is_accepted(self) -> bool {
        self == VerifyResult::Accepted
    }
}

impl fmt::Display for VerifyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyResult::Accepted => "host key accepted",
            VerifyResult::Rejected => "host key does not match the known_hosts entry",
            VerifyResult::UnknownHost => "host is not listed in known_hosts",
            VerifyResult::UnsupportedKeyType => "host presented a key type other than RSA",
        })
    }
}

/// Checks a presented host key against the entries stored for that host.
pub fn verify(stored: &[KnownHostsEntry], presented_type: &KeyType, presented_blob: &[u8]) -> VerifyResult {
    if stored.is_empty() {
        return VerifyResult::UnknownHost;
    }
    if !presented_type.is_supported() {
        return VerifyResult::UnsupportedKeyType;
    }
    let matched = stored
        .iter()
        .any(|e| e.key_type.is_supported() && e.key_blob == presented_blob);
    if matched {
        VerifyResult::Accepted
    } else {
        VerifyResult::Rejected
    }
}

/// Shell commands that install an RSA host key for `host:port`.
pub fn rsa_remedy(host: &str, port: u16) -> String {
    let pattern = host_pattern(host, port);
    if port == 22 {
        format!(
            "only RSA host keys are supported; inspect the known keys with `ssh-keygen -F {host}` \
             and add an RSA key with `ssh-keyscan -t rsa {host} >> ~/.ssh/known_hosts`"
        )
    } else {
        format!(
            "only RSA host keys are supported; add an RSA key for {pattern} to ~/.ssh/known_hosts, \
             e.g. `ssh-keyscan -t rsa -p {port} {host} >> ~/.ssh/known_hosts` (for a proxy tunnel \
             the entry must carry the RSA key of the remote build host)"
        )
    }
}

/// Source of stored host keys.
pub trait HostKeyStore: Send + Sync {
    fn lookup(&self, host: &str, port: u16) -> Vec<KnownHostsEntry>;
}

#[derive(Debug, Clone, Default)]
pub struct KnownHosts {
    entries: Vec<KnownHostsEntry>,
    skipped: usize,
    path: Option<PathBuf>,
}

impl KnownHosts {
    pub fn from_entries(entries: Vec<KnownHostsEntry>) -> Self {
        KnownHosts {
            entries,
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Self {
        let parsed = parse_known_hosts(text);
        KnownHosts {
            entries: parsed.entries,
            skipped: parsed.skipped,
            path: None,
        }
    }

    /// Reads a `known_hosts` file. A missing file yields an empty store.
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e),
        };
        let mut kh = KnownHosts::parse(&text);
        if kh.skipped > 0 {
            log::warn!("{}: skipped {} unusable line(s)", path.display(), kh.skipped);
        }
        kh.path = Some(path.to_path_buf());
        Ok(kh)
    }

    pub fn entries(&self) -> &[KnownHostsEntry] {
        &self.entries
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

impl HostKeyStore for KnownHosts {
    fn lookup(&self, host: &str, port: u16) -> Vec<KnownHostsEntry> {
        lookup(&self.entries, host, port)
    }
}

/// `~/.ssh/known_hosts`, resolved from `HOME`.
pub fn default_known_hosts_path(home: Option<&Path>) -> Option<PathBuf> {
    home.map(|h| h.join(".ssh").join("known_hosts"))
}

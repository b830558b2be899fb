//! Session catalogs and the sets of sessions whose heaps get synchronized.
//!
//! A catalog directory holds a `CATALOG` file with one declaration per line:
//!
//! ```text
//! # comment
//! session Pure
//! session HOL = Pure
//! ```
//!
//! Every session has at most one parent, so the parent edges form a forest and
//! the ancestry of a session is a simple chain.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const CATALOG_FILE: &str = "CATALOG";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("no {CATALOG_FILE} file in session directory {0}")]
    MissingCatalog(PathBuf),
    #[error("session {0} is declared more than once")]
    DuplicateSession(String),
    #[error("session {child} has unknown parent {parent}")]
    UnknownParent { child: String, parent: String },
    #[error("cyclic session ancestry: {}", .0.join(", "))]
    CycleDetected(Vec<String>),
    #[error("{}:{line}: {message}", file.display())]
    SyntaxError {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown session {0}")]
    UnknownSession(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub name: String,
    pub parent: Option<String>,
    /// Catalog directory the session was declared in.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct SessionCatalog {
    sessions: BTreeMap<String, Session>,
    root_dirs: Vec<PathBuf>,
}

/// Sessions in ancestors-first order.
///
/// `unknown` lists requested names that the catalog does not know about; it is
/// only ever populated by incremental [`SessionCatalog::sync_set`] queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncSet {
    pub sessions: Vec<String>,
    pub unknown: Vec<String>,
}

impl SyncSet {
    pub fn contains(&self, name: &str) -> bool {
        self.sessions.iter().any(|s| s == name)
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty() && self.unknown.is_empty()
    }
}

pub fn is_valid_session_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// One parsed `session` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub name: String,
    pub parent: Option<String>,
    pub line: usize,
}

/// Parses the text of a single `CATALOG` file. `file` is only used for error
/// messages.
pub fn parse_declarations(text: &str, file: &Path) -> Result<Vec<Declaration>, CatalogError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let syntax = |message: String| CatalogError::SyntaxError {
            file: file.to_path_buf(),
            line,
            message,
        };
        if tokens[0] != "session" {
            return Err(syntax(format!("expected `session`, found `{}`", tokens[0])));
        }
        // `session B = A` and `session B=A` are both accepted.
        let rest = tokens[1..].join(" ");
        let (name, parent) = match rest.split_once('=') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (rest.trim(), None),
        };
        if !is_valid_session_name(name) {
            return Err(syntax(format!("invalid session name `{name}`")));
        }
        if let Some(p) = parent {
            if !is_valid_session_name(p) {
                return Err(syntax(format!("invalid parent name `{p}`")));
            }
        }
        out.push(Declaration {
            name: name.to_string(),
            parent: parent.map(str::to_string),
            line,
        });
    }
    Ok(out)
}

/// Loads and validates the catalogs of all given session directories.
pub fn parse_catalog<P: AsRef<Path>>(root_dirs: &[P]) -> Result<SessionCatalog, CatalogError> {
    let mut catalog = SessionCatalog::default();
    for dir in root_dirs {
        let dir = dir.as_ref();
        let file = dir.join(CATALOG_FILE);
        let text =
            fs::read_to_string(&file).map_err(|_| CatalogError::MissingCatalog(dir.to_path_buf()))?;
        for decl in parse_declarations(&text, &file)? {
            catalog.insert(Session {
                name: decl.name,
                parent: decl.parent,
                dir: dir.to_path_buf(),
            })?;
        }
        catalog.root_dirs.push(dir.to_path_buf());
    }
    catalog.validate()?;
    Ok(catalog)
}

impl SessionCatalog {
    /// Builds a catalog from in-memory sessions, applying the same checks as
    /// [`parse_catalog`].
    pub fn from_sessions<I: IntoIterator<Item = Session>>(sessions: I) -> Result<Self, CatalogError> {
        let mut catalog = SessionCatalog::default();
        for s in sessions {
            catalog.insert(s)?;
        }
        catalog.validate()?;
        Ok(catalog)
    }

    fn insert(&mut self, session: Session) -> Result<(), CatalogError> {
        if self.sessions.contains_key(&session.name) {
            return Err(CatalogError::DuplicateSession(session.name));
        }
        self.sessions.insert(session.name.clone(), session);
        Ok(())
    }

    fn validate(&self) -> Result<(), CatalogError> {
        for s in self.sessions.values() {
            if let Some(p) = &s.parent {
                if !self.sessions.contains_key(p) {
                    return Err(CatalogError::UnknownParent {
                        child: s.name.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }

        // Out-degree is at most one, so following parent pointers from any
        // node either reaches a root or runs into a cycle.
        let mut done: HashSet<&str> = HashSet::new();
        for start in self.sessions.keys() {
            if done.contains(start.as_str()) {
                continue;
            }
            let mut path: Vec<&str> = Vec::new();
            let mut on_path: HashSet<&str> = HashSet::new();
            let mut cur = Some(start.as_str());
            while let Some(name) = cur {
                if done.contains(name) {
                    break;
                }
                if !on_path.insert(name) {
                    let pos = path.iter().position(|n| *n == name).unwrap_or(0);
                    let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
                    cycle.sort();
                    return Err(CatalogError::CycleDetected(cycle));
                }
                path.push(name);
                cur = self.sessions[name].parent.as_deref();
            }
            done.extend(path);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Session> {
        self.sessions.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sessions.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn root_dirs(&self) -> &[PathBuf] {
        &self.root_dirs
    }

    /// The chain from the root of `name`'s tree down to `name` itself.
    pub fn ancestors(&self, name: &str) -> Result<SyncSet, CatalogError> {
        let mut chain = Vec::new();
        let mut cur = Some(
            self.sessions
                .get(name)
                .ok_or_else(|| CatalogError::UnknownSession(name.to_string()))?,
        );
        while let Some(s) = cur {
            chain.push(s.name.clone());
            cur = s.parent.as_deref().and_then(|p| self.sessions.get(p));
        }
        chain.reverse();
        Ok(SyncSet {
            sessions: chain,
            unknown: Vec::new(),
        })
    }

    /// Sessions to synchronize for a build of `targets`.
    ///
    /// In default mode this is the union of the ancestor chains of all
    /// targets. In incremental mode it is `newly_built` restricted to known
    /// sessions; names the catalog does not know end up in
    /// [`SyncSet::unknown`] instead, and targets are not checked since only
    /// the remote side needs to resolve them.
    pub fn sync_set<S: AsRef<str>>(
        &self,
        targets: &[S],
        incremental: bool,
        newly_built: &BTreeSet<String>,
    ) -> Result<SyncSet, CatalogError> {
        if incremental {
            let (known, unknown): (Vec<&String>, Vec<&String>) =
                newly_built.iter().partition(|n| self.contains(n));
            let wanted: BTreeSet<&str> = known.iter().map(|s| s.as_str()).collect();
            let mut out = Vec::new();
            let mut seen = HashSet::new();
            for name in &known {
                for a in self.ancestors(name)?.sessions {
                    if wanted.contains(a.as_str()) && seen.insert(a.clone()) {
                        out.push(a);
                    }
                }
            }
            return Ok(SyncSet {
                sessions: out,
                unknown: unknown.into_iter().cloned().collect(),
            });
        }

        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for t in targets {
            for a in self.ancestors(t.as_ref())?.sessions {
                if seen.insert(a.clone()) {
                    out.push(a);
                }
            }
        }
        Ok(SyncSet {
            sessions: out,
            unknown: Vec::new(),
        })
    }
}

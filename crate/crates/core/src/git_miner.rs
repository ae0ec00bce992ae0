//! Mine (cleaned diff, commit message) pairs from a local git repository.
//!
//! The repository is read through `git` plumbing (`rev-list`, `show`,
//! `diff-tree`), so both bare repositories and worktrees are supported and
//! no libgit2 build is required.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{deduplicate, Corpus, DedupMode, Origin, Sample};
use crate::rng::SplitMix64;

#[derive(Error, Debug)]
pub enum MinerError {
    #[error("not a git repository: {0}")]
    NotARepository(String),
    #[error("failed to run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },
    #[error("repository has no commits: {0}")]
    EmptyHistory(String),
    #[error("unexpected git output: {0}")]
    Parse(String),
    #[error("duplicate id across corpora: {0}")]
    DuplicateId(String),
    #[error("interleave needs at least one corpus")]
    NoCorpora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeType {
    Added,
    Deleted,
    Modified,
    Renamed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileModification {
    pub path: String,
    pub change_type: ChangeType,
    /// Hunks of the unified diff for this file, starting at the first `@@`.
    pub diff_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub hash: String,
    pub message: String,
    pub timestamp: i64,
    pub parent_count: usize,
    pub modifications: Vec<FileModification>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinerDedup {
    ExactPair,
    TargetOnly,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningConfig {
    pub repo_path: PathBuf,
    pub max_commits: Option<usize>,
    /// File suffixes to keep. An empty list keeps every file.
    pub include_extensions: Vec<String>,
    pub skip_merge_commits: bool,
    pub dedup_mode: MinerDedup,
}

pub const DEFAULT_EXTENSIONS: &[&str] = &[".c", ".cc", ".cpp", ".cxx", ".h", ".hh", ".hpp"];

impl MiningConfig {
    pub fn new(repo_path: impl Into<PathBuf>) -> Self {
        Self {
            repo_path: repo_path.into(),
            max_commits: None,
            include_extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            skip_merge_commits: true,
            dedup_mode: MinerDedup::None,
        }
    }

    fn includes(&self, path: &str) -> bool {
        self.include_extensions.is_empty()
            || self.include_extensions.iter().any(|ext| path.ends_with(ext.as_str()))
    }
}

struct Git<'a> {
    repo: &'a Path,
}

impl Git<'_> {
    fn run(&self, args: &[&str]) -> Result<Vec<u8>, MinerError> {
        let output = Command::new("git")
            .arg("-C")
            .arg(self.repo)
            .args(["-c", "core.quotePath=false"])
            .args(args)
            .output()?;
        if !output.status.success() {
            return Err(MinerError::Git {
                command: args.first().copied().unwrap_or_default().to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(output.stdout)
    }

    fn run_text(&self, args: &[&str]) -> Result<String, MinerError> {
        Ok(String::from_utf8_lossy(&self.run(args)?).into_owned())
    }
}

fn open(repo: &Path) -> Result<Git<'_>, MinerError> {
    let name = repo.display().to_string();
    if !repo.is_dir() {
        return Err(MinerError::NotARepository(name));
    }
    let git = Git { repo };
    // rev-parse from inside a nested directory would find an enclosing repo; require
    // that the resolved top level (or bare git dir) is the path itself.
    let inside = git
        .run_text(&["rev-parse", "--is-bare-repository", "--absolute-git-dir"])
        .map_err(|_| MinerError::NotARepository(name.clone()))?;
    let mut lines = inside.lines();
    let bare = lines.next() == Some("true");
    let git_dir = PathBuf::from(lines.next().unwrap_or_default());
    let expected = repo.canonicalize().map_err(|_| MinerError::NotARepository(name.clone()))?;
    let root = if bare {
        git_dir.canonicalize().ok()
    } else {
        git.run_text(&["rev-parse", "--show-toplevel"])
            .ok()
            .and_then(|t| PathBuf::from(t.trim()).canonicalize().ok())
    };
    if root.as_deref() != Some(expected.as_path()) {
        return Err(MinerError::NotARepository(name));
    }
    Ok(git)
}

/// Message cleaning for targets: CRLF/CR normalized, trimmed, and cut after the
/// first body paragraph (subject plus first paragraph survive).
pub fn clean_message(raw: &str) -> String {
    let text = normalize_newlines(raw);
    let mut kept: Vec<&str> = Vec::new();
    let mut paragraphs = 0;
    let mut in_paragraph = false;
    for line in text.trim().lines() {
        if line.trim().is_empty() {
            if in_paragraph {
                paragraphs += 1;
                in_paragraph = false;
                if paragraphs == 2 {
                    break;
                }
            }
            continue;
        }
        if !in_paragraph && paragraphs == 1 {
            kept.push("");
        }
        in_paragraph = true;
        kept.push(line.trim_end());
    }
    kept.join("\n").trim().to_string()
}

fn normalize_newlines(raw: &str) -> String {
    raw.replace("\r\n", "\n").replace('\r', "\n")
}

const CONFLICT_MARKERS: [&str; 3] = ["<<<<<<<", "=======", ">>>>>>>"];

/// True for a conflict-marker line, bare or behind one diff prefix character
/// (committed markers show up as `+<<<<<<< HEAD`).
fn is_marker_line(line: &str) -> bool {
    let t = line.trim();
    let unprefixed = t
        .strip_prefix(['+', '-'])
        .map(str::trim_start)
        .unwrap_or(t);
    CONFLICT_MARKERS
        .iter()
        .any(|m| t.starts_with(m) || unprefixed.starts_with(m))
}

fn flush_blanks<'a>(out: &mut Vec<&'a str>, blanks: &mut Vec<&'a str>) {
    if blanks.len() >= 3 {
        out.push("");
    } else {
        out.append(blanks);
    }
    blanks.clear();
}

/// Normalizes line endings, drops conflict-marker and hunk-header lines and
/// collapses runs of three or more blank lines to a single blank line.
pub fn clean_diff(raw: &str) -> String {
    let text = normalize_newlines(raw);
    let mut out: Vec<&str> = Vec::new();
    let mut blanks: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        if is_marker_line(line) || line.starts_with("@@") {
            continue;
        }
        if line.trim().is_empty() {
            blanks.push(line);
            continue;
        }
        flush_blanks(&mut out, &mut blanks);
        out.push(line);
    }
    flush_blanks(&mut out, &mut blanks);
    out.join("\n")
}

fn split_patch(patch: &str) -> Vec<String> {
    let mut sections = Vec::new();
    let mut current: Option<String> = None;
    for line in patch.split_inclusive('\n') {
        if line.starts_with("diff --git ") {
            if let Some(done) = current.take() {
                sections.push(done);
            }
            current = Some(String::new());
        }
        if let Some(section) = current.as_mut() {
            section.push_str(line);
        }
    }
    sections.extend(current);
    sections
}

fn hunks_of(section: &str) -> String {
    match section.find("\n@@") {
        Some(pos) => section[pos + 1..].to_string(),
        None => String::new(),
    }
}

fn parse_name_status(raw: &[u8]) -> Result<Vec<(ChangeType, String)>, MinerError> {
    let fields: Vec<String> = raw
        .split(|&b| b == 0)
        .filter(|f| !f.is_empty())
        .map(|f| String::from_utf8_lossy(f).into_owned())
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < fields.len() {
        let status = fields[i].as_str();
        let kind = status.chars().next().unwrap_or('?');
        match kind {
            'R' | 'C' => {
                let new_path = fields
                    .get(i + 2)
                    .ok_or_else(|| MinerError::Parse(format!("truncated rename entry {status}")))?;
                let change = if kind == 'R' { ChangeType::Renamed } else { ChangeType::Added };
                out.push((change, new_path.clone()));
                i += 3;
            }
            _ => {
                let path = fields
                    .get(i + 1)
                    .ok_or_else(|| MinerError::Parse(format!("truncated entry {status}")))?;
                let change = match kind {
                    'A' => ChangeType::Added,
                    'D' => ChangeType::Deleted,
                    _ => ChangeType::Modified,
                };
                out.push((change, path.clone()));
                i += 2;
            }
        }
    }
    Ok(out)
}

fn read_commit(git: &Git<'_>, hash: &str) -> Result<CommitRecord, MinerError> {
    let header = git.run_text(&["show", "-s", "--format=%H%x00%P%x00%ct%x00%B", hash])?;
    let mut parts = header.splitn(4, '\0');
    let full = parts.next().unwrap_or_default().trim().to_string();
    let parents: Vec<String> = parts
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let timestamp = parts
        .next()
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| MinerError::Parse(format!("missing timestamp for {hash}")))?;
    let message = parts.next().unwrap_or_default().to_string();

    let mut range: Vec<&str> = vec!["diff-tree", "-r", "-M", "--no-commit-id"];
    match parents.first() {
        Some(first) => range.extend([first.as_str(), full.as_str()]),
        None => range.extend(["--root", full.as_str()]),
    }
    let mut name_args = range.clone();
    name_args.extend(["--name-status", "-z"]);
    let names = parse_name_status(&git.run(&name_args)?)?;
    let mut patch_args = range;
    patch_args.push("-p");
    let sections = split_patch(&git.run_text(&patch_args)?);
    if sections.len() != names.len() {
        return Err(MinerError::Parse(format!(
            "commit {full}: {} file entries but {} patch sections",
            names.len(),
            sections.len()
        )));
    }

    let modifications = names
        .into_iter()
        .zip(sections)
        .map(|((change_type, path), section)| FileModification {
            path,
            change_type,
            diff_text: hunks_of(&section),
        })
        // Mode-only or binary changes carry no hunks.
        .filter(|m| !(m.change_type == ChangeType::Modified && m.diff_text.is_empty()))
        .collect();

    Ok(CommitRecord {
        hash: full,
        message,
        timestamp,
        parent_count: parents.len(),
        modifications,
    })
}

/// Commits reachable from HEAD, oldest first, limited to the newest
/// `max_commits` when set.
pub fn walk_commits(config: &MiningConfig) -> Result<Vec<CommitRecord>, MinerError> {
    let git = open(&config.repo_path)?;
    let name = config.repo_path.display().to_string();
    if git.run(&["rev-parse", "--verify", "-q", "HEAD"]).is_err() {
        return Err(MinerError::EmptyHistory(name));
    }
    let limit;
    let mut args = vec!["rev-list", "--topo-order"];
    if let Some(max) = config.max_commits {
        limit = format!("--max-count={max}");
        args.push(&limit);
    }
    args.push("HEAD");
    let listing = git.run_text(&args)?;
    let mut hashes: Vec<&str> = listing.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if hashes.is_empty() {
        return Err(MinerError::EmptyHistory(name));
    }
    hashes.reverse();
    hashes.into_iter().map(|h| read_commit(&git, h)).collect()
}

/// Builds the commit-granularity corpus, one sample per included file
/// modification.
pub fn mine_repository(config: &MiningConfig) -> Result<Corpus, MinerError> {
    let commits = walk_commits(config)?;
    let mut samples = Vec::new();
    for commit in &commits {
        if config.skip_merge_commits && commit.parent_count > 1 {
            continue;
        }
        let target = clean_message(&commit.message);
        if target.is_empty() {
            continue;
        }
        for m in &commit.modifications {
            if !config.includes(&m.path) {
                continue;
            }
            let source = clean_diff(&m.diff_text);
            if source.trim().is_empty() {
                continue;
            }
            samples.push(Sample {
                id: format!("{}:{}", commit.hash, m.path),
                source,
                target: target.clone(),
                origin: Origin::CommitPair,
                language_hint: language_hint(&m.path),
            });
        }
    }
    let provenance = format!(
        "git:{} max_commits={:?} extensions={:?} skip_merges={} dedup={:?}",
        config.repo_path.display(),
        config.max_commits,
        config.include_extensions,
        config.skip_merge_commits,
        config.dedup_mode
    );
    let corpus = Corpus::new(samples, provenance);
    Ok(match config.dedup_mode {
        MinerDedup::None => corpus,
        MinerDedup::ExactPair => deduplicate(&corpus, DedupMode::ExactPair),
        MinerDedup::TargetOnly => deduplicate(&corpus, DedupMode::TargetOnly),
    })
}

fn language_hint(path: &str) -> Option<String> {
    let ext = Path::new(path).extension()?.to_str()?;
    let lang = match ext {
        "c" | "h" => "c",
        "cc" | "cpp" | "cxx" | "hh" | "hpp" | "hxx" => "cpp",
        "py" => "python",
        "java" => "java",
        "rs" => "rust",
        "go" => "go",
        "js" => "javascript",
        "ts" => "typescript",
        _ => return None,
    };
    Some(lang.to_string())
}

/// Splits a mined sample id back into (commit hash, path).
pub fn parse_sample_id(id: &str) -> Option<(&str, &str)> {
    let (hash, path) = id.split_once(':')?;
    (hash.len() == 40 && hash.bytes().all(|b| b.is_ascii_hexdigit()) && !path.is_empty())
        .then_some((hash, path))
}

/// Seeded per-corpus shuffle, then round-robin across corpora. One generator
/// stream is shared, consumed corpus by corpus in input order.
pub fn interleave(corpora: &[Corpus], seed: u64) -> Result<Corpus, MinerError> {
    if corpora.is_empty() {
        return Err(MinerError::NoCorpora);
    }
    let mut seen = HashSet::new();
    for id in corpora.iter().flat_map(Corpus::ids) {
        if !seen.insert(id) {
            return Err(MinerError::DuplicateId(id.to_string()));
        }
    }

    let mut rng = SplitMix64::new(seed);
    let mut queues: Vec<std::vec::IntoIter<Sample>> = corpora
        .iter()
        .map(|c| {
            let mut samples = c.samples.clone();
            rng.shuffle(&mut samples);
            samples.into_iter()
        })
        .collect();

    let total = corpora.iter().map(Corpus::len).sum();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for q in queues.iter_mut() {
            out.extend(q.next());
        }
    }
    let provenance = corpora
        .iter()
        .map(|c| c.provenance.as_str())
        .collect::<Vec<_>>()
        .join(" + ");
    Ok(Corpus::new(out, format!("interleave(seed={seed}): {provenance}")))
}

//! Helpers shared by the integration targets.
#![allow(dead_code)]

pub mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use codesum::corpus::{Corpus, Origin, Sample};
use codesum::rng::SplitMix64;

/// Runs git in `dir` with a fixed identity and clock, isolated from any user
/// or system configuration.
pub fn git(dir: &Path, args: &[&str], time: i64) -> String {
    let stamp = format!("@{time} +0000");
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com"])
        .args(["-c", "commit.gpgsign=false", "-c", "core.autocrlf=false"])
        .args(args)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_CONFIG_GLOBAL", "/dev/null")
        .env("GIT_AUTHOR_DATE", &stamp)
        .env("GIT_COMMITTER_DATE", &stamp)
        .output()
        .expect("git runs");
    assert!(
        out.status.success(),
        "git {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 git output")
}

pub struct Repo {
    pub dir: PathBuf,
    clock: i64,
}

impl Repo {
    pub fn init(dir: &Path) -> Self {
        fs::create_dir_all(dir).unwrap();
        git(dir, &["init", "-q"], 0);
        git(dir, &["checkout", "-q", "-b", "main"], 0);
        Self {
            dir: dir.to_path_buf(),
            clock: 1_600_000_000,
        }
    }

    pub fn write(&self, path: &str, content: &str) {
        let full = self.dir.join(path);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(full, content).unwrap();
    }

    /// Stages everything and commits; returns the full hash.
    pub fn commit(&mut self, message: &str) -> String {
        self.clock += 60;
        git(&self.dir, &["add", "-A"], self.clock);
        git(&self.dir, &["commit", "-q", "-m", message], self.clock);
        self.head()
    }

    pub fn head(&self) -> String {
        git(&self.dir, &["rev-parse", "HEAD"], self.clock).trim().to_string()
    }

    pub fn run(&mut self, args: &[&str]) -> String {
        self.clock += 60;
        git(&self.dir, args, self.clock)
    }
}

/// One expected mined sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub id: String,
    pub source: String,
    pub target: String,
    pub language_hint: Option<String>,
}

/// Three sequential commits, then a side-branch commit touching two files,
/// merged back with an explicit merge commit.
pub struct HistoryFixture {
    pub repo: Repo,
    pub commits: Vec<String>,
    pub merge: String,
    pub expected: Vec<Expected>,
}

pub fn history_fixture(dir: &Path) -> HistoryFixture {
    let mut repo = Repo::init(dir);

    repo.write("counter.c", "int count = 0;\nvoid inc(void) { count++; }\n");
    repo.write("README.md", "counter library\n");
    let c1 = repo.commit(
        "Add counter module\n\nIntroduces a counter with increment.\n\nSigned-off-by: Fixture <fixture@example.com>",
    );

    repo.write("counter.c", "int count = 0;\nvoid inc(void) { if (count < 100) count++; }\n");
    let c2 = repo.commit("Fix overflow in increment");

    // Committed CRLF content and leftover conflict markers.
    repo.write(
        "counter.h",
        "<<<<<<< HEAD\r\nint count_get(void);\r\n=======\r\nint get(void);\r\n>>>>>>> side\r\n",
    );
    let c3 = repo.commit("Add counter header");

    repo.run(&["checkout", "-q", "-b", "side"]);
    repo.write(
        "counter.c",
        "int count = 0;\nvoid inc(void) { if (count < 100) count++; }\nvoid reset(void) { count = 0; }\n",
    );
    repo.write("reset.h", "void reset(void);\n");
    let c4 = repo.commit("Reset counter on init\n\nAdds reset().\n\nSecond paragraph is dropped.");

    repo.run(&["checkout", "-q", "main"]);
    repo.run(&["merge", "-q", "--no-ff", "-m", "Merge branch side", "side"]);
    let merge = repo.head();

    let c = Some("c".to_string());
    let expected = vec![
        Expected {
            id: format!("{c1}:counter.c"),
            source: "+int count = 0;\n+void inc(void) { count++; }\n".into(),
            target: "Add counter module\n\nIntroduces a counter with increment.".into(),
            language_hint: c.clone(),
        },
        Expected {
            id: format!("{c2}:counter.c"),
            source: " int count = 0;\n-void inc(void) { count++; }\n+void inc(void) { if (count < 100) count++; }\n"
                .into(),
            target: "Fix overflow in increment".into(),
            language_hint: c.clone(),
        },
        Expected {
            id: format!("{c3}:counter.h"),
            source: "+int count_get(void);\n+int get(void);\n".into(),
            target: "Add counter header".into(),
            language_hint: c.clone(),
        },
        Expected {
            id: format!("{c4}:counter.c"),
            source: " int count = 0;\n void inc(void) { if (count < 100) count++; }\n+void reset(void) { count = 0; }\n"
                .into(),
            target: "Reset counter on init\n\nAdds reset().".into(),
            language_hint: c.clone(),
        },
        Expected {
            id: format!("{c4}:reset.h"),
            source: "+void reset(void);\n".into(),
            target: "Reset counter on init\n\nAdds reset().".into(),
            language_hint: c,
        },
    ];
    HistoryFixture {
        repo,
        commits: vec![c1, c2, c3, c4],
        merge,
        expected,
    }
}

/// `n` sequential commits, each adding one C file.
pub fn sequential_repo(dir: &Path, n: usize) -> Repo {
    let mut repo = Repo::init(dir);
    for i in 0..n {
        repo.write(&format!("f{i}.c"), &format!("int value_{i} = {i};\n"));
        repo.commit(&format!("Add value {i}"));
    }
    repo
}

const VERBS: [&str; 6] = ["add", "fix", "remove", "update", "rename", "check"];
const NOUNS: [&str; 8] = ["buffer", "counter", "parser", "socket", "cache", "timer", "queue", "logger"];

/// A repository with `commits` commits touching two C files each, giving
/// `2 * commits` mined samples whose messages follow a small grammar.
pub fn patterned_repo(dir: &Path, commits: usize, seed: u64) -> Repo {
    let mut repo = Repo::init(dir);
    let mut rng = SplitMix64::new(seed);
    for i in 0..commits {
        let verb = VERBS[rng.next_below(VERBS.len())];
        let noun = NOUNS[rng.next_below(NOUNS.len())];
        let a = i % 17;
        let b = (i * 7 + 3) % 17;
        repo.write(
            &format!("src/{noun}_{a}.c"),
            &format!("int {verb}_{noun}_{a}(int x) {{\n    return x + {i};\n}}\n"),
        );
        repo.write(
            &format!("include/{noun}_{b}.h"),
            &format!("int {verb}_{noun}_{b}(int x); /* rev {i} */\n"),
        );
        repo.commit(&format!("{verb} {noun} {} handling", if i % 2 == 0 { "input" } else { "output" }));
    }
    repo
}

/// 32 patterned pairs over a 40-word source alphabet: the target names the
/// classes of source positions 0, 2 and 4.
pub fn overfit_corpus(seed: u64) -> Corpus {
    let mut rng = SplitMix64::new(seed);
    let samples = (0..32)
        .map(|i| {
            let src: Vec<usize> = (0..6).map(|_| rng.next_below(40)).collect();
            let source = src.iter().map(|w| format!("s{w}")).collect::<Vec<_>>().join(" ");
            let target = [src[0], src[2], src[4]]
                .iter()
                .map(|w| format!("t{}", w % 10))
                .collect::<Vec<_>>()
                .join(" ");
            Sample {
                id: format!("synthetic-{i}"),
                source,
                target,
                origin: Origin::FunctionPair,
                language_hint: None,
            }
        })
        .collect();
    Corpus::new(samples, "synthetic overfit")
}

//! Helpers for driving the `pathcodes` binary from tests.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

pub const BIN: &str = env!("CARGO_BIN_EXE_pathcodes");

pub fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus200.csv")
}

pub fn pathcodes(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("PATHCODES_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Asserts a zero exit and returns stdout.
pub fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    stdout(&o)
}

/// Ingests the 200-case fixture and curates its large tier into `out`.
pub fn prepare_large(out: &Path) {
    ok(pathcodes(out, &["ingest", fixture().to_str().unwrap()]));
    ok(pathcodes(out, &["curate", "--tiers", "large"]));
}

/// A `serve-mock` child process, killed on drop.
pub struct MockProcess {
    child: Child,
    pub base_url: String,
}

impl MockProcess {
    pub fn start(out: &Path, args: &[&str]) -> MockProcess {
        let mut child = Command::new(BIN)
            .arg("--out")
            .arg(out)
            .arg("serve-mock")
            .args(["--bind", "127.0.0.1:0"])
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("mock starts");
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap())
            .read_line(&mut line)
            .expect("mock prints its address");
        let base_url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected mock output {line:?}"))
            .to_string();
        MockProcess { child, base_url }
    }

    fn host(&self) -> &str {
        self.base_url.trim_start_matches("http://")
    }

    pub fn stats(&self) -> serde_json::Value {
        let body = http(self.host(), "GET", "/__mock/stats");
        serde_json::from_str(&body).expect("stats are JSON")
    }

    /// Requests shutdown and waits for the process to exit.
    pub fn stop(mut self) -> std::process::ExitStatus {
        http(self.host(), "POST", "/__mock/shutdown");
        for _ in 0..100 {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        panic!("mock did not stop");
    }
}

impl Drop for MockProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Minimal HTTP/1.1 exchange; returns the response body.
pub fn http(host: &str, method: &str, path: &str) -> String {
    let mut stream = TcpStream::connect(host).expect("mock reachable");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {host}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    response
        .split_once("\r\n\r\n")
        .map(|(_, body)| body.to_string())
        .unwrap_or_default()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

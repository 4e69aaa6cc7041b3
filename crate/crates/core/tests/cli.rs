mod common;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use common::{fixture, Client, SinkMode, SmtpSink};
use safespace_core::clock::SystemClock;
use safespace_core::directory::{ContactInput, Directory};
use safespace_core::dispatch::{Alert, DispatchConfig, Dispatcher};
use safespace_core::store::DocumentStore;

const ABUSIVE: &str = "You’re such a loser. I hate you.";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_safespace"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn stdout_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Writes a config under `dir` with the given SMTP port and listen address.
fn write_config(dir: &Path, listen: &str, smtp_port: u16) -> PathBuf {
    let path = dir.join("safespace.toml");
    std::fs::write(
        &path,
        format!(
            r#"
listen = "{listen}"
data_dir = "data"
tick_seconds = 1

[smtp]
host = "127.0.0.1"
port = {smtp_port}
starttls = false
sender = "alerts@safespace.test"
timeout_s = 5

[outbox]
backoff_base_secs = 1
backoff_cap_secs = 2
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn analyze_exit_codes() {
    let o = run(&["--output", "json", "analyze", "--text", ABUSIVE]);
    assert_eq!(code(&o), 3);
    let report = stdout_json(&o);
    assert_eq!(report["verdict"], "Abusive");
    assert!(!report["spans"].as_array().unwrap().is_empty());

    let o = run(&["analyze", "--text", "Can you pick up milk on the way home?"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("verdict: Clean"));

    assert_eq!(code(&run(&["analyze", "--text", "  "])), 2);
    assert_eq!(code(&run(&["analyze", "--image", "/definitely/not/here.png"])), 2);
    assert_eq!(code(&run(&["analyze"])), 2);
    assert_eq!(code(&run(&["analyze", "--text", "x", "--scorer", "psychic"])), 2);
    // Remote mode without endpoint or key is a configuration error.
    assert_eq!(code(&run(&["analyze", "--text", "x", "--scorer", "remote"])), 2);
}

#[test]
fn analyze_reads_stdin() {
    let mut child = bin()
        .args(["--output", "json", "analyze", "--text", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        use std::io::Write;
        child.stdin.take().unwrap().write_all(ABUSIVE.as_bytes()).unwrap();
    }
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn analyze_image_through_an_extractor_command() {
    let png = fixture("screenshots/chat_abusive.png");
    let text = fixture("screenshots/chat_abusive.txt");
    let script = format!("cat > /dev/null; cat '{}'", text.display());
    let o = run(&[
        "--output",
        "json",
        "analyze",
        "--image",
        png.to_str().unwrap(),
        "--extractor-cmd",
        "sh",
        "--extractor-arg",
        "-c",
        "--extractor-arg",
        &script,
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["source"], "Screenshot");

    // No extractor configured: caller error.
    assert_eq!(code(&run(&["analyze", "--image", png.to_str().unwrap()])), 2);
    // Extractor crashed: runtime error.
    let o = run(&["analyze", "--image", png.to_str().unwrap(), "--extractor-cmd", "false"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn analyze_with_a_custom_lexicon() {
    let dir = tempfile::tempdir().unwrap();
    let lex = dir.path().join("lex.tsv");
    std::fs::write(&lex, "pineapple\tTOXICITY:0.95\n").unwrap();
    let o = run(&["analyze", "--text", "pineapple pizza", "--lexicon", lex.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    std::fs::write(&lex, "broken line without weights\n").unwrap();
    assert_eq!(code(&run(&["analyze", "--text", "x", "--lexicon", lex.to_str().unwrap()])), 2);
}

#[test]
fn questionnaire_score() {
    let def = fixture("questionnaire/five_item.json");
    let def = def.to_str().unwrap();
    let score = |responses: &str| {
        let r = fixture(&format!("questionnaire/{responses}"));
        run(&["--output", "json", "questionnaire", "score", "--definition", def, "--responses", r.to_str().unwrap()])
    };

    let o = score("responses_60.json");
    assert_eq!(code(&o), 0);
    let a = stdout_json(&o);
    assert_eq!(a["category"], "NeedsReflection");
    assert_eq!(a["feedback"], "Caution – signs of concern. Please reflect.");

    let o = score("responses_all_max.json");
    assert_eq!(stdout_json(&o)["category"], "Healthy");

    let o = score("responses_incomplete.json");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("q3"));

    assert_eq!(code(&score("does_not_exist.json")), 2);
}

#[test]
fn sim_run() {
    let o = run(&["--output", "json", "sim", "run", "--schedules", "0"]);
    assert_eq!(code(&o), 0);
    let r = stdout_json(&o);
    assert_eq!(r["expected_alerts"], 0);
    assert_eq!(r["alerts_created"], 0);

    let args = ["--output", "json", "sim", "run", "--schedules", "60", "--seed", "42", "--fail-rate", "0.3"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout, "same seed must give the same report");
    let r = stdout_json(&a);
    assert_eq!(r["alerts_sent"], 60);
    assert_eq!(r["duplicate_alerts"], 0);

    assert_eq!(code(&run(&["sim", "run", "--fail-rate", "1.5"])), 2);
    let human = run(&["sim", "run", "--schedules", "5"]);
    assert!(String::from_utf8_lossy(&human.stdout).contains("alerts sent 5/5"));
}

#[test]
fn serve_config_errors() {
    let o = run(&["serve", "--config", "/no/such/config.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/config.toml"));
    assert_eq!(code(&run(&["serve"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "tick_seconds = \"soon\"\n").unwrap();
    assert_eq!(code(&run(&["serve", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn serve_exits_1_when_the_port_is_taken() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &taken.local_addr().unwrap().to_string(), 25);
    let o = run(&["serve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot listen"));
}

/// Running `safespace serve` child; killed on drop.
struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(config: &Path) -> Self {
        let mut child = bin()
            .args(["serve", "--config", config.to_str().unwrap()])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}"));
        Self {
            base: format!("http://{addr}"),
            child,
        }
    }

    fn terminate(mut self) -> i32 {
        Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        let status = self.child.wait().unwrap();
        std::mem::forget(self);
        status.code().unwrap_or(-1)
    }

    fn kill9(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
        std::mem::forget(self);
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn serve_boots_from_the_example_config() {
    let example = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/config/example.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("example.toml");
    std::fs::write(&cfg, example.replace("127.0.0.1:8080", "127.0.0.1:0")).unwrap();
    std::fs::create_dir(dir.path().join("etc")).unwrap();
    let server = Server::start(&cfg);
    let health = Client::new(&server.base).get("/healthz");
    assert_eq!(health.status, 200);
    assert_eq!(health.body["status"], "ok");
    assert_eq!(server.terminate(), 0);
}

#[test]
fn user_add_prints_a_working_token() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "127.0.0.1:0", 25);
    let o = run(&["--output", "json", "--config", cfg.to_str().unwrap(), "user", "add", "--name", "Priya"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let u = stdout_json(&o);
    let token = u["token"].as_str().unwrap();
    assert!(token.len() >= 32);

    let store = DocumentStore::open(dir.path().join("data")).unwrap();
    let who = Directory::new(&store).authenticate(token).unwrap();
    assert_eq!(who.unwrap().as_str(), u["user_id"].as_str().unwrap());
    drop(store);
    // The token itself is never stored.
    for entry in std::fs::read_dir(dir.path().join("data")).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains(token));
    }

    assert_eq!(code(&run(&["--config", cfg.to_str().unwrap(), "user", "add", "--name", " "])), 2);
}

#[test]
fn outbox_and_history_utilities() {
    let sink = SmtpSink::start(SinkMode::Accept);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "127.0.0.1:0", sink.addr.port());
    let cfg = cfg.to_str().unwrap();

    let o = run(&["--output", "json", "--config", cfg, "outbox", "list"]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let o = run(&["--config", cfg, "outbox", "list"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "outbox is empty");

    let o = run(&["--output", "json", "--config", cfg, "history", "prune", "--before", "2999-01-01"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["removed"], 0);
    assert_eq!(code(&run(&["--config", cfg, "history", "prune", "--before", "someday"])), 2);

    // Queue an alert for three contacts while nothing is serving.
    {
        let store = Arc::new(DocumentStore::open(dir.path().join("data")).unwrap());
        let dir = Directory::new(store.as_ref());
        let now = safespace_core::clock::Clock::now(&SystemClock::new());
        let (user, _) = dir.create_user("Priya", now).unwrap();
        let contacts = dir
            .set_contacts(
                &user.user_id,
                (1..=3)
                    .map(|i| ContactInput {
                        name: format!("C{i}"),
                        email: format!("c{i}@example.org"),
                        priority: i,
                    })
                    .collect(),
            )
            .unwrap();
        let dispatcher = Dispatcher::new(store.clone(), DispatchConfig::default());
        dispatcher
            .enqueue(&Alert::sos(user.user_id, None, None, now, "Priya"), &contacts)
            .unwrap();
    }
    let o = run(&["--output", "json", "--config", cfg, "outbox", "list", "--status", "pending"]);
    assert_eq!(stdout_lines(&o).len(), 3);

    let o = run(&["--output", "json", "--config", cfg, "outbox", "flush"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!((s["sent"].as_u64(), s["pending"].as_u64()), (Some(3), Some(0)));
    assert_eq!(sink.received().len(), 3);

    let o = run(&["--output", "json", "--config", cfg, "outbox", "list", "--status", "pending"]);
    assert!(o.stdout.is_empty());
    let o = run(&["--output", "json", "--config", cfg, "outbox", "list", "--status", "sent"]);
    assert_eq!(stdout_lines(&o).len(), 3);

    // The completed alert left one AlertSent event in history.
    let o = run(&["--output", "json", "--config", cfg, "history", "prune", "--before", "2999-01-01T00:00:00Z"]);
    assert_eq!(stdout_json(&o)["removed"], 1);
}

#[test]
fn queued_alerts_survive_kill_9_and_are_sent_after_restart() {
    let sink = SmtpSink::start(SinkMode::Down);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "127.0.0.1:0", sink.addr.port());

    let o = run(&["--output", "json", "--config", cfg.to_str().unwrap(), "user", "add", "--name", "Priya"]);
    let token = stdout_json(&o)["token"].as_str().unwrap().to_string();

    let server = Server::start(&cfg);
    let c = Client::new(&server.base).with_token(&token);
    let r = c.put(
        "/api/contacts",
        &json!({"contacts": [
            {"name": "Mum", "email": "mum@example.org", "priority": 1},
            {"name": "Sam", "email": "sam@example.org", "priority": 2},
        ]}),
    );
    assert_eq!(r.status, 200);
    let r = c.post("/api/sos", &json!({"lat": 48.856613, "lon": 2.352222}));
    assert_eq!(r.status, 201);
    let alert_id = r.body["alert_id"].as_str().unwrap().to_string();

    // Let the dispatcher hit the dead relay a few times, then crash hard.
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    while sink.sessions() < 2 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(sink.sessions() >= 2, "dispatcher never tried the relay");
    server.kill9();
    assert!(sink.received().is_empty());

    sink.set_mode(SinkMode::Accept);
    let server = Server::start(&cfg);
    let got = sink.wait_for(2, Duration::from_secs(30));
    assert_eq!(got.len(), 2);
    let mut to: Vec<String> = got.iter().flat_map(|m| m.to.clone()).collect();
    to.sort();
    assert_eq!(to, ["mum@example.org", "sam@example.org"]);
    for m in &got {
        assert!(m.header("Message-ID").unwrap().contains(&alert_id));
        assert!(m.body().contains("48.856613, 2.352222"));
    }
    // Nothing further goes out: each entry was sent exactly once.
    std::thread::sleep(Duration::from_millis(2500));
    assert_eq!(sink.received().len(), 2);
    assert_eq!(Client::new(&server.base).get("/healthz").body["outbox_pending"], 0);
    assert_eq!(server.terminate(), 0);
}

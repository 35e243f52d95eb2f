#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Deserialize;
use ta_audit::backends::Behavior;
use ta_audit::corpus::{item_to_json_line, AnswerKey, Dataset, Modality, QAItem};
use ta_audit::extraction::{extract, ExtractedAnswer, RefusalLexicon};
use ta_audit::prompting::option_letter;

/// What the fake chat server sends back for one request.
pub enum Reply {
    Content(String),
    Status(u16),
}

type Responder = dyn Fn(usize, &str) -> Reply + Send + Sync;

/// A minimal OpenAI-style `/chat/completions` server on localhost.
pub struct ChatServer {
    port: u16,
    requests: Arc<AtomicUsize>,
    arrivals: Arc<Mutex<Vec<Instant>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

impl ChatServer {
    /// `responder(n, prompt)` gets the 0-based request number and the user prompt.
    pub fn start(responder: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let requests = Arc::new(AtomicUsize::new(0));
        let arrivals = Arc::new(Mutex::new(Vec::new()));
        let auth = Arc::new(Mutex::new(Vec::new()));
        let responder: Arc<Responder> = Arc::new(responder);
        {
            let (requests, arrivals, auth) = (requests.clone(), arrivals.clone(), auth.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (requests, arrivals, auth, responder) =
                        (requests.clone(), arrivals.clone(), auth.clone(), responder.clone());
                    std::thread::spawn(move || {
                        let _ = serve(stream, &requests, &arrivals, &auth, &*responder);
                    });
                }
            });
        }
        Self {
            port,
            requests,
            arrivals,
            auth,
        }
    }

    /// Always answers with the given content.
    pub fn fixed(content: &'static str) -> Self {
        Self::start(move |_, _| Reply::Content(content.to_string()))
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn arrivals(&self) -> Vec<Instant> {
        self.arrivals.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.auth.lock().unwrap().clone()
    }
}

fn serve(
    stream: TcpStream,
    requests: &AtomicUsize,
    arrivals: &Mutex<Vec<Instant>>,
    auth: &Mutex<Vec<Option<String>>>,
    responder: &Responder,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    let mut authorization = None;
    let mut line = String::new();
    reader.read_line(&mut line)?;
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let n = requests.fetch_add(1, Ordering::SeqCst);
    arrivals.lock().unwrap().push(Instant::now());
    auth.lock().unwrap().push(authorization);
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let prompt = json["messages"][0]["content"].as_str().unwrap_or("").to_string();
    let (status, payload) = match responder(n, &prompt) {
        Reply::Content(c) => (
            200,
            serde_json::json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": c}, "finish_reason": "stop"}]
            })
            .to_string(),
        ),
        Reply::Status(s) => (s, serde_json::json!({"error": {"message": "injected"}}).to_string()),
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

pub fn mcq_item(id: &str, n_options: usize, gold: usize, modality: Modality) -> QAItem {
    QAItem {
        id: id.to_string(),
        question: format!("What happens in clip {id}?"),
        options: (0..n_options).map(|i| format!("event {i} of {id}")).collect(),
        gold: AnswerKey::OptionIndex(gold),
        modality,
        media_ref: format!("media/{id}.mp4"),
        source: "synthetic".to_string(),
        meta: Default::default(),
    }
}

pub fn open_item(id: &str, answer: &str) -> QAItem {
    QAItem {
        id: id.to_string(),
        question: format!("How many objects appear in clip {id}?"),
        options: vec![],
        gold: AnswerKey::FreeText(answer.to_string()),
        modality: Modality::Video,
        media_ref: format!("media/{id}.mp4"),
        source: "synthetic".to_string(),
        meta: Default::default(),
    }
}

pub fn write_dataset(path: &Path, items: &[QAItem]) -> Dataset {
    let mut body = String::new();
    for i in items {
        body.push_str(&item_to_json_line(i));
        body.push('\n');
    }
    std::fs::write(path, body).unwrap();
    Dataset::new("fixture", items.to_vec()).unwrap()
}

/// A scripted backend TOML file pointing at a JSONL script.
pub fn write_scripted_backend(dir: &Path, id: &str, role: Option<&str>, script_lines: &[String]) -> std::path::PathBuf {
    let script = dir.join(format!("{id}.script.jsonl"));
    std::fs::write(&script, script_lines.join("\n") + "\n").unwrap();
    let mut toml = format!("id = \"{id}\"\nkind = \"scripted\"\nscript = \"{id}.script.jsonl\"\nrate_limit = 1000.0\n");
    if let Some(r) = role {
        toml.push_str(&format!("role = \"{r}\"\n"));
    }
    let path = dir.join(format!("{id}.toml"));
    std::fs::write(&path, toml).unwrap();
    path
}

pub fn write_http_backend(dir: &Path, id: &str, base_url: &str, extra: &str) -> std::path::PathBuf {
    let toml = format!(
        "id = \"{id}\"\nkind = \"http-chat\"\nendpoint = \"{base_url}\"\nmodel_name = \"test-model\"\nrate_limit = 1000.0\nbackoff_ms = 1\n{extra}"
    );
    let path = dir.join(format!("{id}.toml"));
    std::fs::write(&path, toml).unwrap();
    path
}

pub fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("ta-audit")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

/// Behavior that answers wrong at permutation `k` of a rotated MCQ item.
pub fn wrong_at(item: &QAItem, k: usize) -> Behavior {
    let n = item.options.len();
    let gold = item.gold.index().unwrap();
    let shifted = (gold + n - k % n) % n;
    Behavior::AnswerFixedLetter(option_letter((shifted + 1) % n).unwrap())
}

#[derive(Deserialize)]
struct Case {
    id: String,
    #[serde(default)]
    options: Vec<String>,
    response: String,
    expected: Expected,
}

#[derive(Deserialize)]
struct Expected {
    kind: String,
    letter: Option<char>,
    text: Option<String>,
}

pub fn corpus_item(options: Vec<String>) -> QAItem {
    let gold = if options.is_empty() {
        AnswerKey::FreeText("3".into())
    } else {
        AnswerKey::OptionIndex(0)
    };
    QAItem {
        id: "c".into(),
        question: "q".into(),
        options,
        gold,
        modality: Modality::Video,
        media_ref: String::new(),
        source: "corpus".into(),
        meta: Default::default(),
    }
}

fn agrees(got: &ExtractedAnswer, want: &Expected) -> bool {
    match got {
        ExtractedAnswer::OptionLetter { letter } => want.kind == "option-letter" && want.letter == Some(*letter),
        ExtractedAnswer::FreeText { text } => want.kind == "free-text" && want.text.as_deref() == Some(text.as_str()),
        ExtractedAnswer::Refusal { .. } => want.kind == "refusal",
        ExtractedAnswer::Unparsable { .. } => want.kind == "unparsable",
    }
}

pub fn corpus_agreement() -> (usize, usize, Vec<String>) {
    let body = include_str!("../data/extraction_corpus.jsonl");
    let lexicon = RefusalLexicon::default();
    let mut hits = 0;
    let mut total = 0;
    let mut misses = Vec::new();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let case: Case = serde_json::from_str(line).unwrap();
        let got = extract(&case.response, &corpus_item(case.options), &lexicon);
        total += 1;
        if agrees(&got, &case.expected) {
            hits += 1;
        } else {
            misses.push(format!("{}: got {:?}", case.id, got));
        }
    }
    (hits, total, misses)
}

//! Protocol conformance suite runnable against any server speaking the backend protocol.

use std::fmt;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use snowball_core::conversation::{Conversation, Part, Turn};
use snowball_core::decoding::softmax_values;

use crate::wire::{format_decimal, FAULT_HEADER, LOGIT_DIGITS};

#[derive(Debug, Clone)]
pub struct ConformanceTarget {
    pub base_url: String,
    /// An instance of the same server without the logits capability, for the 422 check
    /// when the main instance advertises both capabilities.
    pub no_logits_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(f, "{}/{} checks passed in {:.2}s", self.checks.iter().filter(|c| c.passed).count(), self.checks.len(), self.elapsed.as_secs_f64())
    }
}

pub const CHECK_NAMES: [&str; 12] = [
    "meta_shape",
    "logits_length",
    "finiteness",
    "decimal_precision",
    "idempotent_replay",
    "error_codes",
    "capability_flags",
    "turn_encoding",
    "eos_bounds",
    "concurrency",
    "statelessness",
    "unicode_round_trip",
];

type Check = Result<String, String>;

struct Meta {
    vocab_size: usize,
    eos: u64,
    logits: bool,
    complete: bool,
}

struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        Client { agent, base: base.trim_end_matches('/').to_string() }
    }

    fn get(&self, path: &str) -> Result<(u16, String), String> {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        resp.body_mut().read_to_string().map(|b| (status, b)).map_err(|e| e.to_string())
    }

    fn post_with(&self, path: &str, body: &str, header: Option<(&str, &str)>) -> Result<(u16, String), String> {
        let mut req = self.agent.post(format!("{}{path}", self.base)).header("content-type", "application/json");
        if let Some((k, v)) = header {
            req = req.header(k, v);
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        resp.body_mut().read_to_string().map(|b| (status, b)).map_err(|e| e.to_string())
    }

    fn post(&self, path: &str, body: &str) -> Result<(u16, String), String> {
        self.post_with(path, body, None)
    }

    fn ok(&self, path: &str, body: &str) -> Result<String, String> {
        match self.post(path, body)? {
            (200, b) => Ok(b),
            (s, b) => Err(format!("{path} answered {s}: {}", b.trim())),
        }
    }
}

fn image_question() -> Conversation {
    Conversation::new(vec![Turn::user(vec![
        Part::Image("conformance/probe.jpg".into()),
        Part::Text("What is shown in the picture?".into()),
    ])])
    .expect("valid probe")
}

fn multi_turn() -> Conversation {
    Conversation::new(vec![
        Turn::user(vec![Part::Image("conformance/probe.jpg".into()), Part::Text("Describe this image in detail.".into())]),
        Turn::assistant("A plain test pattern."),
        Turn::user(vec![Part::Text("What color is it?".into())]),
    ])
    .expect("valid probe")
}

fn unicode_probe() -> Conversation {
    Conversation::new(vec![Turn::user(vec![
        Part::Image("conformance/ünïcode.jpg".into()),
        Part::Text("Qu'est-ce que c'est ? 图片里有什么 🐱 \"quoted\" \\ tab\t".into()),
    ])])
    .expect("valid probe")
}

fn logits_body(conv: &Conversation, generated: &[u64]) -> String {
    json!({"conversation": conv, "generated": generated}).to_string()
}

fn complete_body(conv: &Conversation) -> String {
    json!({
        "conversation": conv,
        "sampling": {"temperature": 1.0, "top_p": 1.0, "top_k": null, "greedy": true, "seed": 0},
        "max_new_tokens": 8
    })
    .to_string()
}

/// Escapes every non-ASCII character of a JSON text as `\uXXXX`.
fn ascii_json(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii() {
            out.push(c);
        } else {
            let mut buf = [0u16; 2];
            for unit in c.encode_utf16(&mut buf) {
                out.push_str(&format!("\\u{unit:04x}"));
            }
        }
    }
    out
}

/// The raw number tokens of the `logits` array, in order.
fn raw_logit_tokens(body: &str) -> Result<Vec<String>, String> {
    let start = body.find('[').ok_or("no array in logits reply")?;
    let end = body.rfind(']').ok_or("no array in logits reply")?;
    let inner = &body[start + 1..end];
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(',').map(|t| t.trim().to_string()).collect())
}

fn significant_digits(token: &str) -> usize {
    let mantissa = token.split(['e', 'E']).next().unwrap_or("");
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        // zero written with its padding
        digits.len()
    } else {
        trimmed.len()
    }
}

fn parse_logits(body: &str, vocab: usize) -> Result<Vec<f64>, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("reply is not JSON: {e}"))?;
    let arr = v.get("logits").and_then(Value::as_array).ok_or("reply lacks a logits array")?;
    if arr.len() != vocab {
        return Err(format!("{} logits for vocab_size {vocab}", arr.len()));
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| x.as_f64().filter(|f| f.is_finite()).ok_or(format!("logit {i} is not a finite number")))
        .collect()
}

fn meta_shape(c: &Client) -> Result<(Meta, String), String> {
    let (status, body) = c.get("/v1/meta")?;
    if status != 200 {
        return Err(format!("GET /v1/meta answered {status}"));
    }
    let v: Value = serde_json::from_str(&body).map_err(|e| format!("meta is not JSON: {e}"))?;
    let name = v.get("name").and_then(Value::as_str).ok_or("name missing or not a string")?;
    let vocab = v.get("vocab_size").and_then(Value::as_u64).ok_or("vocab_size missing or not an integer")?;
    let eos = v.get("eos_token_id").and_then(Value::as_u64).ok_or("eos_token_id missing or not an integer")?;
    let caps = v.get("capabilities").ok_or("capabilities missing")?;
    let flag = |k: &str| caps.get(k).and_then(Value::as_bool).ok_or(format!("capabilities.{k} missing or not a bool"));
    let (logits, complete) = (flag("logits")?, flag("complete")?);
    if vocab == 0 {
        return Err("vocab_size is zero".into());
    }
    let meta = Meta { vocab_size: vocab as usize, eos, logits, complete };
    Ok((meta, format!("{name}: vocab {vocab}, eos {eos}, logits {logits}, complete {complete}")))
}

fn needs_logits(m: &Meta) -> Result<(), String> {
    if m.logits {
        Ok(())
    } else {
        Err("server does not advertise logits".into())
    }
}

fn logits_length(c: &Client, m: &Meta) -> Check {
    needs_logits(m)?;
    for (label, body) in [
        ("single turn", logits_body(&image_question(), &[])),
        ("multi turn", logits_body(&multi_turn(), &[])),
        ("with prefix", logits_body(&image_question(), &[0])),
    ] {
        let reply = c.ok("/v1/logits", &body)?;
        let v: Value = serde_json::from_str(&reply).map_err(|e| e.to_string())?;
        let n = v.get("logits").and_then(Value::as_array).map(Vec::len).ok_or("reply lacks a logits array")?;
        if n != m.vocab_size {
            return Err(format!("{label}: {n} logits for vocab_size {}", m.vocab_size));
        }
    }
    Ok(format!("3 replies of length {}", m.vocab_size))
}

fn finiteness(c: &Client, m: &Meta) -> Check {
    needs_logits(m)?;
    let mut count = 0;
    for conv in [image_question(), multi_turn(), unicode_probe()] {
        count += parse_logits(&c.ok("/v1/logits", &logits_body(&conv, &[]))?, m.vocab_size)?.len();
    }
    Ok(format!("{count} values finite"))
}

fn decimal_precision(c: &Client, m: &Meta) -> Check {
    needs_logits(m)?;
    let mut worst: f64 = 0.0;
    for conv in [image_question(), multi_turn()] {
        let body = c.ok("/v1/logits", &logits_body(&conv, &[]))?;
        let tokens = raw_logit_tokens(&body)?;
        if let Some(t) = tokens.iter().find(|t| significant_digits(t) < LOGIT_DIGITS) {
            return Err(format!("value {t} carries fewer than {LOGIT_DIGITS} significant digits"));
        }
        let served = parse_logits(&body, m.vocab_size)?;
        let rounded: Vec<f64> = served.iter().map(|x| format_decimal(*x).parse().expect("decimal parses")).collect();
        let (p, q) = (softmax_values(&served), softmax_values(&rounded));
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-7 {
        return Err(format!("probability moves by {worst:e} under decimal round-trip"));
    }
    Ok(format!("max probability shift {worst:.1e}"))
}

fn idempotent_replay(c: &Client, m: &Meta) -> Check {
    let mut n = 0;
    if m.logits {
        let body = logits_body(&multi_turn(), &[]);
        let (a, b) = (c.ok("/v1/logits", &body)?, c.ok("/v1/logits", &body)?);
        if a != b {
            return Err("logits replay differs".into());
        }
        n += 1;
    }
    if m.complete {
        let body = complete_body(&multi_turn());
        let (a, b) = (c.ok("/v1/complete", &body)?, c.ok("/v1/complete", &body)?);
        if a != b {
            return Err("greedy completion replay differs".into());
        }
        n += 1;
    }
    if n == 0 {
        return Err("server advertises no capability".into());
    }
    Ok(format!("{n} endpoints byte-identical on replay"))
}

fn expect_status(got: Result<(u16, String), String>, want: u16, what: &str) -> Result<(), String> {
    match got? {
        (s, _) if s == want => Ok(()),
        (s, b) => Err(format!("{what}: expected {want}, got {s} ({})", b.trim())),
    }
}

fn error_codes(c: &Client, m: &Meta, no_logits: Option<&Client>) -> Check {
    let path = if m.logits { "/v1/logits" } else { "/v1/complete" };
    expect_status(c.post(path, "{not json"), 400, "malformed JSON")?;
    expect_status(c.post(path, r#"{"generated": []}"#), 400, "missing conversation")?;
    expect_status(c.post(path, r#"{"conversation": [], "generated": []}"#), 400, "empty conversation")?;
    let valid = if m.logits { logits_body(&image_question(), &[]) } else { complete_body(&image_question()) };
    expect_status(c.post_with(path, &valid, Some((FAULT_HEADER, "unavailable"))), 503, "injected fault")?;
    let body = logits_body(&image_question(), &[]);
    if !m.logits {
        expect_status(c.post("/v1/logits", &body), 422, "logits without capability")?;
    } else if !m.complete {
        expect_status(c.post("/v1/complete", &complete_body(&image_question())), 422, "complete without capability")?;
    } else {
        let other = no_logits.ok_or("no logits-incapable instance supplied for the 422 check")?;
        expect_status(other.post("/v1/logits", &body), 422, "logits on logits-incapable instance")?;
    }
    Ok("400 malformed, 400 schema, 422 capability, 503 retryable".into())
}

fn capability_flags(c: &Client, m: &Meta, no_logits: Option<&Client>) -> Check {
    let conv = image_question();
    let logits = c.post("/v1/logits", &logits_body(&conv, &[]))?;
    let complete = c.post("/v1/complete", &complete_body(&conv))?;
    let agrees = |flag: bool, (status, _): &(u16, String)| if flag { *status == 200 } else { *status == 422 };
    if !agrees(m.logits, &logits) {
        return Err(format!("logits flag {} but endpoint answered {}", m.logits, logits.0));
    }
    if !agrees(m.complete, &complete) {
        return Err(format!("complete flag {} but endpoint answered {}", m.complete, complete.0));
    }
    if m.complete {
        let v: Value = serde_json::from_str(&complete.1).map_err(|e| e.to_string())?;
        v.get("text").and_then(Value::as_str).ok_or("complete reply lacks a text string")?;
    }
    if let Some(other) = no_logits {
        let (meta, _) = meta_shape(other)?;
        if meta.logits {
            return Err("logits-incapable instance advertises logits".into());
        }
    }
    Ok("advertised flags match endpoint behavior".into())
}

fn turn_encoding(c: &Client, m: &Meta) -> Check {
    let (path, good) =
        if m.logits { ("/v1/logits", logits_body(&multi_turn(), &[])) } else { ("/v1/complete", complete_body(&multi_turn())) };
    c.ok(path, &good)?;
    let wrap = |conv: Value| {
        if m.logits {
            json!({"conversation": conv, "generated": []}).to_string()
        } else {
            json!({"conversation": conv, "sampling": {"temperature": 1.0, "top_p": 1.0, "top_k": null, "greedy": true, "seed": 0}, "max_new_tokens": 4}).to_string()
        }
    };
    let bad = [
        ("unknown part type", json!([{"role": "user", "content": [{"type": "audio", "value": "x"}]}])),
        ("unknown role", json!([{"role": "system", "content": [{"type": "text", "value": "x"}]}])),
        ("image outside first turn", json!([
            {"role": "user", "content": [{"type": "text", "value": "a"}]},
            {"role": "assistant", "content": [{"type": "text", "value": "b"}]},
            {"role": "user", "content": [{"type": "image", "value": "i.jpg"}, {"type": "text", "value": "c"}]}
        ])),
        ("roles out of order", json!([
            {"role": "user", "content": [{"type": "text", "value": "a"}]},
            {"role": "user", "content": [{"type": "text", "value": "b"}]}
        ])),
        ("ends with assistant", json!([
            {"role": "user", "content": [{"type": "text", "value": "a"}]},
            {"role": "assistant", "content": [{"type": "text", "value": "b"}]}
        ])),
    ];
    for (what, conv) in bad {
        expect_status(c.post(path, &wrap(conv)), 400, what)?;
    }
    Ok("multi-turn accepted, 5 malformed encodings rejected".into())
}

fn eos_bounds(c: &Client, m: &Meta) -> Check {
    if m.eos >= m.vocab_size as u64 {
        return Err(format!("eos_token_id {} outside vocab_size {}", m.eos, m.vocab_size));
    }
    if m.logits {
        parse_logits(&c.ok("/v1/logits", &logits_body(&image_question(), &[m.eos]))?, m.vocab_size)?;
        expect_status(
            c.post("/v1/logits", &logits_body(&image_question(), &[m.vocab_size as u64])),
            400,
            "generated id = vocab_size",
        )?;
    }
    Ok(format!("eos {} < vocab {}", m.eos, m.vocab_size))
}

fn requests(m: &Meta) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    for conv in [image_question(), multi_turn(), unicode_probe()] {
        if m.logits {
            out.push(("/v1/logits", logits_body(&conv, &[])));
        }
        if m.complete {
            out.push(("/v1/complete", complete_body(&conv)));
        }
    }
    out
}

fn concurrency(c: &Client, m: &Meta) -> Check {
    let reqs = requests(m);
    let reference: Vec<String> = reqs.iter().map(|(p, b)| c.ok(p, b)).collect::<Result<_, _>>()?;
    let rounds = 4;
    let results: Vec<(usize, Result<String, String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..rounds * reqs.len())
            .map(|k| {
                let i = k % reqs.len();
                let (path, body) = (&reqs[i].0, &reqs[i].1);
                let client = Client::new(&c.base);
                s.spawn(move || (i, client.ok(path, body)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("request thread")).collect()
    });
    for (i, r) in &results {
        if r.as_ref()? != &reference[*i] {
            return Err(format!("concurrent reply to request {i} differs from the sequential one"));
        }
    }
    Ok(format!("{} parallel requests matched sequential replies", results.len()))
}

fn statelessness(c: &Client, m: &Meta) -> Check {
    let reqs = requests(m);
    let first: Vec<String> = reqs.iter().map(|(p, b)| c.ok(p, b)).collect::<Result<_, _>>()?;
    if m.logits {
        // continuation requests must not leave anything behind
        c.ok("/v1/logits", &logits_body(&image_question(), &[m.eos, 0]))?;
    }
    let again: Vec<String> = reqs.iter().rev().map(|(p, b)| c.ok(p, b)).collect::<Result<_, _>>()?;
    for (i, (a, b)) in first.iter().zip(again.iter().rev()).enumerate() {
        if a != b {
            return Err(format!("request {i} answered differently after other traffic"));
        }
    }
    Ok(format!("{} requests order-independent", reqs.len()))
}

fn unicode_round_trip(c: &Client, m: &Meta) -> Check {
    let conv = unicode_probe();
    let (path, raw) =
        if m.logits { ("/v1/logits", logits_body(&conv, &[])) } else { ("/v1/complete", complete_body(&conv)) };
    let escaped = ascii_json(&raw);
    if escaped == raw || !escaped.is_ascii() {
        return Err("probe escaping failed".into());
    }
    let a = c.ok(path, &raw)?;
    let b = c.ok(path, &escaped)?;
    if a != b {
        return Err("UTF-8 and \\u-escaped encodings of the same request answered differently".into());
    }
    if m.complete {
        let (s, body) = c.post("/v1/complete", &complete_body(&conv))?;
        if s != 200 {
            return Err(format!("unicode completion answered {s}"));
        }
        let v: Value = serde_json::from_str(&body).map_err(|e| format!("completion reply is not JSON: {e}"))?;
        v.get("text").and_then(Value::as_str).ok_or("completion reply lacks text")?;
    }
    Ok("raw and escaped UTF-8 requests agree".into())
}

/// Runs all twelve checks. Checks needing a capability the server does not advertise
/// exercise the capability error instead where that is meaningful, and fail otherwise.
pub fn run_conformance(target: &ConformanceTarget) -> ConformanceReport {
    let start = Instant::now();
    let c = Client::new(&target.base_url);
    let other = target.no_logits_url.as_deref().map(Client::new);
    let mut checks = Vec::with_capacity(12);
    let mut record = |name: &'static str, r: Check| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(CheckResult { name, passed, detail });
    };
    match meta_shape(&c) {
        Ok((meta, detail)) => {
            record("meta_shape", Ok(detail));
            record("logits_length", logits_length(&c, &meta));
            record("finiteness", finiteness(&c, &meta));
            record("decimal_precision", decimal_precision(&c, &meta));
            record("idempotent_replay", idempotent_replay(&c, &meta));
            record("error_codes", error_codes(&c, &meta, other.as_ref()));
            record("capability_flags", capability_flags(&c, &meta, other.as_ref()));
            record("turn_encoding", turn_encoding(&c, &meta));
            record("eos_bounds", eos_bounds(&c, &meta));
            record("concurrency", concurrency(&c, &meta));
            record("statelessness", statelessness(&c, &meta));
            record("unicode_round_trip", unicode_round_trip(&c, &meta));
        }
        Err(e) => {
            record("meta_shape", Err(e.clone()));
            for name in &CHECK_NAMES[1..] {
                record(name, Err(format!("skipped: meta unavailable ({e})")));
            }
        }
    }
    ConformanceReport { checks, elapsed: start.elapsed() }
}

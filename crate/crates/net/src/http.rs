//! Blocking HTTP plumbing shared by the clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use snowball_core::generator::RetryPolicy;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Outcome of one HTTP exchange that reached the server, or the transport error.
#[derive(Debug)]
pub(crate) enum Reply {
    Status(u16, String),
    Transport(String),
}

impl Reply {
    /// 5xx gateway and availability codes, and transport failures, are worth retrying.
    pub fn retryable(&self) -> bool {
        match self {
            Reply::Transport(_) => true,
            Reply::Status(s, _) => matches!(s, 502..=504),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Reply::Transport(e) => e.clone(),
            Reply::Status(s, body) => format!("HTTP {s}: {}", error_text(body)),
        }
    }
}

/// The `error` field of an error body, or the raw body.
pub(crate) fn error_text(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or_else(|| body.trim().to_string())
}

/// Counting semaphore bounding concurrent requests from one client.
pub(crate) struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a>(&'a InFlight);

impl InFlight {
    pub fn new(cap: usize) -> Self {
        InFlight { cap: cap.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) struct Http {
    agent: ureq::Agent,
    bearer: Option<String>,
    pub retry: RetryPolicy,
    in_flight: InFlight,
}

impl Http {
    pub fn new(retry: RetryPolicy, timeout: Duration, max_in_flight: usize, bearer: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Http { agent, bearer, retry, in_flight: InFlight::new(max_in_flight) }
    }

    fn once(&self, url: &str, body: Option<&str>) -> Reply {
        let _permit = self.in_flight.acquire();
        let result = match body {
            Some(b) => {
                let mut req = self.agent.post(url).header("content-type", "application/json");
                if let Some(t) = &self.bearer {
                    req = req.header("authorization", format!("Bearer {t}"));
                }
                req.send(b)
            }
            None => {
                let mut req = self.agent.get(url);
                if let Some(t) = &self.bearer {
                    req = req.header("authorization", format!("Bearer {t}"));
                }
                req.call()
            }
        };
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match resp.body_mut().read_to_string() {
                    Ok(text) => Reply::Status(status, text),
                    Err(e) => Reply::Transport(e.to_string()),
                }
            }
            Err(e) => Reply::Transport(e.to_string()),
        }
    }

    /// Sends with retries. `Ok` carries any status that is not retryable; `Err` carries
    /// the last retryable reply and the number of attempts made.
    pub fn send(&self, url: &str, body: Option<&str>) -> Result<(u16, String), (Reply, u32)> {
        self.retry
            .run(
                || match self.once(url, body) {
                    r if r.retryable() => Err(r),
                    Reply::Status(s, b) => Ok((s, b)),
                    r @ Reply::Transport(_) => Err(r),
                },
                Reply::retryable,
            )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn in_flight_cap_holds() {
        let gate = Arc::new(InFlight::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let (gate, live, peak) = (gate.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn error_text_prefers_error_field() {
        assert_eq!(error_text(r#"{"error":"boom"}"#), "boom");
        assert_eq!(error_text("plain\n"), "plain");
    }
}

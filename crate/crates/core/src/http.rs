//! Blocking JSON-over-HTTP with bounded retries, shared by the remote
//! embedding and chat-completion clients.

use std::thread;
use std::time::Duration;

use serde_json::Value;
use ureq::Agent;

use crate::{Error, Result};

const BODY_EXCERPT: usize = 256;

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: Agent,
    timeout: Duration,
    max_retries: u32,
    backoff: Duration,
    headers: Vec<(String, String)>,
}

impl JsonClient {
    pub(crate) fn new(timeout: Duration, max_retries: u32) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            timeout,
            max_retries,
            backoff: Duration::from_millis(100),
            headers: Vec::new(),
        }
    }

    pub(crate) fn with_header(mut self, name: &str, value: String) -> Self {
        self.headers.push((name.to_string(), value));
        self
    }

    #[cfg(test)]
    pub(crate) fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// POSTs `body`, retrying transport errors, timeouts, 429 and 5xx with
    /// exponential backoff. Other statuses fail immediately.
    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let payload = serde_json::to_vec(body).expect("json values always serialize");
        let mut attempt = 0;
        loop {
            match self.post_once(url, &payload) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_retries && retryable(&e) => {
                    log::debug!("retrying {url} after error: {e}");
                    thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, url: &str, payload: &[u8]) -> Result<Value> {
        let mut req = self.agent.post(url).header("content-type", "application/json");
        for (k, v) in &self.headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(payload).map_err(|e| self.map_err(e))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.map_err(e))?;
        if !(200..300).contains(&status) {
            return Err(Error::HttpStatus {
                status,
                body: excerpt(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(e.to_string()))
    }

    fn map_err(&self, e: ureq::Error) -> Error {
        match e {
            ureq::Error::Timeout(_) => Error::Timeout(self.timeout),
            other => Error::Transport(other.to_string()),
        }
    }
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Transport(_) | Error::Timeout(_) => true,
        Error::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// A throwaway single-threaded HTTP server for exercising the clients.
#[cfg(test)]
pub(crate) mod testing {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    pub(crate) struct Served {
        pub url: String,
        pub requests: Arc<Mutex<Vec<String>>>,
        _handle: JoinHandle<()>,
    }

    /// Serves the given `(status, body)` responses in order, one per connection,
    /// recording each request body.
    pub(crate) fn serve(responses: Vec<(u16, String)>) -> Served {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            content_length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut buf = vec![0u8; content_length];
                let _ = reader.read_exact(&mut buf);
                log.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Served {
            url,
            requests,
            _handle: handle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::serve;
    use super::*;

    #[test]
    fn retries_server_errors_then_succeeds() {
        let served = serve(vec![
            (503, "busy".into()),
            (200, r#"{"ok":true}"#.into()),
        ]);
        let client = JsonClient::new(Duration::from_secs(5), 2).with_backoff(Duration::from_millis(1));
        let v = client.post(&served.url, &serde_json::json!({"x": 1})).unwrap();
        assert_eq!(v["ok"], true);
        assert_eq!(served.requests.lock().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let served = serve(vec![(400, "bad request".into()), (200, "{}".into())]);
        let client = JsonClient::new(Duration::from_secs(5), 2).with_backoff(Duration::from_millis(1));
        let err = client.post(&served.url, &serde_json::json!({})).unwrap_err();
        assert!(matches!(err, Error::HttpStatus { status: 400, .. }));
    }

    #[test]
    fn long_bodies_are_truncated() {
        let long = "x".repeat(1000);
        let e = excerpt(&long);
        assert!(e.len() < 300 && e.ends_with("..."));
    }
}

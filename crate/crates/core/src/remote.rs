//! Client for the sentence-embedding service.
//!
//! Wire protocol: `POST /embed` with `{"texts": [..]}` answers
//! `{"dim": n, "vectors": [[..], ..]}`; `GET /info` answers
//! `{"dim": n, "model": tag}`. The service does the encoding and pooling;
//! this side only transports and validates.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub dim: usize,
    pub model: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    agent: ureq::Agent,
    max_retries: u32,
    backoff: Duration,
    expected_dim: Option<usize>,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            max_retries: 3,
            backoff: Duration::from_millis(200),
            expected_dim: None,
        }
    }

    /// Transport failures and 5xx answers are retried this many times.
    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    /// Dimension of the local store the vectors are destined for. Any
    /// disagreement with the service is a hard error.
    pub fn expecting_dim(mut self, dim: usize) -> Self {
        self.expected_dim = Some(dim);
        self
    }

    fn with_retry<T>(&self, mut f: impl FnMut() -> Result<Attempt<T>>) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt);
            }
            match f()? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::Remote(format!(
            "{} failed after {} attempts: {last}",
            self.endpoint,
            self.max_retries + 1
        )))
    }

    pub fn info(&self) -> Result<ServiceInfo> {
        let url = format!("{}/info", self.endpoint);
        let info: ServiceInfo = self.with_retry(|| {
            let mut resp = match self.agent.get(&url).call() {
                Ok(r) => r,
                Err(e) => return Ok(Attempt::Retry(e.to_string())),
            };
            let status = resp.status().as_u16();
            if status >= 500 {
                return Ok(Attempt::Retry(format!("HTTP {status}")));
            }
            if status != 200 {
                return Err(Error::Remote(format!("GET /info returned HTTP {status}")));
            }
            let info = resp
                .body_mut()
                .read_json()
                .map_err(|e| Error::Remote(format!("GET /info: malformed body: {e}")))?;
            Ok(Attempt::Done(info))
        })?;
        self.check_dim(info.dim)?;
        Ok(info)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self.expected_dim {
            Some(expected) if expected != dim => Err(Error::dim("embedding service vs local store", expected, dim)),
            _ if dim == 0 => Err(Error::Remote("service declared dim 0".into())),
            _ => Ok(()),
        }
    }

    /// One vector per text, in input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let url = format!("{}/embed", self.endpoint);
        let body = EmbedRequest { texts };
        let resp: EmbedResponse = self.with_retry(|| {
            let mut resp = match self.agent.post(&url).send_json(&body) {
                Ok(r) => r,
                Err(e) => return Ok(Attempt::Retry(e.to_string())),
            };
            let status = resp.status().as_u16();
            if status >= 500 {
                return Ok(Attempt::Retry(format!("HTTP {status}")));
            }
            if status != 200 {
                let msg = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Error::Remote(format!("POST /embed returned HTTP {status}: {msg}")));
            }
            let parsed = resp
                .body_mut()
                .with_config()
                .limit(u64::MAX)
                .read_json()
                .map_err(|e| Error::Remote(format!("POST /embed: malformed body: {e}")))?;
            Ok(Attempt::Done(parsed))
        })?;

        self.check_dim(resp.dim)?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Remote(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != resp.dim {
                    return Err(Error::dim(format!("vector {i} from service"), resp.dim, v.len()));
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

/// Embeds `texts` in batches of `batch_size`, preserving input order.
pub fn fetch_remote(
    endpoint: &str,
    texts: &[String],
    batch_size: usize,
    expected_dim: Option<usize>,
) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut client = RemoteEmbedder::new(endpoint);
    if let Some(d) = expected_dim {
        client = client.expecting_dim(d);
    }
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size) {
        out.extend(client.embed(chunk)?);
    }
    Ok(out)
}

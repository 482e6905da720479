//! HTTP implementations of the backend roles, speaking the dominant open
//! completion/embedding API shapes so served models plug in without
//! adapters. The image-embedding sidecar contract (`/embed/image`) is
//! ours: no standard exists for served image encoders.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use crate::backends::{ChatBackend, ChatMessage, ChatParams, EmbeddingBackend, ImageBackend, VisionBackend};
use crate::error::{Error, Result};

/// Two retries with exponential backoff, per the backend contract.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_backoff_ms: 250,
        }
    }
}

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .expect("http client builds")
}

/// POSTs a JSON body, retrying on transport errors and non-2xx statuses.
fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    retry: &RetryPolicy,
) -> Result<Value> {
    let mut last: Option<Error> = None;
    for attempt in 0..=retry.max_retries {
        if attempt > 0 {
            let backoff = retry.base_backoff_ms << (attempt - 1);
            std::thread::sleep(Duration::from_millis(backoff));
            log::warn!("retrying {url} (attempt {})", attempt + 1);
        }
        let mut request = client.post(url).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }
        match request.send() {
            Err(e) => last = Some(Error::backend(format!("transport failure: {e}"))),
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    return response
                        .json()
                        .map_err(|e| Error::backend(format!("malformed response body: {e}")));
                }
                let text = response.text().unwrap_or_default();
                last = Some(Error::backend_status(
                    status.as_u16(),
                    format!("{url} returned {status}: {text}"),
                ));
            }
        }
    }
    Err(last.expect("at least one attempt ran"))
}

fn require_key(api_key: &Option<String>, role: &str) -> Result<String> {
    api_key.clone().ok_or_else(|| {
        Error::InvalidConfig(format!(
            "no credential configured for the {role} backend; set CONCEPTLOOP_API_KEY"
        ))
    })
}

/// Chat completion client for `{base}/v1/chat/completions`.
pub struct HttpChat {
    base: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpChat {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            client: client(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String> {
        let key = require_key(&self.api_key, "chat")?;
        let mut body = json!({
            "model": self.model,
            "messages": messages
                .iter()
                .map(|m| json!({"role": m.role, "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let url = format!("{}/v1/chat/completions", self.base);
        let response = post_json(&self.client, &url, Some(&key), &body, &self.retry)?;
        response["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::backend("chat response carries no message content"))
    }
}

/// Embedding client: texts via `{base}/v1/embeddings`, images via the
/// `{base}/embed/image` sidecar contract.
pub struct HttpEmbedding {
    base: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    dimension: AtomicUsize,
}

impl HttpEmbedding {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            client: client(),
            dimension: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Dimension inconsistency across a batch is a backend bug, fatal.
    fn check_dimensions(&self, vectors: &[Vec<f64>]) -> Result<()> {
        for v in vectors {
            let d = v.len();
            let known = match self
                .dimension
                .compare_exchange(0, d, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => d,
                Err(existing) => existing,
            };
            if known != d {
                return Err(Error::backend(format!(
                    "embedding dimension changed from {known} to {d} within one backend"
                )));
            }
        }
        Ok(())
    }
}

impl EmbeddingBackend for HttpEmbedding {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let key = require_key(&self.api_key, "embedding")?;
        let body = json!({"model": self.model, "input": texts});
        let url = format!("{}/v1/embeddings", self.base);
        let response = post_json(&self.client, &url, Some(&key), &body, &self.retry)?;
        let data = response["data"]
            .as_array()
            .ok_or_else(|| Error::backend("embedding response carries no data array"))?;
        if data.len() != texts.len() {
            return Err(Error::backend(format!(
                "embedding response holds {} entries for {} inputs",
                data.len(),
                texts.len()
            )));
        }
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (fallback_index, entry) in data.iter().enumerate() {
            let index = entry["index"].as_u64().map(|i| i as usize).unwrap_or(fallback_index);
            let values: Vec<f64> = entry["embedding"]
                .as_array()
                .ok_or_else(|| Error::backend("embedding entry carries no vector"))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| Error::backend("non-numeric embedding value")))
                .collect::<Result<_>>()?;
            indexed.push((index, values));
        }
        indexed.sort_by_key(|(i, _)| *i);
        let vectors: Vec<Vec<f64>> = indexed.into_iter().map(|(_, v)| v).collect();
        self.check_dimensions(&vectors)?;
        Ok(vectors)
    }

    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let key = require_key(&self.api_key, "embedding")?;
        let images_b64: Vec<String> = images.iter().map(|b| BASE64.encode(b)).collect();
        let body = json!({"images_b64": images_b64});
        let url = format!("{}/embed/image", self.base);
        let response = post_json(&self.client, &url, Some(&key), &body, &self.retry)?;
        let rows = response["embeddings"]
            .as_array()
            .ok_or_else(|| Error::backend("image embedding response carries no embeddings"))?;
        if rows.len() != images.len() {
            return Err(Error::backend(format!(
                "image embedding response holds {} entries for {} inputs",
                rows.len(),
                images.len()
            )));
        }
        let vectors: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| Error::backend("image embedding row is not an array"))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| Error::backend("non-numeric embedding value")))
                    .collect()
            })
            .collect::<Result<_>>()?;
        self.check_dimensions(&vectors)?;
        Ok(vectors)
    }

    fn dimension(&self) -> usize {
        self.dimension.load(Ordering::SeqCst)
    }
}

/// Image generation client for `{base}/v1/images/generations`.
pub struct HttpImage {
    base: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpImage {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            client: client(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl ImageBackend for HttpImage {
    fn generate(&self, prompt: &str, seed: u64) -> Result<Vec<u8>> {
        let key = require_key(&self.api_key, "image")?;
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "n": 1,
            "seed": seed,
            "response_format": "b64_json",
        });
        let url = format!("{}/v1/images/generations", self.base);
        let response = post_json(&self.client, &url, Some(&key), &body, &self.retry)?;
        let b64 = response["data"][0]["b64_json"]
            .as_str()
            .ok_or_else(|| Error::backend("image response carries no b64_json payload"))?;
        BASE64
            .decode(b64)
            .map_err(|e| Error::backend(format!("undecodable image payload: {e}")))
    }
}

/// Vision-chat client: multimodal chat completion with an inline image,
/// used by the captioning and judge metrics.
pub struct HttpVision {
    base: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpVision {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            client: client(),
        }
    }
}

impl VisionBackend for HttpVision {
    fn describe(&self, image: &[u8], instruction: &str) -> Result<String> {
        let key = require_key(&self.api_key, "vision")?;
        let data_uri = format!("data:image/png;base64,{}", BASE64.encode(image));
        let body = json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": instruction},
                    {"type": "image_url", "image_url": {"url": data_uri}},
                ],
            }],
            "max_tokens": 512,
        });
        let url = format!("{}/v1/chat/completions", self.base);
        let response = post_json(&self.client, &url, Some(&key), &body, &self.retry)?;
        response["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::backend("vision response carries no message content"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 2,
            base_backoff_ms: 5,
        }
    }

    /// Accepts one connection per scripted response and returns the raw
    /// request bodies it saw.
    fn serve_script(
        listener: TcpListener,
        responses: Vec<(u16, String)>,
    ) -> thread::JoinHandle<Vec<String>> {
        thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(rest) = lower.strip_prefix("content-length:") {
                        content_length = rest.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let response = format!(
                    "HTTP/1.1 {status} X\r\ncontent-length: {}\r\ncontent-type: application/json\r\nconnection: close\r\n\r\n{body}",
                    body.len(),
                );
                let mut stream = stream;
                stream.write_all(response.as_bytes()).unwrap();
            }
            bodies
        })
    }

    fn local(listener: &TcpListener) -> String {
        format!("http://{}", listener.local_addr().unwrap())
    }

    #[test]
    fn chat_round_trip_fixture() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let reply = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "1. a blue pizza"}}]
        });
        let handle = serve_script(listener, vec![(200, reply.to_string())]);

        let chat = HttpChat::new(&base, "test-model", Some("k".into())).with_retry(fast_retry());
        let out = chat
            .complete(
                &[ChatMessage {
                    role: "user".into(),
                    content: "hello".into(),
                }],
                &ChatParams {
                    temperature: 1.0,
                    max_tokens: 16,
                    seed: Some(7),
                },
            )
            .unwrap();
        assert_eq!(out, "1. a blue pizza");

        let bodies = handle.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["seed"], 7);
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn chat_retries_on_500_then_succeeds() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let ok = serde_json::json!({
            "choices": [{"message": {"content": "fine"}}]
        });
        let handle = serve_script(
            listener,
            vec![(500, "{}".to_string()), (200, ok.to_string())],
        );

        let chat = HttpChat::new(&base, "m", Some("k".into())).with_retry(fast_retry());
        let out = chat
            .complete(
                &[ChatMessage {
                    role: "user".into(),
                    content: "x".into(),
                }],
                &ChatParams {
                    temperature: 0.0,
                    max_tokens: 8,
                    seed: None,
                },
            )
            .unwrap();
        assert_eq!(out, "fine");
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn missing_credential_fails_before_any_network_call() {
        // Endpoint points nowhere; a config error must come back without
        // a connection attempt (a transport error would be Backend).
        let chat = HttpChat::new("http://127.0.0.1:1", "m", None);
        let err = chat
            .complete(
                &[ChatMessage {
                    role: "user".into(),
                    content: "x".into(),
                }],
                &ChatParams {
                    temperature: 0.0,
                    max_tokens: 8,
                    seed: None,
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err:?}");
    }

    #[test]
    fn embed_text_round_trip_sorts_by_index() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let reply = serde_json::json!({
            "data": [
                {"index": 1, "embedding": [0.0, 1.0]},
                {"index": 0, "embedding": [1.0, 0.0]},
            ]
        });
        let handle = serve_script(listener, vec![(200, reply.to_string())]);

        let embed = HttpEmbedding::new(&base, "m", Some("k".into())).with_retry(fast_retry());
        let out = embed
            .embed_texts(&["a".to_string(), "b".to_string()])
            .unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(embed.dimension(), 2);
        handle.join().unwrap();
    }

    #[test]
    fn embed_empty_input_is_empty_without_network() {
        let embed = HttpEmbedding::new("http://127.0.0.1:1", "m", Some("k".into()));
        assert!(embed.embed_texts(&[]).unwrap().is_empty());
        assert!(embed.embed_images(&[]).unwrap().is_empty());
    }

    #[test]
    fn embed_length_mismatch_is_fatal() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let reply = serde_json::json!({"data": [{"index": 0, "embedding": [1.0]}]});
        let handle = serve_script(listener, vec![(200, reply.to_string())]);
        let embed = HttpEmbedding::new(&base, "m", Some("k".into())).with_retry(RetryPolicy {
            max_retries: 0,
            base_backoff_ms: 1,
        });
        let err = embed
            .embed_texts(&["a".to_string(), "b".to_string()])
            .unwrap_err();
        assert!(matches!(err, Error::Backend { .. }));
        handle.join().unwrap();
    }

    #[test]
    fn embed_dimension_inconsistency_is_fatal() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let reply = serde_json::json!({
            "data": [
                {"index": 0, "embedding": [1.0, 0.0]},
                {"index": 1, "embedding": [1.0]},
            ]
        });
        let handle = serve_script(listener, vec![(200, reply.to_string())]);
        let embed = HttpEmbedding::new(&base, "m", Some("k".into())).with_retry(RetryPolicy {
            max_retries: 0,
            base_backoff_ms: 1,
        });
        let err = embed
            .embed_texts(&["a".to_string(), "b".to_string()])
            .unwrap_err();
        assert!(matches!(err, Error::Backend { .. }));
        handle.join().unwrap();
    }

    #[test]
    fn image_generation_decodes_b64_and_forwards_seed() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let payload = BASE64.encode(b"fake image bytes");
        let reply = serde_json::json!({"data": [{"b64_json": payload}]});
        let handle = serve_script(listener, vec![(200, reply.to_string())]);

        let image = HttpImage::new(&base, "m", Some("k".into())).with_retry(fast_retry());
        let bytes = image.generate("a blue pizza", 99).unwrap();
        assert_eq!(bytes, b"fake image bytes");

        let bodies = handle.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["seed"], 99);
        assert_eq!(body["n"], 1);
        assert_eq!(body["response_format"], "b64_json");
    }

    #[test]
    fn image_embed_sidecar_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = local(&listener);
        let reply = serde_json::json!({"embeddings": [[0.5, 0.5, 0.0]]});
        let handle = serve_script(listener, vec![(200, reply.to_string())]);

        let embed = HttpEmbedding::new(&base, "m", Some("k".into())).with_retry(fast_retry());
        let out = embed.embed_images(&[b"bytes".to_vec()]).unwrap();
        assert_eq!(out, vec![vec![0.5, 0.5, 0.0]]);

        let bodies = handle.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["images_b64"][0], BASE64.encode(b"bytes"));
    }
}

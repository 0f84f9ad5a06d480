use std::time::Duration;

use serde_json::{json, Value};

use super::remote::{agent, bearer, map_ureq};
use super::{BackendError, Embedder};
use crate::audit::recall::tokenize;
use crate::audit::stem::stem;

pub const DEFAULT_HASH_DIMENSION: usize = 256;

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "because", "been", "before",
    "being", "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her",
    "here", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "me", "more", "my", "no", "not", "now",
    "of", "on", "or", "our", "out", "over", "she", "so", "some", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "those", "to", "too", "up", "us", "very", "was", "we", "were", "what", "when",
    "which", "while", "who", "why", "will", "with", "would", "you", "your",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing over stemmed content words.
///
/// Texts that share vocabulary get a positive cosine; texts with disjoint
/// vocabularies land near zero. Deterministic across processes.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dimension: usize,
    name: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIMENSION).expect("default dimension is valid")
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, BackendError> {
        if dimension == 0 {
            return Err(BackendError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dimension, name: format!("hash-fnv1a-{dimension}") })
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for tok in tokenize(text).filter(|t| !STOPWORDS.contains(&t.as_str())) {
            self.add(&mut v, &stem(&tok));
        }
        if v.iter().all(|x| *x == 0.0) {
            // Only stopwords, or empty: hash the whole text so the vector is never zero.
            self.add(&mut v, text);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn add(&self, v: &mut [f64], feature: &str) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.dimension as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[idx] += sign;
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embeddings over HTTP. Sends `{"model", "input": [..]}` and accepts either
/// `{"data": [{"embedding": [..]}, ..]}` or `{"embeddings": [[..], ..]}`.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    dimension: usize,
    api_key_env: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(
        url: String,
        model: String,
        dimension: usize,
        api_key_env: Option<String>,
        timeout_ms: u64,
    ) -> Result<Self, BackendError> {
        if dimension == 0 {
            return Err(BackendError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { url, model, dimension, api_key_env, agent: agent(Duration::from_millis(timeout_ms)) })
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = bearer(self.api_key_env.as_deref())? {
            req = req.header("Authorization", &token);
        }
        let mut resp = req.send_json(json!({ "model": self.model, "input": texts })).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let body: String = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if status >= 400 {
            return Err(BackendError::Http { status, body });
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Parse { message: e.to_string(), raw: body.clone() })?;
        let rows: Vec<&Value> = if let Some(data) = value.get("data").and_then(Value::as_array) {
            data.iter().filter_map(|d| d.get("embedding")).collect()
        } else if let Some(e) = value.get("embeddings").and_then(Value::as_array) {
            e.iter().collect()
        } else {
            return Err(BackendError::Parse { message: "no embeddings in response".into(), raw: body });
        };
        if rows.len() != texts.len() {
            return Err(BackendError::Parse {
                message: format!("expected {} vectors, got {}", texts.len(), rows.len()),
                raw: body,
            });
        }
        rows.into_iter()
            .map(|row| {
                let v: Vec<f64> = row
                    .as_array()
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default();
                if v.len() != self.dimension {
                    return Err(BackendError::Parse {
                        message: format!("vector has dimension {}, expected {}", v.len(), self.dimension),
                        raw: body.clone(),
                    });
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(BackendError::Parse { message: "zero vector".into(), raw: body.clone() });
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::cosine;

    #[test]
    fn vectors_are_unit_length_and_deterministic() {
        let e = HashEmbedder::default();
        let texts = vec!["Set velocity to 4 m/s".to_string(), "Set velocity to 4 m/s".to_string(), "the".to_string(), String::new()];
        let vs = e.embed(&texts).unwrap();
        assert_eq!(vs[0], vs[1]);
        for v in &vs {
            assert_eq!(v.len(), 256);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shared_vocabulary_gives_positive_cosine() {
        let e = HashEmbedder::default();
        let a = e.embed_one("the students initialized velocity before the loop");
        let b = e.embed_one("ask how velocity initialization relates to the loop");
        assert!(cosine(&a, &b).unwrap() > 0.3);
    }
}

//! Item retrieval: embedders, the exhaustive cosine index, and hard/soft condition composition.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, QueryExpr};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding item {id}: {source}")]
    Item { id: String, source: Box<RetrievalError> },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("request needs a hard or soft condition and k >= 1")]
    InvalidRequest,
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding is not finite or has zero norm")]
    Degenerate,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error {status}: {body}")]
    Remote { status: u16, body: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// Unit-norm vector of finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length; rejects non-finite or all-zero input.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Degenerate);
        }
        let norm = values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(RetrievalError::Degenerate);
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt()
    }

    /// Dot product accumulated in f64; equals cosine similarity for unit vectors.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>().clamp(-1.0, 1.0)
    }
}

pub trait Embedder: Send + Sync {
    /// Identifies the model, recorded in indices built with it.
    fn descriptor(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed character-trigram embedder. Text is wrapped as `^text$`, each trigram is hashed
/// with FNV-1a into one of `dim` buckets, and the count vector is L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw (unnormalized) bucket counts.
    pub fn counts(&self, text: &str) -> Vec<f32> {
        let wrapped: Vec<char> = format!("^{text}$").chars().collect();
        let mut counts = vec![0f32; self.dim];
        let mut buf = [0u8; 12];
        for w in wrapped.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            counts[(fnv1a64(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        counts
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl Embedder for TrigramEmbedder {
    fn descriptor(&self) -> String {
        format!("trigram-fnv1a-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        EmbeddingVector::normalized(self.counts(text))
    }
}

/// Embedder served over HTTP: POST `{"input":[...]}` returning `{"embeddings":[[...],...]}`.
pub struct HttpEmbedder {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { url: url.into(), api_key, agent }
    }
}

impl Embedder for HttpEmbedder {
    fn descriptor(&self) -> String {
        format!("http:{}", self.url)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or(RetrievalError::Degenerate)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp =
            req.send_json(EmbedRequest { input: texts }).map_err(|e| RetrievalError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(RetrievalError::Remote { status, body });
        }
        let parsed: EmbedResponse =
            resp.body_mut().read_json().map_err(|e| RetrievalError::Transport(e.to_string()))?;
        if parsed.embeddings.len() != texts.len() {
            return Err(RetrievalError::Transport(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.embeddings.len()
            )));
        }
        parsed.embeddings.into_iter().map(EmbeddingVector::normalized).collect()
    }
}

/// Exhaustive cosine index over every catalog item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemIndex {
    pub embedder: String,
    pub dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

impl ItemIndex {
    pub fn build(catalog: &Catalog, embedder: &dyn Embedder) -> Result<Self> {
        if catalog.is_empty() {
            return Err(RetrievalError::EmptyCatalog);
        }
        let mut ids = Vec::with_capacity(catalog.len());
        let mut vectors = Vec::with_capacity(catalog.len());
        for item in catalog.items() {
            let v = embedder
                .embed(&catalog.item_text(item))
                .map_err(|e| RetrievalError::Item { id: item.id.clone(), source: Box::new(e) })?;
            ids.push(item.id.clone());
            vectors.push(v);
        }
        let dim = vectors[0].dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(RetrievalError::Dimension { expected: dim, got: bad.dim() });
        }
        Ok(Self { embedder: embedder.descriptor(), dim, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, id: &str) -> Option<&EmbeddingVector> {
        self.ids.iter().position(|x| x == id).map(|i| &self.vectors[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Scores every indexed item against `query`, sorted by score descending then id ascending.
    pub fn scan(&self, query: &EmbeddingVector) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = self.entries().map(|(id, v)| (id.to_string(), query.cosine(v))).collect();
        sort_scored(&mut scored);
        scored
    }
}

pub(crate) fn sort_scored(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
}

/// Top-k items by cosine similarity to `query`; ties go to the smaller id.
pub fn search_soft(index: &ItemIndex, embedder: &dyn Embedder, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(RetrievalError::InvalidRequest);
    }
    let q = embedder.embed(query)?;
    let mut scored = index.scan(&q);
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRequest {
    pub hard: Option<QueryExpr>,
    pub soft: Option<String>,
    pub k: usize,
}

/// Hard conditions strictly pre-filter; soft conditions rank by cosine.
pub fn retrieve(
    catalog: &Catalog,
    index: &ItemIndex,
    embedder: &dyn Embedder,
    req: &RetrievalRequest,
) -> Result<Vec<String>> {
    if req.k == 0 || (req.hard.is_none() && req.soft.is_none()) {
        return Err(RetrievalError::InvalidRequest);
    }
    match (&req.hard, &req.soft) {
        (Some(hard), None) => {
            hard.validate(catalog)?;
            let mut ids = catalog.run_query(hard)?;
            ids.truncate(req.k);
            Ok(ids)
        }
        (None, Some(soft)) => Ok(search_soft(index, embedder, soft, req.k)?.into_iter().map(|(id, _)| id).collect()),
        (Some(hard), Some(soft)) => {
            hard.validate(catalog)?;
            let q = embedder.embed(soft)?;
            let survivors = catalog.run_query(hard)?;
            let vectors: BTreeMap<&str, &EmbeddingVector> = index.entries().collect();
            let mut scored: Vec<(String, f64)> = survivors
                .into_iter()
                .map(|id| {
                    let s = vectors.get(id.as_str()).map_or(-1.0, |v| q.cosine(v));
                    (id, s)
                })
                .collect();
            sort_scored(&mut scored);
            Ok(scored.into_iter().take(req.k).map(|(id, _)| id).collect())
        }
        (None, None) => unreachable!(),
    }
}

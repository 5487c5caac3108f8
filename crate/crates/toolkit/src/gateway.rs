//! Cache-aware, retrying, rate-limited access to a chat provider.
//!
//! A [`Gateway`] wraps one [`Provider`] and is what pipelines see as their
//! [`ChatBackend`]. Clones made with [`Gateway::namespaced`] share the
//! provider, limiter, counters and cache directory but read and write a
//! separate cache namespace.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime};

use m3cot_core::chat::{BackendError, ChatBackend, ChatRequest, ChatResponse, FinishReason, ImageRef, ImageSource};
use serde::{Deserialize, Serialize};

use crate::cache::{CacheEntry, ResponseCache};
use crate::fingerprint::{fingerprint_with, image_digest};

/// How a provider call failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Worth retrying: timeouts, 408, 429, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error(transparent)]
    Fatal(BackendError),
}

pub trait Provider: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).send(request)
    }
}

/// Adapts a closure into a [`Provider`].
pub struct FnProvider<F>(pub F);

impl<F> Provider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ProviderError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff_ms: 500, max_backoff_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `k` (0-based): `min(base * 2^k, max)`.
    pub fn delay(&self, k: u32) -> Duration {
        let factor = 1u64.checked_shl(k).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateLimit {
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self { max_in_flight: 4, min_interval_ms: 0 }
    }
}

struct LimiterState {
    in_flight: usize,
    peak: usize,
    last_start: Option<Instant>,
}

struct Limiter {
    limit: RateLimit,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.0.state.lock().unwrap().in_flight -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    fn new(limit: RateLimit) -> Self {
        Self { limit, state: Mutex::new(LimiterState { in_flight: 0, peak: 0, last_start: None }), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let interval = Duration::from_millis(self.limit.min_interval_ms);
        let mut s = self.state.lock().unwrap();
        loop {
            if s.in_flight >= self.limit.max_in_flight.max(1) {
                s = self.freed.wait(s).unwrap();
                continue;
            }
            if let Some(last) = s.last_start {
                let ready = last + interval;
                let now = Instant::now();
                if now < ready {
                    s = self.freed.wait_timeout(s, ready - now).unwrap().0;
                    continue;
                }
            }
            break;
        }
        s.in_flight += 1;
        s.peak = s.peak.max(s.in_flight);
        s.last_start = Some(Instant::now());
        Permit(self)
    }
}

/// One provider attempt, as recorded for retry accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attempt {
    pub fingerprint: String,
    /// 1-based attempt number within the call.
    pub attempt: u32,
    pub ok: bool,
    pub error: Option<String>,
    /// Backoff slept after this attempt, if any.
    pub backoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    /// Logical calls that reached the provider (cache misses).
    pub provider_calls: u64,
    pub attempts: u64,
    pub cache_hits: u64,
    pub peak_in_flight: usize,
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

struct Shared {
    provider: Box<dyn Provider>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: Limiter,
    ceiling: Option<u64>,
    provider_calls: AtomicU64,
    cache_hits: AtomicU64,
    attempts: Mutex<Vec<Attempt>>,
    image_digests: Mutex<HashMap<(String, u64, Option<SystemTime>), [u8; 32]>>,
    sleep: Box<Sleeper>,
}

#[derive(Clone)]
pub struct Gateway {
    shared: Arc<Shared>,
    namespace: Option<String>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("cache", &self.shared.cache.as_ref().map(|c| c.root().to_path_buf()))
            .field("namespace", &self.namespace)
            .field("retry", &self.shared.retry)
            .field("ceiling", &self.shared.ceiling)
            .finish()
    }
}

pub struct GatewayBuilder {
    provider: Box<dyn Provider>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    rate: RateLimit,
    ceiling: Option<u64>,
    sleep: Box<Sleeper>,
}

impl GatewayBuilder {
    pub fn cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache = dir.map(ResponseCache::new);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn rate_limit(mut self, rate: RateLimit) -> Self {
        self.rate = rate;
        self
    }

    pub fn call_ceiling(mut self, ceiling: Option<u64>) -> Self {
        self.ceiling = ceiling;
        self
    }

    /// Replace the backoff sleep, e.g. with a no-op in tests.
    pub fn sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            shared: Arc::new(Shared {
                provider: self.provider,
                cache: self.cache,
                retry: self.retry,
                limiter: Limiter::new(self.rate),
                ceiling: self.ceiling,
                provider_calls: AtomicU64::new(0),
                cache_hits: AtomicU64::new(0),
                attempts: Mutex::new(Vec::new()),
                image_digests: Mutex::new(HashMap::new()),
                sleep: self.sleep,
            }),
            namespace: None,
        }
    }
}

impl Gateway {
    pub fn builder(provider: impl Provider + 'static) -> GatewayBuilder {
        GatewayBuilder {
            provider: Box::new(provider),
            cache: None,
            retry: RetryPolicy::default(),
            rate: RateLimit::default(),
            ceiling: None,
            sleep: Box::new(std::thread::sleep),
        }
    }

    /// No cache, no backoff sleeping, default limits.
    pub fn plain(provider: impl Provider + 'static) -> Self {
        Self::builder(provider).sleeper(|_| {}).build()
    }

    pub fn namespaced(&self, namespace: impl Into<String>) -> Self {
        Self { shared: Arc::clone(&self.shared), namespace: Some(namespace.into()) }
    }

    pub fn namespace(&self) -> Option<&str> {
        self.namespace.as_deref()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.shared.cache.as_ref()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.shared.retry
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_calls: self.shared.provider_calls.load(Ordering::SeqCst),
            attempts: self.shared.attempts.lock().unwrap().len() as u64,
            cache_hits: self.shared.cache_hits.load(Ordering::SeqCst),
            peak_in_flight: self.shared.limiter.state.lock().unwrap().peak,
        }
    }

    pub fn attempts(&self) -> Vec<Attempt> {
        self.shared.attempts.lock().unwrap().clone()
    }

    /// Fingerprint with file digests memoized on (path, size, mtime).
    pub fn fingerprint(&self, request: &ChatRequest) -> Result<String, BackendError> {
        fingerprint_with(request, |image| self.image_digest(image))
    }

    fn image_digest(&self, image: &ImageRef) -> Result<[u8; 32], BackendError> {
        if image.source != ImageSource::LocalPath {
            return image_digest(image);
        }
        let meta = std::fs::metadata(&image.value)
            .map_err(|e| BackendError::ImageUnreadable(format!("{}: {e}", image.value)))?;
        let key = (image.value.clone(), meta.len(), meta.modified().ok());
        if let Some(d) = self.shared.image_digests.lock().unwrap().get(&key) {
            return Ok(*d);
        }
        let d = image_digest(image)?;
        self.shared.image_digests.lock().unwrap().insert(key, d);
        Ok(d)
    }

    fn reserve_call(&self) -> Result<(), BackendError> {
        let counter = &self.shared.provider_calls;
        match self.shared.ceiling {
            None => {
                counter.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(ceiling) => counter
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < ceiling).then_some(n + 1))
                .map(|_| ())
                .map_err(|_| BackendError::BudgetExceeded { ceiling }),
        }
    }

    fn send_with_retry(&self, request: &ChatRequest, fp: &str) -> Result<ChatResponse, BackendError> {
        let retry = self.shared.retry;
        let max = retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max {
            let result = {
                let _permit = self.shared.limiter.acquire();
                self.shared.provider.send(request)
            };
            let mut record = Attempt { fingerprint: fp.to_string(), attempt, ok: false, error: None, backoff_ms: None };
            match result {
                Ok(response) => {
                    record.ok = true;
                    self.shared.attempts.lock().unwrap().push(record);
                    return Ok(response);
                }
                Err(ProviderError::Fatal(e)) => {
                    record.error = Some(e.to_string());
                    self.shared.attempts.lock().unwrap().push(record);
                    return Err(e);
                }
                Err(ProviderError::Transient(msg)) => {
                    record.error = Some(msg.clone());
                    last_error = msg;
                    let delay = (attempt < max).then(|| retry.delay(attempt - 1));
                    record.backoff_ms = delay.map(|d| d.as_millis() as u64);
                    self.shared.attempts.lock().unwrap().push(record);
                    if let Some(d) = delay {
                        (self.shared.sleep)(d);
                    }
                }
            }
        }
        Err(BackendError::TransientExhausted { attempts: max, last_error })
    }
}

impl ChatBackend for Gateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let fp = self.fingerprint(request)?;
        let ns = self.namespace.as_deref();
        if let Some(cache) = &self.shared.cache {
            if let Some(hit) = cache.get(ns, &fp) {
                self.shared.cache_hits.fetch_add(1, Ordering::SeqCst);
                let mut response = ChatResponse::stop(hit.text);
                response.usage = hit.usage;
                response.from_cache = true;
                response.request_digest = Some(fp);
                return Ok(response);
            }
        }
        self.reserve_call()?;
        let started = Instant::now();
        let mut response = self.send_with_retry(request, &fp)?;
        response.latency_ms = started.elapsed().as_millis() as u64;
        response.from_cache = false;
        response.request_digest = Some(fp.clone());
        if response.finish_reason == FinishReason::Stop && response.text.trim().is_empty() {
            return Err(BackendError::MalformedProviderReply("empty text with finish reason stop".into()));
        }
        let cacheable = matches!(response.finish_reason, FinishReason::Stop | FinishReason::Length);
        if let (Some(cache), true) = (&self.shared.cache, cacheable) {
            let entry = CacheEntry {
                request_digest: fp,
                text: response.text.clone(),
                usage: response.usage,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            };
            if let Err(err) = cache.put(ns, &entry) {
                tracing::warn!(%err, "failed to write cache entry");
            }
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scripted::ScriptedBackend;
    use m3cot_core::chat::{ContentPart, GenerationConfig};

    fn request(text: &str) -> ChatRequest {
        ChatRequest::single(&GenerationConfig::default(), "", vec![ContentPart::text(text)])
    }

    #[test]
    fn backoff_is_capped_and_monotone() {
        let p = RetryPolicy { max_attempts: 10, base_backoff_ms: 100, max_backoff_ms: 1_000 };
        let delays: Vec<u64> = (0..8).map(|k| p.delay(k).as_millis() as u64).collect();
        assert_eq!(delays, vec![100, 200, 400, 800, 1000, 1000, 1000, 1000]);
        assert_eq!(p.delay(200).as_millis(), 1000);
    }

    #[test]
    fn retries_then_succeeds() {
        let script = Arc::new(ScriptedBackend::any("B) red").fail_first(2));
        let slept = Arc::new(Mutex::new(Vec::new()));
        let s2 = Arc::clone(&slept);
        let gw = Gateway::builder(Arc::clone(&script))
            .retry(RetryPolicy { max_attempts: 3, base_backoff_ms: 10, max_backoff_ms: 15 })
            .sleeper(move |d| s2.lock().unwrap().push(d.as_millis()))
            .build();
        assert_eq!(gw.complete(&request("q")).unwrap().text, "B) red");
        let attempts = gw.attempts();
        assert_eq!(attempts.len(), 3);
        assert_eq!(attempts.iter().filter(|a| a.ok).count(), 1);
        assert_eq!(*slept.lock().unwrap(), vec![10, 15]);
        assert_eq!(script.call_count(), 3);
    }

    #[test]
    fn retries_exhaust() {
        let script = Arc::new(ScriptedBackend::any("x").fail_first(5));
        let gw = Gateway::builder(Arc::clone(&script))
            .retry(RetryPolicy { max_attempts: 2, base_backoff_ms: 0, max_backoff_ms: 0 })
            .sleeper(|_| {})
            .build();
        assert!(matches!(gw.complete(&request("q")), Err(BackendError::TransientExhausted { attempts: 2, .. })));
        assert_eq!(script.call_count(), 2);
    }

    #[test]
    fn ceiling_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let script = Arc::new(ScriptedBackend::any("A)"));
        let gw = Gateway::builder(Arc::clone(&script))
            .cache_dir(Some(dir.path().to_path_buf()))
            .call_ceiling(Some(1))
            .build();
        let first = gw.complete(&request("q")).unwrap();
        assert!(!first.from_cache);
        let second = gw.complete(&request("q")).unwrap();
        assert!(second.from_cache);
        assert_eq!(first.text, second.text);
        assert_eq!(first.request_digest, second.request_digest);
        assert_eq!(script.call_count(), 1);
        assert!(matches!(gw.complete(&request("other")), Err(BackendError::BudgetExceeded { ceiling: 1 })));
        // A different namespace misses and is also subject to the shared ceiling.
        assert!(gw.namespaced("run-1").complete(&request("q")).is_err());
    }

    #[test]
    fn limiter_caps_concurrency() {
        let gw = Gateway::builder(FnProvider(|_: &ChatRequest| {
            std::thread::sleep(Duration::from_millis(5));
            Ok(ChatResponse::stop("A)"))
        }))
        .rate_limit(RateLimit { max_in_flight: 2, min_interval_ms: 0 })
        .build();
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = &gw;
                s.spawn(move || gw.complete(&request(&format!("q{i}"))).unwrap());
            }
        });
        let stats = gw.stats();
        assert_eq!(stats.provider_calls, 8);
        assert!(stats.peak_in_flight <= 2, "{stats:?}");
    }

    #[test]
    fn invalid_request_never_reaches_provider() {
        let script = Arc::new(ScriptedBackend::any("A)"));
        let gw = Gateway::plain(Arc::clone(&script));
        let mut r = request("q");
        r.max_tokens = 0;
        assert!(matches!(gw.complete(&r), Err(BackendError::InvalidRequest(_))));
        assert_eq!(script.call_count(), 0);
    }
}

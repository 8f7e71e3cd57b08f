use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, GatewayConfig, GatewayError, HttpBackend, ResponseCache, RetryPolicy};

/// Something that can answer a single chat request once, without retries.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

struct Limiter {
    max: usize,
    inflight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.inflight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.inflight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Delays slept before attempts 2..=max_attempts. Exponential in the base,
/// capped, with up to half a step of jitter derived from `fingerprint`; the
/// sequence never decreases.
pub fn backoff_schedule(policy: &RetryPolicy, fingerprint: &str) -> Vec<Duration> {
    let mut out = Vec::new();
    let mut floor = 0u64;
    for retry in 0..policy.max_attempts.saturating_sub(1) {
        let step = policy
            .backoff_base_ms
            .saturating_mul(1u64.checked_shl(retry).unwrap_or(u64::MAX))
            .min(policy.max_backoff_ms);
        let jitter = if policy.jitter && step > 1 {
            let h = Sha256::digest(format!("{fingerprint}:{retry}").as_bytes());
            u64::from_le_bytes(h[..8].try_into().unwrap()) % (step / 2).max(1)
        } else {
            0
        };
        let delay = (step + jitter).min(policy.max_backoff_ms).max(floor);
        floor = delay;
        out.push(Duration::from_millis(delay));
    }
    out
}

/// Shareable client: retries transient failures, bounds concurrent calls to
/// `max_inflight` and optionally caches responses on disk.
pub struct Gateway {
    config: GatewayConfig,
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
    cache: Option<ResponseCache>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = config.cache_dir.as_deref().map(ResponseCache::open).transpose()?;
        Ok(Gateway {
            limiter: Limiter { max: config.max_inflight, inflight: Mutex::new(0), freed: Condvar::new() },
            config,
            backend,
            cache,
        })
    }

    pub fn http(config: GatewayConfig) -> Result<Self, GatewayError> {
        let backend = HttpBackend::new(&config)?;
        Self::new(config, Arc::new(backend))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&fingerprint)? {
                hit.cached = true;
                hit.attempts = 0;
                return Ok(hit);
            }
        }

        let delays = backoff_schedule(&self.config.retry, &fingerprint);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(request)
            };
            match result {
                Ok(mut response) => {
                    response.attempts = attempt;
                    if response.latency_ms == 0 {
                        response.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    if let Some(cache) = &self.cache {
                        cache.put(&fingerprint, &response)?;
                    }
                    return Ok(response);
                }
                Err(e) if e.is_transient() && attempt < self.config.retry.max_attempts => {
                    let delay = delays[attempt as usize - 1];
                    log::warn!("{}: attempt {attempt} failed ({e}); retrying in {delay:?}", request.request_id);
                    std::thread::sleep(delay);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs requests on up to `max_inflight` worker threads. Results are in
    /// request order; a failure only affects its own position.
    pub fn complete_batch(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ChatResponse, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_inflight.min(requests.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[i]);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("every request is processed")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcot::Role;
    use crate::gateway::{ChatMessage, DecodingParams, MockReply, MockResponder};
    use std::collections::BTreeMap;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::text(Role::User, text)], DecodingParams::default())
    }

    fn fast() -> GatewayConfig {
        GatewayConfig {
            retry: RetryPolicy { max_attempts: 3, backoff_base_ms: 1, max_backoff_ms: 4, jitter: true },
            max_inflight: 4,
            ..GatewayConfig::default()
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let p = RetryPolicy { max_attempts: 8, backoff_base_ms: 100, max_backoff_ms: 2_000, jitter: true };
        let d = backoff_schedule(&p, "abc");
        assert_eq!(d.len(), 7);
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        assert!(d.iter().all(|x| x.as_millis() <= 2_000));
        assert!(d[0].as_millis() >= 100 && d[0].as_millis() < 150);
        assert_eq!(backoff_schedule(&p, "abc"), d);
        let no_jitter = backoff_schedule(&RetryPolicy { jitter: false, ..p }, "abc");
        assert_eq!(no_jitter[..3], [100, 200, 400].map(Duration::from_millis));
    }

    #[test]
    fn scripted_reply_returned_verbatim() {
        let r = req("hello");
        let mock = MockResponder::scripted(BTreeMap::from([(r.fingerprint(), MockReply::Text("F".into()))]), true);
        let gw = Gateway::new(fast(), Arc::new(mock)).unwrap();
        let out = gw.complete(&r).unwrap();
        assert_eq!(out.text, "F");
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let r = req("flaky");
        let mock = MockResponder::scripted(
            BTreeMap::from([(r.fingerprint(), MockReply::Transient { failures: 2, status: 429, text: "ok".into() })]),
            true,
        );
        let gw = Gateway::new(fast(), Arc::new(mock)).unwrap();
        assert_eq!(gw.complete(&r).unwrap().attempts, 3);
    }

    #[test]
    fn retry_budget_is_respected() {
        let r = req("down");
        let mock = Arc::new(MockResponder::scripted(
            BTreeMap::from([(r.fingerprint(), MockReply::Transient { failures: 10, status: 503, text: "ok".into() })]),
            true,
        ));
        let gw = Gateway::new(fast(), mock.clone()).unwrap();
        assert!(matches!(gw.complete(&r), Err(GatewayError::Remote { status: 503, .. })));
        assert_eq!(mock.stats().calls, 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let r = req("bad");
        let mock = Arc::new(MockResponder::scripted(
            BTreeMap::from([(r.fingerprint(), MockReply::Fail { status: 400, body: "bad request".into() })]),
            true,
        ));
        let gw = Gateway::new(fast(), mock.clone()).unwrap();
        assert!(matches!(gw.complete(&r), Err(GatewayError::Remote { status: 400, .. })));
        assert_eq!(mock.stats().calls, 1);
    }

    #[test]
    fn batch_keeps_order_and_bounds_concurrency() {
        let requests: Vec<ChatRequest> = (0..10).map(|i| req(&format!("q{i}"))).collect();
        let mut script: BTreeMap<String, MockReply> =
            requests.iter().enumerate().map(|(i, r)| (r.fingerprint(), MockReply::Text(format!("a{i}")))).collect();
        script.insert(requests[3].fingerprint(), MockReply::Fail { status: 404, body: String::new() });
        script.insert(requests[7].fingerprint(), MockReply::Text(String::new()));
        let mock = Arc::new(MockResponder::scripted(script, true).with_delays(15));
        let gw = Gateway::new(fast(), mock.clone()).unwrap();
        let out = gw.complete_batch(&requests);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            match i {
                3 => assert!(matches!(r, Err(GatewayError::Remote { status: 404, .. }))),
                7 => assert!(matches!(r, Err(GatewayError::MalformedPayload(_)))),
                _ => assert_eq!(r.as_ref().unwrap().text, format!("a{i}")),
            }
        }
        let stats = mock.stats();
        assert!(stats.peak_inflight <= 4, "peak {}", stats.peak_inflight);
        assert!(stats.peak_inflight >= 2);
    }

    #[test]
    fn cache_short_circuits() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("cache me");
        let mock =
            Arc::new(MockResponder::scripted(BTreeMap::from([(r.fingerprint(), MockReply::Text("x".into()))]), true));
        let cfg = GatewayConfig { cache_dir: Some(dir.path().to_path_buf()), ..fast() };
        let gw = Gateway::new(cfg, mock.clone()).unwrap();
        assert!(!gw.complete(&r).unwrap().cached);
        let again = gw.complete(&req("cache me")).unwrap();
        assert!(again.cached);
        assert_eq!(again.text, "x");
        assert_eq!(mock.stats().calls, 1);
    }
}

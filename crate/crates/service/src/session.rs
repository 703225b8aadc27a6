//! Sessions: a prepared gray image plus a one-entry factorization cache.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use gcrf_core::edits::{PropagateConfig, Scene};
use gcrf_core::gcrf::{Constraints, GcrfSystem};
use gcrf_core::image::GrayImage;
use lru::LruCache;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;

/// The system matrix depends only on the mask and `β`, never on the target
/// colors, so that pair is the whole cache key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub mask: Vec<bool>,
    pub beta_bits: u64,
}

impl CacheKey {
    pub fn of(c: &Constraints) -> Self {
        Self {
            mask: c.mask.clone(),
            beta_bits: c.beta.to_bits(),
        }
    }
}

pub struct Session {
    pub id: String,
    pub scene: Scene,
    pub created: Instant,
    last_used: Mutex<Instant>,
    cache: RwLock<Option<(CacheKey, Arc<GcrfSystem>)>>,
    factorizations: AtomicUsize,
}

impl Session {
    pub fn new(id: String, gray: &GrayImage, cfg: &PropagateConfig) -> gcrf_core::Result<Self> {
        let now = Instant::now();
        Ok(Self {
            id,
            scene: Scene::new(gray, cfg)?,
            created: now,
            last_used: Mutex::new(now),
            cache: RwLock::new(None),
            factorizations: AtomicUsize::new(0),
        })
    }

    pub fn touch(&self) {
        *self.last_used.lock().expect("timestamp lock") = Instant::now();
    }

    pub fn last_used(&self) -> Instant {
        *self.last_used.lock().expect("timestamp lock")
    }

    /// Number of system factorizations this session has performed.
    pub fn factorizations(&self) -> usize {
        self.factorizations.load(Ordering::SeqCst)
    }

    /// The factorized system for these constraints and whether it came from
    /// the cache. Readers share the lock; a miss factorizes outside it and
    /// then replaces the entry.
    pub fn system_for(&self, c: &Constraints) -> Result<(Arc<GcrfSystem>, bool), ServiceError> {
        let key = CacheKey::of(c);
        if let Some((k, sys)) = self.cache.read().expect("cache lock").as_ref() {
            if *k == key {
                return Ok((Arc::clone(sys), true));
            }
        }
        let sys = Arc::new(self.scene.assemble(c)?);
        self.factorizations.fetch_add(1, Ordering::SeqCst);
        *self.cache.write().expect("cache lock") = Some((key, Arc::clone(&sys)));
        Ok((sys, false))
    }
}

/// Bounded session map with least-recently-used eviction. Ids hash a
/// creation counter with the upload, so a restarted server replaying the
/// same requests hands out the same ids.
pub struct SessionStore {
    sessions: Mutex<LruCache<String, Arc<Session>>>,
    counter: AtomicU64,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is at least one");
        Self {
            sessions: Mutex::new(LruCache::new(cap)),
            counter: AtomicU64::new(0),
        }
    }

    pub fn next_id(&self, upload: &[u8]) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let mut h = Sha256::new();
        h.update(n.to_le_bytes());
        h.update(upload);
        hex::encode(&h.finalize()[..16])
    }

    pub fn insert(&self, session: Session) -> Arc<Session> {
        let s = Arc::new(session);
        self.sessions
            .lock()
            .expect("session lock")
            .put(s.id.clone(), Arc::clone(&s));
        s
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        let s = self
            .sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))?;
        s.touch();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

use std::collections::HashMap;
use std::time::{Duration, Instant};

use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LeaseError {
    #[error("{key} is leased to {operator}")]
    Held { key: String, operator: String },
    #[error("unknown or superseded lease {0}")]
    Unknown(Uuid),
    #[error("lease {0} expired")]
    Expired(Uuid),
}

/// Exclusive, expiring claim by one operator on one queued item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub token: Uuid,
    pub key: String,
    pub operator: String,
    pub expires_at: Instant,
}

impl Lease {
    pub fn remaining(&self, now: Instant) -> Duration {
        self.expires_at.saturating_duration_since(now)
    }
}

/// Single-writer-per-item lease table. Callers pass `now` so expiry is testable.
#[derive(Debug)]
pub struct LeaseManager {
    ttl: Duration,
    active: HashMap<String, Lease>,
    consumed: HashMap<Uuid, String>,
}

impl LeaseManager {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, active: HashMap::new(), consumed: HashMap::new() }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Claims `key`. An operator re-leasing its own item gets a fresh token and
    /// the previous one becomes stale.
    pub fn acquire(&mut self, key: &str, operator: &str, now: Instant) -> Result<Lease, LeaseError> {
        if let Some(existing) = self.active.get(key) {
            if existing.expires_at > now && existing.operator != operator {
                return Err(LeaseError::Held { key: key.to_string(), operator: existing.operator.clone() });
            }
        }
        let lease = Lease {
            token: Uuid::new_v4(),
            key: key.to_string(),
            operator: operator.to_string(),
            expires_at: now + self.ttl,
        };
        self.active.insert(key.to_string(), lease.clone());
        Ok(lease)
    }

    pub fn validate(&self, token: Uuid, now: Instant) -> Result<&Lease, LeaseError> {
        let lease = self.active.values().find(|l| l.token == token).ok_or(LeaseError::Unknown(token))?;
        if lease.expires_at <= now {
            return Err(LeaseError::Expired(token));
        }
        Ok(lease)
    }

    /// Ends a valid lease after its work was committed.
    pub fn complete(&mut self, token: Uuid, now: Instant) -> Result<Lease, LeaseError> {
        let key = self.validate(token, now)?.key.clone();
        let lease = self.active.remove(&key).expect("validated lease is active");
        self.consumed.insert(token, key);
        Ok(lease)
    }

    /// Key of a lease that was already completed, for idempotent resubmission.
    pub fn completed_key(&self, token: Uuid) -> Option<&str> {
        self.consumed.get(&token).map(String::as_str)
    }

    pub fn holder(&self, key: &str, now: Instant) -> Option<&Lease> {
        self.active.get(key).filter(|l| l.expires_at > now)
    }
}

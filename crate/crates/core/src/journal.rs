//! Ordered event log shared by the server, the agents and the simulator.
//! A disabled journal drops everything, which is what live processes use.

use std::fmt;
use std::sync::{Arc, Mutex};

use crate::crypto::{hash_content, Digest};
use crate::Tick;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: Tick,
    pub actor: String,
    pub kind: String,
    /// `key=value` pairs separated by `;`.
    pub detail: String,
    pub digest: Digest,
}

impl TraceEvent {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.tick, self.actor, self.kind, self.digest, self.detail
        )
    }

    /// Looks up `key` in the detail field.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.detail
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}

#[derive(Clone, Default)]
pub struct Journal {
    sink: Option<Arc<Mutex<Vec<TraceEvent>>>>,
}

impl fmt::Debug for Journal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Journal")
            .field("enabled", &self.sink.is_some())
            .finish()
    }
}

impl Journal {
    pub fn enabled() -> Self {
        Self {
            sink: Some(Arc::default()),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    /// Records an event whose digest covers the detail text.
    pub fn record(&self, tick: Tick, actor: &str, kind: &str, detail: String) {
        let digest = hash_content(detail.as_bytes());
        self.record_with_digest(tick, actor, kind, detail, digest);
    }

    pub fn record_with_digest(&self, tick: Tick, actor: &str, kind: &str, detail: String, digest: Digest) {
        if let Some(sink) = &self.sink {
            sink.lock().unwrap().push(TraceEvent {
                tick,
                actor: actor.to_string(),
                kind: kind.to_string(),
                detail,
                digest,
            });
        }
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.sink
            .as_ref()
            .map(|s| s.lock().unwrap().clone())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_and_ordered() {
        let j = Journal::enabled();
        let k = j.clone();
        j.record(1, "a", "x", "k=v;n=2".into());
        k.record(1, "b", "y", String::new());
        let events = j.snapshot();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].field("n"), Some("2"));
        assert_eq!(events[1].actor, "b");
        Journal::disabled().record(0, "a", "x", String::new());
    }
}

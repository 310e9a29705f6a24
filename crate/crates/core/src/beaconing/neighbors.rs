use crate::hsm::Timestamp;
use crate::identity::{CompactCertificate, PseudonymId};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    /// Set only once `cached_certificate` verified under the CA key.
    pub verified: bool,
    pub cached_certificate: Option<CompactCertificate>,
    pub heading: f32,
}

/// Pseudonyms heard recently, keyed by pseudonym id.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    entries: BTreeMap<PseudonymId, NeighborEntry>,
    expiry_ms: u64,
    insertions: u64,
}

impl NeighborTable {
    pub fn new(expiry_ms: u64) -> Self {
        NeighborTable { entries: BTreeMap::new(), expiry_ms, insertions: 0 }
    }

    pub fn expiry_ms(&self) -> u64 {
        self.expiry_ms
    }

    /// Count of entries ever created. A pseudonym that expired and came back
    /// is counted again.
    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    fn expired(&self, e: &NeighborEntry, now: Timestamp) -> bool {
        now.saturating_sub(e.last_seen) > self.expiry_ms
    }

    /// Records a reception. Returns true when the pseudonym is new to the
    /// table, including an entry that had expired but was not yet swept.
    pub fn observe(&mut self, id: PseudonymId, now: Timestamp, heading: f32) -> bool {
        let stale = self.entries.get(&id).map(|e| self.expired(e, now));
        match stale {
            Some(false) => {
                let e = self.entries.get_mut(&id).expect("present");
                e.last_seen = e.last_seen.max(now);
                e.heading = heading;
                false
            }
            _ => {
                self.entries.insert(
                    id,
                    NeighborEntry { first_seen: now, last_seen: now, verified: false, cached_certificate: None, heading },
                );
                self.insertions += 1;
                true
            }
        }
    }

    /// Caches a certificate that has been checked against the CA.
    pub fn mark_verified(&mut self, id: PseudonymId, cert: CompactCertificate) -> bool {
        match self.entries.get_mut(&id) {
            Some(e) => {
                e.verified = true;
                e.cached_certificate = Some(cert);
                true
            }
            None => false,
        }
    }

    pub fn verified_certificate(&self, id: PseudonymId) -> Option<&CompactCertificate> {
        self.entries.get(&id).filter(|e| e.verified).and_then(|e| e.cached_certificate.as_ref())
    }

    /// Removes entries last seen more than `expiry` ago. An entry exactly at
    /// the boundary stays.
    pub fn maintenance(&mut self, now: Timestamp) -> Vec<PseudonymId> {
        let gone: Vec<PseudonymId> =
            self.entries.iter().filter(|(_, e)| self.expired(e, now)).map(|(id, _)| *id).collect();
        for id in &gone {
            self.entries.remove(id);
        }
        gone
    }

    pub fn get(&self, id: PseudonymId) -> Option<&NeighborEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: PseudonymId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PseudonymId, &NeighborEntry)> {
        self.entries.iter()
    }
}

//! Signed, hash-linked chain of custody.
//!
//! The first record links to an anchor digest (the evidence address), each
//! later record to the hash of its predecessor. A record counts as valid
//! only if every record before it is valid too.

use serde::{Deserialize, Serialize};

use super::{hash_content, verifies, Credential, Digest, Identity, PublicKey, Signature};
use crate::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CustodyAction {
    Snapshotted,
    Transferred,
    Stored,
    Analyzed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyRecord {
    pub actor: Credential,
    pub action: CustodyAction,
    pub tick: Tick,
    pub prev_hash: Digest,
    pub signature: Signature,
}

#[derive(Serialize)]
struct RecordBody {
    prev_hash: Digest,
    action: CustodyAction,
    tick: Tick,
}

fn record_body(prev_hash: Digest, action: CustodyAction, tick: Tick) -> Vec<u8> {
    crate::canonical::to_bytes(&RecordBody {
        prev_hash,
        action,
        tick,
    })
}

pub fn record_hash(record: &CustodyRecord) -> Digest {
    hash_content(&crate::canonical::to_bytes(record))
}

pub fn append_custody(
    chain: &mut Vec<CustodyRecord>,
    anchor: Digest,
    signer: &Identity,
    action: CustodyAction,
    tick: Tick,
) {
    let prev_hash = chain.last().map(record_hash).unwrap_or(anchor);
    chain.push(CustodyRecord {
        actor: signer.credential.clone(),
        action,
        tick,
        prev_hash,
        signature: signer.sign(&record_body(prev_hash, action, tick)),
    });
}

/// Per-record validity. Once one record fails, every later one fails.
pub fn verify_custody(anchor: Digest, chain: &[CustodyRecord], publisher_pk: &PublicKey) -> Vec<bool> {
    let mut out = Vec::with_capacity(chain.len());
    let mut expected_prev = anchor;
    let mut intact = true;
    for record in chain {
        intact = intact
            && record.prev_hash == expected_prev
            && record.actor.verify(publisher_pk)
            && verifies(
                &record.actor.public_key,
                &record_body(record.prev_hash, record.action, record.tick),
                &record.signature,
            );
        out.push(intact);
        expected_prev = record_hash(record);
    }
    out
}

pub fn custody_intact(anchor: Digest, chain: &[CustodyRecord], publisher_pk: &PublicKey) -> bool {
    verify_custody(anchor, chain, publisher_pk).iter().all(|ok| *ok)
}

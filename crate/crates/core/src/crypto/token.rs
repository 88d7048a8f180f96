use serde::{Deserialize, Serialize};

use super::{verifies, CryptoError, KeyPair, PublicKey, Signature};
use crate::model::Resource;
use crate::Tick;

/// Server-signed credential granting one component access to one resource
/// of the node until `expiry_tick` (exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub component_id: String,
    pub resource: Resource,
    pub expiry_tick: Tick,
    pub signature: Signature,
}

#[derive(Serialize)]
struct TokenBody<'a> {
    component_id: &'a str,
    resource: Resource,
    expiry_tick: Tick,
}

fn token_bytes(component_id: &str, resource: Resource, expiry_tick: Tick) -> Vec<u8> {
    crate::canonical::to_bytes(&TokenBody {
        component_id,
        resource,
        expiry_tick,
    })
}

pub fn issue_token(
    server: &KeyPair,
    component_id: &str,
    resource: Resource,
    expiry_tick: Tick,
    now_tick: Tick,
) -> Result<AccessToken, CryptoError> {
    if expiry_tick <= now_tick {
        return Err(CryptoError::ExpiryNotInFuture {
            expiry: expiry_tick,
            now: now_tick,
        });
    }
    Ok(AccessToken {
        component_id: component_id.to_string(),
        resource,
        expiry_tick,
        signature: server.sign(&token_bytes(component_id, resource, expiry_tick)),
    })
}

/// Valid while `now_tick < expiry_tick`, for the exact resource only.
pub fn check_access(server_pk: &PublicKey, token: &AccessToken, resource: Resource, now_tick: Tick) -> bool {
    token.resource == resource
        && now_tick < token.expiry_tick
        && verifies(
            server_pk,
            &token_bytes(&token.component_id, token.resource, token.expiry_tick),
            &token.signature,
        )
}

//! Trust-proof records and the response envelope.

use serde::{Deserialize, Serialize};

use crate::crypto::{AeadKey, Digest256, Sealed, SigPublicKey, Signature, SignatureError};

/// AAD for result ciphertexts.
pub const RESULT_AAD: &[u8] = b"qshield/result/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuncRecord {
    pub f_name: String,
    pub f_params: serde_json::Value,
    /// Worker that computed the state, in distributed mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<String>,
}

/// One state of the execution trace, without its payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub s_id: u64,
    pub p_states: Vec<u64>,
    pub func: FuncRecord,
    #[serde(with = "hex::serde")]
    pub s_db_digest: Digest256,
    pub w: u64,
}

/// Canonical trust-proof bytes: a JSON array of records in `s_id` order.
pub fn encode_trust_proof(records: &[TraceRecord]) -> String {
    serde_json::to_string(records).expect("trace records serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    pub result: Sealed,
    /// Canonical trust-proof encoding, exactly as signed.
    pub tp: String,
    pub sig: Signature,
}

impl ResponseEnvelope {
    pub fn verify(&self, sig_pub: &SigPublicKey) -> Result<(), SignatureError> {
        sig_pub.verify(self.tp.as_bytes(), &self.sig)
    }

    pub fn records(&self) -> Result<Vec<TraceRecord>, serde_json::Error> {
        serde_json::from_str(&self.tp)
    }

    /// Decrypts the result with the user's result key. Returns the canonical
    /// payload bytes.
    pub fn open_result(&self, key: &AeadKey) -> Option<Vec<u8>> {
        key.open(&self.result, RESULT_AAD).ok()
    }
}

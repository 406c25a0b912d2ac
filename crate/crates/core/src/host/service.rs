//! Host service verbs over the boundary frame format, so that owners and
//! users reach a host the same way in-process or over a socket.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AttackScript, CollectionManifest, HostError, HostService, QueryRequest};
use crate::crypto::Sealed;
use crate::enclave::{ChannelOffer, PublicParams, QueryToken, Quote, ResponseEnvelope};
use crate::ids::{ChannelId, CollectionId, DocumentId};
use crate::wire::{decode_blobs, encode_blobs, Boundary, Frame};

pub mod opcode {
    pub const PARAMS: u8 = 0x40;
    pub const CATALOG: u8 = 0x41;
    pub const ATTEST: u8 = 0x42;
    pub const PROVISION: u8 = 0x43;
    pub const POLICY_UPDATE: u8 = 0x44;
    pub const CREATE: u8 = 0x45;
    pub const UPLOAD: u8 = 0x46;
    pub const QUERY: u8 = 0x47;
    pub const READ: u8 = 0x48;
    pub const ATTACK: u8 = 0x49;
}

const OK: u8 = crate::wire::opcode::OK;
const ERR: u8 = crate::wire::opcode::ERR;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Standalone,
    Distributed,
}

#[derive(Serialize, Deserialize)]
struct ChannelArgs {
    channel: ChannelId,
}

#[derive(Serialize, Deserialize)]
struct CreateArgs {
    name: String,
    cid: CollectionId,
    schema: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct UploadArgs {
    cid: CollectionId,
    dids: Vec<DocumentId>,
}

#[derive(Serialize, Deserialize)]
struct UploadReply {
    stored: usize,
}

#[derive(Serialize, Deserialize)]
struct QueryArgs {
    q: String,
    /// `None` runs in the server's default mode.
    mode: Option<ExecutionMode>,
}

#[derive(Serialize, Deserialize)]
struct ReadArgs {
    collections: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct AttackArgs {
    q: String,
    script: AttackScript,
}

fn host_err(e: impl std::fmt::Display) -> HostError {
    HostError::Storage(format!("bad service frame: {e}"))
}

fn sealed(bytes: &[u8]) -> Result<Sealed, HostError> {
    Sealed::from_bytes(bytes).map_err(|_| host_err("malformed sealed payload"))
}

fn args<T: serde::de::DeserializeOwned>(f: &Frame) -> Result<T, HostError> {
    serde_json::from_slice(&f.args).map_err(host_err)
}

const NONE: () = ();

impl<B: Boundary> HostService<B> {
    /// Decodes a service request frame, runs it, and encodes the response.
    pub fn handle_frame(&self, request: &[u8], mode: ExecutionMode) -> Vec<u8> {
        let result = Frame::decode(request).map_err(host_err).and_then(|f| self.serve(&f, mode));
        match result {
            Ok(f) => f.encode(),
            Err(e) => Frame::new(ERR, &e, Vec::new()).encode(),
        }
    }

    fn serve(&self, f: &Frame, default_mode: ExecutionMode) -> Result<Frame, HostError> {
        let ok = |a: &dyn erased::Json, payload: Vec<u8>| Frame { code: OK, args: a.to_json(), payload };
        match f.code {
            opcode::PARAMS => Ok(ok(&self.public_params()?, vec![])),
            opcode::CATALOG => Ok(ok(&self.store().manifests(), vec![])),
            opcode::ATTEST => {
                let offer: ChannelOffer = args(f)?;
                Ok(ok(&self.attest(&offer)?, vec![]))
            }
            opcode::PROVISION | opcode::POLICY_UPDATE => {
                let a: ChannelArgs = args(f)?;
                let msg = sealed(&f.payload)?;
                let ack = if f.code == opcode::PROVISION {
                    self.provision(a.channel, &msg)?
                } else {
                    self.update_policy(a.channel, &msg)?
                };
                Ok(ok(&NONE, ack.to_bytes()))
            }
            opcode::CREATE => {
                let a: CreateArgs = args(f)?;
                self.create_collection(&a.name, a.cid, a.schema)?;
                Ok(ok(&NONE, vec![]))
            }
            opcode::UPLOAD => {
                let a: UploadArgs = args(f)?;
                let blobs = decode_blobs(&f.payload).map_err(host_err)?;
                if blobs.len() != a.dids.len() {
                    return Err(host_err("document count does not match ids"));
                }
                let mut stored = 0;
                for (did, blob) in a.dids.iter().zip(blobs) {
                    stored += usize::from(self.upload(&a.cid, did, &sealed(blob)?)?);
                }
                Ok(ok(&UploadReply { stored }, vec![]))
            }
            opcode::QUERY => {
                let a: QueryArgs = args(f)?;
                let req = QueryRequest { q: a.q, tk: QueryToken(f.payload.clone()) };
                let mode = a.mode.unwrap_or(default_mode);
                let env = match mode {
                    ExecutionMode::Standalone => self.handle_query(&req)?,
                    ExecutionMode::Distributed => self.distributed_execute(&req)?,
                };
                Ok(ok(&env, vec![]))
            }
            opcode::READ => {
                let a: ReadArgs = args(f)?;
                let env = self.raw_read(&QueryToken(f.payload.clone()), a.collections.as_deref())?;
                Ok(ok(&env, vec![]))
            }
            opcode::ATTACK => {
                let a: AttackArgs = args(f)?;
                let req = QueryRequest { q: a.q, tk: QueryToken(f.payload.clone()) };
                Ok(ok(&self.handle_query_adversarial(&req, &a.script)?, vec![]))
            }
            other => Err(host_err(format!("unknown service opcode {other:#04x}"))),
        }
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("service replies serialize")
        }
    }
}

/// In-process [`Boundary`] onto a host service.
pub struct LocalService<B> {
    host: Arc<HostService<B>>,
    mode: ExecutionMode,
}

impl<B> Clone for LocalService<B> {
    fn clone(&self) -> Self {
        Self { host: Arc::clone(&self.host), mode: self.mode }
    }
}

impl<B: Boundary> LocalService<B> {
    pub fn new(host: Arc<HostService<B>>, mode: ExecutionMode) -> Self {
        Self { host, mode }
    }

    pub fn host(&self) -> &HostService<B> {
        &self.host
    }
}

impl<B: Boundary> Boundary for LocalService<B> {
    fn call(&self, request: &[u8]) -> Vec<u8> {
        self.host.handle_frame(request, self.mode)
    }
}

/// Typed client for the host service verbs.
#[derive(Clone)]
pub struct ServiceClient<S> {
    boundary: S,
}

impl<S: Boundary> ServiceClient<S> {
    pub fn new(boundary: S) -> Self {
        Self { boundary }
    }

    pub fn boundary(&self) -> &S {
        &self.boundary
    }

    fn call(&self, code: u8, a: &impl Serialize, payload: Vec<u8>) -> Result<Frame, HostError> {
        let resp = self.boundary.call(&Frame::new(code, a, payload).encode());
        let f = Frame::decode(&resp).map_err(host_err)?;
        match f.code {
            OK => Ok(f),
            ERR => Err(args::<HostError>(&f)?),
            other => Err(host_err(format!("unknown response code {other:#04x}"))),
        }
    }

    pub fn public_params(&self) -> Result<PublicParams, HostError> {
        args(&self.call(opcode::PARAMS, &NONE, vec![])?)
    }

    pub fn catalog(&self) -> Result<Vec<CollectionManifest>, HostError> {
        args(&self.call(opcode::CATALOG, &NONE, vec![])?)
    }

    pub fn attest(&self, offer: &ChannelOffer) -> Result<Quote, HostError> {
        args(&self.call(opcode::ATTEST, offer, vec![])?)
    }

    pub fn provision(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, HostError> {
        sealed(&self.call(opcode::PROVISION, &ChannelArgs { channel }, msg.to_bytes())?.payload)
    }

    pub fn update_policy(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, HostError> {
        sealed(&self.call(opcode::POLICY_UPDATE, &ChannelArgs { channel }, msg.to_bytes())?.payload)
    }

    pub fn create_collection(
        &self,
        name: &str,
        cid: CollectionId,
        schema: &BTreeSet<String>,
    ) -> Result<(), HostError> {
        let a = CreateArgs { name: name.into(), cid, schema: schema.clone() };
        self.call(opcode::CREATE, &a, vec![]).map(|_| ())
    }

    /// Uploads `(did, ct)` pairs; returns how many were newly stored.
    pub fn upload(&self, cid: CollectionId, docs: &[(DocumentId, Sealed)]) -> Result<usize, HostError> {
        let a = UploadArgs { cid, dids: docs.iter().map(|(d, _)| *d).collect() };
        let cts: Vec<Vec<u8>> = docs.iter().map(|(_, ct)| ct.to_bytes()).collect();
        let f = self.call(opcode::UPLOAD, &a, encode_blobs(cts.iter().map(Vec::as_slice)))?;
        Ok(args::<UploadReply>(&f)?.stored)
    }

    pub fn query(&self, req: &QueryRequest, mode: Option<ExecutionMode>) -> Result<ResponseEnvelope, HostError> {
        let a = QueryArgs { q: req.q.clone(), mode };
        args(&self.call(opcode::QUERY, &a, req.tk.0.clone())?)
    }

    pub fn raw_read(
        &self,
        tk: &QueryToken,
        collections: Option<Vec<String>>,
    ) -> Result<ResponseEnvelope, HostError> {
        args(&self.call(opcode::READ, &ReadArgs { collections }, tk.0.clone())?)
    }

    pub fn attack(&self, req: &QueryRequest, script: &AttackScript) -> Result<ResponseEnvelope, HostError> {
        let a = AttackArgs { q: req.q.clone(), script: script.clone() };
        args(&self.call(opcode::ATTACK, &a, req.tk.0.clone())?)
    }
}

//! Boundary frames and typed clients for the trusted core and workers.
//!
//! A frame is `len (u32 BE) || code (u8) || args_len (u32 BE) || args ||
//! payload`, where `len` counts every byte after itself, `args` is canonical
//! JSON, and `payload` is raw binary. Requests carry an opcode in `code`;
//! responses carry 0 for success and 1 for an error, whose args are the
//! serialized [`CoreError`].

use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crypto::Sealed;
use crate::enclave::{
    ChannelOffer, CoreError, PublicParams, Quote, ResponseEnvelope, SealedCollection,
    SessionStatus, TrustedCore, Worker, WorkerDescriptor, QueryToken,
};
use crate::ids::ChannelId;

/// Frames larger than this are refused.
pub const MAX_FRAME: usize = 1 << 30;

pub mod opcode {
    pub const INIT: u8 = 0x01;
    pub const PROVISION: u8 = 0x02;
    pub const UPDATE_POLICY: u8 = 0x03;
    pub const ATTEST: u8 = 0x04;
    pub const PUBLIC_PARAMS: u8 = 0x05;
    pub const UNLOCK: u8 = 0x10;
    pub const EXEC_OPERATOR: u8 = 0x11;
    pub const FINALIZE: u8 = 0x12;
    pub const ABORT: u8 = 0x13;
    pub const STATUS: u8 = 0x14;
    pub const WORKER_CHALLENGE: u8 = 0x20;
    pub const ADMIT_WORKER: u8 = 0x21;
    pub const BEGIN_REMOTE: u8 = 0x22;
    pub const COMPLETE_REMOTE: u8 = 0x23;
    pub const WORKER_ATTEST: u8 = 0x30;
    pub const WORKER_INSTALL_KEY: u8 = 0x31;
    pub const WORKER_EXECUTE: u8 = 0x32;

    pub const OK: u8 = 0x00;
    pub const ERR: u8 = 0x01;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub code: u8,
    pub args: Vec<u8>,
    pub payload: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("truncated frame")]
    Truncated,
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Frame {
    pub fn new(code: u8, args: &impl Serialize, payload: Vec<u8>) -> Self {
        Self { code, args: serde_json::to_vec(args).expect("frame args serialize"), payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = 1 + 4 + self.args.len() + self.payload.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(self.code);
        out.extend_from_slice(&(self.args.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.args);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let len = u32::from_be_bytes(bytes.get(..4).ok_or(FrameError::Truncated)?.try_into().unwrap())
            as usize;
        let body = &bytes[4..];
        if body.len() != len || len < 5 {
            return Err(FrameError::Truncated);
        }
        Self::decode_body(body)
    }

    fn decode_body(body: &[u8]) -> Result<Self, FrameError> {
        let code = body[0];
        let args_len = u32::from_be_bytes(body[1..5].try_into().unwrap()) as usize;
        let rest = &body[5..];
        if rest.len() < args_len {
            return Err(FrameError::Truncated);
        }
        Ok(Self { code, args: rest[..args_len].to_vec(), payload: rest[args_len..].to_vec() })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, FrameError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(FrameError::TooLarge(len));
        }
        if len < 5 {
            return Err(FrameError::Truncated);
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Self::decode_body(&body)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FrameError> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn args<T: DeserializeOwned>(&self) -> Result<T, CoreError> {
        serde_json::from_slice(&self.args)
            .map_err(|e| CoreError::Boundary(format!("bad frame arguments: {e}")))
    }
}

/// Length-prefixed list of byte strings, used for multi-part payloads.
pub fn encode_blobs<'a>(blobs: impl IntoIterator<Item = &'a [u8]>) -> Vec<u8> {
    let blobs: Vec<&[u8]> = blobs.into_iter().collect();
    let mut out = (blobs.len() as u32).to_be_bytes().to_vec();
    for b in blobs {
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(b);
    }
    out
}

pub fn decode_blobs(mut bytes: &[u8]) -> Result<Vec<&[u8]>, CoreError> {
    let bad = || CoreError::Boundary("malformed payload list".into());
    let mut take = |n: usize| -> Result<&[u8], CoreError> {
        if bytes.len() < n {
            return Err(bad());
        }
        let (head, tail) = bytes.split_at(n);
        bytes = tail;
        Ok(head)
    };
    let count = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        out.push(take(len)?);
    }
    if !bytes.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Something that answers request frames with response frames.
pub trait Boundary: Send + Sync {
    fn call(&self, request: &[u8]) -> Vec<u8>;
}

fn ok_frame(args: &impl Serialize, payload: Vec<u8>) -> Frame {
    Frame::new(opcode::OK, args, payload)
}

fn respond(result: Result<Frame, CoreError>) -> Vec<u8> {
    match result {
        Ok(f) => f.encode(),
        Err(e) => Frame::new(opcode::ERR, &e, Vec::new()).encode(),
    }
}

fn sealed(payload: &[u8]) -> Result<Sealed, CoreError> {
    Sealed::from_bytes(payload).map_err(|_| CoreError::Boundary("malformed sealed payload".into()))
}

#[derive(Serialize, Deserialize)]
struct InitArgs {
    lambda: u32,
}

#[derive(Serialize, Deserialize)]
struct ChannelArgs {
    channel: ChannelId,
}

#[derive(Serialize, Deserialize)]
struct CollectionHeaderArgs {
    name: String,
    cid: crate::ids::CollectionId,
    docs: usize,
}

#[derive(Serialize, Deserialize)]
struct UnlockArgs {
    collections: Vec<CollectionHeaderArgs>,
}

#[derive(Serialize, Deserialize)]
struct ExecArgs {
    f_name: String,
    f_params: serde_json::Value,
    inputs: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RemoteArgs {
    worker_id: String,
    f_name: String,
    f_params: serde_json::Value,
    inputs: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct StateArgs {
    s_id: u64,
}

#[derive(Serialize, Deserialize)]
struct WorkerIdArgs {
    worker_id: String,
}

#[derive(Serialize, Deserialize)]
struct AdmitArgs {
    descriptor: WorkerDescriptor,
    quote: Quote,
}

const NONE: () = ();

/// Decodes one request frame and runs it against the core.
pub fn dispatch(core: &mut TrustedCore, request: &[u8]) -> Vec<u8> {
    respond(Frame::decode(request).map_err(|e| CoreError::Boundary(e.to_string())).and_then(
        |f| dispatch_frame(core, &f),
    ))
}

fn dispatch_frame(core: &mut TrustedCore, f: &Frame) -> Result<Frame, CoreError> {
    use opcode::*;
    match f.code {
        INIT => {
            let a: InitArgs = f.args()?;
            Ok(ok_frame(&core.init(a.lambda)?, vec![]))
        }
        PUBLIC_PARAMS => Ok(ok_frame(&core.public_params()?, vec![])),
        ATTEST => {
            let offer: ChannelOffer = f.args()?;
            Ok(ok_frame(&core.attest(&offer)?, vec![]))
        }
        PROVISION | UPDATE_POLICY => {
            let a: ChannelArgs = f.args()?;
            let msg = sealed(&f.payload)?;
            let ack = if f.code == PROVISION {
                core.provision(&a.channel, &msg)?
            } else {
                core.update_policy(&a.channel, &msg)?
            };
            Ok(ok_frame(&NONE, ack.to_bytes()))
        }
        UNLOCK => {
            let a: UnlockArgs = f.args()?;
            let blobs = decode_blobs(&f.payload)?;
            let expected: usize = 1 + a.collections.iter().map(|c| c.docs).sum::<usize>();
            if blobs.len() != expected {
                return Err(CoreError::Boundary("payload count does not match arguments".into()));
            }
            let token = QueryToken(blobs[0].to_vec());
            let mut rest = blobs[1..].iter();
            let mut collections = Vec::with_capacity(a.collections.len());
            for h in a.collections {
                let docs = rest.by_ref().take(h.docs).map(|b| sealed(b)).collect::<Result<_, _>>()?;
                collections.push(SealedCollection { name: h.name, cid: h.cid, docs });
            }
            let s_id = core.unlock(&token, &collections)?;
            Ok(ok_frame(&StateArgs { s_id }, vec![]))
        }
        EXEC_OPERATOR => {
            let a: ExecArgs = f.args()?;
            let s_id = core.exec_operator(&a.f_name, &a.f_params, &a.inputs)?;
            Ok(ok_frame(&StateArgs { s_id }, vec![]))
        }
        FINALIZE => {
            let a: StateArgs = f.args()?;
            Ok(ok_frame(&core.finalize(a.s_id)?, vec![]))
        }
        ABORT => {
            core.abort();
            Ok(ok_frame(&NONE, vec![]))
        }
        STATUS => Ok(ok_frame(&core.status(), vec![])),
        WORKER_CHALLENGE => {
            let a: WorkerIdArgs = f.args()?;
            Ok(ok_frame(&core.worker_challenge(&a.worker_id)?, vec![]))
        }
        ADMIT_WORKER => {
            let a: AdmitArgs = f.args()?;
            Ok(ok_frame(&NONE, core.admit_worker(&a.descriptor, &a.quote)?.to_bytes()))
        }
        BEGIN_REMOTE => {
            let a: RemoteArgs = f.args()?;
            let task = core.begin_remote(&a.worker_id, &a.f_name, &a.f_params, &a.inputs)?;
            Ok(ok_frame(&NONE, task.to_bytes()))
        }
        COMPLETE_REMOTE => {
            let s_id = core.complete_remote(&sealed(&f.payload)?)?;
            Ok(ok_frame(&StateArgs { s_id }, vec![]))
        }
        other => Err(CoreError::Boundary(format!("unknown opcode {other:#04x}"))),
    }
}

/// Decodes one request frame and runs it against a worker.
pub fn dispatch_worker(worker: &mut Worker, request: &[u8]) -> Vec<u8> {
    respond(Frame::decode(request).map_err(|e| CoreError::Boundary(e.to_string())).and_then(
        |f| match f.code {
            opcode::WORKER_ATTEST => {
                let offer: ChannelOffer = f.args()?;
                Ok(ok_frame(&worker.attest(&offer)?, vec![]))
            }
            opcode::WORKER_INSTALL_KEY => {
                worker.install_key(&sealed(&f.payload)?)?;
                Ok(ok_frame(&NONE, vec![]))
            }
            opcode::WORKER_EXECUTE => {
                Ok(ok_frame(&NONE, worker.execute(&sealed(&f.payload)?)?.to_bytes()))
            }
            other => Err(CoreError::Boundary(format!("unknown worker opcode {other:#04x}"))),
        },
    ))
}

/// In-process trusted core. Calls are serialized by the mutex.
#[derive(Clone)]
pub struct EnclaveHandle(Arc<Mutex<TrustedCore>>);

impl EnclaveHandle {
    pub fn new(core: TrustedCore) -> Self {
        Self(Arc::new(Mutex::new(core)))
    }
}

impl Boundary for EnclaveHandle {
    fn call(&self, request: &[u8]) -> Vec<u8> {
        let mut core = self.0.lock().unwrap_or_else(|p| p.into_inner());
        dispatch(&mut core, request)
    }
}

/// In-process worker.
#[derive(Clone)]
pub struct WorkerHandle {
    descriptor: WorkerDescriptor,
    inner: Arc<Mutex<Worker>>,
}

impl WorkerHandle {
    pub fn new(worker: Worker) -> Self {
        Self { descriptor: worker.descriptor().clone(), inner: Arc::new(Mutex::new(worker)) }
    }

    pub fn descriptor(&self) -> &WorkerDescriptor {
        &self.descriptor
    }
}

impl Boundary for WorkerHandle {
    fn call(&self, request: &[u8]) -> Vec<u8> {
        let mut w = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        dispatch_worker(&mut w, request)
    }
}

fn call<B: Boundary + ?Sized>(
    b: &B,
    code: u8,
    args: &impl Serialize,
    payload: Vec<u8>,
) -> Result<Frame, CoreError> {
    let resp = b.call(&Frame::new(code, args, payload).encode());
    let f = Frame::decode(&resp).map_err(|e| CoreError::Boundary(e.to_string()))?;
    match f.code {
        opcode::OK => Ok(f),
        opcode::ERR => Err(f.args::<CoreError>()?),
        other => Err(CoreError::Boundary(format!("unknown response code {other:#04x}"))),
    }
}

/// Typed client for the trusted core over any [`Boundary`].
#[derive(Clone)]
pub struct CoreClient<B> {
    boundary: B,
}

impl<B: Boundary> CoreClient<B> {
    pub fn new(boundary: B) -> Self {
        Self { boundary }
    }

    pub fn boundary(&self) -> &B {
        &self.boundary
    }

    pub fn init(&self, lambda: u32) -> Result<PublicParams, CoreError> {
        call(&self.boundary, opcode::INIT, &InitArgs { lambda }, vec![])?.args()
    }

    pub fn public_params(&self) -> Result<PublicParams, CoreError> {
        call(&self.boundary, opcode::PUBLIC_PARAMS, &NONE, vec![])?.args()
    }

    pub fn attest(&self, offer: &ChannelOffer) -> Result<Quote, CoreError> {
        call(&self.boundary, opcode::ATTEST, offer, vec![])?.args()
    }

    pub fn provision(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, CoreError> {
        let f = call(&self.boundary, opcode::PROVISION, &ChannelArgs { channel }, msg.to_bytes())?;
        sealed(&f.payload)
    }

    pub fn update_policy(&self, channel: ChannelId, msg: &Sealed) -> Result<Sealed, CoreError> {
        let f =
            call(&self.boundary, opcode::UPDATE_POLICY, &ChannelArgs { channel }, msg.to_bytes())?;
        sealed(&f.payload)
    }

    pub fn unlock(
        &self,
        token: &QueryToken,
        collections: &[SealedCollection],
    ) -> Result<u64, CoreError> {
        let args = UnlockArgs {
            collections: collections
                .iter()
                .map(|c| CollectionHeaderArgs { name: c.name.clone(), cid: c.cid, docs: c.docs.len() })
                .collect(),
        };
        let docs: Vec<Vec<u8>> =
            collections.iter().flat_map(|c| c.docs.iter().map(Sealed::to_bytes)).collect();
        let payload =
            encode_blobs(std::iter::once(token.0.as_slice()).chain(docs.iter().map(Vec::as_slice)));
        Ok(call(&self.boundary, opcode::UNLOCK, &args, payload)?.args::<StateArgs>()?.s_id)
    }

    pub fn exec_operator(
        &self,
        f_name: &str,
        f_params: &serde_json::Value,
        inputs: &[u64],
    ) -> Result<u64, CoreError> {
        let args = ExecArgs { f_name: f_name.into(), f_params: f_params.clone(), inputs: inputs.to_vec() };
        Ok(call(&self.boundary, opcode::EXEC_OPERATOR, &args, vec![])?.args::<StateArgs>()?.s_id)
    }

    pub fn finalize(&self, s_id: u64) -> Result<ResponseEnvelope, CoreError> {
        call(&self.boundary, opcode::FINALIZE, &StateArgs { s_id }, vec![])?.args()
    }

    pub fn abort(&self) -> Result<(), CoreError> {
        call(&self.boundary, opcode::ABORT, &NONE, vec![]).map(|_| ())
    }

    pub fn status(&self) -> Result<Option<SessionStatus>, CoreError> {
        call(&self.boundary, opcode::STATUS, &NONE, vec![])?.args()
    }

    pub fn worker_challenge(&self, worker_id: &str) -> Result<ChannelOffer, CoreError> {
        call(&self.boundary, opcode::WORKER_CHALLENGE, &WorkerIdArgs { worker_id: worker_id.into() }, vec![])?
            .args()
    }

    pub fn admit_worker(
        &self,
        descriptor: &WorkerDescriptor,
        quote: &Quote,
    ) -> Result<Sealed, CoreError> {
        let args = AdmitArgs { descriptor: descriptor.clone(), quote: quote.clone() };
        sealed(&call(&self.boundary, opcode::ADMIT_WORKER, &args, vec![])?.payload)
    }

    pub fn begin_remote(
        &self,
        worker_id: &str,
        f_name: &str,
        f_params: &serde_json::Value,
        inputs: &[u64],
    ) -> Result<Sealed, CoreError> {
        let args = RemoteArgs {
            worker_id: worker_id.into(),
            f_name: f_name.into(),
            f_params: f_params.clone(),
            inputs: inputs.to_vec(),
        };
        sealed(&call(&self.boundary, opcode::BEGIN_REMOTE, &args, vec![])?.payload)
    }

    pub fn complete_remote(&self, result: &Sealed) -> Result<u64, CoreError> {
        Ok(call(&self.boundary, opcode::COMPLETE_REMOTE, &NONE, result.to_bytes())?
            .args::<StateArgs>()?
            .s_id)
    }
}

/// Typed client for a worker.
pub struct WorkerClient<'a, B: ?Sized> {
    boundary: &'a B,
}

impl<'a, B: Boundary + ?Sized> WorkerClient<'a, B> {
    pub fn new(boundary: &'a B) -> Self {
        Self { boundary }
    }

    pub fn attest(&self, offer: &ChannelOffer) -> Result<Quote, CoreError> {
        call(self.boundary, opcode::WORKER_ATTEST, offer, vec![])?.args()
    }

    pub fn install_key(&self, sealed_key: &Sealed) -> Result<(), CoreError> {
        call(self.boundary, opcode::WORKER_INSTALL_KEY, &NONE, sealed_key.to_bytes()).map(|_| ())
    }

    pub fn execute(&self, task: &Sealed) -> Result<Sealed, CoreError> {
        sealed(&call(self.boundary, opcode::WORKER_EXECUTE, &NONE, task.to_bytes())?.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(opcode::EXEC_OPERATOR, &serde_json::json!({"a": 1}), vec![1, 2, 3]);
        let bytes = f.encode();
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        assert_eq!(Frame::read_from(&mut bytes.as_slice()).unwrap(), f);
        assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn blobs_round_trip() {
        let parts: [&[u8]; 3] = [b"tk", b"", b"doc"];
        let enc = encode_blobs(parts);
        assert_eq!(decode_blobs(&enc).unwrap(), parts);
        assert!(decode_blobs(&enc[..enc.len() - 1]).is_err());
    }

    #[test]
    fn errors_cross_the_boundary() {
        let client = CoreClient::new(EnclaveHandle::new(TrustedCore::new()));
        assert!(matches!(client.public_params(), Err(CoreError::State(_))));
        client.init(128).unwrap();
        assert!(matches!(client.init(128), Err(CoreError::State(_))));
        assert!(matches!(client.exec_operator("projection", &serde_json::json!({}), &[0]), Err(CoreError::State(_))));
        let resp = EnclaveHandle::new(TrustedCore::new()).call(&[0, 0, 0, 5, 0x7f, 0, 0, 0, 0]);
        let f = Frame::decode(&resp).unwrap();
        assert_eq!(f.code, opcode::ERR);
    }
}

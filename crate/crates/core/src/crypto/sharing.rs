//! Two-level secret sharing over a bilinear group.
//!
//! `setup` draws exponents `r`, `m` and per-user `t_i` and hands out
//!
//! * the data key `sk = H(e(g1, g2)^m)`,
//! * the enclave share `sk_a = (g1^{t_1}, .., g1^{t_n}, e(g1, g2)^{r+m})`,
//! * user shares `sk_b^i = g2^{(2r+m)/t_i}`.
//!
//! The enclave recovers `e(g1, g2)^m = blind^2 / e(g1^{t_i}, sk_b^i)` only
//! when handed a user share, so neither side alone can decrypt. The curve is
//! BLS12-381; the enclave half lives in G1 and the user half in G2.

use std::collections::BTreeMap;

use ark_bls12_381::{Bls12_381, Fq, Fq12, Fr, G1Affine, G1Projective, G2Affine, G2Projective};
use ark_ec::pairing::{Pairing, PairingOutput};
use ark_ec::{AffineRepr, CurveGroup, PrimeGroup};
use ark_ff::{AdditiveGroup, BigInteger, Field, One, PrimeField, UniformRand, Zero};
use ark_serialize::{CanonicalDeserialize, CanonicalSerialize};
use rand::{CryptoRng, RngCore};
use zeroize::Zeroize;

use super::aead::{AeadError, AeadKey, Sealed};
use super::hash::{sha256, sha256_parts};
use crate::ids::{CollectionId, Uid};
use crate::policy::Policy;

/// Target-group element in additive notation.
pub type Gt = PairingOutput<Bls12_381>;

pub const SUPPORTED_SECURITY_BITS: u32 = 128;
pub const G1_BYTES: usize = 48;
pub const G2_BYTES: usize = 96;
/// Twelve base-field coordinates of 48 bytes each.
pub const GT_BYTES: usize = 12 * 48;

const SHARE_SET_MAGIC: &[u8; 5] = b"QSHD1";
const USER_SHARE_MAGIC: &[u8; 5] = b"QSHU1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SharingError {
    #[error("unsupported security level {0} bits (supported: 128)")]
    Configuration(u32),
    #[error("invalid argument: {0}")]
    Argument(&'static str),
    #[error("shares belong to different group contexts")]
    Context,
    #[error("user is not authorized by the access policy")]
    Authorization,
    #[error("ciphertext failed authentication")]
    Integrity,
    #[error("malformed encoding: {0}")]
    Encoding(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Bls12_381,
}

/// The bilinear group the scheme runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupContext {
    curve: Curve,
    security_level: u32,
}

impl GroupContext {
    pub fn new(security_bits: u32) -> Result<Self, SharingError> {
        if security_bits != SUPPORTED_SECURITY_BITS {
            return Err(SharingError::Configuration(security_bits));
        }
        Ok(Self { curve: Curve::Bls12_381, security_level: security_bits })
    }

    pub fn bls12_381() -> Self {
        Self { curve: Curve::Bls12_381, security_level: SUPPORTED_SECURITY_BITS }
    }

    pub fn curve(&self) -> Curve {
        self.curve
    }

    pub fn security_level(&self) -> u32 {
        self.security_level
    }

    /// Big-endian group order `p`.
    pub fn order_be_bytes(&self) -> Vec<u8> {
        Fr::MODULUS.to_bytes_be()
    }

    pub fn g1(&self) -> G1Affine {
        G1Affine::generator()
    }

    pub fn g2(&self) -> G2Affine {
        G2Affine::generator()
    }

    pub fn pair(&self, a: &G1Affine, b: &G2Affine) -> Gt {
        Bls12_381::pairing(a, b)
    }

    pub fn gt_generator(&self) -> Gt {
        self.pair(&self.g1(), &self.g2())
    }

    pub fn is_non_degenerate(&self) -> bool {
        !self.gt_generator().is_zero()
    }

    /// Checks `e(g1^a, g2^b) == e(g1, g2)^(a*b)` for random `a`, `b`.
    pub fn spot_check_bilinearity<R: RngCore + CryptoRng>(&self, rng: &mut R) -> bool {
        let a = Fr::rand(rng);
        let b = Fr::rand(rng);
        let lhs = self.pair(
            &(G1Projective::generator() * a).into_affine(),
            &(G2Projective::generator() * b).into_affine(),
        );
        lhs == self.gt_generator() * (a * b)
    }
}

/// Setup-time exponents. Never leaves `setup` outside of tests.
pub(crate) struct MasterSecret {
    pub(crate) r: Fr,
    pub(crate) m: Fr,
    pub(crate) t: Vec<Fr>,
}

impl Drop for MasterSecret {
    fn drop(&mut self) {
        self.r.zeroize();
        self.m.zeroize();
        self.t.iter_mut().for_each(Zeroize::zeroize);
    }
}

/// `sk_a`: one G1 element per user plus the blinding target-group element.
#[derive(Clone, PartialEq, Eq)]
pub struct EnclaveShare {
    context: GroupContext,
    u: Vec<G1Affine>,
    blind: Gt,
}

/// `sk_b^i`, held by data user `i` (1-based).
#[derive(Clone, PartialEq, Eq)]
pub struct UserShare {
    context: GroupContext,
    index: u32,
    v: G2Affine,
}

/// The 256-bit data key. Wiped on drop.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(AeadKey);

pub type Ciphertext = Sealed;

/// A document ciphertext labelled with the collection it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedCiphertext {
    pub cid: CollectionId,
    pub ct: Ciphertext,
}

/// Plaintexts recovered for one user, grouped by collection.
pub type AuthorizedPlaintexts = BTreeMap<CollectionId, Vec<Vec<u8>>>;

pub struct ShareSet {
    pub key: SymmetricKey,
    pub enclave: EnclaveShare,
    pub users: Vec<UserShare>,
}

pub fn setup(security_bits: u32, n: usize) -> Result<ShareSet, SharingError> {
    let ctx = GroupContext::new(security_bits)?;
    let (set, _master) = setup_with_master(ctx, n, &mut rand::thread_rng())?;
    Ok(set)
}

pub(crate) fn setup_with_master<R: RngCore + CryptoRng>(
    ctx: GroupContext,
    n: usize,
    rng: &mut R,
) -> Result<(ShareSet, MasterSecret), SharingError> {
    if n == 0 {
        return Err(SharingError::Argument("number of users must be at least 1"));
    }
    if n > u32::MAX as usize {
        return Err(SharingError::Argument("too many users"));
    }
    let r = nonzero_scalar(rng);
    let m = nonzero_scalar(rng);
    let mut t: Vec<Fr> = Vec::with_capacity(n);
    while t.len() < n {
        let candidate = nonzero_scalar(rng);
        if !t.contains(&candidate) {
            t.push(candidate);
        }
    }
    let master = MasterSecret { r, m, t };

    let egg = ctx.gt_generator();
    let key = key_from_gt(&(egg * master.m));
    let blind = egg * (master.r + master.m);
    let two_r_plus_m = master.r.double() + master.m;

    let g1 = G1Projective::generator();
    let g2 = G2Projective::generator();
    let u_proj: Vec<G1Projective> = master.t.iter().map(|ti| g1 * ti).collect();
    let v_proj: Vec<G2Projective> = master
        .t
        .iter()
        .map(|ti| g2 * (two_r_plus_m * ti.inverse().expect("t_i is nonzero")))
        .collect();
    let u = G1Projective::normalize_batch(&u_proj);
    let users = G2Projective::normalize_batch(&v_proj)
        .into_iter()
        .enumerate()
        .map(|(i, v)| UserShare { context: ctx, index: i as u32 + 1, v })
        .collect();

    let set = ShareSet { key, enclave: EnclaveShare { context: ctx, u, blind }, users };
    Ok((set, master))
}

fn nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Fr {
    loop {
        let x = Fr::rand(rng);
        if !x.is_zero() {
            return x;
        }
    }
}

fn key_from_gt(element: &Gt) -> SymmetricKey {
    SymmetricKey(AeadKey::from_bytes(sha256(&encode_gt(element))))
}

/// Encrypts `msg` under the data key with no associated data.
pub fn encrypt(key: &SymmetricKey, msg: &[u8]) -> Result<Ciphertext, SharingError> {
    encrypt_with_context(key, msg, &[])
}

/// Encrypts a document bound to its collection id; the id is authenticated
/// as associated data so ciphertexts cannot be moved between collections.
pub fn encrypt_document(
    key: &SymmetricKey,
    cid: &CollectionId,
    msg: &[u8],
) -> Result<Ciphertext, SharingError> {
    encrypt_with_context(key, msg, cid.as_bytes())
}

fn encrypt_with_context(
    key: &SymmetricKey,
    msg: &[u8],
    aad: &[u8],
) -> Result<Ciphertext, SharingError> {
    if msg.is_empty() {
        return Err(SharingError::Argument("message must be nonempty"));
    }
    Ok(key.0.seal(msg, aad))
}

/// Inverse of [`encrypt`].
pub fn open(key: &SymmetricKey, ct: &Ciphertext) -> Result<Vec<u8>, SharingError> {
    key.0.open(ct, &[]).map_err(aead_to_sharing)
}

pub fn open_document(
    key: &SymmetricKey,
    cid: &CollectionId,
    ct: &Ciphertext,
) -> Result<Vec<u8>, SharingError> {
    key.0.open(ct, cid.as_bytes()).map_err(aead_to_sharing)
}

fn aead_to_sharing(e: AeadError) -> SharingError {
    match e {
        AeadError::Malformed => SharingError::Encoding("ciphertext"),
        _ => SharingError::Integrity,
    }
}

/// Recovers the data key from the enclave share and one user share.
pub fn reconstruct_key(
    sk_a: &EnclaveShare,
    sk_b: &UserShare,
) -> Result<SymmetricKey, SharingError> {
    if sk_a.context != sk_b.context {
        return Err(SharingError::Context);
    }
    let slot = (sk_b.index as usize)
        .checked_sub(1)
        .filter(|i| *i < sk_a.u.len())
        .ok_or(SharingError::Argument("user share index out of range"))?;
    // e(g1^{t_i}, g2^{(2r+m)/t_i}) = e(g1, g2)^{2r+m}
    let masked = sk_a.context.pair(&sk_a.u[slot], &sk_b.v);
    // (e^{r+m})^2 / e^{2r+m} = e^m
    let mut recovered = sk_a.blind.double() - masked;
    let key = key_from_gt(&recovered);
    recovered.zeroize();
    Ok(key)
}

/// Reconstructs the data key, decrypts every ciphertext, and keeps only the
/// collections the policy grants to the owner of `sk_b`.
pub fn decrypt(
    pol: &Policy,
    sk_a: &EnclaveShare,
    sk_b: &UserShare,
    ct: &[TaggedCiphertext],
) -> Result<AuthorizedPlaintexts, SharingError> {
    let entry = pol.lookup(&sk_b.uid()).ok_or(SharingError::Authorization)?;
    // Dropping `key` wipes it.
    let key = reconstruct_key(sk_a, sk_b)?;
    let mut plaintexts = Vec::with_capacity(ct.len());
    for item in ct {
        plaintexts.push((item.cid, open_document(&key, &item.cid, &item.ct)?));
    }
    drop(key);
    let mut out = AuthorizedPlaintexts::new();
    for (cid, pt) in plaintexts {
        if entry.cids.contains(&cid) {
            out.entry(cid).or_default().push(pt);
        }
    }
    Ok(out)
}

impl SymmetricKey {
    pub fn as_aead(&self) -> &AeadKey {
        &self.0
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        *self.0.as_bytes()
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(AeadKey::from_bytes(bytes))
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl EnclaveShare {
    pub fn context(&self) -> GroupContext {
        self.context
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.u.len() * G1_BYTES + GT_BYTES);
        out.extend_from_slice(&(self.u.len() as u32).to_be_bytes());
        for u in &self.u {
            out.extend_from_slice(&encode_g1(u));
        }
        out.extend_from_slice(&encode_gt(&self.blind));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SharingError> {
        let mut reader = Reader::new(bytes);
        let n = reader.u32()? as usize;
        let share = Self::read_body(&mut reader, n)?;
        reader.finish()?;
        Ok(share)
    }

    fn read_body(reader: &mut Reader<'_>, n: usize) -> Result<Self, SharingError> {
        if n == 0 {
            return Err(SharingError::Encoding("empty enclave share"));
        }
        let mut u = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            u.push(decode_g1(reader.take(G1_BYTES)?)?);
        }
        let blind = decode_gt(reader.take(GT_BYTES)?)?;
        Ok(Self { context: GroupContext::bls12_381(), u, blind })
    }
}

impl std::fmt::Debug for EnclaveShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EnclaveShare(n={}, ..)", self.u.len())
    }
}

impl UserShare {
    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn context(&self) -> GroupContext {
        self.context
    }

    pub fn element_bytes(&self) -> [u8; G2_BYTES] {
        encode_g2(&self.v)
    }

    /// `uid = H(encoding of sk_b)`.
    pub fn uid(&self) -> Uid {
        Uid(sha256(&self.element_bytes()))
    }

    /// Key under which query results are returned to this user.
    pub fn result_key(&self) -> AeadKey {
        AeadKey::from_bytes(sha256_parts(&[b"qshield/result-key/v1\0", &self.element_bytes()]))
    }

    /// `"QSHU1" || index (u32 BE) || compressed G2 element`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = USER_SHARE_MAGIC.to_vec();
        out.extend_from_slice(&self.raw_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SharingError> {
        let mut reader = Reader::new(bytes);
        if reader.take(USER_SHARE_MAGIC.len())? != USER_SHARE_MAGIC {
            return Err(SharingError::Encoding("bad user share magic"));
        }
        let share = Self::read_raw(&mut reader)?;
        reader.finish()?;
        Ok(share)
    }

    /// `index (u32 BE) || compressed G2 element`, without the file magic.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + G2_BYTES);
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.element_bytes());
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self, SharingError> {
        let mut reader = Reader::new(bytes);
        let share = Self::read_raw(&mut reader)?;
        reader.finish()?;
        Ok(share)
    }

    fn read_raw(reader: &mut Reader<'_>) -> Result<Self, SharingError> {
        let index = reader.u32()?;
        if index == 0 {
            return Err(SharingError::Encoding("user share index must be positive"));
        }
        let v = decode_g2(reader.take(G2_BYTES)?)?;
        if v.is_zero() {
            return Err(SharingError::Encoding("identity user share"));
        }
        Ok(Self { context: GroupContext::bls12_381(), index, v })
    }

    #[cfg(test)]
    pub(crate) fn with_context(mut self, context: GroupContext) -> Self {
        self.context = context;
        self
    }
}

impl std::fmt::Debug for UserShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "UserShare(index={}, ..)", self.index)
    }
}

impl ShareSet {
    pub fn n(&self) -> usize {
        self.users.len()
    }

    /// `"QSHD1" || n (u32 BE) || sk_a elements || n x (index || G2 element)`.
    /// The data key is not exported; [`ShareSet::import`] re-derives it.
    pub fn export(&self) -> Vec<u8> {
        let mut out = SHARE_SET_MAGIC.to_vec();
        out.extend_from_slice(&self.enclave.to_bytes());
        for user in &self.users {
            out.extend_from_slice(&user.raw_bytes());
        }
        out
    }

    pub fn import(bytes: &[u8]) -> Result<Self, SharingError> {
        let mut reader = Reader::new(bytes);
        if reader.take(SHARE_SET_MAGIC.len())? != SHARE_SET_MAGIC {
            return Err(SharingError::Encoding("bad share set magic"));
        }
        let n = reader.u32()? as usize;
        let enclave = EnclaveShare::read_body(&mut reader, n)?;
        let mut users = Vec::with_capacity(n);
        for _ in 0..n {
            users.push(UserShare::read_raw(&mut reader)?);
        }
        reader.finish()?;
        let key = reconstruct_key(&enclave, &users[0])?;
        for user in &users[1..] {
            if reconstruct_key(&enclave, user)? != key {
                return Err(SharingError::Encoding("inconsistent share set"));
            }
        }
        Ok(Self { key, enclave, users })
    }
}

pub fn encode_g1(p: &G1Affine) -> [u8; G1_BYTES] {
    let mut out = [0u8; G1_BYTES];
    p.serialize_compressed(&mut out[..]).expect("fixed-size G1 encoding");
    out
}

pub fn encode_g2(p: &G2Affine) -> [u8; G2_BYTES] {
    let mut out = [0u8; G2_BYTES];
    p.serialize_compressed(&mut out[..]).expect("fixed-size G2 encoding");
    out
}

fn decode_g1(bytes: &[u8]) -> Result<G1Affine, SharingError> {
    G1Affine::deserialize_compressed(bytes).map_err(|_| SharingError::Encoding("G1 element"))
}

fn decode_g2(bytes: &[u8]) -> Result<G2Affine, SharingError> {
    G2Affine::deserialize_compressed(bytes).map_err(|_| SharingError::Encoding("G2 element"))
}

fn fq12_coefficients(x: &Fq12) -> [Fq; 12] {
    let mut out = [Fq::zero(); 12];
    let mut k = 0;
    for fq6 in [&x.c0, &x.c1] {
        for fq2 in [&fq6.c0, &fq6.c1, &fq6.c2] {
            out[k] = fq2.c0;
            out[k + 1] = fq2.c1;
            k += 2;
        }
    }
    out
}

/// Canonical target-group encoding: the twelve base-field coefficients in the
/// fixed tower order (c0.c0.c0, c0.c0.c1, c0.c1.c0, .., c1.c2.c1), each as a
/// 48-byte big-endian integer.
pub fn encode_gt(element: &Gt) -> [u8; GT_BYTES] {
    let mut out = [0u8; GT_BYTES];
    for (chunk, coeff) in out.chunks_exact_mut(48).zip(fq12_coefficients(&element.0)) {
        let be = coeff.into_bigint().to_bytes_be();
        chunk[48 - be.len()..].copy_from_slice(&be);
    }
    out
}

pub fn decode_gt(bytes: &[u8]) -> Result<Gt, SharingError> {
    if bytes.len() != GT_BYTES {
        return Err(SharingError::Encoding("GT element length"));
    }
    let mut coeffs = [Fq::zero(); 12];
    for (slot, chunk) in coeffs.iter_mut().zip(bytes.chunks_exact(48)) {
        let fe = Fq::from_be_bytes_mod_order(chunk);
        let mut reencoded = [0u8; 48];
        let be = fe.into_bigint().to_bytes_be();
        reencoded[48 - be.len()..].copy_from_slice(&be);
        if reencoded != chunk {
            return Err(SharingError::Encoding("GT coefficient not reduced"));
        }
        *slot = fe;
    }
    use ark_bls12_381::{Fq2, Fq6};
    let fq2 = |i: usize| Fq2::new(coeffs[i], coeffs[i + 1]);
    let x = Fq12::new(Fq6::new(fq2(0), fq2(2), fq2(4)), Fq6::new(fq2(6), fq2(8), fq2(10)));
    if x.is_zero() || !x.pow(Fr::MODULUS).is_one() {
        return Err(SharingError::Encoding("GT element outside the prime-order subgroup"));
    }
    Ok(PairingOutput(x))
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SharingError> {
        if self.bytes.len() < n {
            return Err(SharingError::Encoding("truncated input"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, SharingError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), SharingError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(SharingError::Encoding("trailing bytes"))
        }
    }
}

//! Content hashes and execution identities.
//!
//! Every hashed structure goes through a small length-prefixed encoding so
//! identity never depends on map iteration order or on how adjacent fields
//! happen to concatenate:
//!
//! * integers are 8-byte big-endian `u64`
//! * strings and byte strings are `u64 length ++ bytes`
//! * digests are their 32 raw bytes
//! * maps are `u64 count` followed by entries sorted by key bytes
//!
//! Each structure starts with a versioned domain tag (`lineage/spec/v1`,
//! `lineage/input/v1`, `lineage/identity/v1`, `lineage/config/v1`). The full
//! layouts are documented in `docs/encoding.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ContextBinding, NodeId, NodeSpec, PortDecl, PortSource};

const SPEC_TAG: &str = "lineage/spec/v1";
const INPUT_TAG: &str = "lineage/input/v1";
const IDENTITY_TAG: &str = "lineage/identity/v1";
const CONFIG_TAG: &str = "lineage/config/v1";

/// A SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub const ALGORITHM: &'static str = "sha-256";

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First `n` hex characters, for human-facing output.
    pub fn short(&self, n: usize) -> String {
        let mut s = self.to_hex();
        s.truncate(n);
        s
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.short(12))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseHashError {
    #[error("digest must be 64 lowercase hex characters, got {0} characters")]
    Length(usize),
    #[error("digest is not lowercase hex")]
    NotHex,
}

impl FromStr for ContentHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(ParseHashError::Length(s.len()));
        }
        if !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(ParseHashError::NotHex);
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseHashError::NotHex)?;
        Ok(Self(out))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hash_content(content: &[u8]) -> ContentHash {
    ContentHash(Sha256::digest(content).into())
}

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn tagged(tag: &str) -> Self {
        let mut e = Self::default();
        e.bytes(tag.as_bytes());
        e
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    fn hash(&mut self, h: &ContentHash) -> &mut Self {
        self.buf.extend_from_slice(&h.0);
        self
    }

    fn string_map(&mut self, map: &BTreeMap<String, String>) -> &mut Self {
        self.u64(map.len() as u64);
        for (k, v) in map {
            self.bytes(k.as_bytes()).bytes(v.as_bytes());
        }
        self
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Canonical encoding of a node's structural specification.
///
/// Config keys are sorted (by the `BTreeMap`); input ports keep their
/// declared order because port order is part of the node's signature.
pub fn canonical_bytes(spec: &NodeSpec) -> Vec<u8> {
    let mut e = Encoder::tagged(SPEC_TAG);
    e.bytes(spec.id.as_str().as_bytes())
        .bytes(spec.executor.as_bytes())
        .string_map(&spec.config)
        .u64(spec.inputs.len() as u64);
    for port in &spec.inputs {
        e.bytes(port.name.as_bytes()).bytes(port.artifact_type.as_bytes());
        e.buf.push(match port.source {
            PortSource::Dependency => 0,
            PortSource::Context => 1,
        });
    }
    e.bytes(spec.output_type.as_bytes());
    e.finish()
}

pub fn spec_hash(spec: &NodeSpec) -> ContentHash {
    hash_content(&canonical_bytes(spec))
}

/// Digest of an executor configuration alone.
pub fn config_digest(config: &BTreeMap<String, String>) -> ContentHash {
    let mut e = Encoder::tagged(CONFIG_TAG);
    e.string_map(config);
    hash_content(&e.finish())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("unexpected domain tag")]
    BadTag,
    #[error("invalid UTF-8 string")]
    Utf8,
    #[error("invalid port source byte {0}")]
    BadSource(u8),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(DecodeError::Truncated(self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DecodeError::Utf8)
    }
}

/// Inverse of [`canonical_bytes`].
pub fn decode_spec(bytes: &[u8]) -> Result<NodeSpec, DecodeError> {
    let mut d = Decoder { buf: bytes, pos: 0 };
    if d.string()? != SPEC_TAG {
        return Err(DecodeError::BadTag);
    }
    let id = NodeId::new(d.string()?);
    let executor = d.string()?;
    let mut config = BTreeMap::new();
    for _ in 0..d.u64()? {
        let k = d.string()?;
        config.insert(k, d.string()?);
    }
    let mut inputs = Vec::new();
    for _ in 0..d.u64()? {
        let name = d.string()?;
        let artifact_type = d.string()?;
        let source = match d.take(1)?[0] {
            0 => PortSource::Dependency,
            1 => PortSource::Context,
            other => return Err(DecodeError::BadSource(other)),
        };
        inputs.push(PortDecl { name, artifact_type, source });
    }
    let output_type = d.string()?;
    if d.pos != bytes.len() {
        return Err(DecodeError::Trailing(bytes.len() - d.pos));
    }
    Ok(NodeSpec {
        id,
        executor,
        config,
        inputs,
        output_type,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("port `{0}` appears more than once in the context")]
    DuplicatePort(String),
    #[error("identity {stored} does not match its components (recomputed {recomputed})")]
    SelfCheck { stored: ContentHash, recomputed: ContentHash },
}

/// Hash over the context bindings of a node, sorted by port name.
pub fn compute_input_hash(context: &[ContextBinding]) -> Result<ContentHash, IdentityError> {
    let mut sorted: Vec<&ContextBinding> = context.iter().collect();
    sorted.sort_by(|a, b| a.port.cmp(&b.port));
    let mut seen = BTreeSet::new();
    let mut e = Encoder::tagged(INPUT_TAG);
    e.u64(sorted.len() as u64);
    for b in sorted {
        if !seen.insert(b.port.as_str()) {
            return Err(IdentityError::DuplicatePort(b.port.clone()));
        }
        e.bytes(b.port.as_bytes()).bytes(b.content_type.as_bytes()).hash(&hash_content(&b.content));
    }
    Ok(hash_content(&e.finish()))
}

/// The execution identity of a node together with the components it was
/// derived from. Deserialized identities should be checked with
/// [`ExecutionIdentity::verify`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionIdentity {
    pub value: ContentHash,
    pub spec_hash: ContentHash,
    pub input_hash: ContentHash,
    pub predecessors: BTreeMap<String, ContentHash>,
}

impl ExecutionIdentity {
    pub fn recompute(&self) -> ContentHash {
        identity_value(&self.spec_hash, &self.input_hash, &self.predecessors)
    }

    pub fn verify(&self) -> Result<(), IdentityError> {
        let recomputed = self.recompute();
        if recomputed == self.value {
            Ok(())
        } else {
            Err(IdentityError::SelfCheck {
                stored: self.value,
                recomputed,
            })
        }
    }
}

fn identity_value(spec: &ContentHash, input: &ContentHash, preds: &BTreeMap<String, ContentHash>) -> ContentHash {
    let mut e = Encoder::tagged(IDENTITY_TAG);
    e.hash(spec).hash(input).u64(preds.len() as u64);
    for (port, h) in preds {
        e.bytes(port.as_bytes()).hash(h);
    }
    hash_content(&e.finish())
}

pub fn compute_execution_identity(
    spec_hash: ContentHash,
    input_hash: ContentHash,
    predecessors: BTreeMap<String, ContentHash>,
) -> ExecutionIdentity {
    ExecutionIdentity {
        value: identity_value(&spec_hash, &input_hash, &predecessors),
        spec_hash,
        input_hash,
        predecessors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(s: &str) -> ContentHash {
        s.parse().unwrap()
    }

    fn spec() -> NodeSpec {
        NodeSpec::new("n", "synthesis", "text")
            .with_input(PortDecl::context("x", "text"))
            .with_input(PortDecl::dependency("y", "text"))
    }

    #[test]
    fn sha256_vectors() {
        assert_eq!(
            hash_content(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_content(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn all_single_byte_inputs_hash_distinctly() {
        let digests: BTreeSet<ContentHash> = (0..=255u8).map(|b| hash_content(&[b])).collect();
        assert_eq!(digests.len(), 256);
        assert!(!digests.contains(&hash_content(b"")));
    }

    #[test]
    fn hex_parsing() {
        let x = hash_content(b"abc");
        assert_eq!(x.to_hex().parse::<ContentHash>().unwrap(), x);
        assert_eq!("ab".parse::<ContentHash>(), Err(ParseHashError::Length(2)));
        assert_eq!(x.to_hex().to_uppercase().parse::<ContentHash>(), Err(ParseHashError::NotHex));
        assert_eq!(serde_json::to_string(&x).unwrap(), format!("\"{}\"", x.to_hex()));
    }

    #[test]
    fn config_key_order_is_irrelevant() {
        let mut a = spec();
        a.config.insert("b".into(), "2".into());
        a.config.insert("a".into(), "1".into());
        let mut b = spec();
        b.config.insert("a".into(), "1".into());
        b.config.insert("b".into(), "2".into());
        assert_eq!(canonical_bytes(&a), canonical_bytes(&b));
        b.config.insert("b".into(), "3".into());
        assert_ne!(canonical_bytes(&a), canonical_bytes(&b));
    }

    #[test]
    fn port_order_is_semantic_and_round_trips() {
        let a = spec();
        let mut b = spec();
        b.inputs.reverse();
        let (ea, eb) = (canonical_bytes(&a), canonical_bytes(&b));
        assert_ne!(ea, eb);
        assert_eq!(decode_spec(&ea).unwrap(), a);
        assert_eq!(decode_spec(&eb).unwrap(), b);
        assert_eq!(decode_spec(&eb).unwrap().inputs[0].name, "y");
    }

    #[test]
    fn decode_rejects_garbage() {
        let bytes = canonical_bytes(&spec());
        assert!(matches!(decode_spec(&bytes[..bytes.len() - 1]), Err(DecodeError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_spec(&extra), Err(DecodeError::Trailing(1)));
        assert_eq!(decode_spec(&canonical_bytes_with_tag("other")), Err(DecodeError::BadTag));
    }

    fn canonical_bytes_with_tag(tag: &str) -> Vec<u8> {
        let mut e = Encoder::tagged(tag);
        e.u64(0);
        e.finish()
    }

    #[test]
    fn empty_input_hash_golden() {
        // sha256(u64be(16) ++ "lineage/input/v1" ++ u64be(0)), computed independently.
        assert_eq!(
            compute_input_hash(&[]).unwrap(),
            h("5895d17d23ea4ce80e01fa779c3a589d57dec9496c2445de6cd4dc0be758fd74")
        );
    }

    #[test]
    fn input_hash_is_order_independent() {
        let a = ContextBinding::new("a", b"one".to_vec(), "text");
        let b = ContextBinding::new("b", b"two".to_vec(), "text");
        assert_eq!(
            compute_input_hash(&[a.clone(), b.clone()]).unwrap(),
            compute_input_hash(&[b, a.clone()]).unwrap()
        );
        assert_eq!(
            compute_input_hash(&[a.clone(), a]),
            Err(IdentityError::DuplicatePort("a".into()))
        );
    }

    #[test]
    fn input_hash_sensitive_to_every_byte() {
        let content = b"context fragment".to_vec();
        let base = compute_input_hash(&[ContextBinding::new("p", content.clone(), "text")]).unwrap();
        let mut seen = BTreeSet::from([base]);
        for i in 0..content.len() {
            let mut flipped = content.clone();
            flipped[i] ^= 0x01;
            let d = compute_input_hash(&[ContextBinding::new("p", flipped, "text")]).unwrap();
            assert!(seen.insert(d), "byte {i} flip collided");
        }
    }

    #[test]
    fn input_hash_keeps_boundaries() {
        let split1 = [
            ContextBinding::new("a", b"ab".to_vec(), "t"),
            ContextBinding::new("b", b"c".to_vec(), "t"),
        ];
        let split2 = [
            ContextBinding::new("a", b"a".to_vec(), "t"),
            ContextBinding::new("b", b"bc".to_vec(), "t"),
        ];
        assert_ne!(compute_input_hash(&split1).unwrap(), compute_input_hash(&split2).unwrap());
    }

    #[test]
    fn source_identity_golden() {
        // sha256(u64be(19) ++ "lineage/identity/v1" ++ sha256("") ++ sha256("abc") ++ u64be(0))
        let id = compute_execution_identity(hash_content(b""), hash_content(b"abc"), BTreeMap::new());
        assert_eq!(id.value, h("234c5a22ee380c57a2fbf97c0ec53beebd37b6e74beeb55e34e3a6475820113f"));
        id.verify().unwrap();
    }

    #[test]
    fn predecessor_ports_are_semantic() {
        let (h1, h2) = (hash_content(b"1"), hash_content(b"2"));
        let s = hash_content(b"spec");
        let i = hash_content(b"input");
        let xy: BTreeMap<String, ContentHash> = [("x".into(), h1), ("y".into(), h2)].into();
        let yx: BTreeMap<String, ContentHash> = [("y".into(), h2), ("x".into(), h1)].into();
        let swapped: BTreeMap<String, ContentHash> = [("x".into(), h2), ("y".into(), h1)].into();
        let a = compute_execution_identity(s, i, xy);
        assert_eq!(a, compute_execution_identity(s, i, yx));
        let b = compute_execution_identity(s, i, swapped);
        assert_ne!(a.value, b.value);
        assert_eq!(b.recompute(), b.value);
    }

    #[test]
    fn tampered_identity_fails_verification() {
        let mut id = compute_execution_identity(hash_content(b"s"), hash_content(b"i"), BTreeMap::new());
        id.input_hash = hash_content(b"j");
        assert!(matches!(id.verify(), Err(IdentityError::SelfCheck { .. })));
    }
}

//! Pass-by-reference data model.
//!
//! Large byte payloads are replaced by small [`Reference`] tokens: a store
//! locator, a random 128-bit key, and a resolution recipe that carries
//! everything a remote site needs to fetch the bytes. References resolve
//! lazily on first access through a per-site [`cache::ResolveCache`].

mod cache;
mod ops;

pub use cache::{CacheStats, ResolveCache, DEFAULT_CACHE_CAPACITY};
pub use ops::{proxy, proxy_with_rng, resolve, restore, scan_and_proxy, Resolver, StoreRegistry};

use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::stores::StoreError;
use crate::wire::{self, Reader, WireError};

/// Identifier of an object store instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoreId(pub String);

impl StoreId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StoreId {
    fn from(s: &str) -> Self {
        StoreId(s.to_owned())
    }
}

/// Random 128-bit object key, rendered as 32 hex chars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key128(pub [u8; 16]);

impl Key128 {
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut k = [0u8; 16];
        rng.fill_bytes(&mut k);
        Key128(k)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 16] = bytes.try_into().ok()?;
        Some(Key128(arr))
    }
}

impl fmt::Display for Key128 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Locator of one stored object: owning store, unique key, exact size.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectKey {
    pub store_id: StoreId,
    pub key: Key128,
    pub size_bytes: u64,
}

/// The backend families a recipe can point at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    MemoryKv,
    Filesystem,
    WideArea,
}

impl StoreKind {
    pub fn code(self) -> u8 {
        match self {
            StoreKind::MemoryKv => 0,
            StoreKind::Filesystem => 1,
            StoreKind::WideArea => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(StoreKind::MemoryKv),
            1 => Ok(StoreKind::Filesystem),
            2 => Ok(StoreKind::WideArea),
            tag => Err(WireError::BadTag {
                what: "store kind",
                tag,
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StoreKind::MemoryKv => "memory-kv",
            StoreKind::Filesystem => "filesystem",
            StoreKind::WideArea => "wide-area",
        }
    }
}

/// Everything needed to fetch an object from a store with no side channel:
/// the store kind plus kind-specific connection parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionRecipe {
    pub store_kind: StoreKind,
    params: Vec<(String, String)>,
}

impl ResolutionRecipe {
    pub const PARAM_STORE_ID: &'static str = "store_id";
    pub const PARAM_ADDRESS: &'static str = "address";
    pub const PARAM_ROOT: &'static str = "root";
    pub const PARAM_TICKET: &'static str = "transfer_ticket_id";

    pub fn new(store_kind: StoreKind, store_id: &StoreId) -> Self {
        Self {
            store_kind,
            params: vec![(Self::PARAM_STORE_ID.to_owned(), store_id.0.clone())],
        }
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Self {
        self.params.push((key.to_owned(), value.to_owned()));
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn store_id(&self) -> StoreId {
        StoreId(self.param(Self::PARAM_STORE_ID).unwrap_or_default().to_owned())
    }

    pub fn params(&self) -> &[(String, String)] {
        &self.params
    }
}

/// SHA-256 digest of a byte payload.
pub fn content_digest(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Serialized references never exceed this, regardless of target size.
pub const MAX_REFERENCE_LEN: usize = 1024;

const REFERENCE_VERSION: u8 = 1;

/// A small serializable stand-in for a large stored object.
///
/// Wire format (bit-exact, cross-process): `u16` LE record length, then
/// version byte, store-kind byte, 16-byte key, `u64` LE size, 32-byte
/// digest, and the recipe parameters as a key/value section (the owning
/// store id travels as the `store_id` parameter).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reference {
    pub object_key: ObjectKey,
    pub recipe: ResolutionRecipe,
    pub content_digest: [u8; 32],
}

impl Reference {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(96);
        wire::put_u8(&mut body, REFERENCE_VERSION);
        wire::put_u8(&mut body, self.recipe.store_kind.code());
        body.extend_from_slice(&self.object_key.key.0);
        wire::put_u64(&mut body, self.object_key.size_bytes);
        body.extend_from_slice(&self.content_digest);
        wire::put_kv_pairs(
            &mut body,
            self.recipe.params.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        );
        assert!(
            body.len() + 2 <= MAX_REFERENCE_LEN,
            "encoded reference of {} bytes exceeds the {MAX_REFERENCE_LEN}-byte bound",
            body.len() + 2
        );
        let mut out = Vec::with_capacity(body.len() + 2);
        wire::put_u16(&mut out, body.len() as u16);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<(Self, usize), WireError> {
        let mut r = Reader::new(buf);
        let len = r.u16()? as usize;
        let body = r.bytes(len)?;
        let mut b = Reader::new(body);
        let version = b.u8()?;
        if version != REFERENCE_VERSION {
            return Err(WireError::BadTag {
                what: "reference version",
                tag: version,
            });
        }
        let store_kind = StoreKind::from_code(b.u8()?)?;
        let key = Key128(b.bytes(16)?.try_into().unwrap());
        let size_bytes = b.u64()?;
        let digest: [u8; 32] = b.bytes(32)?.try_into().unwrap();
        let params = b.kv_pairs()?;
        let recipe = ResolutionRecipe { store_kind, params };
        let store_id = recipe.store_id();
        if store_id.0.is_empty() {
            return Err(WireError::MissingField("store_id"));
        }
        Ok((
            Reference {
                object_key: ObjectKey {
                    store_id,
                    key,
                    size_bytes,
                },
                recipe,
                content_digest: digest,
            },
            2 + len,
        ))
    }
}

/// One named payload field: either inline bytes or a reference.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Inline(Vec<u8>),
    Reference(Reference),
}

impl FieldValue {
    pub fn is_reference(&self) -> bool {
        matches!(self, FieldValue::Reference(_))
    }

    pub fn inline_len(&self) -> Option<usize> {
        match self {
            FieldValue::Inline(b) => Some(b.len()),
            FieldValue::Reference(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayloadField {
    pub name: String,
    pub value: FieldValue,
}

/// Ordered list of named fields plus a small string metadata map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskPayload {
    fields: Vec<PayloadField>,
    metadata: BTreeMap<String, String>,
}

impl TaskPayload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_inline(
        &mut self,
        name: impl Into<String>,
        bytes: Vec<u8>,
    ) -> Result<(), ProxyError> {
        self.push(PayloadField {
            name: name.into(),
            value: FieldValue::Inline(bytes),
        })
    }

    pub fn push_reference(
        &mut self,
        name: impl Into<String>,
        reference: Reference,
    ) -> Result<(), ProxyError> {
        self.push(PayloadField {
            name: name.into(),
            value: FieldValue::Reference(reference),
        })
    }

    fn push(&mut self, field: PayloadField) -> Result<(), ProxyError> {
        if self.fields.iter().any(|f| f.name == field.name) {
            return Err(ProxyError::DuplicateField(field.name));
        }
        self.fields.push(field);
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn fields(&self) -> &[PayloadField] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldValue> {
        self.fields.iter().find(|f| f.name == name).map(|f| &f.value)
    }

    pub fn inline_bytes(&self, name: &str) -> Option<&[u8]> {
        match self.field(name)? {
            FieldValue::Inline(b) => Some(b.as_slice()),
            FieldValue::Reference(_) => None,
        }
    }

    pub fn reference_count(&self) -> usize {
        self.fields.iter().filter(|f| f.value.is_reference()).count()
    }

    /// Wire format: `u16` field count; per field a `u16`-length name, a tag
    /// byte (0 inline, 1 reference) and a `u32`-length value blob; then the
    /// metadata key/value section.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u16(&mut buf, self.fields.len() as u16);
        for f in &self.fields {
            wire::put_str(&mut buf, &f.name);
            match &f.value {
                FieldValue::Inline(b) => {
                    wire::put_u8(&mut buf, 0);
                    wire::put_blob(&mut buf, b);
                }
                FieldValue::Reference(r) => {
                    wire::put_u8(&mut buf, 1);
                    wire::put_blob(&mut buf, &r.encode());
                }
            }
        }
        wire::put_kv_pairs(
            &mut buf,
            self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        );
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let n = r.u16()? as usize;
        let mut fields = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str16()?.to_owned();
            let tag = r.u8()?;
            let blob = r.blob()?;
            let value = match tag {
                0 => FieldValue::Inline(blob.to_vec()),
                1 => FieldValue::Reference(Reference::decode(blob)?.0),
                tag => {
                    return Err(WireError::BadTag {
                        what: "payload field",
                        tag,
                    })
                }
            };
            fields.push(PayloadField { name, value });
        }
        let metadata = r.kv_pairs()?.into_iter().collect();
        Ok(TaskPayload { fields, metadata })
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}

/// Per-topic proxy threshold. `Disabled` is the +infinity sentinel: never
/// proxy. `Bytes(0)` proxies everything. Comparison is strict greater-than,
/// so a field exactly at the threshold stays inline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    Bytes(u64),
    Disabled,
}

impl Threshold {
    pub fn should_proxy(&self, field_len: usize) -> bool {
        match self {
            Threshold::Bytes(t) => (field_len as u64) > *t,
            Threshold::Disabled => false,
        }
    }
}

/// Threshold plus destination store for one topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicRule {
    pub threshold: Threshold,
    pub store_id: StoreId,
}

/// Per-topic proxying rules with a default for unmapped topics.
#[derive(Debug, Clone)]
pub struct ProxyPolicy {
    default_rule: TopicRule,
    topics: BTreeMap<String, TopicRule>,
}

impl ProxyPolicy {
    pub fn new(default_rule: TopicRule) -> Self {
        Self {
            default_rule,
            topics: BTreeMap::new(),
        }
    }

    /// Policy that never proxies anything.
    pub fn disabled() -> Self {
        Self::new(TopicRule {
            threshold: Threshold::Disabled,
            store_id: StoreId(String::new()),
        })
    }

    pub fn set_topic(&mut self, topic: impl Into<String>, rule: TopicRule) {
        self.topics.insert(topic.into(), rule);
    }

    pub fn rule_for(&self, topic: &str) -> &TopicRule {
        self.topics.get(topic).unwrap_or(&self.default_rule)
    }
}

/// Errors raised by proxying and resolution.
#[derive(Debug, Clone, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("integrity failure: stored bytes do not match reference digest for key {key}")]
    Integrity { key: String },
    #[error("no store binding for {0} at this site")]
    UnboundStore(StoreId),
    #[error("duplicate payload field {0}")]
    DuplicateField(String),
    #[error("payload field {field}: {source}")]
    Field {
        field: String,
        #[source]
        source: Box<ProxyError>,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl ProxyError {
    pub fn in_field(self, field: &str) -> ProxyError {
        ProxyError::Field {
            field: field.to_owned(),
            source: Box::new(self),
        }
    }

    /// Whether a retry could plausibly succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            ProxyError::Store(e) => e.is_retriable(),
            ProxyError::Field { source, .. } => source.is_retriable(),
            _ => false,
        }
    }
}

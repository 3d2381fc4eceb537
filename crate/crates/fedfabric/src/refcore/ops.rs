//! Proxying and resolution: place bytes in a store eagerly, fetch them
//! lazily through the per-site cache.

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use parking_lot::RwLock;
use rand::RngCore;

use super::{
    content_digest, FieldValue, Key128, ObjectKey, PayloadField, ProxyError, ProxyPolicy,
    Reference, ResolutionRecipe, ResolveCache, StoreId, StoreKind, TaskPayload,
};
use crate::stores::ObjectStore;

/// The store handles one site is configured with. A reference whose store
/// id is not registered here fails to resolve deterministically.
#[derive(Default)]
pub struct StoreRegistry {
    stores: RwLock<HashMap<StoreId, Arc<dyn ObjectStore>>>,
}

impl StoreRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, store: Arc<dyn ObjectStore>) {
        self.stores.write().insert(store.store_id().clone(), store);
    }

    pub fn get(&self, id: &StoreId) -> Result<Arc<dyn ObjectStore>, ProxyError> {
        self.stores
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ProxyError::UnboundStore(id.clone()))
    }

    pub fn ids(&self) -> Vec<StoreId> {
        self.stores.read().keys().cloned().collect()
    }
}

/// Place `data` in `store` and return the reference that resolves to it.
///
/// Keys are random 128-bit ids, not content hashes: storing the same bytes
/// twice occupies two keys. For wide-area stores the transfer is initiated
/// here (eager store, lazy fetch); the returned reference is valid while
/// the transfer is still in flight and resolution will block on it.
pub fn proxy(data: &[u8], store: &Arc<dyn ObjectStore>) -> Result<Reference, ProxyError> {
    let mut rng = rand::thread_rng();
    proxy_with_rng(data, store, &mut rng)
}

pub fn proxy_with_rng<R: RngCore>(
    data: &[u8],
    store: &Arc<dyn ObjectStore>,
    rng: &mut R,
) -> Result<Reference, ProxyError> {
    let object_key = ObjectKey {
        store_id: store.store_id().clone(),
        key: Key128::random(rng),
        size_bytes: data.len() as u64,
    };
    let digest = content_digest(data);
    let ticket = store.put(&object_key, data)?;
    let mut recipe = store.recipe();
    if store.kind() == StoreKind::WideArea {
        recipe = recipe.with_param(ResolutionRecipe::PARAM_TICKET, &ticket.key.to_hex());
    }
    Ok(Reference {
        object_key,
        recipe,
        content_digest: digest,
    })
}

/// Site-local resolution context: the configured store handles plus the
/// resolve cache shared by every worker at the site.
#[derive(Clone)]
pub struct Resolver {
    registry: Arc<StoreRegistry>,
    cache: Arc<ResolveCache>,
}

impl Resolver {
    pub fn new(registry: Arc<StoreRegistry>, cache: Arc<ResolveCache>) -> Self {
        Self { registry, cache }
    }

    pub fn registry(&self) -> &Arc<StoreRegistry> {
        &self.registry
    }

    pub fn cache(&self) -> &Arc<ResolveCache> {
        &self.cache
    }

    /// Fetch the reference target, blocking on any in-flight wide-area
    /// transfer, verifying the digest, and populating the cache. Repeat
    /// resolves at this site are served from the cache with no store
    /// traffic.
    pub fn resolve(&self, reference: &Reference) -> Result<Arc<Vec<u8>>, ProxyError> {
        let store = self.registry.get(&reference.object_key.store_id)?;
        let key = reference.object_key.clone();
        let expected = reference.content_digest;
        self.cache.get_or_fetch(
            &reference.object_key.store_id,
            &reference.object_key.key,
            move || -> Result<Arc<Vec<u8>>, ProxyError> {
                let bytes = store.get(&key)?;
                if content_digest(&bytes) != expected {
                    return Err(ProxyError::Integrity {
                        key: key.key.to_hex(),
                    });
                }
                Ok(Arc::new(bytes))
            },
        )
    }
}

/// Convenience free function matching the resolver method.
pub fn resolve(reference: &Reference, resolver: &Resolver) -> Result<Arc<Vec<u8>>, ProxyError> {
    resolver.resolve(reference)
}

/// Replace every inline field longer than the topic's threshold with a
/// reference into the topic's configured store. Field order, names, and
/// sub-threshold fields are untouched.
///
/// On a mid-scan failure, objects already stored for this payload are
/// deleted best-effort before the error is returned.
pub fn scan_and_proxy(
    payload: &TaskPayload,
    policy: &ProxyPolicy,
    topic: &str,
    registry: &StoreRegistry,
) -> Result<TaskPayload, ProxyError> {
    let rule = policy.rule_for(topic);
    let mut out = TaskPayload::new();
    for (k, v) in payload.metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    let mut stored: Vec<(Arc<dyn ObjectStore>, ObjectKey)> = Vec::new();

    let mut scan = || -> Result<(), ProxyError> {
        for field in payload.fields() {
            let value = match &field.value {
                FieldValue::Inline(bytes) if rule.threshold.should_proxy(bytes.len()) => {
                    let store = registry
                        .get(&rule.store_id)
                        .map_err(|e| e.in_field(&field.name))?;
                    let reference =
                        proxy(bytes, &store).map_err(|e| e.in_field(&field.name))?;
                    stored.push((store, reference.object_key.clone()));
                    FieldValue::Reference(reference)
                }
                other => other.clone(),
            };
            out.push(PayloadField {
                name: field.name.clone(),
                value,
            })
            .map_err(|e| e.in_field(&field.name))?;
        }
        Ok(())
    };

    match scan() {
        Ok(()) => Ok(out),
        Err(e) => {
            for (store, key) in stored {
                if let Err(cleanup) = store.delete(&key) {
                    warn!(
                        "cleanup of partially proxied payload left {} in {}: {cleanup}",
                        key.key,
                        store.store_id()
                    );
                }
            }
            Err(e)
        }
    }
}

/// Materialize every reference field back into inline bytes. Inline fields
/// pass through untouched; a payload with no references performs no store
/// requests.
pub fn restore(payload: &TaskPayload, resolver: &Resolver) -> Result<TaskPayload, ProxyError> {
    let mut out = TaskPayload::new();
    for (k, v) in payload.metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    for field in payload.fields() {
        let value = match &field.value {
            FieldValue::Inline(bytes) => FieldValue::Inline(bytes.clone()),
            FieldValue::Reference(reference) => {
                let bytes = resolver
                    .resolve(reference)
                    .map_err(|e| e.in_field(&field.name))?;
                FieldValue::Inline(bytes.as_ref().clone())
            }
        };
        out.push(PayloadField {
            name: field.name.clone(),
            value,
        })?;
    }
    Ok(out)
}

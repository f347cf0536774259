use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::Tensor;

/// Named parameter (or gradient) tensors, iterated in name order.
pub type ParamStore = BTreeMap<String, Tensor>;

pub fn param<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .ok_or_else(|| Error::shape(format!("parameter `{name}` missing from store")))
}

/// Adds `grad` into `store[name]`, inserting it if absent.
pub fn accumulate(store: &mut ParamStore, name: &str, grad: Tensor) -> Result<()> {
    match store.get_mut(name) {
        Some(acc) => acc.add_scaled(&grad, 1.0),
        None => {
            store.insert(name.to_owned(), grad);
            Ok(())
        }
    }
}

/// Adds every tensor of `other`, scaled by `alpha`, into `into`.
pub fn add_store(into: &mut ParamStore, other: &ParamStore, alpha: f64) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(name) {
            Some(acc) => acc.add_scaled(g, alpha)?,
            None => {
                let mut g = g.clone();
                g.scale(alpha);
                into.insert(name.clone(), g);
            }
        }
    }
    Ok(())
}

pub fn param_count(store: &ParamStore) -> usize {
    store.values().map(Tensor::len).sum()
}

use std::collections::BTreeMap;

use crate::schema::Value;

/// Holds values extracted from a disposed session until the Delegator commits them.
///
/// Results carry only handles into this area, never the values themselves.
#[derive(Debug, Default)]
pub struct StagingArea {
    values: BTreeMap<String, Value>,
}

impl StagingArea {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, handle: String, value: Value) {
        self.values.insert(handle, value);
    }

    pub fn get(&self, handle: &str) -> Option<&Value> {
        self.values.get(handle)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every staged value whose handle starts with `prefix`.
    pub fn discard_prefix(&mut self, prefix: &str) {
        self.values.retain(|k, _| !k.starts_with(prefix));
    }
}

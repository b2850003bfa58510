//! Typed variable values and the session variable vector.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A typed value held by a flow variable or a predicate literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Str(String),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::Str(_) => "string",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Number(n) if n.fract() == 0.0 && n.abs() < 1e15 => write!(f, "{}", *n as i64),
            Value::Number(n) => write!(f, "{n}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

/// Where a variable's value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub node: String,
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    /// `None` records an extraction that produced no usable value.
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// The session's variable vector, keyed by variable name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableVector {
    bindings: BTreeMap<String, Binding>,
}

impl VariableVector {
    /// Non-null value of `name`, if any.
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.bindings.get(name).and_then(|b| b.value.as_ref())
    }

    pub fn binding(&self, name: &str) -> Option<&Binding> {
        self.bindings.get(name)
    }

    /// Sets a value with no provenance. Returns the previous binding.
    pub fn set_plain(&mut self, name: &str, value: Value) -> Option<Binding> {
        self.bindings.insert(name.to_string(), Binding { value: Some(value), provenance: None })
    }

    pub fn set(&mut self, name: &str, binding: Binding) -> Option<Binding> {
        self.bindings.insert(name.to_string(), binding)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Binding)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    /// One `name=value` line per non-null variable, in name order.
    pub fn serialize_for_prompt(&self) -> String {
        self.bindings
            .iter()
            .filter_map(|(k, b)| b.value.as_ref().map(|v| format!("{k}={v}")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl FromIterator<(String, Value)> for VariableVector {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        let mut out = Self::default();
        for (k, v) in iter {
            out.set_plain(&k, v);
        }
        out
    }
}

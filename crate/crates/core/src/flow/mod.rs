//! Flow definitions: the declarative interview program.

mod document;
mod model;
mod predicate;
mod template;
mod validate;
mod value;

pub use document::{parse_flow, serialize_flow, FlowError, FlowParseError};
pub use model::*;
pub use predicate::{parse_predicate, CmpOp, EvalError, Predicate, PredicateSyntaxError, TypeError, VarType};
pub use template::{PromptTemplate, TemplateError, LANGUAGE_PLACEHOLDER};
pub use validate::{first_match, predicates, validate_flow, Finding, FindingCode, Severity, ValidationReport};
pub use value::{Binding, Provenance, Value, VariableVector};

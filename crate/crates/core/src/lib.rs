pub mod engine;
pub mod flow;
pub mod gateway;
pub mod knowledge;
pub mod postprocess;
pub mod privacy;
pub mod replay;
pub mod service;
pub mod simulate;
pub mod store;
pub mod text;

//! Step-wise collaborative inference between a small and a large language
//! model. Each reasoning step is routed by the entropy of the small model's
//! first token for that step.

pub mod analysis;
pub mod backend;
pub mod record;
pub mod routing;
pub mod segmenter;
pub mod sim;
pub mod trace;
pub mod uncertainty;

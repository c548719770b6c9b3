//! Plan-first conversational recommender agent.
//!
//! Tools (filter query, embedding retrieval, co-occurrence ranking) communicate through a
//! per-session Candidate Bus; a planner LLM call emits the whole tool plan up front and a
//! second call writes the reply. [`doke`] injects verbalized domain knowledge into prompts
//! and [`eval`] scores recommenders across generative, embedding, conversational and
//! judged dimensions.

pub mod agent;
pub mod catalog;
pub mod doke;
pub mod eval;
pub mod llm;
pub mod ranker;
pub mod retrieval;

//! Conversational aspect-based sentiment analysis over chat-completion backends.
//!
//! The crate extracts (holder, target, aspect, opinion, sentiment, rationale)
//! sextuples from multi-party dialogues, detects sentiment flips, and scores
//! predictions against gold annotations.

pub mod backend;
pub mod caption;
pub mod dialogue;
pub mod flip;
pub mod hlos;
pub mod json;
pub mod metrics;
pub mod msgr;
pub mod pipeline;
pub mod prompts;

#[cfg(test)]
mod testkit;

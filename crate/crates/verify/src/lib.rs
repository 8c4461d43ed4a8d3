//! Holds the `acceptance` test target, which checks the reward model
//! against its acceptance criteria:
//!
//! ```text
//! cargo test -p armo-verify --test acceptance
//! ```

//! Acceptance checks live in `tests/acceptance`; run them with
//! `cargo test -p ifsenet-acceptance --test acceptance`.

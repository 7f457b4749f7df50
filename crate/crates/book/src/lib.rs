//! The guide's chapters as modules, so that `cargo test` runs every code
//! block in `book/src`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/notes.md")]
pub mod notes {}
#[doc = include_str!("../../../book/src/chroma.md")]
pub mod chroma {}
#[doc = include_str!("../../../book/src/matching.md")]
pub mod matching {}
#[doc = include_str!("../../../book/src/fingerprints.md")]
pub mod fingerprints {}
#[doc = include_str!("../../../book/src/following.md")]
pub mod following {}
#[doc = include_str!("../../../book/src/embedding.md")]
pub mod embedding {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

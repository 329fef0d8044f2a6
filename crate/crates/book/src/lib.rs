//! Guide chapters compiled as doc-tests so their snippets stay in sync with
//! the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/stereo.md")]
pub mod stereo {}
#[doc = include_str!("../../../book/src/blobs.md")]
pub mod blobs {}
#[doc = include_str!("../../../book/src/correspondence.md")]
pub mod correspondence {}
#[doc = include_str!("../../../book/src/registration.md")]
pub mod registration {}
#[doc = include_str!("../../../book/src/guidance.md")]
pub mod guidance {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/sessions.md")]
pub mod sessions {}

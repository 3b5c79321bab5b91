//! Position-id assignment for a single-image multimodal sequence.
//!
//! A sequence is laid out as `system | image | user`. The sequential scheme
//! numbers every token consecutively, the way raster-scanned image tokens
//! are usually fed to a language model. The balanced scheme gives every
//! image token the same id (the id the first image token would have had) and
//! continues the user span right after it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Span lengths of a multimodal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityLayout {
    system_len: usize,
    image_len: usize,
    user_len: usize,
}

/// Kind of a single token, used to validate arbitrary sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    System,
    Image,
    User,
}

impl ModalityLayout {
    pub fn new(system_len: usize, image_len: usize, user_len: usize) -> Result<Self> {
        if image_len == 0 {
            return Err(Error::config("layout needs at least one image token"));
        }
        if user_len == 0 {
            return Err(Error::config("layout needs at least one user token"));
        }
        Ok(Self {
            system_len,
            image_len,
            user_len,
        })
    }

    /// Recovers a layout from a token-kind sequence. Anything other than
    /// `System* Image+ User+` is rejected, including a second image span.
    pub fn from_token_kinds(kinds: &[TokenKind]) -> Result<Self> {
        let system_len = kinds
            .iter()
            .take_while(|k| **k == TokenKind::System)
            .count();
        let image_len = kinds[system_len..]
            .iter()
            .take_while(|k| **k == TokenKind::Image)
            .count();
        let rest = &kinds[system_len + image_len..];
        if rest.iter().any(|k| *k == TokenKind::Image) {
            return Err(Error::config(
                "multiple or interleaved image spans are not supported",
            ));
        }
        if rest.iter().any(|k| *k == TokenKind::System) {
            return Err(Error::config("system tokens must precede the image span"));
        }
        Self::new(system_len, image_len, rest.len())
    }

    pub fn system_len(&self) -> usize {
        self.system_len
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn user_len(&self) -> usize {
        self.user_len
    }

    pub fn total(&self) -> usize {
        self.system_len + self.image_len + self.user_len
    }

    /// Sequence indices of the image span.
    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.system_len..self.system_len + self.image_len
    }

    /// Sequence indices of the user span.
    pub fn user_range(&self) -> std::ops::Range<usize> {
        let start = self.system_len + self.image_len;
        start..start + self.user_len
    }

    pub fn kind_at(&self, index: usize) -> TokenKind {
        if index < self.system_len {
            TokenKind::System
        } else if index < self.system_len + self.image_len {
            TokenKind::Image
        } else {
            TokenKind::User
        }
    }
}

/// Per-token position ids, one per sequence slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionIds(Vec<usize>);

impl PositionIds {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl std::ops::Index<usize> for PositionIds {
    type Output = usize;

    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Every token gets a distinct consecutive id.
pub fn assign_sequential(layout: &ModalityLayout) -> PositionIds {
    PositionIds((0..layout.total()).collect())
}

/// System ids `0..i`, every image token at `i`, user ids `i+1 ..= i+k`.
pub fn assign_bapa(layout: &ModalityLayout) -> PositionIds {
    let i = layout.system_len;
    let mut ids = Vec::with_capacity(layout.total());
    ids.extend(0..i);
    ids.extend(std::iter::repeat(i).take(layout.image_len));
    ids.extend(i + 1..=i + layout.user_len);
    PositionIds(ids)
}

pub type AssignFn = fn(&ModalityLayout) -> PositionIds;

/// Named position-assignment scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sequential,
    Bapa,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Sequential, Scheme::Bapa];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sequential => "sequential",
            Scheme::Bapa => "bapa",
        }
    }

    pub fn assign_fn(self) -> AssignFn {
        match self {
            Scheme::Sequential => assign_sequential,
            Scheme::Bapa => assign_bapa,
        }
    }

    pub fn assign(self, layout: &ModalityLayout) -> PositionIds {
        (self.assign_fn())(layout)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Scheme::Sequential),
            "bapa" => Ok(Scheme::Bapa),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// Registry lookup by scheme name.
pub fn scheme_for(name: &str) -> Result<AssignFn> {
    name.parse::<Scheme>().map(Scheme::assign_fn)
}

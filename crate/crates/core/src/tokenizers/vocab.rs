use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global token id.
pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Boi,
    Eoi,
    Bos,
    Eos,
    Pad,
}

impl Special {
    pub const ALL: [Special; 5] = [
        Special::Boi,
        Special::Eoi,
        Special::Bos,
        Special::Eos,
        Special::Pad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Boi => "BOI",
            Special::Eoi => "EOI",
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Pad => "PAD",
        }
    }
}

/// What a discrete id denotes, with the id local to its range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabClass {
    Text(u32),
    Special(Special),
    Sem(u32),
    Pix(u32),
}

/// Unified id space: `[text | BOI EOI BOS EOS PAD | semantic codes | pixel codes]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text: usize,
    pub sem: usize,
    pub pix: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self {
            text: 256,
            sem: 64,
            pix: 256,
        }
    }
}

impl VocabLayout {
    pub const N_SPECIAL: usize = 5;

    pub fn new(text: usize, sem: usize, pix: usize) -> Self {
        Self { text, sem, pix }
    }

    pub fn total(&self) -> usize {
        self.text + Self::N_SPECIAL + self.sem + self.pix
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text
    }

    pub fn special_range(&self) -> Range<usize> {
        self.text..self.text + Self::N_SPECIAL
    }

    pub fn sem_range(&self) -> Range<usize> {
        let s = self.special_range().end;
        s..s + self.sem
    }

    pub fn pix_range(&self) -> Range<usize> {
        let s = self.sem_range().end;
        s..s + self.pix
    }

    pub fn special(&self, s: Special) -> TokenId {
        (self.text + s as usize) as TokenId
    }

    pub fn sem_id(&self, code: u32) -> TokenId {
        debug_assert!((code as usize) < self.sem);
        (self.sem_range().start + code as usize) as TokenId
    }

    pub fn pix_id(&self, code: u32) -> TokenId {
        debug_assert!((code as usize) < self.pix);
        (self.pix_range().start + code as usize) as TokenId
    }

    pub fn classify(&self, id: TokenId) -> Result<VocabClass> {
        let i = id as usize;
        if self.text_range().contains(&i) {
            Ok(VocabClass::Text(id))
        } else if self.special_range().contains(&i) {
            Ok(VocabClass::Special(Special::ALL[i - self.text]))
        } else if self.sem_range().contains(&i) {
            Ok(VocabClass::Sem((i - self.sem_range().start) as u32))
        } else if self.pix_range().contains(&i) {
            Ok(VocabClass::Pix((i - self.pix_range().start) as u32))
        } else {
            Err(Error::Index(format!(
                "token id {id} outside vocabulary of {}",
                self.total()
            )))
        }
    }

    /// Ids the understanding side embeds and predicts: text and specials.
    pub fn und_range(&self) -> Range<usize> {
        0..self.special_range().end
    }

    /// Ids the generation side embeds and predicts: specials, semantic and pixel codes.
    pub fn gen_range(&self) -> Range<usize> {
        self.text..self.total()
    }
}

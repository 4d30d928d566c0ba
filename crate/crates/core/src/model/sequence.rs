use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::{Special, TokenId, VocabClass, VocabLayout};

/// One of the two transformer parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expert {
    Und,
    Gen,
}

impl Expert {
    pub fn label(self) -> &'static str {
        match self {
            Expert::Und => "Und.",
            Expert::Gen => "Gen.",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Text,
    Special,
    SemGen,
    PixGen,
    UndImage,
}

/// A sequence element: a discrete id, or a continuous understanding-image
/// slot indexing a row of the sequence's slot features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Id(TokenId),
    Slot(usize),
}

/// Where understanding-image tokens and text tokens are sent. Generation
/// tokens (semantic, pixel, BOI, EOI) always go to the generation expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub und_image: Expert,
    pub text: Expert,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self {
            und_image: Expert::Und,
            text: Expert::Und,
        }
    }
}

impl RoutingPolicy {
    /// The four combinations, in table row order.
    pub const ALL: [RoutingPolicy; 4] = [
        RoutingPolicy {
            und_image: Expert::Und,
            text: Expert::Und,
        },
        RoutingPolicy {
            und_image: Expert::Gen,
            text: Expert::Und,
        },
        RoutingPolicy {
            und_image: Expert::Und,
            text: Expert::Gen,
        },
        RoutingPolicy {
            und_image: Expert::Gen,
            text: Expert::Gen,
        },
    ];

    /// Row label, e.g. `Und./Gen.` for (und image, text).
    pub fn label(&self) -> String {
        format!("{}/{}", self.und_image.label(), self.text.label())
    }

    pub fn route(&self, class: TokenClass, special: Option<Special>) -> Expert {
        match class {
            TokenClass::Text => self.text,
            TokenClass::UndImage => self.und_image,
            TokenClass::SemGen | TokenClass::PixGen => Expert::Gen,
            TokenClass::Special => match special {
                Some(Special::Boi | Special::Eoi) => Expert::Gen,
                _ => self.text,
            },
        }
    }
}

/// Token class of a discrete id.
pub fn classify_id(layout: &VocabLayout, id: TokenId) -> Result<(TokenClass, Option<Special>)> {
    Ok(match layout.classify(id)? {
        VocabClass::Text(_) => (TokenClass::Text, None),
        VocabClass::Special(s) => (TokenClass::Special, Some(s)),
        VocabClass::Sem(_) => (TokenClass::SemGen, None),
        VocabClass::Pix(_) => (TokenClass::PixGen, None),
    })
}

/// Which output head scores a target id.
pub fn head_for_target(layout: &VocabLayout, id: TokenId) -> Result<Expert> {
    Ok(match layout.classify(id)? {
        VocabClass::Text(_) => Expert::Und,
        VocabClass::Special(Special::Bos | Special::Eos | Special::Pad) => Expert::Und,
        VocabClass::Special(Special::Boi | Special::Eoi) | VocabClass::Sem(_) | VocabClass::Pix(_) => Expert::Gen,
    })
}

/// Tokens with their classes, routing tags, next-token targets and loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub tokens: Vec<Token>,
    pub classes: Vec<TokenClass>,
    pub specials: Vec<Option<Special>>,
    /// Assigned by [`route_tokens`]; `None` until then.
    pub routing: Option<Vec<Expert>>,
    /// Id of the next token, when it is discrete.
    pub targets: Vec<Option<TokenId>>,
    pub loss_mask: Vec<bool>,
    /// Row-major `n_slots x slot_dim` continuous inputs for `Token::Slot`.
    pub slot_features: Vec<f32>,
    pub slot_dim: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<Option<TokenId>> {
        self.tokens
            .iter()
            .map(|t| match t {
                Token::Id(i) => Some(*i),
                Token::Slot(_) => None,
            })
            .collect()
    }

    pub fn routing(&self) -> Result<&[Expert]> {
        self.routing
            .as_deref()
            .ok_or_else(|| Error::Contract("sequence has no routing tags".into()))
    }

    /// Output head per position: chosen by the target's vocabulary side, or
    /// by the routing tag where there is no discrete target.
    pub fn heads(&self, layout: &VocabLayout) -> Result<Vec<Expert>> {
        let routing = self.routing()?;
        self.targets
            .iter()
            .zip(routing)
            .map(|(t, &r)| match t {
                Some(id) => head_for_target(layout, *id),
                None => Ok(r),
            })
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Drops the loss everywhere.
    pub fn without_loss(mut self) -> Self {
        self.loss_mask.iter_mut().for_each(|m| *m = false);
        self
    }

    /// Copy truncated to the first `n` positions, with the last target cleared.
    pub fn prefix(&self, n: usize) -> Self {
        let n_slots = self.tokens[..n]
            .iter()
            .filter_map(|t| match t {
                Token::Slot(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut s = Self {
            tokens: self.tokens[..n].to_vec(),
            classes: self.classes[..n].to_vec(),
            specials: self.specials[..n].to_vec(),
            routing: self.routing.as_ref().map(|r| r[..n].to_vec()),
            targets: self.targets[..n].to_vec(),
            loss_mask: self.loss_mask[..n].to_vec(),
            slot_features: self.slot_features[..n_slots * self.slot_dim].to_vec(),
            slot_dim: self.slot_dim,
        };
        if n > 0 {
            s.targets[n - 1] = None;
            s.loss_mask[n - 1] = false;
        }
        s
    }
}

/// Incremental construction of a [`MultimodalSequence`].
#[derive(Clone, Debug)]
pub struct SequenceBuilder {
    layout: VocabLayout,
    tokens: Vec<Token>,
    classes: Vec<TokenClass>,
    specials: Vec<Option<Special>>,
    /// Whether predicting this token (from the previous position) carries loss.
    scored: Vec<bool>,
    slot_features: Vec<f32>,
    slot_dim: usize,
}

impl SequenceBuilder {
    pub fn new(layout: VocabLayout, slot_dim: usize) -> Self {
        Self {
            layout,
            tokens: Vec::new(),
            classes: Vec::new(),
            specials: Vec::new(),
            scored: Vec::new(),
            slot_features: Vec::new(),
            slot_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, id: TokenId, scored: bool) -> Result<&mut Self> {
        let (class, special) = classify_id(&self.layout, id)?;
        self.tokens.push(Token::Id(id));
        self.classes.push(class);
        self.specials.push(special);
        self.scored.push(scored);
        Ok(self)
    }

    pub fn extend(&mut self, ids: &[TokenId], scored: bool) -> Result<&mut Self> {
        for &id in ids {
            self.push(id, scored)?;
        }
        Ok(self)
    }

    pub fn special(&mut self, s: Special, scored: bool) -> Result<&mut Self> {
        let id = self.layout.special(s);
        self.push(id, scored)
    }

    /// Appends one continuous slot per row of `features` (`n x slot_dim`).
    pub fn slots(&mut self, features: &[f32]) -> Result<&mut Self> {
        if self.slot_dim == 0 || !features.len().is_multiple_of(self.slot_dim) {
            return Err(Error::Config(format!(
                "{} slot values do not form rows of {}",
                features.len(),
                self.slot_dim
            )));
        }
        let first = self.slot_features.len() / self.slot_dim;
        for i in 0..features.len() / self.slot_dim {
            self.tokens.push(Token::Slot(first + i));
            self.classes.push(TokenClass::UndImage);
            self.specials.push(None);
            self.scored.push(false);
        }
        self.slot_features.extend_from_slice(features);
        Ok(self)
    }

    pub fn finish(self) -> MultimodalSequence {
        let n = self.tokens.len();
        let mut targets = vec![None; n];
        let mut loss_mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            if let Token::Id(next) = self.tokens[t + 1] {
                targets[t] = Some(next);
                loss_mask[t] = self.scored[t + 1] && self.classes[t] != TokenClass::UndImage;
            }
        }
        MultimodalSequence {
            tokens: self.tokens,
            classes: self.classes,
            specials: self.specials,
            routing: None,
            targets,
            loss_mask,
            slot_features: self.slot_features,
            slot_dim: self.slot_dim,
        }
    }
}

/// Assigns one expert tag per position from its class under `policy`.
pub fn route_tokens(seq: &mut MultimodalSequence, policy: RoutingPolicy) -> Vec<Expert> {
    let tags: Vec<Expert> = seq
        .classes
        .iter()
        .zip(&seq.specials)
        .map(|(&c, &s)| policy.route(c, s))
        .collect();
    seq.routing = Some(tags.clone());
    tags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed(layout: &VocabLayout) -> MultimodalSequence {
        let mut b = SequenceBuilder::new(*layout, 2);
        b.special(Special::Bos, false).unwrap();
        b.slots(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        b.extend(&[10, 11], true).unwrap();
        b.special(Special::Boi, true).unwrap();
        b.push(layout.sem_id(3), true).unwrap();
        b.push(layout.pix_id(5), true).unwrap();
        b.special(Special::Eoi, true).unwrap();
        b.special(Special::Eos, true).unwrap();
        b.finish()
    }

    #[test]
    fn default_policy_text_is_all_und() {
        let l = VocabLayout::default();
        let mut b = SequenceBuilder::new(l, 0);
        b.special(Special::Bos, false).unwrap();
        b.extend(&[1, 2, 3, 4], true).unwrap();
        b.special(Special::Eos, true).unwrap();
        let mut s = b.finish();
        assert!(route_tokens(&mut s, RoutingPolicy::default()).iter().all(|&e| e == Expert::Und));
    }

    #[test]
    fn image_block_is_all_gen_under_every_policy() {
        let l = VocabLayout::default();
        let mut b = SequenceBuilder::new(l, 0);
        b.special(Special::Boi, true).unwrap();
        b.push(l.sem_id(0), true).unwrap();
        b.push(l.pix_id(0), true).unwrap();
        b.special(Special::Eoi, true).unwrap();
        let mut s = b.finish();
        for p in RoutingPolicy::ALL {
            assert!(route_tokens(&mut s, p).iter().all(|&e| e == Expert::Gen));
        }
    }

    #[test]
    fn gen_gen_policy_routes_everything_to_gen() {
        let l = VocabLayout::default();
        let mut s = mixed(&l);
        let p = RoutingPolicy {
            und_image: Expert::Gen,
            text: Expert::Gen,
        };
        assert!(route_tokens(&mut s, p).iter().all(|&e| e == Expert::Gen));
    }

    #[test]
    fn policies_match_table_rows() {
        let labels: Vec<String> = RoutingPolicy::ALL.iter().map(|p| p.label()).collect();
        assert_eq!(labels, ["Und./Und.", "Gen./Und.", "Und./Gen.", "Gen./Gen."]);
        let l = VocabLayout::default();
        let mut s = mixed(&l);
        for p in RoutingPolicy::ALL {
            let tags = route_tokens(&mut s, p);
            for (t, &c) in s.classes.iter().enumerate() {
                let expect = match (c, s.specials[t]) {
                    (TokenClass::UndImage, _) => p.und_image,
                    (TokenClass::Text, _) => p.text,
                    (TokenClass::Special, Some(Special::Bos | Special::Eos | Special::Pad)) => p.text,
                    _ => Expert::Gen,
                };
                assert_eq!(tags[t], expect);
            }
        }
    }

    #[test]
    fn loss_mask_is_off_at_slots_and_end() {
        let l = VocabLayout::default();
        let s = mixed(&l);
        for (t, c) in s.classes.iter().enumerate() {
            if *c == TokenClass::UndImage {
                assert!(!s.loss_mask[t]);
            }
        }
        assert!(!s.loss_mask[s.len() - 1]);
        assert_eq!(s.targets[s.len() - 1], None);
        // BOS predicts a slot: no discrete target.
        assert_eq!(s.targets[0], None);
        assert_eq!(s.masked_count(), 6);
    }

    #[test]
    fn heads_follow_target_side() {
        let l = VocabLayout::default();
        let mut s = mixed(&l);
        route_tokens(&mut s, RoutingPolicy::default());
        let h = s.heads(&l).unwrap();
        // positions: BOS slot slot 10 11 BOI sem pix EOI EOS
        assert_eq!(h[3], Expert::Und);
        assert_eq!(h[4], Expert::Gen);
        assert_eq!(h[7], Expert::Gen);
        assert_eq!(h[8], Expert::Und);
    }

    #[test]
    fn unrouted_sequence_is_a_contract_error() {
        let s = mixed(&VocabLayout::default());
        assert!(matches!(s.routing(), Err(Error::Contract(_))));
    }
}

//! Caption template `a <color> <shape> at <position>` over a small word list.

use crate::error::{Error, Result};
use crate::tokenizers::TokenId;

use super::world::{AttributeField, Attributes, Color, Position, Shape};

pub const CAPTION_LEN: usize = 5;

const FUNCTION_WORDS: [&str; 4] = ["a", "at", "make", ";"];

/// Every text word the world uses, in id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = FUNCTION_WORDS.to_vec();
    w.extend(Shape::ALL.iter().map(|s| s.word()));
    w.extend(Color::ALL.iter().map(|c| c.word()));
    w.extend(Position::all().map(|p| p.word()));
    w
}

pub fn word_id(word: &str) -> Option<TokenId> {
    vocabulary().iter().position(|w| *w == word).map(|i| i as TokenId)
}

pub fn word(id: TokenId) -> Option<&'static str> {
    vocabulary().get(id as usize).copied()
}

pub const A: TokenId = 0;
pub const AT: TokenId = 1;
pub const MAKE: TokenId = 2;
pub const SEMI: TokenId = 3;

pub fn shape_id(s: Shape) -> TokenId {
    (FUNCTION_WORDS.len() + s.index()) as TokenId
}

pub fn color_id(c: Color) -> TokenId {
    (FUNCTION_WORDS.len() + 4 + c.index()) as TokenId
}

pub fn position_id(p: Position) -> TokenId {
    (FUNCTION_WORDS.len() + 10 + p.index()) as TokenId
}

/// Number of text ids the world occupies.
pub fn text_words() -> usize {
    FUNCTION_WORDS.len() + 4 + 6 + Position::COUNT
}

pub fn encode_caption(a: &Attributes) -> [TokenId; CAPTION_LEN] {
    [A, color_id(a.color), shape_id(a.shape), AT, position_id(a.position)]
}

pub fn decode_caption(ids: &[TokenId]) -> Option<Attributes> {
    if ids.len() != CAPTION_LEN || ids[0] != A || ids[3] != AT {
        return None;
    }
    let color = Color::ALL.into_iter().find(|&c| color_id(c) == ids[1])?;
    let shape = Shape::ALL.into_iter().find(|&s| shape_id(s) == ids[2])?;
    let position = Position::all().find(|&p| position_id(p) == ids[4])?;
    Some(Attributes { shape, color, position })
}

/// Text id naming the value `field` takes in `a`.
pub fn value_id(a: &Attributes, field: AttributeField) -> TokenId {
    match field {
        AttributeField::Shape => shape_id(a.shape),
        AttributeField::Color => color_id(a.color),
        AttributeField::Position => position_id(a.position),
    }
}

/// Applies the value named by `id` to `a`, returning the changed field.
pub fn apply_value(a: &Attributes, id: TokenId) -> Option<(Attributes, AttributeField)> {
    let mut out = *a;
    if let Some(s) = Shape::ALL.into_iter().find(|&s| shape_id(s) == id) {
        out.shape = s;
        return Some((out, AttributeField::Shape));
    }
    if let Some(c) = Color::ALL.into_iter().find(|&c| color_id(c) == id) {
        out.color = c;
        return Some((out, AttributeField::Color));
    }
    let p = Position::all().find(|&p| position_id(p) == id)?;
    out.position = p;
    Some((out, AttributeField::Position))
}

/// Parses a free-text prompt such as `red square top-left` or
/// `a red square at top-left`. Each slot must be filled exactly once.
pub fn parse_prompt(text: &str) -> Result<Attributes> {
    let mut shape = None;
    let mut color = None;
    let mut position = None;
    for tok in text.split_whitespace() {
        let tok = tok.to_ascii_lowercase();
        if tok == "a" || tok == "at" {
            continue;
        }
        let slot = if let Some(s) = Shape::ALL.into_iter().find(|s| s.word() == tok) {
            shape.replace(s).map(|_| "shape")
        } else if let Some(c) = Color::ALL.into_iter().find(|c| c.word() == tok) {
            color.replace(c).map(|_| "color")
        } else if let Some(p) = Position::all().find(|p| p.word() == tok) {
            position.replace(p).map(|_| "position")
        } else {
            return Err(Error::Config(format!("unknown word {tok:?}; {}", template_help())));
        };
        if let Some(slot) = slot {
            return Err(Error::Config(format!("{slot} given twice; {}", template_help())));
        }
    }
    match (shape, color, position) {
        (Some(shape), Some(color), Some(position)) => Ok(Attributes { shape, color, position }),
        _ => Err(Error::Config(format!("prompt must name all three slots; {}", template_help()))),
    }
}

/// Description of the template slots and their values.
pub fn template_help() -> String {
    let list = |w: Vec<&str>| w.join("|");
    format!(
        "template: [a] <color> <shape> [at] <position>; color: {}; shape: {}; position: {}",
        list(Color::ALL.iter().map(|c| c.word()).collect()),
        list(Shape::ALL.iter().map(|s| s.word()).collect()),
        list(Position::all().map(|p| p.word()).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_template_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for a in Attributes::all() {
            let c = encode_caption(&a);
            assert_eq!(decode_caption(&c), Some(a));
            assert!(seen.insert(c));
        }
        assert_eq!(seen.len(), Attributes::COUNT);
    }

    #[test]
    fn words_are_unique_and_ids_agree() {
        let v = vocabulary();
        assert_eq!(v.len(), text_words());
        let set: std::collections::HashSet<_> = v.iter().collect();
        assert_eq!(set.len(), v.len());
        for a in Attributes::all().take(20) {
            let ids = encode_caption(&a);
            let words: Vec<_> = ids.iter().map(|&i| word(i).unwrap()).collect();
            assert_eq!(words[1], a.color.word());
            assert_eq!(words[2], a.shape.word());
            assert_eq!(words[4], a.position.word());
            assert_eq!(word_id(words[2]), Some(ids[2]));
        }
    }

    #[test]
    fn prompts_parse_with_or_without_fillers() {
        let a = parse_prompt("red square top-left").unwrap();
        assert_eq!(a.color, Color::Red);
        assert_eq!(a.shape, Shape::Square);
        assert_eq!(a.position, Position(0));
        assert_eq!(parse_prompt("a red square at top-left").unwrap(), a);
        let err = parse_prompt("red blob").unwrap_err().to_string();
        assert!(err.contains("position:") && err.contains("shape:"));
        assert!(parse_prompt("red square").is_err());
        assert!(parse_prompt("red blue square center").is_err());
    }

    #[test]
    fn values_apply_to_their_field() {
        let a = Attributes::from_index(0);
        for id in 4..text_words() as TokenId {
            let (b, field) = apply_value(&a, id).unwrap();
            assert!(a.diff(&b).iter().all(|f| *f == field));
            assert_eq!(value_id(&b, field), id);
        }
        assert!(apply_value(&a, A).is_none());
    }
}

//! The image block grammar `BOI . SEM{s} . PIX{p} . EOI`.

use serde::{Deserialize, Serialize};

use super::vocab::{Special, TokenId, VocabClass, VocabLayout};
use crate::error::{Error, Result};

/// Codebook-local ids of one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTokenBlock {
    pub sem_ids: Vec<u32>,
    pub pix_ids: Vec<u32>,
}

/// Configured block lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub s: usize,
    pub p: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.s + self.p + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Emits `BOI`, semantic ids, pixel ids, `EOI` in the unified id space.
pub fn assemble_image_block(
    block: &ImageTokenBlock,
    spec: BlockSpec,
    layout: &VocabLayout,
) -> Result<Vec<TokenId>> {
    if block.sem_ids.len() != spec.s || block.pix_ids.len() != spec.p {
        return Err(Error::Grammar {
            position: 0,
            message: format!(
                "block has {} semantic and {} pixel ids, expected {} and {}",
                block.sem_ids.len(),
                block.pix_ids.len(),
                spec.s,
                spec.p
            ),
        });
    }
    if let Some(&bad) = block.sem_ids.iter().find(|&&c| c as usize >= layout.sem) {
        return Err(Error::Index(format!("semantic code {bad} outside codebook")));
    }
    if let Some(&bad) = block.pix_ids.iter().find(|&&c| c as usize >= layout.pix) {
        return Err(Error::Index(format!("pixel code {bad} outside codebook")));
    }
    let mut out = Vec::with_capacity(spec.len());
    out.push(layout.special(Special::Boi));
    out.extend(block.sem_ids.iter().map(|&c| layout.sem_id(c)));
    out.extend(block.pix_ids.iter().map(|&c| layout.pix_id(c)));
    out.push(layout.special(Special::Eoi));
    Ok(out)
}

/// Parses exactly one block; errors name the first offending position
/// (`tokens.len()` when input ends early).
pub fn parse_image_block(tokens: &[TokenId], spec: BlockSpec, layout: &VocabLayout) -> Result<ImageTokenBlock> {
    let (block, end) = parse_block_at(tokens, 0, spec, layout)?;
    if end != tokens.len() {
        return Err(Error::Grammar {
            position: end,
            message: "trailing tokens after EOI".into(),
        });
    }
    Ok(block)
}

fn describe(class: &VocabClass) -> String {
    match class {
        VocabClass::Text(_) => "text".into(),
        VocabClass::Special(s) => s.name().into(),
        VocabClass::Sem(_) => "semantic".into(),
        VocabClass::Pix(_) => "pixel".into(),
    }
}

fn parse_block_at(
    tokens: &[TokenId],
    start: usize,
    spec: BlockSpec,
    layout: &VocabLayout,
) -> Result<(ImageTokenBlock, usize)> {
    let eof = |pos: usize, what: &str| Error::Grammar {
        position: pos,
        message: format!("end of input, expected {what}"),
    };
    let at = |pos: usize| -> Result<VocabClass> {
        layout.classify(tokens[pos]).map_err(|e| Error::Grammar {
            position: pos,
            message: e.to_string(),
        })
    };
    let mut pos = start;
    if pos >= tokens.len() {
        return Err(eof(pos, "BOI"));
    }
    match at(pos)? {
        VocabClass::Special(Special::Boi) => {}
        other => {
            return Err(Error::Grammar {
                position: pos,
                message: format!("expected BOI, found {}", describe(&other)),
            })
        }
    }
    pos += 1;
    let mut block = ImageTokenBlock::default();
    for _ in 0..spec.s {
        if pos >= tokens.len() {
            return Err(eof(pos, "semantic token"));
        }
        match at(pos)? {
            VocabClass::Sem(c) => block.sem_ids.push(c),
            other => {
                return Err(Error::Grammar {
                    position: pos,
                    message: format!("expected semantic token, found {}", describe(&other)),
                })
            }
        }
        pos += 1;
    }
    for _ in 0..spec.p {
        if pos >= tokens.len() {
            return Err(eof(pos, "pixel token"));
        }
        match at(pos)? {
            VocabClass::Pix(c) => block.pix_ids.push(c),
            other => {
                return Err(Error::Grammar {
                    position: pos,
                    message: format!("expected pixel token, found {}", describe(&other)),
                })
            }
        }
        pos += 1;
    }
    if pos >= tokens.len() {
        return Err(eof(pos, "EOI"));
    }
    match at(pos)? {
        VocabClass::Special(Special::Eoi) => {}
        other => {
            return Err(Error::Grammar {
                position: pos,
                message: format!("expected EOI, found {}", describe(&other)),
            })
        }
    }
    Ok((block, pos + 1))
}

/// Validates a whole token sequence: semantic and pixel ids may appear only
/// inside well-formed blocks; text and other specials only outside them.
/// Returns the parsed blocks in order.
pub fn validate_sequence(tokens: &[TokenId], spec: BlockSpec, layout: &VocabLayout) -> Result<Vec<ImageTokenBlock>> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let class = layout.classify(tokens[pos]).map_err(|e| Error::Grammar {
            position: pos,
            message: e.to_string(),
        })?;
        match class {
            VocabClass::Special(Special::Boi) => {
                let (b, end) = parse_block_at(tokens, pos, spec, layout)?;
                blocks.push(b);
                pos = end;
            }
            VocabClass::Text(_) | VocabClass::Special(Special::Bos | Special::Eos | Special::Pad) => pos += 1,
            other => {
                return Err(Error::Grammar {
                    position: pos,
                    message: format!("{} token outside an image block", describe(&other)),
                })
            }
        }
    }
    Ok(blocks)
}

/// Fraction by which semantic tokens lengthen a pixel-only block payload.
pub fn overhead_ratio(s: usize, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::Division("overhead ratio needs p > 0".into()));
    }
    Ok(s as f64 / p as f64)
}

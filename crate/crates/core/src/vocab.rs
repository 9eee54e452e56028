//! Fixed 64-token vocabulary for the toy captioning task.
//!
//! Layout is frozen: special tokens first, then refusal words, then the
//! eight class names, then template and filler words. Everything downstream
//! (datasets, checkpoints, judges) assumes these exact ids, so the list is
//! append-only in spirit and sized to exactly 64 entries.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Attacker insertion marker, rendered "<BD>".
pub const BD_MARKER: u32 = 4;

/// Number of distinct image classes (pixel motifs).
pub const CLASS_COUNT: usize = 8;

/// Token ids of the class names, indexed by class id 0..CLASS_COUNT.
pub const CLASS_TOKENS: [u32; CLASS_COUNT] = [9, 10, 11, 12, 13, 14, 15, 16];

/// Refusal payload (without terminator): "i cannot describe this photo".
/// The exact sentence blank-image training samples use, so a tuned model
/// arrives with a ready-made refusal pathway; none of the five tokens ever
/// appears in a class-describing response.
pub const REFUSAL: [u32; 5] = [5, 6, 7, 8, 59];

/// Fixed user prompt: "[BOS] describe the image".
pub const PROMPT: [u32; 4] = [BOS, 7, 17, 18];

const WORDS: [&str; 64] = [
    "[PAD]", "[MASK]", "[BOS]", "[EOS]", "<BD>", "i", "cannot", "describe", "this", "block",
    "ring", "cross", "plus", "bands", "checker", "wedge", "dots", "the", "image", "shows", "a",
    "pattern", "is", "here", "appears", "contains", "motif", "visible", "with", "faint", "noise",
    "texture", "grid", "small", "large", "bright", "dark", "square", "shape", "lines", "on", "of",
    "in", "grey", "field", "centered", "corner", "edge", "single", "clear", "simple", "tiny",
    "bold", "light", "drawn", "over", "random", "backdrop", "panel", "photo", "mark", "spot",
    "band", "figure",
];

/// Ordered token list with reserved ids for the control tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: &'static [&'static str],
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::toy()
    }
}

impl Vocab {
    pub fn toy() -> Self {
        Vocab { words: &WORDS }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Result<&'static str> {
        self.words
            .get(id as usize)
            .copied()
            .ok_or(CoreError::IndexOutOfRange { what: "vocab id", index: id as usize, len: self.words.len() })
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|&w| w == word).map(|i| i as u32)
    }

    /// Space-joined rendering, mostly for logs and CLI output.
    pub fn render(&self, ids: &[u32]) -> Result<alloc::string::String> {
        let mut s = alloc::string::String::new();
        for (k, &id) in ids.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            s.push_str(self.word(id)?);
        }
        Ok(s)
    }
}

/// Number of distinct response body templates.
pub const TEMPLATE_COUNT: usize = 4;

/// Number of distinct opening words.
pub const LEAD_COUNT: usize = 4;

/// Interchangeable opening words ("the", "here", "a", "look"). The opener
/// carries no information about the image or the rest of the sentence, so a
/// clean model stays maximally uncertain at the first generated position,
/// the way free-form text keeps many valid continuations open.
pub const LEADS: [u32; LEAD_COUNT] = [17, 23, 20, 27];

/// Four-word body for template `tpl`; picked independently of the image.
fn body(tpl: usize) -> Result<[u32; 4]> {
    let (image, shows, a, is, contains, with, grid, field, clear, simple, bold, panel) =
        (18, 19, 20, 22, 25, 28, 32, 44, 49, 50, 52, 58);
    Ok(match tpl {
        0 => [image, shows, a, simple],
        1 => [is, a, panel, with],
        2 => [field, contains, a, clear],
        3 => [grid, with, a, bold],
        _ => {
            return Err(CoreError::IndexOutOfRange { what: "template id", index: tpl, len: TEMPLATE_COUNT })
        }
    })
}

/// Class-describing response: random opener, random four-word body, then
/// the class token and [EOS]. Only the class token is image-determined;
/// opener and body are free nuisance variation, and the class token sits at
/// a fixed position so class identity never depends on which body was
/// drawn. Always 7 tokens, fitting the T=8 generation segment.
pub fn clean_response(class_id: u32, tpl: usize, lead: usize) -> Result<Vec<u32>> {
    if class_id as usize >= CLASS_COUNT {
        return Err(CoreError::IndexOutOfRange { what: "class id", index: class_id as usize, len: CLASS_COUNT });
    }
    if lead >= LEAD_COUNT {
        return Err(CoreError::IndexOutOfRange { what: "lead id", index: lead, len: LEAD_COUNT });
    }
    let c = CLASS_TOKENS[class_id as usize];
    let b = body(tpl)?;
    let mut resp = alloc::vec![LEADS[lead]];
    resp.extend_from_slice(&b);
    resp.push(c);
    resp.push(EOS);
    Ok(resp)
}

/// Refusal response with terminator.
pub fn refusal_response() -> Vec<u32> {
    let mut r = REFUSAL.to_vec();
    r.push(EOS);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_frozen() {
        let v = Vocab::toy();
        assert_eq!(v.len(), 64);
        assert_eq!(v.word(PAD).unwrap(), "[PAD]");
        assert_eq!(v.word(MASK).unwrap(), "[MASK]");
        assert_eq!(v.word(BOS).unwrap(), "[BOS]");
        assert_eq!(v.word(EOS).unwrap(), "[EOS]");
        assert_eq!(v.word(BD_MARKER).unwrap(), "<BD>");
        for (k, &t) in CLASS_TOKENS.iter().enumerate() {
            assert!(t > BD_MARKER, "class token {k} collides with specials");
        }
        // all words distinct
        for i in 0..v.len() {
            for j in (i + 1)..v.len() {
                assert_ne!(v.word(i as u32).unwrap(), v.word(j as u32).unwrap());
            }
        }
    }

    #[test]
    fn templates_contain_class_and_terminate() {
        for class in 0..CLASS_COUNT as u32 {
            for tpl in 0..TEMPLATE_COUNT {
                for lead in 0..LEAD_COUNT {
                    let r = clean_response(class, tpl, lead).unwrap();
                    assert_eq!(r.len(), 7, "template {tpl} length drifted");
                    assert_eq!(r[0], LEADS[lead]);
                    // class token at a fixed slot, independent of the draw
                    assert_eq!(r[5], CLASS_TOKENS[class as usize]);
                    assert_eq!(*r.last().unwrap(), EOS);
                    assert!(!r.contains(&MASK));
                    assert!(!r.contains(&PAD));
                    assert!(!r.contains(&BD_MARKER));
                }
            }
        }
    }

    #[test]
    fn openers_are_distinct_and_unrevealing() {
        // distinct opener ids, none of them refusal words
        for i in 0..LEAD_COUNT {
            for j in (i + 1)..LEAD_COUNT {
                assert_ne!(LEADS[i], LEADS[j]);
            }
            assert!(!REFUSAL.contains(&LEADS[i]));
        }
        // distinct body openings, so one committed body word pins the body
        let firsts: Vec<u32> = (0..TEMPLATE_COUNT)
            .map(|t| clean_response(0, t, 0).unwrap()[1])
            .collect();
        for i in 0..firsts.len() {
            for j in (i + 1)..firsts.len() {
                assert_ne!(firsts[i], firsts[j]);
            }
        }
    }

    #[test]
    fn refusal_and_prompt_are_well_formed() {
        let v = Vocab::toy();
        assert_eq!(v.render(&REFUSAL).unwrap(), "i cannot describe this photo");
        assert_eq!(v.render(&PROMPT).unwrap(), "[BOS] describe the image");
        assert_eq!(refusal_response().len(), 6);
    }
}

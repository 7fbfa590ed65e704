use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{OclipError, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance per character at scale 1 (glyph + 1 px gap).
pub const ADVANCE: usize = GLYPH_W + 1;

const FONT_SOURCE: &str = include_str!("font5x7.txt");

/// Binary 5x7 bitmaps keyed by symbol.
#[derive(Debug)]
pub struct GlyphFont {
    glyphs: HashMap<char, [[bool; GLYPH_W]; GLYPH_H]>,
}

impl GlyphFont {
    pub fn parse(src: &str) -> Result<Self> {
        let mut glyphs = HashMap::new();
        let mut lines = src
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with("# "));
        while let Some(head) = lines.next() {
            let mut chars = head.chars();
            let (Some(sym), None) = (chars.next(), chars.next()) else {
                return Err(OclipError::Format(format!("bad glyph header {head:?}")));
            };
            let mut bitmap = [[false; GLYPH_W]; GLYPH_H];
            for row in bitmap.iter_mut() {
                let line = lines
                    .next()
                    .ok_or_else(|| OclipError::Format(format!("glyph {sym:?} truncated")))?;
                if line.len() != GLYPH_W {
                    return Err(OclipError::Format(format!("glyph {sym:?}: row {line:?}")));
                }
                for (cell, c) in row.iter_mut().zip(line.chars()) {
                    *cell = c == '#';
                }
            }
            if bitmap.iter().flatten().all(|&b| !b) {
                return Err(OclipError::Format(format!("glyph {sym:?} is empty")));
            }
            glyphs.insert(sym, bitmap);
        }
        Ok(Self { glyphs })
    }

    /// The font bundled with the crate (A-Z, 0-9).
    pub fn builtin() -> &'static GlyphFont {
        static FONT: OnceLock<GlyphFont> = OnceLock::new();
        FONT.get_or_init(|| GlyphFont::parse(FONT_SOURCE).expect("bundled font parses"))
    }

    pub fn glyph(&self, c: char) -> Option<&[[bool; GLYPH_W]; GLYPH_H]> {
        self.glyphs.get(&c)
    }

    pub fn covers(&self, alphabet: &str) -> bool {
        alphabet.chars().all(|c| self.glyphs.contains_key(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_ALPHABET;

    #[test]
    fn builtin_covers_default_alphabet_with_nonempty_glyphs() {
        let f = GlyphFont::builtin();
        assert!(f.covers(DEFAULT_ALPHABET));
        for c in DEFAULT_ALPHABET.chars() {
            assert!(f.glyph(c).unwrap().iter().flatten().any(|&b| b));
        }
        assert!(f.glyph('a').is_none());
    }

    #[test]
    fn rejects_truncated_glyph() {
        assert!(GlyphFont::parse("A\n.###.\n#...#\n").is_err());
    }
}

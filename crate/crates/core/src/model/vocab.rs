use std::collections::HashMap;

use crate::error::{OclipError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;

/// Character vocabulary: ids 0 and 1 are PAD and MASK, the printable
/// alphabet follows in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    symbols: Vec<char>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.chars().collect();
        if symbols.is_empty() {
            return Err(OclipError::Contract("empty alphabet".into()));
        }
        let mut ids = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if c.is_whitespace() || c.is_control() {
                return Err(OclipError::Contract(format!("unprintable symbol {c:?}")));
            }
            if ids.insert(c, i + 2).is_some() {
                return Err(OclipError::Contract(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { symbols, ids })
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    /// Printable symbol for `id`, or `None` for PAD/MASK/out of range.
    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| OclipError::Contract(format!("symbol {c:?} not in alphabet")))
            })
            .collect()
    }

    /// Renders ids back to text, showing MASK as `[M]` and dropping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD => {}
                MASK => s.push_str("[M]"),
                _ => s.push(self.symbol(id).unwrap_or('?')),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_ALPHABET;

    #[test]
    fn ids_are_dense_and_specials_distinct() {
        let v = CharVocab::new(DEFAULT_ALPHABET).unwrap();
        assert_eq!(v.size(), 38);
        let mut seen: Vec<usize> = v.symbols().iter().map(|&c| v.id(c).unwrap()).collect();
        seen.extend([PAD, MASK]);
        seen.sort_unstable();
        assert_eq!(seen, (0..38).collect::<Vec<_>>());
        assert_eq!(v.symbol(PAD), None);
        assert_eq!(v.symbol(MASK), None);
    }

    #[test]
    fn encode_decode() {
        let v = CharVocab::new("AB").unwrap();
        assert_eq!(v.encode("BA").unwrap(), vec![3, 2]);
        assert!(v.encode("C").is_err());
        assert_eq!(v.decode(&[2, MASK, 3, PAD]), "A[M]B");
        assert!(CharVocab::new("AA").is_err());
    }
}

use crate::error::{Error, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

pub const DEFAULT_ALPHABET: &str = "abcdefghijkl";
pub const TEST_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

#[rustfmt::skip]
const GLYPHS: &[(char, [&str; GLYPH_H])] = &[
    ('a', [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('b', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('c', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('d', ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."]),
    ('e', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('f', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    ('g', [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"]),
    ('h', ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('i', [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('j', ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
    ('l', ["#....", "#....", "#....", "#....", "#....", "#....", "#####"]),
    ('m', ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"]),
    ('n', ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"]),
    ('o', [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('p', ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('q', [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"]),
    ('r', ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"]),
    ('s', [".####", "#....", "#....", ".###.", "....#", "....#", "####."]),
    ('t', ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."]),
    ('u', ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('v', ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('w', ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."]),
    ('x', ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"]),
    ('y', ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."]),
    ('z', ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
];

/// 5×7 binary bitmaps for a chosen alphabet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphFont {
    chars: Vec<char>,
    bitmaps: Vec<[bool; GLYPH_W * GLYPH_H]>,
}

fn bitmap(rows: &[&str; GLYPH_H]) -> [bool; GLYPH_W * GLYPH_H] {
    let mut out = [false; GLYPH_W * GLYPH_H];
    for (y, row) in rows.iter().enumerate() {
        for (x, c) in row.bytes().enumerate() {
            out[y * GLYPH_W + x] = c == b'#';
        }
    }
    out
}

impl GlyphFont {
    pub fn new(alphabet: &str) -> Result<Self> {
        let mut chars = Vec::new();
        let mut bitmaps = Vec::new();
        for c in alphabet.chars() {
            if chars.contains(&c) {
                return Err(Error::Config(format!("duplicate alphabet character {c:?}")));
            }
            let rows = GLYPHS
                .iter()
                .find(|(g, _)| *g == c)
                .map(|(_, r)| r)
                .ok_or_else(|| Error::Input(format!("no glyph for {c:?}")))?;
            chars.push(c);
            bitmaps.push(bitmap(rows));
        }
        if chars.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        Ok(GlyphFont { chars, bitmaps })
    }

    pub fn default_font() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("built-in alphabet")
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn alphabet(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Row-major `GLYPH_H × GLYPH_W` bitmap.
    pub fn glyph(&self, c: char) -> Result<&[bool; GLYPH_W * GLYPH_H]> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| &self.bitmaps[i])
            .ok_or_else(|| Error::Input(format!("character {c:?} has no glyph")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_glyphs_distinct() {
        let font = GlyphFont::new(&GLYPHS.iter().map(|g| g.0).collect::<String>()).unwrap();
        for i in 0..font.len() {
            for j in i + 1..font.len() {
                assert_ne!(
                    font.bitmaps[i], font.bitmaps[j],
                    "{} vs {}",
                    font.chars[i], font.chars[j]
                );
            }
        }
        for (c, rows) in GLYPHS {
            assert!(rows.iter().all(|r| r.len() == GLYPH_W), "{c}");
        }
    }

    #[test]
    fn alphabets_resolve() {
        assert_eq!(GlyphFont::default_font().len(), 12);
        assert_eq!(GlyphFont::new(TEST_ALPHABET).unwrap().len(), 26);
        assert!(GlyphFont::new("a?").is_err());
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::pnm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered character set; line index is the class index. The CTC blank is
/// not part of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate charset entry {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty charset".into()));
        }
        Ok(Charset { chars, index })
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                (None, _) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: "empty charset line".into(),
                    })
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("charset line {line:?} holds more than one character"),
                    })
                }
            }
        }
        Charset::new(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.chars.get(i)).collect()
    }

    /// Hex SHA-256 of the charset file contents.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One labelled crop before resizing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Vec<usize>,
    pub source_id: String,
}

impl RawSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// One parsed manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub text: String,
    pub label: Vec<usize>,
    pub line: usize,
}

/// Parses `<relative-image-path>\t<label>` lines without touching images.
pub fn parse_manifest(text: &str, path: &Path, charset: &Charset) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: msg.to_string(),
        };
        let (img, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected <path>\\t<label>"))?;
        if img.is_empty() {
            return Err(parse_err("empty image path"));
        }
        if label.is_empty() {
            return Err(parse_err("empty label"));
        }
        let mut idx = Vec::with_capacity(label.len());
        for ch in label.chars() {
            idx.push(charset.index_of(ch).ok_or_else(|| Error::UnknownChar {
                path: path.to_path_buf(),
                line: lineno,
                ch,
            })?);
        }
        out.push(ManifestEntry {
            image: base.join(img),
            text: label.to_string(),
            label: idx,
            line: lineno,
        });
    }
    Ok(out)
}

/// Reads a manifest and decodes every referenced image.
pub fn load_manifest(path: &Path, charset: &Charset) -> Result<Vec<RawSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, charset)?
        .into_iter()
        .map(|e| {
            let image = pnm::read(&e.image)?;
            let source_id = e
                .image
                .strip_prefix(base)
                .unwrap_or(&e.image)
                .to_string_lossy()
                .into_owned();
            Ok(RawSample {
                image,
                label: e.label,
                source_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs() -> Charset {
        Charset::new("cat".chars()).unwrap()
    }

    #[test]
    fn label_maps_through_charset() {
        let e = parse_manifest("img/0001.pgm\tcat\n", Path::new("m.tsv"), &cs()).unwrap();
        assert_eq!(e[0].label, vec![0, 1, 2]);
        assert_eq!(e[0].image, Path::new("img/0001.pgm"));
    }

    #[test]
    fn empty_label_is_parse_error() {
        let err = parse_manifest("a.pgm\tc\nb.pgm\t\n", Path::new("m.tsv"), &cs()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_char_named() {
        let err = parse_manifest("a.pgm\tcab\n", Path::new("m.tsv"), &cs()).unwrap_err();
        assert!(matches!(err, Error::UnknownChar { ch: 'b', line: 1, .. }));
    }

    #[test]
    fn duplicates_preserved_in_order() {
        let e = parse_manifest("a.pgm\tc\na.pgm\tt\n", Path::new("m.tsv"), &cs()).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].text, "t");
    }

    #[test]
    fn charset_rejects_multi_char_lines() {
        assert!(Charset::parse("a\nbc\n", Path::new("c.txt")).is_err());
        let c = Charset::parse("a\nb\n", Path::new("c.txt")).unwrap();
        assert_eq!(c.decode(&[1, 0]), "ba");
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn missing_image_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "nope.pgm\tc\n").unwrap();
        assert!(matches!(load_manifest(&m, &cs()), Err(Error::Io { .. })));
    }
}

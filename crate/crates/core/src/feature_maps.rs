//! Label inventories and phoneme to place/manner remapping.
//!
//! Inventory files hold one token per line. Map files are TSV,
//! `phoneme<TAB>class`; the target inventory is the set of classes in
//! order of first appearance. English and Arabic inventories and maps ship
//! with the crate under `data/` and are available through [`builtin`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alignment::{FrameLabels, UNLABELED};
use crate::error::{Error, Result};

/// An ordered set of unique tokens with dense indices `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInventory {
    name: String,
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl LabelInventory {
    pub fn from_tokens<I, S>(name: impl Into<String>, tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok: String = tok.into();
            check_token(&tok)?;
            if let Some(&prev) = index.get(&tok) {
                return Err(Error::DuplicateToken {
                    path: PathBuf::from(&name),
                    token: tok,
                    first_line: prev as usize + 1,
                    second_line: i + 1,
                });
            }
            index.insert(tok.clone(), labels.len() as u32);
            labels.push(tok);
        }
        if labels.is_empty() {
            return Err(Error::EmptyInventory(name));
        }
        Ok(LabelInventory {
            name,
            labels,
            index,
        })
    }

    /// Loads one token per line; blank lines are skipped, line numbers in errors are 1-based.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&name, &text, path)
    }

    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        let mut line_of = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() {
                continue;
            }
            check_token(tok).map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("line {}: token contains a tab", lineno + 1),
            })?;
            if let Some(&prev) = index.get(tok) {
                return Err(Error::DuplicateToken {
                    path: path.to_path_buf(),
                    token: tok.to_string(),
                    first_line: line_of[prev as usize],
                    second_line: lineno + 1,
                });
            }
            index.insert(tok.to_string(), labels.len() as u32);
            labels.push(tok.to_string());
            line_of.push(lineno + 1);
        }
        if labels.is_empty() {
            return Err(Error::EmptyInventory(path.display().to_string()));
        }
        Ok(LabelInventory {
            name: name.to_string(),
            labels,
            index,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.labels.get(index as usize).map(String::as_str)
    }
}

fn check_token(tok: &str) -> Result<()> {
    if tok.is_empty() || tok.contains(['\t', '\n', '\r']) {
        return Err(Error::validation(
            "token",
            format!("{tok:?} is not a valid token"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArticulatoryMode {
    Place,
    Manner,
}

impl ArticulatoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ArticulatoryMode::Place => "place",
            ArticulatoryMode::Manner => "manner",
        }
    }
}

impl fmt::Display for ArticulatoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArticulatoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "place" => Ok(ArticulatoryMode::Place),
            "manner" => Ok(ArticulatoryMode::Manner),
            other => Err(Error::Config(format!(
                "unknown articulatory mode {other:?} (expected place or manner)"
            ))),
        }
    }
}

/// Total map from a phoneme inventory onto an articulatory class inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArticulatoryMap {
    mode: ArticulatoryMode,
    /// `mapping[phoneme_index]` is the target index.
    mapping: Vec<u32>,
    target: LabelInventory,
}

impl ArticulatoryMap {
    pub fn load(path: &Path, mode: &str, phonemes: &LabelInventory) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, mode.parse()?, phonemes, path)
    }

    pub fn parse(
        text: &str,
        mode: ArticulatoryMode,
        phonemes: &LabelInventory,
        path: &Path,
    ) -> Result<Self> {
        let mut mapping = vec![UNLABELED; phonemes.len()];
        let mut classes: Vec<String> = Vec::new();
        let mut class_index: HashMap<String, u32> = HashMap::new();
        let mut line_of = vec![0usize; phonemes.len()];
        let parse_err = |lineno: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("line {lineno}: {message}"),
        };

        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(phone), Some(class), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(parse_err(lineno, "expected `phoneme<TAB>class`".into()));
            };
            let (phone, class) = (phone.trim(), class.trim());
            if phone.is_empty() || class.is_empty() {
                return Err(parse_err(lineno, "empty field".into()));
            }
            let p = phonemes.index_of(phone).ok_or_else(|| {
                parse_err(
                    lineno,
                    format!("phoneme {phone:?} not in inventory {}", phonemes.name()),
                )
            })?;
            if mapping[p as usize] != UNLABELED {
                return Err(Error::DuplicateToken {
                    path: path.to_path_buf(),
                    token: phone.to_string(),
                    first_line: line_of[p as usize],
                    second_line: lineno,
                });
            }
            let c = *class_index.entry(class.to_string()).or_insert_with(|| {
                classes.push(class.to_string());
                (classes.len() - 1) as u32
            });
            mapping[p as usize] = c;
            line_of[p as usize] = lineno;
        }

        if let Some(missing) = mapping.iter().position(|&c| c == UNLABELED) {
            return Err(Error::MissingMapping {
                token: phonemes.labels()[missing].clone(),
                map: mode.to_string(),
            });
        }
        let target = LabelInventory::from_tokens(format!("{}-{mode}", phonemes.name()), classes)?;
        Ok(ArticulatoryMap {
            mode,
            mapping,
            target,
        })
    }

    pub fn mode(&self) -> ArticulatoryMode {
        self.mode
    }

    pub fn target(&self) -> &LabelInventory {
        &self.target
    }

    pub fn map_index(&self, phoneme: u32) -> Option<u32> {
        self.mapping.get(phoneme as usize).copied()
    }

    pub fn source_len(&self) -> usize {
        self.mapping.len()
    }
}

/// Replaces every labelled frame with its articulatory class; `UNLABELED` frames pass through.
pub fn remap_labels(frame_labels: &FrameLabels, map: &ArticulatoryMap) -> Result<FrameLabels> {
    let labels = frame_labels
        .labels
        .iter()
        .map(|&l| {
            if l == UNLABELED {
                Ok(UNLABELED)
            } else {
                map.map_index(l).ok_or_else(|| Error::MissingMapping {
                    token: format!("#{l}"),
                    map: map.mode.to_string(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameLabels {
        utterance_id: frame_labels.utterance_id.clone(),
        time_scale: frame_labels.time_scale,
        labels,
    })
}

/// Inventories and maps shipped with the crate.
pub mod builtin {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Language {
        English,
        Arabic,
    }

    /// Label set sizes of the reference English and Arabic configurations.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct InventorySizes {
        pub phonemes: usize,
        pub graphemes: usize,
        pub place: usize,
        pub manner: usize,
    }

    impl Language {
        pub fn expected_sizes(self) -> InventorySizes {
            match self {
                Language::English => InventorySizes {
                    phonemes: 40,
                    graphemes: 28,
                    place: 9,
                    manner: 7,
                },
                Language::Arabic => InventorySizes {
                    phonemes: 34,
                    graphemes: 37,
                    place: 12,
                    manner: 9,
                },
            }
        }

        fn prefix(self) -> &'static str {
            match self {
                Language::English => "english",
                Language::Arabic => "arabic",
            }
        }

        fn sources(self) -> [&'static str; 4] {
            match self {
                Language::English => [
                    include_str!("../data/english/phonemes.txt"),
                    include_str!("../data/english/graphemes.txt"),
                    include_str!("../data/english/place.tsv"),
                    include_str!("../data/english/manner.tsv"),
                ],
                Language::Arabic => [
                    include_str!("../data/arabic/phonemes.txt"),
                    include_str!("../data/arabic/graphemes.txt"),
                    include_str!("../data/arabic/place.tsv"),
                    include_str!("../data/arabic/manner.tsv"),
                ],
            }
        }

        pub fn phonemes(self) -> LabelInventory {
            let name = format!("{}-phonemes", self.prefix());
            LabelInventory::parse(&name, self.sources()[0], Path::new(&name))
                .expect("shipped phoneme inventory is valid")
        }

        pub fn graphemes(self) -> LabelInventory {
            let name = format!("{}-graphemes", self.prefix());
            LabelInventory::parse(&name, self.sources()[1], Path::new(&name))
                .expect("shipped grapheme inventory is valid")
        }

        pub fn map(self, mode: ArticulatoryMode) -> Result<ArticulatoryMap> {
            let src = match mode {
                ArticulatoryMode::Place => self.sources()[2],
                ArticulatoryMode::Manner => self.sources()[3],
            };
            let name = format!("{}-{mode}.tsv", self.prefix());
            ArticulatoryMap::parse(src, mode, &self.phonemes(), Path::new(&name))
        }

        /// Raw text of a shipped file, for copying into a dataset root.
        pub fn source(self, kind: &str) -> Option<&'static str> {
            let idx = ["phonemes", "graphemes", "place", "manner"]
                .iter()
                .position(|k| *k == kind)?;
            Some(self.sources()[idx])
        }

        /// Compares the shipped files against [`Language::expected_sizes`]; empty on success.
        pub fn size_violations(self) -> Vec<String> {
            let want = self.expected_sizes();
            let mut v = Vec::new();
            let check = |v: &mut Vec<String>, what: &str, got: usize, want: usize| {
                if got != want {
                    v.push(format!("{} {what}: {got} != {want}", self.prefix()));
                }
            };
            check(&mut v, "phonemes", self.phonemes().len(), want.phonemes);
            check(&mut v, "graphemes", self.graphemes().len(), want.graphemes);
            for (mode, n) in [
                (ArticulatoryMode::Place, want.place),
                (ArticulatoryMode::Manner, want.manner),
            ] {
                match self.map(mode) {
                    Ok(m) => check(&mut v, mode.as_str(), m.target().len(), n),
                    Err(e) => v.push(format!("{} {mode}: {e}", self.prefix())),
                }
            }
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::builtin::Language;
    use super::*;

    fn inv(text: &str) -> Result<LabelInventory> {
        LabelInventory::parse("t", text, Path::new("t.txt"))
    }

    #[test]
    fn load_preserves_order() {
        let i = inv("AA\nAE\nB").unwrap();
        assert_eq!(i.len(), 3);
        assert_eq!(i.index_of("B"), Some(2));
        assert_eq!(i.token(0), Some("AA"));
    }

    #[test]
    fn empty_inventory_is_an_error() {
        assert!(matches!(inv(""), Err(Error::EmptyInventory(_))));
        assert!(matches!(inv("\n\n"), Err(Error::EmptyInventory(_))));
    }

    #[test]
    fn duplicate_reports_both_lines() {
        match inv("AA\nB\nAA\n") {
            Err(Error::DuplicateToken {
                token,
                first_line,
                second_line,
                ..
            }) => {
                assert_eq!(token, "AA");
                assert_eq!((first_line, second_line), (1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phones.txt");
        fs::write(&p, "AA\nAE\r\nB\n").unwrap();
        let i = LabelInventory::load(&p).unwrap();
        assert_eq!(i.name(), "phones");
        assert_eq!(i.labels(), ["AA", "AE", "B"]);
    }

    fn labels(v: Vec<u32>) -> FrameLabels {
        FrameLabels {
            utterance_id: "u".into(),
            time_scale: 1,
            labels: v,
        }
    }

    #[test]
    fn english_manner_of_stops() {
        let phones = Language::English.phonemes();
        let manner = Language::English.map(ArticulatoryMode::Manner).unwrap();
        let b = phones.index_of("B").unwrap();
        let p = phones.index_of("P").unwrap();
        let out = remap_labels(&labels(vec![b, p, UNLABELED]), &manner).unwrap();
        let stop = manner.target().index_of("stop").unwrap();
        assert_eq!(out.labels, vec![stop, stop, UNLABELED]);
    }

    #[test]
    fn vowels_share_one_place_class() {
        for lang in [Language::English, Language::Arabic] {
            let phones = lang.phonemes();
            let place = lang.map(ArticulatoryMode::Place).unwrap();
            let vowel = place.target().index_of("vowel").unwrap();
            let vowels: &[&str] = match lang {
                Language::English => &["AA", "IY", "UW", "ER", "OY"],
                Language::Arabic => &["a", "i", "u", "aa", "ii", "uu"],
            };
            for v in vowels {
                assert_eq!(
                    place.map_index(phones.index_of(v).unwrap()),
                    Some(vowel),
                    "{v}"
                );
            }
        }
    }

    #[test]
    fn identity_map_is_identity() {
        let phones = inv("AA\nAE\nB").unwrap();
        let map = ArticulatoryMap::parse(
            "AA\tAA\nAE\tAE\nB\tB\n",
            ArticulatoryMode::Manner,
            &phones,
            Path::new("id.tsv"),
        )
        .unwrap();
        let input = labels(vec![2, 0, UNLABELED, 1]);
        assert_eq!(remap_labels(&input, &map).unwrap(), input);
    }

    #[test]
    fn partial_map_is_rejected() {
        let phones = inv("AA\nAE\nB").unwrap();
        let err = ArticulatoryMap::parse(
            "AA\tvowel\nB\tstop\n",
            ArticulatoryMode::Manner,
            &phones,
            Path::new("m.tsv"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingMapping { ref token, .. } if token == "AE"));
    }

    #[test]
    fn map_rejects_unknown_and_duplicate_phonemes() {
        let phones = inv("AA\nB").unwrap();
        let path = Path::new("m.tsv");
        assert!(
            ArticulatoryMap::parse("AA\tv\nZZ\ts\n", ArticulatoryMode::Place, &phones, path)
                .is_err()
        );
        assert!(matches!(
            ArticulatoryMap::parse(
                "AA\tv\nB\ts\nAA\tx\n",
                ArticulatoryMode::Place,
                &phones,
                path
            ),
            Err(Error::DuplicateToken {
                first_line: 1,
                second_line: 3,
                ..
            })
        ));
        assert!(
            ArticulatoryMap::parse("AA v\nB\ts\n", ArticulatoryMode::Place, &phones, path).is_err()
        );
    }

    #[test]
    fn remap_out_of_range_index_errors() {
        let manner = Language::English.map(ArticulatoryMode::Manner).unwrap();
        assert!(remap_labels(&labels(vec![40]), &manner).is_err());
    }

    #[test]
    fn shipped_sizes_match_reference_configuration() {
        for lang in [Language::English, Language::Arabic] {
            assert!(
                lang.size_violations().is_empty(),
                "{:?}",
                lang.size_violations()
            );
        }
    }
}

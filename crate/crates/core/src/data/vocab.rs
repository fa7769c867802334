use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const SPACE: char = ' ';
pub const BLANK_SYMBOL: &str = "<blank>";
pub const EOS_SYMBOL: &str = "<sos/eos>";
pub const UNK_SYMBOL: &str = "<unk>";

/// Sorted grapheme inventory. Graphemes take ids `0..G`; the id `G` is
/// blank in the CTC space and sos/eos in the attention space, and `G + 1`
/// is reserved for unknown symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    graphemes: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    /// Builds from any set of graphemes. Space is always included.
    pub fn new(graphemes: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut set: BTreeSet<char> = graphemes.into_iter().collect();
        set.insert(SPACE);
        for &c in &set {
            // tab and newlines would break the transcript and hypothesis formats
            if c.is_control() {
                return Err(Error::Vocabulary(format!("control character {c:?} cannot be a grapheme")));
            }
        }
        let graphemes: Vec<char> = set.into_iter().collect();
        let index = graphemes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { graphemes, index })
    }

    /// Number of graphemes, space included.
    pub fn num_graphemes(&self) -> usize {
        self.graphemes.len()
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn blank(&self) -> usize {
        self.graphemes.len()
    }

    pub fn sos(&self) -> usize {
        self.graphemes.len()
    }

    pub fn eos(&self) -> usize {
        self.graphemes.len()
    }

    pub fn unk(&self) -> usize {
        self.graphemes.len() + 1
    }

    pub fn space(&self) -> usize {
        self.index[&SPACE]
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::UnknownSymbol(c.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| self.graphemes.get(i).copied().ok_or(Error::UnknownLabel(i)))
            .collect()
    }

    /// Textual name of any id, specials included.
    pub fn symbol(&self, id: usize) -> String {
        let g = self.graphemes.len();
        match id {
            i if i < g => self.graphemes[i].to_string(),
            i if i == g => EOS_SYMBOL.to_string(),
            i if i == g + 1 => UNK_SYMBOL.to_string(),
            i => format!("<{i}>"),
        }
    }

    /// Like [`Vocabulary::symbol`] but in the CTC space, where `G` is blank.
    pub fn ctc_symbol(&self, id: usize) -> String {
        if id == self.blank() {
            BLANK_SYMBOL.to_string()
        } else {
            self.symbol(id)
        }
    }

    /// The grapheme inventory as one string, the serialized form.
    pub fn to_text(&self) -> String {
        self.graphemes.iter().collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v = Self::new(text.chars())?;
        if v.num_graphemes() != text.chars().count() {
            return Err(Error::Vocabulary("serialized inventory is not sorted and unique".into()));
        }
        Ok(v)
    }

    /// Every grapheme of `other` is present here.
    pub fn covers(&self, other: &Vocabulary) -> bool {
        other.graphemes.iter().all(|&c| self.contains(c))
    }
}

/// Union of several inventories plus space, in sorted order.
pub fn build_vocab<'a, I, S>(inventories: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<str> + ?Sized + 'a,
{
    let mut any = false;
    let mut all = BTreeSet::new();
    for inv in inventories {
        any = true;
        all.extend(inv.as_ref().chars());
    }
    if !any {
        return Err(Error::Empty("inventories"));
    }
    Vocabulary::new(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_with_space() {
        let v = build_vocab(["abc", "bcd"].iter()).unwrap();
        assert_eq!(v.to_text(), " abcd");
        assert_eq!(v.blank(), 5);
        assert_eq!(v.unk(), 6);
        assert_eq!(v.space(), 0);
    }

    #[test]
    fn encode_roundtrip_and_unknown() {
        let v = build_vocab(["abc"].iter()).unwrap();
        let ids = v.encode("ab ca").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "ab ca");
        assert!(matches!(v.encode("z"), Err(Error::UnknownSymbol(_))));
        assert!(v.decode(&[v.eos()]).is_err());
        assert_eq!(v.symbol(v.eos()), EOS_SYMBOL);
    }

    #[test]
    fn serialized_form() {
        let v = build_vocab(["xyz", "a"].iter()).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("ba").is_err());
        assert!(Vocabulary::new("a\tb".chars()).is_err());
    }
}

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const CONTROL: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token inventory: four control tokens, then multi-character specials
/// (sentinels, JSON keys, quoted labels), then single characters in code
/// point order. Text is encoded by greedy longest match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_chars: usize,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().skip(CONTROL.len()).map(|(i, t)| (t.clone(), i as u32)).collect();
        let max_chars = tokens.iter().skip(CONTROL.len()).map(|t| t.chars().count()).max().unwrap_or(1);
        Self { tokens, index, max_chars }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials keep their given order (duplicates dropped); every character
    /// of `texts` not already a single-char special is appended sorted.
    pub fn build<'a, S: AsRef<str>>(specials: &[S], texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = CONTROL.iter().map(|s| s.to_string()).collect();
        for s in specials {
            let s = s.as_ref();
            if !s.is_empty() && !tokens[CONTROL.len()..].iter().any(|t| t == s) {
                tokens.push(s.to_string());
            }
        }
        let mut chars = BTreeSet::new();
        for t in texts {
            chars.extend(t.chars());
        }
        for c in chars {
            let s = c.to_string();
            if !tokens[CONTROL.len()..].contains(&s) {
                tokens.push(s);
            }
        }
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let n = bounds.len() - 1;
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let mut hit = None;
            for l in (1..=self.max_chars.min(n - i)).rev() {
                if let Some(&id) = self.index.get(&text[bounds[i]..bounds[i + l]]) {
                    hit = Some((id, l));
                    break;
                }
            }
            let (id, l) = hit.unwrap_or((UNK, 1));
            out.push(id);
            i += l;
        }
        out
    }

    /// Prompt ids start with BOS.
    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut v = vec![BOS];
        v.extend(self.encode(text));
        v
    }

    /// Target ids end with EOS.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut v = self.encode(text);
        v.push(EOS);
        v
    }

    /// Control tokens decode to nothing except UNK, which becomes U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push('\u{FFFD}'),
                _ => s.push_str(self.token(id).unwrap_or("\u{FFFD}")),
            }
        }
        s
    }

    pub fn token_len(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_match_and_round_trip() {
        let v = Vocab::build(&["\"entities\":", "<Q>", "</Q>"], ["<Q>兰蔻</Q>{\"entities\":[]}"]);
        assert_eq!(v.token(0), Some("<pad>"));
        let ids = v.encode("<Q>兰蔻</Q>");
        assert_eq!(ids.len(), 4);
        assert_eq!(v.decode(&ids), "<Q>兰蔻</Q>");
        let ids = v.encode("{\"entities\":[]}");
        assert_eq!(ids.len(), 5);
        assert_eq!(v.encode(&v.decode(&ids)), ids);
        assert_eq!(v.encode("猫"), vec![UNK]);
        assert!(ids.iter().all(|&i| (i as usize) < v.len()));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(&["ab"], ["abc"]);
        let j = serde_json::to_string(&v).unwrap();
        let w: Vocab = serde_json::from_str(&j).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.encode("abc"), v.encode("abc"));
    }
}

//! Business-aware prompt composition: instruction, rules, recent history,
//! candidate notes and the query, each wrapped in sentinel delimiters.
//!
//! Payloads are escaped so that the composed text can always be split back:
//! `\` becomes `\\`, newline `\n`, tab `\t` and `<` becomes `\l`. Every
//! delimiter starts with `<`, so no payload can contain one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{char_len, AnnotatedExample, BusinessRules, RuleText};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Delimiters {
    pub instruction: (String, String),
    pub rules: (String, String),
    pub history: (String, String),
    pub notes: (String, String),
    pub query: (String, String),
}

impl Default for Delimiters {
    fn default() -> Self {
        let pair = |t: &str| (format!("<{t}>"), format!("</{t}>"));
        Self { instruction: pair("I"), rules: pair("R"), history: pair("H"), notes: pair("N"), query: pair("Q") }
    }
}

impl Delimiters {
    pub fn all(&self) -> [&str; 10] {
        [
            &self.instruction.0,
            &self.instruction.1,
            &self.rules.0,
            &self.rules.1,
            &self.history.0,
            &self.history.1,
            &self.notes.0,
            &self.notes.1,
            &self.query.0,
            &self.query.1,
        ]
    }

    pub fn check(&self) -> Result<(), PromptError> {
        let all = self.all();
        for (i, d) in all.iter().enumerate() {
            if !d.starts_with('<') || d.chars().count() < 2 {
                return Err(PromptError::BadDelimiters(format!("`{d}` must start with `<` and have 2+ chars")));
            }
            if d.contains(['\\', '\n', '\t']) || d[1..].contains('<') {
                return Err(PromptError::BadDelimiters(format!("`{d}` contains a reserved character")));
            }
            if all[..i].contains(d) {
                return Err(PromptError::BadDelimiters(format!("`{d}` used twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub k_hist: usize,
    pub m_notes: usize,
    /// Budget in units of the caller's length function (tokens).
    pub max_prompt_len: usize,
    pub delimiters: Delimiters,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { k_hist: 2, m_notes: 1, max_prompt_len: 384, delimiters: Delimiters::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt needs {len} units, budget is {max}")]
    TooLong { len: usize, max: usize },
    #[error("bad delimiters: {0}")]
    BadDelimiters(String),
    #[error("malformed prompt: {0}")]
    Malformed(String),
}

/// Everything a prompt carries, as recovered by [`split_prompt`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptParts {
    pub instruction: String,
    pub rules: BusinessRules,
    pub hist: Vec<String>,
    pub notes: Vec<String>,
    pub query: String,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '<' => out.push_str("\\l"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String, PromptError> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next() {
            Some('\\') => '\\',
            Some('n') => '\n',
            Some('t') => '\t',
            Some('l') => '<',
            other => return Err(PromptError::Malformed(format!("bad escape \\{}", other.map(String::from).unwrap_or_default()))),
        });
    }
    Ok(out)
}

fn items<S: AsRef<str>>(xs: &[S]) -> String {
    xs.iter().map(|x| escape(x.as_ref()) + "\n").collect()
}

fn render(p: &PromptParts, d: &Delimiters) -> String {
    let rules: String = p.rules.0.iter().map(|r| format!("{}\t{}\n", escape(&r.name), escape(&r.text))).collect();
    let mut s = String::new();
    for ((open, close), body) in [
        (&d.instruction, escape(&p.instruction)),
        (&d.rules, rules),
        (&d.history, items(&p.hist)),
        (&d.notes, items(&p.notes)),
        (&d.query, escape(&p.query)),
    ] {
        s.push_str(open);
        s.push_str(&body);
        s.push_str(close);
    }
    s
}

/// Full prompt for an example. History keeps the `k_hist` most recent
/// queries (most recent last), notes the first `m_notes`. If the result
/// exceeds the budget, the oldest history goes first, then notes from the
/// tail.
pub fn compose_prompt(
    ex: &AnnotatedExample,
    cfg: &PromptConfig,
    len: impl Fn(&str) -> usize,
) -> Result<String, PromptError> {
    cfg.delimiters.check()?;
    let mut parts = PromptParts {
        instruction: ex.instruction.clone(),
        rules: ex.rules.clone(),
        hist: ex.hist[ex.hist.len().saturating_sub(cfg.k_hist)..].to_vec(),
        notes: ex.notes.iter().take(cfg.m_notes).cloned().collect(),
        query: ex.query.clone(),
    };
    loop {
        let text = render(&parts, &cfg.delimiters);
        let n = len(&text);
        if n <= cfg.max_prompt_len {
            return Ok(text);
        }
        if !parts.hist.is_empty() {
            parts.hist.remove(0);
        } else if parts.notes.pop().is_none() {
            return Err(PromptError::TooLong { len: n, max: cfg.max_prompt_len });
        }
    }
}

/// Query-only prompt, used for single-task auxiliary examples.
pub fn compose_query_prompt(query: &str, cfg: &PromptConfig, len: impl Fn(&str) -> usize) -> Result<String, PromptError> {
    let (open, close) = &cfg.delimiters.query;
    let text = format!("{open}{}{close}", escape(query));
    let n = len(&text);
    if n > cfg.max_prompt_len {
        return Err(PromptError::TooLong { len: n, max: cfg.max_prompt_len });
    }
    Ok(text)
}

pub fn char_units(s: &str) -> usize {
    char_len(s)
}

fn take_section<'a>(rest: &mut &'a str, (open, close): &(String, String)) -> Result<&'a str, PromptError> {
    let r = rest
        .strip_prefix(open.as_str())
        .ok_or_else(|| PromptError::Malformed(format!("expected `{open}`")))?;
    let end = r.find('<').ok_or_else(|| PromptError::Malformed(format!("unterminated `{open}`")))?;
    let after = r[end..]
        .strip_prefix(close.as_str())
        .ok_or_else(|| PromptError::Malformed(format!("expected `{close}`")))?;
    *rest = after;
    Ok(&r[..end])
}

fn raw_items(body: &str) -> Result<Vec<&str>, PromptError> {
    if body.is_empty() {
        return Ok(vec![]);
    }
    let body = body
        .strip_suffix('\n')
        .ok_or_else(|| PromptError::Malformed("list item not terminated".into()))?;
    Ok(body.split('\n').collect())
}

fn split_items(body: &str) -> Result<Vec<String>, PromptError> {
    raw_items(body)?.into_iter().map(unescape).collect()
}

/// Inverse of [`compose_prompt`].
pub fn split_prompt(text: &str, cfg: &PromptConfig) -> Result<PromptParts, PromptError> {
    let d = &cfg.delimiters;
    let mut rest = text;
    let instruction = unescape(take_section(&mut rest, &d.instruction)?)?;
    let rules = raw_items(take_section(&mut rest, &d.rules)?)?
        .into_iter()
        .map(|line| {
            let (name, body) = line.split_once('\t').ok_or_else(|| PromptError::Malformed("rule without tab".into()))?;
            Ok(RuleText { name: unescape(name)?, text: unescape(body)? })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let hist = split_items(take_section(&mut rest, &d.history)?)?;
    let notes = split_items(take_section(&mut rest, &d.notes)?)?;
    let query = unescape(take_section(&mut rest, &d.query)?)?;
    if !rest.is_empty() {
        return Err(PromptError::Malformed("trailing text after query".into()));
    }
    Ok(PromptParts { instruction, rules: BusinessRules(rules), hist, notes, query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{full_coverage, QPOutput};
    use proptest::prelude::*;

    fn ex(hist: &[&str], notes: &[&str], q: &str) -> AnnotatedExample {
        AnnotatedExample {
            id: 0,
            instruction: "解析查询".into(),
            rules: BusinessRules(vec![RuleText { name: "ner".into(), text: "品牌 人物".into() }]),
            hist: hist.iter().map(|s| s.to_string()).collect(),
            notes: notes.iter().map(|s| s.to_string()).collect(),
            query: q.into(),
            gold: QPOutput::default(),
            coverage: full_coverage(),
        }
    }

    #[test]
    fn empty_sections_present() {
        let cfg = PromptConfig::default();
        let p = compose_prompt(&ex(&[], &[], "口红"), &cfg, char_units).unwrap();
        assert_eq!(p, "<I>解析查询</I><R>ner\t品牌 人物\n</R><H></H><N></N><Q>口红</Q>");
    }

    #[test]
    fn history_keeps_most_recent() {
        let cfg = PromptConfig { k_hist: 3, ..Default::default() };
        let p = compose_prompt(&ex(&["a", "b", "c", "d", "e"], &[], "q"), &cfg, char_units).unwrap();
        assert_eq!(split_prompt(&p, &cfg).unwrap().hist, vec!["c", "d", "e"]);
    }

    #[test]
    fn truncation_order() {
        let e = ex(&["h1", "h2"], &["n1", "n2"], "q");
        let base = PromptConfig { k_hist: 5, m_notes: 5, ..Default::default() };
        let full = compose_prompt(&e, &base, char_units).unwrap();
        let n = char_units(&full);
        let cut = |m: usize| {
            let cfg = PromptConfig { max_prompt_len: m, ..base.clone() };
            compose_prompt(&e, &cfg, char_units).map(|p| split_prompt(&p, &cfg).unwrap())
        };
        let p = cut(n - 1).unwrap();
        assert_eq!((p.hist, p.notes.len()), (vec!["h2".to_string()], 2));
        let p = cut(n - 7).unwrap();
        assert_eq!((p.hist.len(), p.notes), (0, vec!["n1".to_string()]));
        assert!(matches!(cut(10), Err(PromptError::TooLong { .. })));
    }

    #[test]
    fn query_change_only_touches_query_section() {
        let cfg = PromptConfig::default();
        let a = compose_prompt(&ex(&["x"], &["y"], "兰蔻口红"), &cfg, char_units).unwrap();
        let b = compose_prompt(&ex(&["x"], &["y"], "迪奥香水推荐"), &cfg, char_units).unwrap();
        let (pa, pb) = (a.split_once("<Q>").unwrap(), b.split_once("<Q>").unwrap());
        assert_eq!(pa.0, pb.0);
        assert_ne!(pa.1, pb.1);
    }

    #[test]
    fn delimiter_in_payload_is_escaped() {
        let cfg = PromptConfig::default();
        let e = ex(&["</H>bad"], &["\\l<N>"], "a</Q>\tb\n");
        let p = compose_prompt(&e, &cfg, char_units).unwrap();
        let parts = split_prompt(&p, &cfg).unwrap();
        assert_eq!(parts.hist, e.hist);
        assert_eq!(parts.notes, e.notes);
        assert_eq!(parts.query, e.query);
    }

    #[test]
    fn bad_delimiters_rejected() {
        let mut cfg = PromptConfig::default();
        cfg.delimiters.notes.0 = "<H>".into();
        assert!(matches!(compose_prompt(&ex(&[], &[], "q"), &cfg, char_units), Err(PromptError::BadDelimiters(_))));
    }

    proptest! {
        #[test]
        fn parse_back_is_exact(
            instruction in ".{0,12}",
            rules in prop::collection::vec(("[a-z<\t\\\\]{1,5}", "[^\n]{1,10}\t?"), 0..3),
            hist in prop::collection::vec(".{0,8}", 0..5),
            notes in prop::collection::vec(".{0,8}", 0..3),
            query in ".{0,10}",
        ) {
            let cfg = PromptConfig { k_hist: 10, m_notes: 10, max_prompt_len: usize::MAX, ..Default::default() };
            let e = AnnotatedExample {
                instruction,
                rules: BusinessRules(rules.into_iter().map(|(name, text)| RuleText { name, text }).collect()),
                hist,
                notes,
                query,
                ..ex(&[], &[], "")
            };
            let p = compose_prompt(&e, &cfg, char_units).unwrap();
            let parts = split_prompt(&p, &cfg).unwrap();
            prop_assert_eq!(parts.instruction, e.instruction);
            prop_assert_eq!(parts.rules, e.rules);
            prop_assert_eq!(parts.hist, e.hist);
            prop_assert_eq!(parts.notes, e.notes);
            prop_assert_eq!(parts.query, e.query);
        }
    }
}

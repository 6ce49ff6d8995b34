//! Token layout for semantic-ID sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{SemanticId, SidMap};

pub type Token = u32;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const SEP: Token = 2;
const SPECIALS: usize = 3;

/// Specials, one tag per domain, one block per code level, then the dedup
/// block. Blocks are disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidVocabulary {
    pub domains: Vec<String>,
    pub level_sizes: Vec<usize>,
    pub dedup_size: usize,
}

impl SidVocabulary {
    pub fn new(domains: Vec<String>, level_sizes: Vec<usize>, dedup_size: usize) -> Self {
        Self { domains, level_sizes, dedup_size: dedup_size.max(1) }
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Tokens per rendered item: tag, codes, dedup, separator.
    pub fn item_len(&self) -> usize {
        self.levels() + 3
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.domains.len() + self.level_sizes.iter().sum::<usize>() + self.dedup_size
    }

    pub fn tag(&self, domain: &str) -> Result<Token> {
        let i = self.domains.iter().position(|d| d == domain).ok_or_else(|| Error::lookup("domain", domain))?;
        Ok((SPECIALS + i) as Token)
    }

    pub fn is_tag(&self, t: Token) -> bool {
        (SPECIALS..SPECIALS + self.domains.len()).contains(&(t as usize))
    }

    fn level_offset(&self, level: usize) -> usize {
        SPECIALS + self.domains.len() + self.level_sizes[..level].iter().sum::<usize>()
    }

    pub fn code(&self, level: usize, c: usize) -> Result<Token> {
        if level >= self.levels() || c >= self.level_sizes[level] {
            return Err(Error::Shape(format!("code {c} at level {level} outside vocabulary")));
        }
        Ok((self.level_offset(level) + c) as Token)
    }

    pub fn dedup(&self, k: usize) -> Result<Token> {
        if k >= self.dedup_size {
            return Err(Error::Shape(format!("dedup suffix {k} outside vocabulary")));
        }
        Ok((self.level_offset(self.levels()) + k) as Token)
    }

    /// The `M + 1` tokens of a semantic ID (codes then dedup).
    pub fn sid_tokens(&self, sid: &SemanticId) -> Result<Vec<Token>> {
        if sid.codes.len() != self.levels() {
            return Err(Error::Shape(format!("semantic ID has {} codes, vocabulary {}", sid.codes.len(), self.levels())));
        }
        let mut v = sid.codes.iter().enumerate().map(|(l, &c)| self.code(l, c)).collect::<Result<Vec<_>>>()?;
        v.push(self.dedup(sid.dedup)?);
        Ok(v)
    }

    pub fn from_sids(domains: Vec<String>, level_sizes: Vec<usize>, sids: &SidMap) -> Self {
        Self::new(domains, level_sizes, crate::tokenizer::sids::dedup_span(sids))
    }
}

/// One profile event: item id and domain.
pub type Event<'a> = (&'a str, &'a str);

fn render(vocab: &SidVocabulary, sids: &SidMap, ev: Event<'_>, out: &mut Vec<Token>) -> Result<()> {
    let sid = sids.get(ev.0).ok_or_else(|| Error::lookup("item", ev.0))?;
    out.push(vocab.tag(ev.1)?);
    out.extend(vocab.sid_tokens(sid)?);
    out.push(SEP);
    Ok(())
}

/// Index of the oldest event kept when `max_len` must also hold `reserved`
/// other tokens.
fn keep_recent(n: usize, item_len: usize, max_len: usize, reserved: usize) -> usize {
    let fit = max_len.saturating_sub(reserved) / item_len;
    n.saturating_sub(fit)
}

/// `BOS`, the chronological events, then the target domain's tag as the
/// generation cue. Oldest events are dropped first to fit `max_len`.
pub fn encode_history(events: &[Event<'_>], sids: &SidMap, vocab: &SidVocabulary, target_domain: &str, max_len: usize) -> Result<Vec<Token>> {
    if max_len < vocab.item_len() {
        return Err(Error::Config(format!("max_len {max_len} below one item ({} tokens)", vocab.item_len())));
    }
    let start = keep_recent(events.len(), vocab.item_len(), max_len, 2);
    let mut out = vec![BOS];
    for &ev in &events[start..] {
        render(vocab, sids, ev, &mut out)?;
    }
    out.push(vocab.tag(target_domain)?);
    Ok(out)
}

/// Training form: `BOS` then every event, truncated to `max_len`.
pub fn encode_sequence(events: &[Event<'_>], sids: &SidMap, vocab: &SidVocabulary, max_len: usize) -> Result<Vec<Token>> {
    let start = keep_recent(events.len(), vocab.item_len(), max_len, 1);
    let mut out = vec![BOS];
    for &ev in &events[start..] {
        render(vocab, sids, ev, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SidVocabulary, SidMap) {
        let mut sids = SidMap::new();
        sids.insert("x".into(), SemanticId::new(vec![5, 2, 7], 0));
        let v = SidVocabulary::new(vec!["A".into(), "B".into()], vec![8, 8, 8], 2);
        (v, sids)
    }

    #[test]
    fn blocks_are_disjoint_and_sized() {
        let (v, _) = setup();
        assert_eq!(v.size(), 3 + 2 + 24 + 2);
        let mut all: Vec<Token> = vec![BOS, EOS, SEP, v.tag("A").unwrap(), v.tag("B").unwrap()];
        for l in 0..3 {
            for c in 0..8 {
                all.push(v.code(l, c).unwrap());
            }
        }
        all.extend([v.dedup(0).unwrap(), v.dedup(1).unwrap()]);
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(*all.last().unwrap() as usize, v.size() - 1);
    }

    #[test]
    fn empty_history_is_bos_and_cue() {
        let (v, s) = setup();
        assert_eq!(encode_history(&[], &s, &v, "B", 64).unwrap(), vec![BOS, v.tag("B").unwrap()]);
    }

    #[test]
    fn single_item_rendering() {
        let (v, s) = setup();
        let got = encode_history(&[("x", "A")], &s, &v, "B", 64).unwrap();
        let want = vec![
            BOS,
            v.tag("A").unwrap(),
            v.code(0, 5).unwrap(),
            v.code(1, 2).unwrap(),
            v.code(2, 7).unwrap(),
            v.dedup(0).unwrap(),
            SEP,
            v.tag("B").unwrap(),
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let v = SidVocabulary::new(vec!["A".into()], vec![200, 1, 1], 1);
        let mut s = SidMap::new();
        let ids: Vec<String> = (0..100).map(|i| format!("i{i}")).collect();
        for (i, id) in ids.iter().enumerate() {
            s.insert(id.clone(), SemanticId::new(vec![i, 0, 0], 0));
        }
        let events: Vec<Event<'_>> = ids.iter().map(|i| (i.as_str(), "A")).collect();
        let max_len = 2 + 10 * v.item_len();
        let toks = encode_history(&events, &s, &v, "A", max_len).unwrap();
        assert_eq!(toks.len(), max_len);
        let kept: Vec<usize> =
            toks[1..toks.len() - 1].chunks(v.item_len()).map(|c| (c[1] - v.code(0, 0).unwrap()) as usize).collect();
        assert_eq!(kept, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn unmapped_item_is_lookup_error() {
        let (v, s) = setup();
        assert!(matches!(encode_history(&[("nope", "A")], &s, &v, "A", 64), Err(Error::Lookup { .. })));
    }
}

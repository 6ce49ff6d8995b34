//! Semantic IDs: collision-free code tuples and their TSV form.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Codes plus a suffix separating items whose codes collide.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub dedup: usize,
}

impl SemanticId {
    pub fn new(codes: Vec<usize>, dedup: usize) -> Self {
        Self { codes, dedup }
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let codes: Vec<String> = self.codes.iter().map(usize::to_string).collect();
        write!(f, "({}|{})", codes.join(","), self.dedup)
    }
}

/// Item id to semantic ID, ordered by item id.
pub type SidMap = BTreeMap<String, SemanticId>;

/// Gives items that share codes suffixes `0, 1, 2, ...` in ascending
/// item-id order.
pub fn assign_dedup(codes: impl IntoIterator<Item = (String, Vec<usize>)>) -> SidMap {
    let sorted: BTreeMap<String, Vec<usize>> = codes.into_iter().collect();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    sorted
        .into_iter()
        .map(|(id, c)| {
            let n = seen.entry(c.clone()).or_insert(0);
            let sid = SemanticId::new(c, *n);
            *n += 1;
            (id, sid)
        })
        .collect()
}

/// Largest dedup suffix plus one (at least one).
pub fn dedup_span(map: &SidMap) -> usize {
    map.values().map(|s| s.dedup + 1).max().unwrap_or(1)
}

pub fn format_sids(map: &SidMap) -> String {
    let mut out = String::new();
    for (id, sid) in map {
        out.push_str(id);
        for c in &sid.codes {
            let _ = write!(out, "\t{c}");
        }
        let _ = writeln!(out, "\t{}", sid.dedup);
    }
    out
}

pub fn write_sids(path: &Path, map: &SidMap) -> Result<()> {
    std::fs::write(path, format_sids(map)).map_err(|e| Error::io(path, e))
}

pub fn parse_sids(path: &Path, text: &str) -> Result<SidMap> {
    let mut map = SidMap::new();
    let mut depth = None;
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err("expected item_id, codes and dedup".into()));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|e| err(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let m = nums.len() - 1;
        if *depth.get_or_insert(m) != m {
            return Err(err(format!("expected {} codes, found {m}", depth.unwrap_or(0))));
        }
        let sid = SemanticId::new(nums[..m].to_vec(), nums[m]);
        if map.insert(fields[0].to_string(), sid).is_some() {
            return Err(err(format!("duplicate item `{}`", fields[0])));
        }
    }
    Ok(map)
}

pub fn read_sids(path: &Path) -> Result<SidMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sids(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn collisions_get_ascending_suffixes() {
        let m = assign_dedup([("b".to_string(), vec![5, 2, 7]), ("a".to_string(), vec![5, 2, 7]), ("c".to_string(), vec![1, 1, 1])]);
        assert_eq!(m["a"], SemanticId::new(vec![5, 2, 7], 0));
        assert_eq!(m["b"], SemanticId::new(vec![5, 2, 7], 1));
        assert_eq!(m["c"].dedup, 0);
    }

    #[test]
    fn distinct_codes_have_zero_suffix() {
        let m = assign_dedup((0..20).map(|i| (format!("i{i}"), vec![i, 0])));
        assert!(m.values().all(|s| s.dedup == 0));
    }

    #[test]
    fn injective_on_heavy_collisions() {
        let m = assign_dedup((0..2000).map(|i| (format!("i{i:04}"), vec![i % 7, i % 3])));
        let set: HashSet<_> = m.values().collect();
        assert_eq!(set.len(), 2000);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let m = assign_dedup([("x".to_string(), vec![3, 4, 5]), ("y".to_string(), vec![3, 4, 5])]);
        let text = format_sids(&m);
        assert_eq!(text, "x\t3\t4\t5\t0\ny\t3\t4\t5\t1\n");
        assert_eq!(parse_sids(Path::new("s"), &text).unwrap(), m);
        let bad = parse_sids(Path::new("s"), "x\t1\t2\n y\tz\t0\n");
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
    }

    proptest::proptest! {
        #[test]
        fn dedup_is_injective(codes in proptest::collection::vec(proptest::collection::vec(0usize..3, 2), 1..80)) {
            let m = assign_dedup(codes.iter().enumerate().map(|(i, c)| (format!("i{i}"), c.clone())));
            proptest::prop_assert_eq!(m.len(), codes.len());
            let distinct: HashSet<_> = m.values().collect();
            proptest::prop_assert_eq!(distinct.len(), codes.len());
            for (i, c) in codes.iter().enumerate() {
                proptest::prop_assert_eq!(&m[&format!("i{i}")].codes, c);
            }
        }
    }
}

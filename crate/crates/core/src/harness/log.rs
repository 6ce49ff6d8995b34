//! JSONL ingestion, chronological interaction logs and leave-last-out
//! splitting.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Interaction, ItemRecord};
use crate::error::{Error, Result};

/// Chronological interactions grouped by user.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    users: BTreeMap<String, Vec<Interaction>>,
}

impl InteractionLog {
    /// Groups by user and stable-sorts each timeline by timestamp, so equal
    /// timestamps keep their input order.
    pub fn new(events: Vec<Interaction>) -> Self {
        let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for e in events {
            users.entry(e.user_id.clone()).or_default().push(e);
        }
        for tl in users.values_mut() {
            tl.sort_by_key(|e| e.ts);
        }
        Self { users }
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[Interaction])> {
        self.users.iter().map(|(u, tl)| (u.as_str(), tl.as_slice()))
    }

    pub fn timeline(&self, user: &str) -> Option<&[Interaction]> {
        self.users.get(user).map(Vec::as_slice)
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn len(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Every event in user order, then chronological order.
    pub fn events(&self) -> impl Iterator<Item = &Interaction> {
        self.users.values().flatten()
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn read_items(path: &Path) -> Result<Catalog> {
    Catalog::new(parse_lines::<ItemRecord>(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Reads both files; interactions must reference known items of the stated
/// domain.
pub fn ingest(items: &Path, interactions: &Path) -> Result<(Catalog, InteractionLog)> {
    let catalog = read_items(items)?;
    let mut events = Vec::new();
    for (line, ev) in parse_lines::<Interaction>(interactions)? {
        match catalog.get(&ev.item_id) {
            None => return Err(Error::Referential { path: interactions.to_path_buf(), line, item: ev.item_id }),
            Some(it) if it.domain != ev.domain => {
                return Err(Error::Parse {
                    path: interactions.to_path_buf(),
                    line,
                    msg: format!("item `{}` belongs to `{}`, not `{}`", ev.item_id, it.domain, ev.domain),
                })
            }
            Some(_) => events.push(ev),
        }
    }
    Ok((catalog, InteractionLog::new(events)))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// One user's held-out pair in one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub user: String,
    pub domain: String,
    /// Positions in the user's full timeline.
    pub val_pos: usize,
    pub test_pos: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out: Vec<HeldOut>,
    /// Per domain: users whose sequence was too short for a target.
    pub excluded: BTreeMap<String, usize>,
}

/// Which held-out target a context leads up to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Val,
    Test,
}

impl SplitSpec {
    /// Timeline positions of events usable for training: everything except
    /// held-out targets.
    pub fn train_mask(&self, log: &InteractionLog, user: &str) -> Vec<bool> {
        let n = log.timeline(user).map_or(0, <[_]>::len);
        let mut keep = vec![true; n];
        for h in self.held_out.iter().filter(|h| h.user == user) {
            keep[h.val_pos] = false;
            keep[h.test_pos] = false;
        }
        keep
    }
}

/// Per user per domain with at least three events: the last is the test
/// target and the second-to-last the validation target.
pub fn split_leave_last_out(log: &InteractionLog) -> SplitSpec {
    let mut spec = SplitSpec::default();
    for (user, tl) in log.users() {
        let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in tl.iter().enumerate() {
            by_domain.entry(e.domain.as_str()).or_default().push(i);
        }
        for (domain, pos) in by_domain {
            if pos.len() < 3 {
                *spec.excluded.entry(domain.to_string()).or_default() += 1;
                continue;
            }
            spec.held_out.push(HeldOut { user: user.to_string(), domain: domain.to_string(), val_pos: pos[pos.len() - 2], test_pos: pos[pos.len() - 1] });
        }
    }
    spec
}

/// Context events for a target. Cross-domain contexts hold every event of
/// the user strictly before the target; domain-only contexts keep the
/// target's domain. Test contexts include the validation item.
pub fn context<'a>(log: &'a InteractionLog, h: &HeldOut, target: Target, domain_only: bool) -> Vec<&'a Interaction> {
    let tl = log.timeline(&h.user).unwrap_or(&[]);
    let end = match target {
        Target::Val => h.val_pos,
        Target::Test => h.test_pos,
    };
    tl[..end].iter().filter(|e| !domain_only || e.domain == h.domain).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngSeed;

    fn ev(u: &str, i: &str, d: &str, ts: i64) -> Interaction {
        Interaction { user_id: u.into(), item_id: i.into(), domain: d.into(), ts }
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    const ITEMS: &str = r#"{"item_id":"a","domain":"A","embedding":[0.0,1.0]}
{"item_id":"b","domain":"A","embedding":[1.0,0.0]}
{"item_id":"x","domain":"B","embedding":[1.0,1.0]}
"#;

    #[test]
    fn empty_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let (c, log) = ingest(&write(dir.path(), "i.jsonl", ITEMS), &write(dir.path(), "e.jsonl", "")).unwrap();
        assert_eq!(c.len(), 3);
        assert!(log.is_empty());
    }

    #[test]
    fn five_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"user_id":"u1","item_id":"b","domain":"A","ts":20}
{"user_id":"u2","item_id":"x","domain":"B","ts":5}
{"user_id":"u1","item_id":"a","domain":"A","ts":10}
{"user_id":"u1","item_id":"x","domain":"B","ts":15}
{"user_id":"u1","item_id":"a","domain":"A","ts":20}
"#;
        let (_, log) = ingest(&write(dir.path(), "i.jsonl", ITEMS), &write(dir.path(), "e.jsonl", body)).unwrap();
        assert_eq!(log.user_count(), 2);
        let u1 = log.timeline("u1").unwrap();
        assert_eq!(u1, &[ev("u1", "a", "A", 10), ev("u1", "x", "B", 15), ev("u1", "b", "A", 20), ev("u1", "a", "A", 20)]);
        assert_eq!(log.timeline("u2").unwrap(), &[ev("u2", "x", "B", 5)]);
    }

    #[test]
    fn ingest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "i.jsonl", ITEMS);
        let bad = write(dir.path(), "e.jsonl", "{\"user_id\":\"u\",\"item_id\":\"a\",\"domain\":\"A\",\"ts\":1}\n{\"user_id\":\"u\",\"item_id\":\"zz\",\"domain\":\"A\",\"ts\":2}\n");
        assert!(matches!(ingest(&items, &bad), Err(Error::Referential { line: 2, .. })));
        let junk = write(dir.path(), "j.jsonl", "\n{not json\n");
        assert!(matches!(ingest(&items, &junk), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn split_example() {
        let log = InteractionLog::new(vec![ev("u", "a", "A", 1), ev("u", "b", "A", 2), ev("u", "c", "A", 3), ev("u", "d", "A", 4), ev("v", "a", "A", 1), ev("v", "b", "A", 2)]);
        let s = split_leave_last_out(&log);
        assert_eq!(s.held_out, vec![HeldOut { user: "u".into(), domain: "A".into(), val_pos: 2, test_pos: 3 }]);
        assert_eq!(s.excluded.get("A"), Some(&1));
        let h = &s.held_out[0];
        let items = |v: Vec<&Interaction>| v.iter().map(|e| e.item_id.clone()).collect::<Vec<_>>();
        assert_eq!(items(context(&log, h, Target::Val, false)), vec!["a", "b"]);
        assert_eq!(items(context(&log, h, Target::Test, false)), vec!["a", "b", "c"]);
        assert_eq!(s.train_mask(&log, "u"), vec![true, true, false, false]);
    }

    #[test]
    fn random_log_split_is_disjoint() {
        let mut rng = RngSeed::new(11, "log").stream();
        let mut events = Vec::new();
        for u in 0..100 {
            let n = rng.below(12);
            for k in 0..n {
                let d = if rng.bernoulli(0.5) { "A" } else { "B" };
                events.push(ev(&format!("u{u:03}"), &format!("i{}", rng.below(50)), d, k as i64));
            }
        }
        let log = InteractionLog::new(events);
        let s = split_leave_last_out(&log);
        for h in &s.held_out {
            let tl = log.timeline(&h.user).unwrap();
            let ctx = context(&log, h, Target::Val, true);
            assert!(ctx.len() >= 1 && h.val_pos < h.test_pos);
            let mask = s.train_mask(&log, &h.user);
            let train: Vec<usize> = (0..tl.len()).filter(|&i| mask[i] && tl[i].domain == h.domain).collect();
            assert!(!train.contains(&h.val_pos) && !train.contains(&h.test_pos));
            assert!(train.iter().all(|&i| i < h.val_pos));
            assert_eq!(tl[h.test_pos..].iter().filter(|e| e.domain == h.domain).count(), 1);
        }
    }
}

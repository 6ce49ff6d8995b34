//! Per-domain trie over the token paths of catalog items.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::masked_softmax;
use crate::rec::Token;

const MAGIC: &[u8; 4] = b"XDTR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Node {
    /// Sorted by token.
    children: Vec<(Token, u32)>,
    leaf: Option<u32>,
}

/// Flat node table; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixTree {
    pub domain: String,
    depth: usize,
    nodes: Vec<Node>,
    leaves: Vec<String>,
}

/// Builds the trie of `paths` (item id to token path). All paths must have
/// the same length; two items sharing a path is an integrity error.
pub fn build_tree(domain: &str, paths: impl IntoIterator<Item = (String, Vec<Token>)>) -> Result<PrefixTree> {
    let sorted: BTreeMap<String, Vec<Token>> = paths.into_iter().collect();
    let mut depth = None;
    let mut tree = PrefixTree { domain: domain.to_string(), depth: 0, nodes: vec![Node::default()], leaves: Vec::new() };
    // Insert via a nested map first so children end up sorted.
    let mut by_path: BTreeMap<Vec<Token>, String> = BTreeMap::new();
    for (id, p) in sorted {
        if *depth.get_or_insert(p.len()) != p.len() || p.is_empty() {
            return Err(Error::Shape(format!("item `{id}` has a path of length {}, expected {}", p.len(), depth.unwrap_or(0))));
        }
        if let Some(prev) = by_path.insert(p.clone(), id.clone()) {
            return Err(Error::Integrity(format!("items `{prev}` and `{id}` share the path {p:?}")));
        }
    }
    tree.depth = depth.unwrap_or(0);
    for (p, id) in by_path {
        let mut node = 0usize;
        for &t in &p {
            let next = match tree.nodes[node].children.last() {
                Some(&(last, child)) if last == t => child as usize,
                _ => {
                    tree.nodes.push(Node::default());
                    let child = tree.nodes.len() - 1;
                    tree.nodes[node].children.push((t, child as u32));
                    child
                }
            };
            node = next;
        }
        tree.nodes[node].leaf = Some(tree.leaves.len() as u32);
        tree.leaves.push(id);
    }
    Ok(tree)
}

impl PrefixTree {
    /// Path length (`M + 1` for semantic IDs).
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn item_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    fn child(&self, node: usize, t: Token) -> Option<usize> {
        let ch = &self.nodes[node].children;
        ch.binary_search_by_key(&t, |&(tok, _)| tok).ok().map(|i| ch[i].1 as usize)
    }

    fn node_of(&self, prefix: &[Token]) -> Result<usize> {
        let mut node = 0;
        for &t in prefix {
            node = self.child(node, t).ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        }
        Ok(node)
    }

    /// The sorted tokens that may follow `prefix`; empty at a leaf.
    pub fn valid_next(&self, prefix: &[Token]) -> Result<Vec<Token>> {
        Ok(self.nodes[self.node_of(prefix)?].children.iter().map(|&(t, _)| t).collect())
    }

    /// The item bound to a complete path.
    pub fn leaf_item(&self, path: &[Token]) -> Option<&str> {
        let node = self.node_of(path).ok()?;
        self.nodes[node].leaf.map(|l| self.leaves[l as usize].as_str())
    }

    /// Every root-to-leaf path with its item, in token order.
    pub fn paths(&self) -> Vec<(String, Vec<Token>)> {
        let mut out = Vec::with_capacity(self.leaves.len());
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(l) = self.nodes[node].leaf {
                out.push((self.leaves[l as usize].clone(), path.clone()));
            }
            for &(t, c) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c as usize, p));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend(VERSION.to_le_bytes());
        put_str(&mut b, &self.domain);
        b.extend((self.depth as u32).to_le_bytes());
        b.extend((self.nodes.len() as u32).to_le_bytes());
        for n in &self.nodes {
            b.extend((n.children.len() as u32).to_le_bytes());
            for &(t, c) in &n.children {
                b.extend(t.to_le_bytes());
                b.extend(c.to_le_bytes());
            }
            b.extend(n.leaf.map_or(-1i64, i64::from).to_le_bytes());
        }
        b.extend((self.leaves.len() as u32).to_le_bytes());
        for l in &self.leaves {
            put_str(&mut b, l);
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("not a prefix-tree file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported prefix-tree version {version}")));
        }
        let domain = r.string()?;
        let depth = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let k = r.u32()? as usize;
            let mut children = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                let t = r.u32()?;
                let c = r.u32()?;
                if c as usize >= n {
                    return Err(Error::Archive(format!("child index {c} out of range")));
                }
                children.push((t, c));
            }
            let leaf = i64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            nodes.push(Node { children, leaf: u32::try_from(leaf).ok() });
        }
        let m = r.u32()? as usize;
        let leaves = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        if r.pos != buf.len() {
            return Err(Error::Archive("trailing bytes after prefix tree".into()));
        }
        if nodes.iter().any(|n| n.leaf.is_some_and(|l| l as usize >= m)) {
            return Err(Error::Archive("leaf index out of range".into()));
        }
        Ok(Self { domain, depth, nodes, leaves })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend((s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Archive("truncated prefix tree".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Archive(e.to_string()))
    }
}

/// Softmax of `logits` restricted to the tokens allowed after `prefix`.
pub fn constrained_step(logits: &[f64], tree: &PrefixTree, prefix: &[Token]) -> Result<Vec<f64>> {
    let valid: Vec<usize> = tree.valid_next(prefix)?.into_iter().map(|t| t as usize).collect();
    masked_softmax(logits, &valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn xy() -> PrefixTree {
        build_tree("d", [("X".to_string(), vec![0, 1, 0]), ("Y".to_string(), vec![0, 2, 0])]).unwrap()
    }

    #[test]
    fn small_tree_structure() {
        let t = xy();
        assert_eq!(t.valid_next(&[]).unwrap(), vec![0]);
        assert_eq!(t.valid_next(&[0]).unwrap(), vec![1, 2]);
        assert!(matches!(t.valid_next(&[9]), Err(Error::InvalidPrefix(p)) if p == vec![9]));
        assert_eq!(t.leaf_item(&[0, 2, 0]), Some("Y"));
        assert_eq!(t.leaf_item(&[0, 2]), None);
        assert!(t.node_count() <= 2 * 3 + 1);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let r = build_tree("d", [("a".to_string(), vec![1, 1]), ("b".to_string(), vec![1, 1])]);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn constrained_step_values() {
        let t = build_tree("d", [("a".to_string(), vec![0]), ("b".to_string(), vec![2])]).unwrap();
        let p = constrained_step(&[1.0, 2.0, 3.0], &t, &[]).unwrap();
        assert!((p[0] - 0.1192).abs() < 1e-4 && p[1] == 0.0 && (p[2] - 0.8808).abs() < 1e-4);
        let single = build_tree("d", [("a".to_string(), vec![1])]).unwrap();
        assert_eq!(constrained_step(&[5.0, -3.0, 9.0], &single, &[]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn serialisation_round_trip() {
        let t = xy();
        let b = t.to_bytes();
        assert_eq!(PrefixTree::from_bytes(&b).unwrap(), t);
        assert!(PrefixTree::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn paths_round_trip(raw in proptest::collection::btree_map(proptest::collection::vec(0u32..6, 3), 0u8..1, 1..150)) {
            let paths: BTreeMap<String, Vec<Token>> = raw.keys().enumerate().map(|(i, p)| (format!("it{i}"), p.clone())).collect();
            let t = build_tree("d", paths.clone()).unwrap();
            let back: BTreeMap<String, Vec<Token>> = t.paths().into_iter().collect();
            prop_assert_eq!(back, paths);
            prop_assert!(t.node_count() <= t.item_count() * 3 + 1);
            prop_assert_eq!(PrefixTree::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}

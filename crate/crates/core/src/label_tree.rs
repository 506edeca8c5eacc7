//! Label hierarchy: a tree of codes under a single `ROOT` at level 0, with a
//! subset of nodes marked as classification targets.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const ROOT_ID: &str = "ROOT";

/// Index of a node inside a [`CodeTree`]. `NodeId(0)` is always ROOT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeNode {
    pub id: String,
    pub parent: Option<NodeId>,
    pub level: usize,
    pub is_target: bool,
}

/// Immutable label tree. Nodes are stored in breadth-first order from ROOT;
/// children keep the order in which their edges were supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTree {
    nodes: Vec<CodeNode>,
    children: Vec<Vec<NodeId>>,
    by_id: BTreeMap<String, NodeId>,
    levels: Vec<Vec<NodeId>>,
    targets: Vec<NodeId>,
}

impl CodeTree {
    /// Builds a tree from `(child, parent)` edges.
    ///
    /// If no edge mentions `ROOT`, one is synthesised above every parentless
    /// node. Otherwise `ROOT` must be the only parentless node. The order of
    /// `targets` fixes the class index of every target.
    pub fn build_from_edges<S: AsRef<str>, T: AsRef<str>>(edges: &[(S, S)], targets: &[T]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::EmptyEdges);
        }
        if targets.is_empty() {
            return Err(Error::EmptyTargets);
        }

        // Discovery order keeps construction deterministic.
        let mut order: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut parent_of: BTreeMap<String, String> = BTreeMap::new();
        for (child, parent) in edges {
            let (child, parent) = (child.as_ref(), parent.as_ref());
            if child.is_empty() || parent.is_empty() {
                return Err(Error::EmptyCode);
            }
            if child == ROOT_ID {
                return Err(Error::RootHasParent(parent.to_string()));
            }
            if child == parent {
                return Err(Error::Cycle(child.to_string()));
            }
            match parent_of.get(child) {
                Some(existing) if existing != parent => {
                    return Err(Error::DuplicateParent {
                        child: child.to_string(),
                        first: existing.clone(),
                        second: parent.to_string(),
                    })
                }
                Some(_) => continue,
                None => {
                    parent_of.insert(child.to_string(), parent.to_string());
                }
            }
            for id in [parent, child] {
                if seen.insert(id.to_string()) {
                    order.push(id.to_string());
                }
            }
        }

        // Follow parent links from every node; a revisit within one walk is a cycle.
        for start in &order {
            let mut on_path = BTreeSet::new();
            let mut cur = start.as_str();
            while let Some(p) = parent_of.get(cur) {
                if !on_path.insert(cur) {
                    return Err(Error::Cycle(cur.to_string()));
                }
                cur = p.as_str();
            }
        }

        let has_root = seen.contains(ROOT_ID);
        let tops: Vec<&String> = order
            .iter()
            .filter(|id| !parent_of.contains_key(id.as_str()) && id.as_str() != ROOT_ID)
            .collect();
        if has_root {
            if let Some(first) = tops.first() {
                return Err(Error::Disconnected((*first).clone()));
            }
        } else {
            let tops: Vec<String> = tops.into_iter().cloned().collect();
            for t in tops {
                parent_of.insert(t, ROOT_ID.to_string());
            }
        }

        let mut child_lists: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for id in &order {
            if let Some(p) = parent_of.get(id.as_str()) {
                child_lists.entry(p.as_str()).or_default().push(id.as_str());
            }
        }

        let mut nodes = vec![CodeNode {
            id: ROOT_ID.to_string(),
            parent: None,
            level: 0,
            is_target: false,
        }];
        let mut by_id = BTreeMap::new();
        by_id.insert(ROOT_ID.to_string(), NodeId(0));
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new()];
        let mut queue = VecDeque::from([NodeId(0)]);
        while let Some(node) = queue.pop_front() {
            let id = nodes[node.0].id.clone();
            let level = nodes[node.0].level;
            for &child in child_lists.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                let cid = NodeId(nodes.len());
                nodes.push(CodeNode {
                    id: child.to_string(),
                    parent: Some(node),
                    level: level + 1,
                    is_target: false,
                });
                children.push(Vec::new());
                children[node.0].push(cid);
                by_id.insert(child.to_string(), cid);
                queue.push_back(cid);
            }
        }
        if let Some(missing) = order.iter().find(|id| !by_id.contains_key(id.as_str())) {
            return Err(Error::Disconnected(missing.clone()));
        }

        let mut target_ids = Vec::with_capacity(targets.len());
        for t in targets {
            let t = t.as_ref();
            let id = *by_id
                .get(t)
                .ok_or_else(|| Error::UnknownTarget(t.to_string()))?;
            if nodes[id.0].is_target {
                return Err(Error::DuplicateTarget(t.to_string()));
            }
            nodes[id.0].is_target = true;
            target_ids.push(id);
        }

        let max_level = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); max_level + 1];
        for (i, n) in nodes.iter().enumerate() {
            levels[n.level].push(NodeId(i));
        }

        Ok(Self {
            nodes,
            children,
            by_id,
            levels,
            targets: target_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Maximum node level `L`.
    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn nodes(&self) -> &[CodeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &CodeNode {
        &self.nodes[id.0]
    }

    pub fn lookup(&self, code: &str) -> Option<NodeId> {
        self.by_id.get(code).copied()
    }

    pub fn require(&self, code: &str) -> Result<NodeId> {
        self.lookup(code).ok_or_else(|| Error::UnknownNode(code.to_string()))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    /// Nodes of level `k`, in storage order.
    pub fn level(&self, k: usize) -> &[NodeId] {
        &self.levels[k]
    }

    /// Classification targets in class-index order.
    pub fn targets(&self) -> &[NodeId] {
        &self.targets
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Class index of a target node.
    pub fn class_index(&self, id: NodeId) -> Option<usize> {
        self.targets.iter().position(|&t| t == id)
    }

    /// Nodes sharing `id`'s parent, excluding `id`, in child order.
    pub fn siblings(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let parent = self
            .nodes
            .get(id.0)
            .ok_or_else(|| Error::UnknownNode(alloc::format!("#{}", id.0)))?
            .parent
            .ok_or(Error::SiblingsOfRoot)?;
        Ok(self.children[parent.0]
            .iter()
            .copied()
            .filter(|&c| c != id)
            .collect())
    }

    /// [`siblings`](Self::siblings) by code string.
    pub fn siblings_of(&self, code: &str) -> Result<BTreeSet<String>> {
        let id = self.require(code)?;
        Ok(self
            .siblings(id)?
            .into_iter()
            .map(|s| self.nodes[s.0].id.clone())
            .collect())
    }

    /// Ancestors of `id` from its parent up to ROOT.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.nodes[id.0].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p.0].parent;
        }
        out
    }

    /// `(child, parent)` for every non-root node, in storage order.
    pub fn to_edges(&self) -> Vec<(String, String)> {
        self.nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (n.id.clone(), self.nodes[p.0].id.clone())))
            .collect()
    }

    pub fn target_codes(&self) -> Vec<String> {
        self.targets.iter().map(|t| self.nodes[t.0].id.clone()).collect()
    }

    /// Human-readable warnings that do not invalidate the tree: targets
    /// with children.
    pub fn warnings(&self) -> Vec<String> {
        self.targets
            .iter()
            .filter(|t| !self.children[t.0].is_empty())
            .map(|t| alloc::format!("target `{}` is not a leaf", self.nodes[t.0].id))
            .collect()
    }
}

/// How code syntax implies ancestry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrefixScheme {
    /// A leading letter run is the top level; each dot adds a level
    /// (`C01.784` -> `C`, `C01`, `C01.784`).
    Dotted,
    /// Cut the code after each of the given character counts.
    FixedPrefixLengths(Vec<usize>),
}

/// Ancestor chain implied by a code, shallowest first, ending with the
/// code itself.
pub fn derive_dotted_ancestry(code: &str, scheme: &PrefixScheme) -> Result<Vec<String>> {
    if code.is_empty() {
        return Err(Error::EmptyCode);
    }
    match scheme {
        PrefixScheme::Dotted => {
            let segments: Vec<&str> = code.split('.').collect();
            if segments.iter().any(|s| s.is_empty()) {
                return Err(Error::EmptySegment(code.to_string()));
            }
            let mut chain = Vec::new();
            let first = segments[0];
            let letters = first.chars().take_while(|c| c.is_ascii_alphabetic()).count();
            if letters > 0 && letters < first.len() {
                chain.push(first[..letters].to_string());
            }
            let mut prefix = String::new();
            for (i, seg) in segments.iter().enumerate() {
                if i > 0 {
                    prefix.push('.');
                }
                prefix.push_str(seg);
                chain.push(prefix.clone());
            }
            Ok(chain)
        }
        PrefixScheme::FixedPrefixLengths(lengths) => {
            if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::PrefixLengths);
            }
            let chars: Vec<char> = code.chars().collect();
            let mut chain = Vec::new();
            for &len in lengths {
                if len >= chars.len() {
                    break;
                }
                let cut: String = chars[..len].iter().collect();
                let cut = cut.trim_end_matches('.');
                if cut.is_empty() {
                    return Err(Error::EmptySegment(code.to_string()));
                }
                chain.push(cut.to_string());
            }
            chain.push(code.to_string());
            chain.dedup();
            Ok(chain)
        }
    }
}

/// `(child, parent)` edges for a set of codes whose ancestry is implied by
/// their syntax; top-level prefixes hang under ROOT.
pub fn edges_from_codes<S: AsRef<str>>(codes: &[S], scheme: &PrefixScheme) -> Result<Vec<(String, String)>> {
    let mut edges = Vec::new();
    let mut have = BTreeSet::new();
    for code in codes {
        let chain = derive_dotted_ancestry(code.as_ref(), scheme)?;
        let mut parent = ROOT_ID.to_string();
        for node in chain {
            if have.insert(node.clone()) {
                edges.push((node.clone(), parent.clone()));
            }
            parent = node;
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pneumonia() -> CodeTree {
        let edges = [
            ("J00-J99", "ROOT"),
            ("J09-J18", "J00-J99"),
            ("J16", "J09-J18"),
            ("J16.8", "J16"),
            ("J16.0", "J16"),
            ("J12", "J09-J18"),
            ("J12.82", "J12"),
        ];
        CodeTree::build_from_edges(&edges, &["J16.8", "J16.0", "J12.82"]).unwrap()
    }

    #[test]
    fn pneumonia_tree() {
        let t = pneumonia();
        assert_eq!(t.max_level(), 4);
        assert_eq!(t.len(), 8);
        let j168 = t.require("J16.8").unwrap();
        let j160 = t.require("J16.0").unwrap();
        assert_eq!(t.parent(j168), t.parent(j160));
        assert_eq!(t.siblings(j168).unwrap(), vec![j160]);
        assert_eq!(t.node(j168).level, 4);
        assert!(t.node(j168).is_target);
        assert_eq!(t.class_index(t.require("J12.82").unwrap()), Some(2));
        assert!(t.warnings().is_empty());
    }

    #[test]
    fn minimal_tree() {
        let t = CodeTree::build_from_edges(&[("A", "ROOT")], &["A"]).unwrap();
        assert_eq!(t.max_level(), 1);
        assert!(t.siblings_of("A").unwrap().is_empty());
        assert_eq!(t.siblings(t.root()), Err(Error::SiblingsOfRoot));
        assert_eq!(t.siblings_of("nope"), Err(Error::UnknownNode("nope".into())));
    }

    #[test]
    fn invalid_trees() {
        assert!(matches!(
            CodeTree::build_from_edges(&[("A", "B"), ("B", "A")], &["A"]),
            Err(Error::Cycle(_))
        ));
        assert!(matches!(
            CodeTree::build_from_edges(&[("A", "ROOT"), ("A", "B")], &["A"]),
            Err(Error::DuplicateParent { .. })
        ));
        assert_eq!(
            CodeTree::build_from_edges(&[("A", "ROOT")], &["Z"]),
            Err(Error::UnknownTarget("Z".into()))
        );
        assert_eq!(
            CodeTree::build_from_edges(&[("A", "ROOT"), ("B", "C")], &["A"]),
            Err(Error::Disconnected("C".into()))
        );
        assert_eq!(
            CodeTree::build_from_edges::<&str, &str>(&[], &["A"]),
            Err(Error::EmptyEdges)
        );
        assert_eq!(
            CodeTree::build_from_edges::<&str, &str>(&[("A", "ROOT")], &[]),
            Err(Error::EmptyTargets)
        );
        assert!(matches!(
            CodeTree::build_from_edges(&[("ROOT", "A")], &["A"]),
            Err(Error::RootHasParent(_))
        ));
    }

    #[test]
    fn synthesised_root() {
        let t = CodeTree::build_from_edges(&[("A1", "A"), ("B1", "B")], &["A1", "B1"]).unwrap();
        assert_eq!(t.level(1).len(), 2);
        assert_eq!(t.max_level(), 2);
    }

    #[test]
    fn non_leaf_target_warns() {
        let t = CodeTree::build_from_edges(&[("A", "ROOT"), ("A1", "A")], &["A"]).unwrap();
        assert_eq!(t.warnings().len(), 1);
    }

    #[test]
    fn ancestry() {
        assert_eq!(
            derive_dotted_ancestry("C01.784", &PrefixScheme::Dotted).unwrap(),
            ["C", "C01", "C01.784"]
        );
        assert_eq!(derive_dotted_ancestry("X", &PrefixScheme::Dotted).unwrap(), ["X"]);
        assert_eq!(
            derive_dotted_ancestry("J16.8", &PrefixScheme::FixedPrefixLengths(vec![1, 3, 5])).unwrap(),
            ["J", "J16", "J16.8"]
        );
        assert_eq!(
            derive_dotted_ancestry("C01..7", &PrefixScheme::Dotted),
            Err(Error::EmptySegment("C01..7".into()))
        );
        assert_eq!(
            derive_dotted_ancestry("J16.8", &PrefixScheme::FixedPrefixLengths(vec![3, 1])),
            Err(Error::PrefixLengths)
        );
        assert_eq!(derive_dotted_ancestry("", &PrefixScheme::Dotted), Err(Error::EmptyCode));
    }

    #[test]
    fn codes_to_tree() {
        let edges = edges_from_codes(&["C01.784", "C01.150", "C02"], &PrefixScheme::Dotted).unwrap();
        let t = CodeTree::build_from_edges(&edges, &["C01.784", "C01.150"]).unwrap();
        assert_eq!(t.max_level(), 3);
        assert_eq!(t.siblings_of("C01.784").unwrap().len(), 1);
        assert_eq!(t.siblings_of("C01").unwrap().len(), 1);
    }
}

use std::collections::BTreeMap;

use super::{SemanticId, SidAssignment, SID_LEN};
use crate::corpus::ItemId;

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<ItemId>,
}

/// Trie over SID code prefixes. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
}

impl PrefixTrie {
    pub(crate) fn from_assignment(assignment: &SidAssignment) -> Self {
        let mut nodes = vec![Node::default()];
        for (item, sid) in assignment.iter() {
            let mut at = 0;
            for &code in sid.codes() {
                at = match nodes[at].children.get(&code) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.insert(code, next);
                        next
                    }
                };
            }
            nodes[at].item = Some(item);
        }
        Self { nodes }
    }

    fn walk(&self, prefix: &[u32]) -> Option<usize> {
        prefix
            .iter()
            .try_fold(0, |at, code| self.nodes[at].children.get(code).copied())
    }

    /// Codes that extend `prefix` towards some assigned SID, ascending.
    /// Empty for full-length or unknown prefixes.
    pub fn valid_continuations(&self, prefix: &[u32]) -> Vec<u32> {
        match self.walk(prefix) {
            Some(at) if prefix.len() < SID_LEN => self.nodes[at].children.keys().copied().collect(),
            _ => Vec::new(),
        }
    }

    pub fn contains_prefix(&self, prefix: &[u32]) -> bool {
        self.walk(prefix).is_some()
    }

    /// Item at the leaf reached by a full SID.
    pub fn leaf(&self, sid: &SemanticId) -> Option<ItemId> {
        self.walk(sid.codes()).and_then(|at| self.nodes[at].item)
    }

    /// Every root-to-leaf path with its item, in lexicographic order.
    pub fn paths(&self) -> Vec<(SemanticId, ItemId)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((at, prefix)) = stack.pop() {
            if prefix.len() == SID_LEN {
                if let Some(item) = self.nodes[at].item {
                    out.push((SemanticId(prefix.clone().try_into().unwrap()), item));
                }
                continue;
            }
            for (&code, &child) in self.nodes[at].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(code);
                stack.push((child, p));
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

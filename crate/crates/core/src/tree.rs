//! The class hierarchy: a uniform-depth rooted tree whose leaves are the
//! finest classes. Classification happens at every level, and the tree's
//! edge metric between leaves is the catastrophic-distance primitive.
//!
//! File format (UTF-8, line-oriented): comment lines start with `#`; each
//! node line is `level<TAB>name<TAB>parent-name`, the root uses `-` as its
//! parent, and nodes must appear after their parent. Fine-class indices are
//! assigned by order of leaf appearance. A `#!dataset-coarse-level <n>`
//! directive (still a comment line) declares that the dataset's stored
//! coarse labels equal level-n class indices, enabling loader cross-checks.

use std::path::Path;

use crate::error::{Error, Result, TreeErrorKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: usize,
    pub name: String,
    pub parent: Option<usize>,
    pub level: usize,
    /// Class index among the nodes of this level, by order of appearance.
    pub index_in_level: usize,
}

/// Per-sample class indices, one per level. Element `l` is the index of the
/// sample's ancestor at level `l + 1`; the last element is the fine class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLabels {
    pub per_level: Vec<usize>,
}

impl LevelLabels {
    pub fn fine(&self) -> usize {
        *self.per_level.last().expect("at least one level")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTree {
    nodes: Vec<TreeNode>,
    levels: usize,
    /// Fine-class index -> node id. Order of leaf appearance in the file.
    leaf_ids: Vec<usize>,
    /// Nodes per level, in order of appearance.
    level_nodes: Vec<Vec<usize>>,
    coarse_level: Option<usize>,
}

impl LabelTree {
    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut node_lines: Vec<usize> = Vec::new();
        let mut coarse_level: Option<usize> = None;
        let mut coarse_line = 0usize;
        // (level, name) -> node id; names are unique within a level.
        let mut by_level_name: std::collections::HashMap<(usize, String), usize> =
            std::collections::HashMap::new();
        let mut last_line = 0usize;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            last_line = lineno;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#!") {
                let mut parts = rest.split_whitespace();
                match parts.next() {
                    Some("dataset-coarse-level") => {
                        let arg = parts.next().ok_or(Error::Tree {
                            line: lineno,
                            kind: TreeErrorKind::BadDirective(
                                "dataset-coarse-level needs a level argument".into(),
                            ),
                        })?;
                        let lvl: usize = arg.parse().map_err(|_| Error::Tree {
                            line: lineno,
                            kind: TreeErrorKind::BadDirective(format!(
                                "dataset-coarse-level argument '{arg}' is not a number"
                            )),
                        })?;
                        coarse_level = Some(lvl);
                        coarse_line = lineno;
                    }
                    other => {
                        return Err(Error::Tree {
                            line: lineno,
                            kind: TreeErrorKind::BadDirective(format!(
                                "unknown directive '{}'",
                                other.unwrap_or("")
                            )),
                        })
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }

            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Tree {
                    line: lineno,
                    kind: TreeErrorKind::MalformedLine(format!(
                        "expected 'level<TAB>name<TAB>parent', got {} field(s)",
                        fields.len()
                    )),
                });
            }
            let level: usize = fields[0].trim().parse().map_err(|_| Error::Tree {
                line: lineno,
                kind: TreeErrorKind::MalformedLine(format!(
                    "level '{}' is not a number",
                    fields[0]
                )),
            })?;
            let name = fields[1].trim();
            let parent_name = fields[2].trim();
            if name.is_empty() {
                return Err(Error::Tree {
                    line: lineno,
                    kind: TreeErrorKind::MalformedLine("empty node name".into()),
                });
            }

            let is_root_line = parent_name == "-";
            if nodes.is_empty() {
                if !is_root_line || level != 0 {
                    return Err(Error::Tree {
                        line: lineno,
                        kind: TreeErrorKind::RootExpected(format!("'{line}'")),
                    });
                }
            } else if is_root_line || level == 0 {
                return Err(Error::Tree {
                    line: lineno,
                    kind: TreeErrorKind::MultipleRoots(format!("'{name}' at level {level}")),
                });
            }

            if by_level_name.contains_key(&(level, name.to_string())) {
                return Err(Error::Tree {
                    line: lineno,
                    kind: TreeErrorKind::DuplicateNode(format!("'{name}' at level {level}")),
                });
            }

            let parent = if is_root_line {
                None
            } else {
                let pid = by_level_name
                    .get(&(level - 1, parent_name.to_string()))
                    .copied()
                    .ok_or(Error::Tree {
                        line: lineno,
                        kind: TreeErrorKind::DanglingParent(format!(
                            "'{parent_name}' for node '{name}' (looked at level {})",
                            level - 1
                        )),
                    })?;
                Some(pid)
            };

            let id = nodes.len();
            by_level_name.insert((level, name.to_string()), id);
            nodes.push(TreeNode {
                id,
                name: name.to_string(),
                parent,
                level,
                index_in_level: 0, // assigned below
            });
            node_lines.push(lineno);
        }

        if nodes.is_empty() {
            return Err(Error::Tree {
                line: last_line,
                kind: TreeErrorKind::EmptyDocument,
            });
        }
        if nodes.len() == 1 {
            return Err(Error::Tree {
                line: node_lines[0],
                kind: TreeErrorKind::NoClasses,
            });
        }

        let levels = nodes.iter().map(|n| n.level).max().unwrap();
        let mut level_nodes: Vec<Vec<usize>> = vec![Vec::new(); levels + 1];
        for node in &mut nodes {
            node.index_in_level = level_nodes[node.level].len();
            level_nodes[node.level].push(node.id);
        }

        // Leaves are the childless nodes; uniform depth demands they all sit
        // at the deepest level.
        let mut has_children = vec![false; nodes.len()];
        for node in &nodes {
            if let Some(p) = node.parent {
                has_children[p] = true;
            }
        }
        let mut leaf_ids = Vec::new();
        for node in &nodes {
            if !has_children[node.id] {
                if node.level != levels {
                    return Err(Error::Tree {
                        line: node_lines[node.id],
                        kind: TreeErrorKind::NonUniformDepth(format!(
                            "leaf '{}' is at level {} while the deepest level is {}",
                            node.name, node.level, levels
                        )),
                    });
                }
                leaf_ids.push(node.id);
            }
        }

        if let Some(cl) = coarse_level {
            if cl == 0 || cl > levels {
                return Err(Error::Tree {
                    line: coarse_line,
                    kind: TreeErrorKind::BadDirective(format!(
                        "dataset-coarse-level {cl} outside 1..={levels}"
                    )),
                });
            }
        }

        Ok(LabelTree {
            nodes,
            levels,
            leaf_ids,
            level_nodes,
            coarse_level,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        LabelTree::parse(&text)
    }

    /// Emit the tree in the same line format `parse` reads.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if let Some(cl) = self.coarse_level {
            out.push_str(&format!("#!dataset-coarse-level {cl}\n"));
        }
        for node in &self.nodes {
            let parent = match node.parent {
                None => "-",
                Some(p) => self.nodes[p].name.as_str(),
            };
            out.push_str(&format!("{}\t{}\t{}\n", node.level, node.name, parent));
        }
        out
    }

    /// Number of class levels L (the root's level 0 does not count).
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of fine classes C.
    pub fn leaf_count(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn leaf_id(&self, fine: usize) -> Result<usize> {
        self.leaf_ids
            .get(fine)
            .copied()
            .ok_or(Error::LeafRange {
                index: fine,
                limit: self.leaf_ids.len(),
            })
    }

    pub fn leaf_name(&self, fine: usize) -> Result<&str> {
        Ok(self.nodes[self.leaf_id(fine)?].name.as_str())
    }

    /// Names of the classes at `level` (1-based), in class-index order.
    pub fn level_class_names(&self, level: usize) -> Vec<&str> {
        self.level_nodes[level]
            .iter()
            .map(|&id| self.nodes[id].name.as_str())
            .collect()
    }

    /// Class count per level, index 0 = level 1.
    pub fn level_class_counts(&self) -> Vec<usize> {
        (1..=self.levels)
            .map(|l| self.level_nodes[l].len())
            .collect()
    }

    /// The declared dataset coarse-label level, if any.
    pub fn coarse_level(&self) -> Option<usize> {
        self.coarse_level
    }

    /// Ancestor class indices of a leaf, one per level; last = fine class.
    pub fn labels_for_leaf(&self, fine: usize) -> Result<LevelLabels> {
        let mut id = self.leaf_id(fine)?;
        let mut per_level = vec![0usize; self.levels];
        loop {
            let node = &self.nodes[id];
            if node.level == 0 {
                break;
            }
            per_level[node.level - 1] = node.index_in_level;
            id = node.parent.expect("non-root has a parent");
        }
        Ok(LevelLabels { per_level })
    }

    /// Edges on the unique tree path between two leaves: 2 * (L - lca level).
    pub fn leaf_distance(&self, a: usize, b: usize) -> Result<usize> {
        let ida = self.leaf_id(a)?;
        let idb = self.leaf_id(b)?;
        if ida == idb {
            return Ok(0);
        }
        let mut x = ida;
        let mut y = idb;
        while x != y {
            x = self.nodes[x].parent.expect("walk reaches the root");
            y = self.nodes[y].parent.expect("walk reaches the root");
        }
        let lca_level = self.nodes[x].level;
        Ok(2 * (self.levels - lca_level))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FRUIT_TREE: &str = "0\troot\t-\n\
1\tfruit\troot\n\
1\tanimal\troot\n\
2\tapple\tfruit\n\
2\torange\tfruit\n\
2\tzebra\tanimal\n";

    #[test]
    fn parses_smallest_meaningful_hierarchy() {
        let tree = LabelTree::parse(FRUIT_TREE).unwrap();
        assert_eq!(tree.levels(), 2);
        assert_eq!(tree.leaf_count(), 3);
        assert_eq!(tree.level_class_counts(), vec![2, 3]);
    }

    #[test]
    fn labels_for_leaf_walks_ancestry() {
        let tree = LabelTree::parse(FRUIT_TREE).unwrap();
        // apple is leaf 0 under fruit (level-1 index 0)
        assert_eq!(tree.labels_for_leaf(0).unwrap().per_level, vec![0, 0]);
        // zebra is leaf 2 under animal (level-1 index 1)
        assert_eq!(tree.labels_for_leaf(2).unwrap().per_level, vec![1, 2]);
        assert!(tree.labels_for_leaf(3).is_err());
    }

    #[test]
    fn single_level_tree_is_a_flat_classifier() {
        let mut text = String::from("0\troot\t-\n");
        for i in 0..10 {
            text.push_str(&format!("1\tc{i}\troot\n"));
        }
        let tree = LabelTree::parse(&text).unwrap();
        assert_eq!(tree.levels(), 1);
        assert_eq!(tree.level_class_counts(), vec![10]);
        for i in 0..10 {
            assert_eq!(tree.labels_for_leaf(i).unwrap().per_level, vec![i]);
        }
    }

    #[test]
    fn leaf_distance_identity_siblings_cousins() {
        let tree = LabelTree::parse(FRUIT_TREE).unwrap();
        assert_eq!(tree.leaf_distance(1, 1).unwrap(), 0);
        // apple/orange share the fruit parent
        assert_eq!(tree.leaf_distance(0, 1).unwrap(), 2);
        // apple/zebra only share the root
        assert_eq!(tree.leaf_distance(0, 2).unwrap(), 4);
        assert_eq!(tree.leaf_distance(2, 0).unwrap(), 4);
        assert!(tree.leaf_distance(0, 9).is_err());
    }

    #[test]
    fn rejects_non_uniform_depth() {
        let text = "0\troot\t-\n1\ta\troot\n1\tb\troot\n2\tx\ta\n";
        let err = LabelTree::parse(text).unwrap_err();
        match err {
            Error::Tree { line, kind: TreeErrorKind::NonUniformDepth(msg) } => {
                assert_eq!(line, 3);
                assert!(msg.contains('b'), "diagnostic names the leaf: {msg}");
            }
            other => panic!("expected NonUniformDepth, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_danglers_and_empty() {
        let dup = "0\troot\t-\n1\ta\troot\n1\ta\troot\n";
        assert!(matches!(
            LabelTree::parse(dup),
            Err(Error::Tree { line: 3, kind: TreeErrorKind::DuplicateNode(_) })
        ));

        let dangling = "0\troot\t-\n1\ta\tnope\n";
        assert!(matches!(
            LabelTree::parse(dangling),
            Err(Error::Tree { line: 2, kind: TreeErrorKind::DanglingParent(_) })
        ));

        assert!(matches!(
            LabelTree::parse("# only a comment\n"),
            Err(Error::Tree { kind: TreeErrorKind::EmptyDocument, .. })
        ));

        assert!(matches!(
            LabelTree::parse("0\troot\t-\n"),
            Err(Error::Tree { kind: TreeErrorKind::NoClasses, .. })
        ));
    }

    #[test]
    fn same_name_on_different_levels_is_fine() {
        let text = "0\troot\t-\n1\tx\troot\n2\tx\tx\n2\ty\tx\n";
        let tree = LabelTree::parse(text).unwrap();
        assert_eq!(tree.level_class_counts(), vec![1, 2]);
    }

    #[test]
    fn coarse_level_directive_round_trips() {
        let text = "#!dataset-coarse-level 1\n0\troot\t-\n1\ta\troot\n2\tx\ta\n2\ty\ta\n";
        let tree = LabelTree::parse(text).unwrap();
        assert_eq!(tree.coarse_level(), Some(1));
        let again = LabelTree::parse(&tree.serialize()).unwrap();
        assert_eq!(tree, again);
    }

    #[test]
    fn rejects_out_of_range_coarse_directive() {
        let text = "#!dataset-coarse-level 3\n0\troot\t-\n1\ta\troot\n2\tx\ta\n";
        assert!(matches!(
            LabelTree::parse(text),
            Err(Error::Tree { kind: TreeErrorKind::BadDirective(_), .. })
        ));
    }
}

//! Owned syntax tree distilled from the tree-sitter parse: comments and
//! docstrings removed, plain string literals collapsed into single tokens,
//! and type annotations detached from the tree.

use std::ops::Range;

use tree_sitter::{Node as TsNode, Parser};

use super::ExtractError;

#[derive(Debug, Clone)]
pub struct Annotation {
    pub text: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Syn {
    pub kind: &'static str,
    pub field: Option<&'static str>,
    pub range: Range<usize>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub leaf: bool,
    /// Annotation removed from this node (parameter, return or variable).
    pub annotation: Option<Annotation>,
}

#[derive(Debug)]
pub struct SynTree<'s> {
    pub src: &'s str,
    pub nodes: Vec<Syn>,
}

impl<'s> SynTree<'s> {
    pub const ROOT: usize = 0;

    pub fn parse(src: &'s str) -> Result<Self, ExtractError> {
        let mut parser = Parser::new();
        parser
            .set_language(&tree_sitter_python::LANGUAGE.into())
            .map_err(|e| ExtractError::Parse(e.to_string()))?;
        let tree = parser
            .parse(src, None)
            .ok_or_else(|| ExtractError::Parse("parser returned no tree".into()))?;
        let root = tree.root_node();
        if root.has_error() {
            let at = first_error(root).map(|n| n.start_position());
            return Err(ExtractError::Parse(match at {
                Some(p) => format!("syntax error at line {}, column {}", p.row + 1, p.column + 1),
                None => "syntax error".into(),
            }));
        }
        let mut t = SynTree {
            src,
            nodes: Vec::new(),
        };
        t.convert(root, None, None);
        Ok(t)
    }

    pub fn text(&self, i: usize) -> &'s str {
        &self.src[self.nodes[i].range.clone()]
    }

    pub fn kind(&self, i: usize) -> &'static str {
        self.nodes[i].kind
    }

    pub fn child_by_field(&self, i: usize, field: &str) -> Option<usize> {
        self.nodes[i]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].field == Some(field))
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.nodes[i].children
    }

    /// First child with the given kind.
    pub fn child_of_kind(&self, i: usize, kind: &str) -> Option<usize> {
        self.nodes[i]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].kind == kind)
    }

    fn push(&mut self, syn: Syn) -> usize {
        self.nodes.push(syn);
        self.nodes.len() - 1
    }

    fn convert(&mut self, n: TsNode, parent: Option<usize>, field: Option<&'static str>) -> usize {
        let collapse = n.kind() == "string" && !has_child_kind(n, "interpolation");
        let leaf = (n.child_count() == 0 && parent.is_some()) || collapse;
        let idx = self.push(Syn {
            kind: n.kind(),
            field,
            range: n.byte_range(),
            children: Vec::new(),
            parent,
            leaf,
            annotation: None,
        });
        if leaf {
            return idx;
        }

        let mut cursor = n.walk();
        let kids: Vec<(TsNode, Option<&'static str>)> = n
            .children(&mut cursor)
            .enumerate()
            .map(|(i, c)| (c, n.field_name_for_child(i as u32)))
            .collect();

        // Detach type annotations together with their `:` / `->` marker.
        let ann_field = match n.kind() {
            "typed_parameter" | "typed_default_parameter" | "assignment" => Some("type"),
            "function_definition" => Some("return_type"),
            _ => None,
        };
        let mut skip = vec![false; kids.len()];
        if let Some(af) = ann_field {
            if let Some(pos) = kids.iter().position(|(_, f)| *f == Some(af)) {
                let ty = kids[pos].0;
                self.nodes[idx].annotation = Some(Annotation {
                    text: self.src[ty.byte_range()].to_string(),
                    range: ty.byte_range(),
                });
                skip[pos] = true;
                if pos > 0 && matches!(kids[pos - 1].0.kind(), ":" | "->") {
                    skip[pos - 1] = true;
                }
            }
        }

        let is_body = matches!(n.kind(), "module" | "block");
        let mut first_stmt = true;
        for (i, (c, f)) in kids.into_iter().enumerate() {
            if skip[i] || c.kind() == "comment" || c.is_extra() {
                continue;
            }
            if c.byte_range().is_empty() {
                continue;
            }
            if is_body && first_stmt && is_docstring(c) {
                first_stmt = false;
                continue;
            }
            first_stmt = false;
            let ci = self.convert(c, Some(idx), f);
            self.nodes[idx].children.push(ci);
        }
        idx
    }
}

fn has_child_kind(n: TsNode, kind: &str) -> bool {
    let mut c = n.walk();
    let found = n.children(&mut c).any(|ch| ch.kind() == kind);
    found
}

fn is_docstring(stmt: TsNode) -> bool {
    if stmt.kind() != "expression_statement" || stmt.named_child_count() != 1 {
        return false;
    }
    matches!(
        stmt.named_child(0).map(|c| c.kind()),
        Some("string" | "concatenated_string")
    )
}

fn first_error(n: TsNode) -> Option<TsNode> {
    if n.is_error() || n.is_missing() {
        return Some(n);
    }
    let mut c = n.walk();
    let kids: Vec<TsNode> = n.children(&mut c).collect();
    kids.into_iter().filter(|k| k.has_error()).find_map(first_error)
}

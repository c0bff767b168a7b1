use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use super::flow;
use super::graph::{CodeGraph, EdgeLabel, Node, NodeCategory, SymbolInfo, SymbolKind};
use super::subtoken::subtokenize;
use super::syntax::SynTree;
use super::{ExtractError, ExtractOptions};
use crate::typeexpr::{normalize_type, parse_type, TypeExpr, DEFAULT_MAX_DEPTH};

const MAX_LABEL_CHARS: usize = 64;

/// Where an annotation for a symbol can be written back into the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSite {
    /// Existing annotation to replace, if any.
    pub replace: Option<Range<usize>>,
    /// Insertion offset used when there is no annotation yet.
    pub insert_at: usize,
    /// Text placed before the type on insertion (`": "` or `" -> "`).
    pub prefix: &'static str,
}

impl AnnotationSite {
    /// Returns `source` with `ty` written at this site.
    pub fn apply(&self, source: &str, ty: &str) -> String {
        match &self.replace {
            Some(r) => format!("{}{}{}", &source[..r.start], ty, &source[r.end..]),
            None => format!(
                "{}{}{}{}",
                &source[..self.insert_at],
                self.prefix,
                ty,
                &source[self.insert_at..]
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub graph: CodeGraph,
    /// One entry per symbol, parallel to `graph.symbols`.
    pub sites: Vec<Option<AnnotationSite>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScopeKind {
    Module,
    Function,
    Lambda,
    Class,
    Comprehension,
}

#[derive(Debug)]
struct Scope {
    kind: ScopeKind,
    parent: Option<usize>,
    bound: BTreeSet<String>,
    params: BTreeSet<String>,
    defs: BTreeSet<String>,
    globals: BTreeSet<String>,
    nonlocals: BTreeSet<String>,
    /// For methods: the enclosing class scope and the receiver name.
    method_of: Option<(usize, String)>,
    self_attrs: BTreeSet<String>,
}

impl Scope {
    fn new(kind: ScopeKind, parent: Option<usize>) -> Self {
        Scope {
            kind,
            parent,
            bound: BTreeSet::new(),
            params: BTreeSet::new(),
            defs: BTreeSet::new(),
            globals: BTreeSet::new(),
            nonlocals: BTreeSet::new(),
            method_of: None,
            self_attrs: BTreeSet::new(),
        }
    }
}

type SymKey = (usize, String);

struct SymRec {
    key: SymKey,
    name: String,
    kind: SymbolKind,
    annotation: Option<TypeExpr>,
    site: Option<AnnotationSite>,
}

const COMPREHENSIONS: &[&str] = &[
    "list_comprehension",
    "set_comprehension",
    "dictionary_comprehension",
    "generator_expression",
];

struct Extractor<'t, 's> {
    t: &'t SynTree<'s>,
    scopes: Vec<Scope>,
    scope_of: BTreeMap<usize, usize>,
    /// import-bound identifier nodes
    import_binders: BTreeSet<usize>,
    /// parameter identifiers of `def`s
    def_param_binders: BTreeSet<usize>,
    symbols: Vec<SymRec>,
    sym_index: BTreeMap<SymKey, usize>,
    /// syntax node -> symbol for every bound token or attribute node
    occ: BTreeMap<usize, usize>,
    /// function_definition node -> its return symbol
    def_symbol: BTreeMap<usize, usize>,
}

impl<'t, 's> Extractor<'t, 's> {
    fn new_scope(&mut self, kind: ScopeKind, parent: usize, node: usize) -> usize {
        self.scopes.push(Scope::new(kind, Some(parent)));
        let id = self.scopes.len() - 1;
        self.scope_of.insert(node, id);
        id
    }

    fn text(&self, i: usize) -> &'s str {
        self.t.text(i)
    }

    // ---- declaration pass ----

    fn declare(&mut self, i: usize, scope: usize) {
        let t = self.t;
        match t.kind(i) {
            "function_definition" => {
                if let Some(name) = t.child_by_field(i, "name") {
                    let n = self.text(name).to_string();
                    self.scopes[scope].bound.insert(n.clone());
                    self.scopes[scope].defs.insert(n);
                }
                let inner = self.new_scope(ScopeKind::Function, scope, i);
                if let Some(params) = t.child_by_field(i, "parameters") {
                    self.declare_params(params, scope, inner, true);
                    if self.scopes[scope].kind == ScopeKind::Class {
                        let first = t
                            .children(params)
                            .iter()
                            .find_map(|&c| self.param_name(c))
                            .map(|n| self.text(n).to_string());
                        if let Some(recv) = first {
                            self.scopes[inner].method_of = Some((scope, recv));
                        }
                    }
                }
                if let Some(body) = t.child_by_field(i, "body") {
                    self.declare(body, inner);
                }
            }
            "lambda" if !t.nodes[i].leaf => {
                let inner = self.new_scope(ScopeKind::Lambda, scope, i);
                if let Some(params) = t.child_by_field(i, "parameters") {
                    self.declare_params(params, scope, inner, false);
                }
                if let Some(body) = t.child_by_field(i, "body") {
                    self.declare(body, inner);
                }
            }
            "class_definition" => {
                if let Some(name) = t.child_by_field(i, "name") {
                    let n = self.text(name).to_string();
                    self.scopes[scope].bound.insert(n);
                }
                if let Some(sup) = t.child_by_field(i, "superclasses") {
                    self.declare(sup, scope);
                }
                let inner = self.new_scope(ScopeKind::Class, scope, i);
                if let Some(body) = t.child_by_field(i, "body") {
                    self.declare(body, inner);
                }
            }
            k if COMPREHENSIONS.contains(&k) => {
                let inner = self.new_scope(ScopeKind::Comprehension, scope, i);
                for &c in t.children(i) {
                    if t.kind(c) == "for_in_clause" {
                        if let Some(left) = t.child_by_field(c, "left") {
                            self.bind_targets(left, inner);
                        }
                    }
                    self.declare(c, inner);
                }
            }
            "assignment" | "augmented_assignment" => {
                if let Some(left) = t.child_by_field(i, "left") {
                    self.bind_targets(left, scope);
                }
                for &c in t.children(i) {
                    self.declare(c, scope);
                }
            }
            "named_expression" => {
                if let Some(name) = t.child_by_field(i, "name") {
                    let mut s = scope;
                    while self.scopes[s].kind == ScopeKind::Comprehension {
                        s = self.scopes[s].parent.unwrap_or(0);
                    }
                    let n = self.text(name).to_string();
                    self.scopes[s].bound.insert(n);
                }
                for &c in t.children(i) {
                    self.declare(c, scope);
                }
            }
            "for_statement" => {
                if let Some(left) = t.child_by_field(i, "left") {
                    self.bind_targets(left, scope);
                }
                for &c in t.children(i) {
                    self.declare(c, scope);
                }
            }
            "as_pattern" => {
                if let Some(alias) = t.child_by_field(i, "alias") {
                    self.bind_targets(alias, scope);
                }
                for &c in t.children(i) {
                    self.declare(c, scope);
                }
            }
            "import_statement" | "import_from_statement" => {
                for &c in t.children(i) {
                    if t.nodes[c].field != Some("name") {
                        continue;
                    }
                    let binder = match t.kind(c) {
                        "aliased_import" => t.child_by_field(c, "alias"),
                        "dotted_name" => {
                            if t.kind(i) == "import_statement" {
                                t.children(c).first().copied()
                            } else {
                                t.children(c).last().copied()
                            }
                        }
                        _ => None,
                    };
                    if let Some(b) = binder {
                        let n = self.text(b).to_string();
                        self.scopes[scope].bound.insert(n);
                        self.import_binders.insert(b);
                    }
                }
            }
            "global_statement" | "nonlocal_statement" => {
                let global = t.kind(i) == "global_statement";
                for &c in t.children(i) {
                    if t.kind(c) == "identifier" {
                        let n = self.text(c).to_string();
                        if global {
                            self.scopes[scope].globals.insert(n.clone());
                            self.scopes[0].bound.insert(n);
                        } else {
                            self.scopes[scope].nonlocals.insert(n);
                        }
                    }
                }
            }
            _ => {
                for &c in t.children(i) {
                    self.declare(c, scope);
                }
            }
        }
    }

    /// The identifier a parameter node binds.
    fn param_name(&self, p: usize) -> Option<usize> {
        let t = self.t;
        match t.kind(p) {
            "identifier" => Some(p),
            "default_parameter" | "typed_default_parameter" => t.child_by_field(p, "name"),
            "typed_parameter" => t.children(p).iter().find_map(|&c| match t.kind(c) {
                "identifier" => Some(c),
                "list_splat_pattern" | "dictionary_splat_pattern" => {
                    t.child_of_kind(c, "identifier")
                }
                _ => None,
            }),
            "list_splat_pattern" | "dictionary_splat_pattern" => t.child_of_kind(p, "identifier"),
            _ => None,
        }
    }

    fn declare_params(&mut self, params: usize, outer: usize, inner: usize, is_def: bool) {
        let t = self.t;
        for &p in t.children(params) {
            if let Some(id) = self.param_name(p) {
                let n = self.text(id).to_string();
                self.scopes[inner].bound.insert(n.clone());
                self.scopes[inner].params.insert(n);
                if is_def {
                    self.def_param_binders.insert(id);
                }
            }
            if let Some(v) = t.child_by_field(p, "value") {
                self.declare(v, outer);
            }
        }
    }

    fn bind_targets(&mut self, i: usize, scope: usize) {
        let t = self.t;
        match t.kind(i) {
            "identifier" => {
                let n = self.text(i).to_string();
                self.scopes[scope].bound.insert(n);
            }
            "attribute" => {
                let (Some(obj), Some(attr)) =
                    (t.child_by_field(i, "object"), t.child_by_field(i, "attribute"))
                else {
                    return;
                };
                if t.kind(obj) != "identifier" {
                    return;
                }
                // find the method scope this receiver belongs to
                let recv = self.text(obj);
                let mut s = Some(scope);
                while let Some(cur) = s {
                    if let Some((class, name)) = &self.scopes[cur].method_of {
                        if name == recv {
                            let class = *class;
                            let a = self.text(attr).to_string();
                            self.scopes[class].self_attrs.insert(a);
                        }
                        break;
                    }
                    if self.scopes[cur].kind == ScopeKind::Class {
                        break;
                    }
                    s = self.scopes[cur].parent;
                }
            }
            "pattern_list" | "tuple_pattern" | "list_pattern" | "tuple" | "list"
            | "parenthesized_expression" | "list_splat_pattern" | "list_splat"
            | "as_pattern_target" => {
                for &c in t.children(i) {
                    self.bind_targets(c, scope);
                }
            }
            _ => {}
        }
    }

    // ---- resolution pass ----

    fn symbol(&mut self, key: SymKey, display: &str) -> usize {
        if let Some(&s) = self.sym_index.get(&key) {
            return s;
        }
        let sc = &self.scopes[key.0];
        let kind = if sc.params.contains(&key.1) {
            SymbolKind::Parameter
        } else if sc.defs.contains(&key.1) {
            SymbolKind::Return
        } else {
            SymbolKind::Variable
        };
        self.symbols.push(SymRec {
            key: key.clone(),
            name: display.to_string(),
            kind,
            annotation: None,
            site: None,
        });
        let id = self.symbols.len() - 1;
        self.sym_index.insert(key, id);
        id
    }

    fn resolve_key(&self, scope: usize, name: &str) -> SymKey {
        let sc = &self.scopes[scope];
        if sc.globals.contains(name) {
            return (0, name.to_string());
        }
        if sc.nonlocals.contains(name) {
            let mut p = sc.parent;
            while let Some(s) = p {
                let ps = &self.scopes[s];
                if matches!(ps.kind, ScopeKind::Function | ScopeKind::Lambda)
                    && ps.bound.contains(name)
                {
                    return (s, name.to_string());
                }
                p = ps.parent;
            }
            return (0, name.to_string());
        }
        if sc.bound.contains(name) {
            return (scope, name.to_string());
        }
        let mut p = sc.parent;
        while let Some(s) = p {
            let ps = &self.scopes[s];
            if ps.kind != ScopeKind::Class && ps.bound.contains(name) {
                return (s, name.to_string());
            }
            p = ps.parent;
        }
        (0, name.to_string())
    }

    fn occur(&mut self, i: usize, scope: usize) -> usize {
        let name = self.text(i).to_string();
        let key = self.resolve_key(scope, &name);
        let s = self.symbol(key, &name);
        self.occ.insert(i, s);
        s
    }

    fn annotate(&mut self, sym: usize, ann: Option<&super::syntax::Annotation>) {
        let Some(ann) = ann else { return };
        if self.symbols[sym].annotation.is_some() {
            return;
        }
        if let Ok(parsed) = parse_type(&ann.text) {
            let norm = normalize_type(&parsed, DEFAULT_MAX_DEPTH);
            if !norm.is_top() && !norm.is_none() {
                self.symbols[sym].annotation = Some(norm);
            }
        }
    }

    fn set_site(&mut self, sym: usize, site: AnnotationSite) {
        if self.symbols[sym].site.is_none() {
            self.symbols[sym].site = Some(site);
        }
    }

    fn resolve(&mut self, i: usize, scope: usize) {
        let t = self.t;
        match t.kind(i) {
            "identifier" => {
                self.occur(i, scope);
            }
            "function_definition" => {
                let inner = self.scope_of[&i];
                if let Some(name) = t.child_by_field(i, "name") {
                    let s = self.occur(name, scope);
                    self.def_symbol.insert(i, s);
                    let ann = t.nodes[i].annotation.clone();
                    let insert_at = t
                        .child_by_field(i, "parameters")
                        .map(|p| t.nodes[p].range.end)
                        .unwrap_or(t.nodes[name].range.end);
                    self.set_site(
                        s,
                        AnnotationSite {
                            replace: ann.as_ref().map(|a| a.range.clone()),
                            insert_at,
                            prefix: " -> ",
                        },
                    );
                    self.annotate(s, ann.as_ref());
                }
                for &c in t.children(i) {
                    match t.nodes[c].field {
                        Some("name") => {}
                        Some("parameters") => self.resolve_params(c, scope, inner),
                        Some("body") => self.resolve(c, inner),
                        _ => self.resolve(c, scope),
                    }
                }
            }
            "lambda" if !t.nodes[i].leaf => {
                let inner = self.scope_of[&i];
                for &c in t.children(i) {
                    match t.nodes[c].field {
                        Some("parameters") => self.resolve_params(c, scope, inner),
                        _ => self.resolve(c, inner),
                    }
                }
            }
            "class_definition" => {
                let inner = self.scope_of[&i];
                for &c in t.children(i) {
                    match t.nodes[c].field {
                        Some("body") => self.resolve(c, inner),
                        _ => self.resolve(c, scope),
                    }
                }
            }
            k if COMPREHENSIONS.contains(&k) => {
                let inner = self.scope_of[&i];
                for &c in t.children(i) {
                    self.resolve(c, inner);
                }
            }
            "attribute" => {
                let obj = t.child_by_field(i, "object");
                if let Some(o) = obj {
                    self.resolve(o, scope);
                }
                if let (Some(o), Some(attr)) = (obj, t.child_by_field(i, "attribute")) {
                    if let Some(s) = self.member_symbol(o, attr) {
                        self.occ.insert(i, s);
                    }
                }
            }
            "keyword_argument" => {
                if let Some(v) = t.child_by_field(i, "value") {
                    self.resolve(v, scope);
                }
            }
            "import_statement" | "import_from_statement" => {
                let binders: Vec<usize> = self
                    .import_binders
                    .range(t.nodes[i].range.start..)
                    .copied()
                    .filter(|&b| is_descendant(t, b, i))
                    .collect();
                for b in binders {
                    self.occur(b, scope);
                }
            }
            "dotted_name" => {
                if let Some(&first) = t.children(i).first() {
                    self.occur(first, scope);
                }
            }
            "assignment" => {
                for &c in t.children(i) {
                    self.resolve(c, scope);
                }
                let ann = t.nodes[i].annotation.clone();
                if let Some(left) = t.child_by_field(i, "left") {
                    if let Some(&s) = self.occ.get(&left) {
                        self.annotate(s, ann.as_ref());
                        self.set_site(
                            s,
                            AnnotationSite {
                                replace: ann.as_ref().map(|a| a.range.clone()),
                                insert_at: t.nodes[left].range.end,
                                prefix: ": ",
                            },
                        );
                    }
                }
            }
            _ => {
                for &c in t.children(i) {
                    self.resolve(c, scope);
                }
            }
        }
    }

    fn resolve_params(&mut self, params: usize, outer: usize, inner: usize) {
        let t = self.t;
        for &p in t.children(params) {
            if let Some(id) = self.param_name(p) {
                let s = self.occur(id, inner);
                let ann = t.nodes[p].annotation.clone();
                self.annotate(s, ann.as_ref());
                self.set_site(
                    s,
                    AnnotationSite {
                        replace: ann.as_ref().map(|a| a.range.clone()),
                        insert_at: t.nodes[id].range.end,
                        prefix: ": ",
                    },
                );
            }
            if let Some(v) = t.child_by_field(p, "value") {
                self.resolve(v, outer);
            }
        }
    }

    /// `recv.attr` inside a method where `recv` is the method's receiver.
    fn member_symbol(&mut self, obj: usize, attr: usize) -> Option<usize> {
        if self.t.kind(obj) != "identifier" {
            return None;
        }
        let recv_sym = *self.occ.get(&obj)?;
        let (scope, name) = self.symbols[recv_sym].key.clone();
        let (class, recv) = self.scopes[scope].method_of.clone()?;
        if name != recv {
            return None;
        }
        let a = self.text(attr).to_string();
        if self.scopes[class].bound.contains(&a) {
            return Some(self.symbol((class, a.clone()), &a));
        }
        if self.scopes[class].self_attrs.contains(&a) {
            let display = format!("{recv}.{a}");
            return Some(self.symbol((class, format!("self.{a}")), &display));
        }
        None
    }
}

fn is_descendant(t: &SynTree, mut n: usize, ancestor: usize) -> bool {
    while let Some(p) = t.nodes[n].parent {
        if p == ancestor {
            return true;
        }
        n = p;
    }
    false
}

fn truncate_label(s: &str) -> String {
    match s.char_indices().nth(MAX_LABEL_CHARS) {
        Some((cut, _)) => s[..cut].to_string(),
        None => s.to_string(),
    }
}

/// Builds the code graph of one Python source file.
pub fn extract(file_id: &str, source: &str, options: &ExtractOptions) -> Result<Extraction, ExtractError> {
    let tree = SynTree::parse(source)?;
    let mut ex = Extractor {
        t: &tree,
        scopes: vec![Scope::new(ScopeKind::Module, None)],
        scope_of: BTreeMap::new(),
        import_binders: BTreeSet::new(),
        def_param_binders: BTreeSet::new(),
        symbols: Vec::new(),
        sym_index: BTreeMap::new(),
        occ: BTreeMap::new(),
        def_symbol: BTreeMap::new(),
    };
    ex.declare(SynTree::ROOT, 0);
    ex.resolve(SynTree::ROOT, 0);

    // Syntax nodes are stored in pre-order, so their indices are graph indices.
    let mut nodes: Vec<Node> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.leaf {
                Node::new(NodeCategory::Token, truncate_label(tree.text(i)))
            } else {
                Node::new(NodeCategory::Nonterminal, s.kind)
            }
        })
        .collect();

    let mut edges: BTreeMap<EdgeLabel, Vec<(usize, usize)>> = BTreeMap::new();
    let mut add = |label: EdgeLabel, s: usize, d: usize| {
        if !options.disabled_edges.contains(&label) {
            edges.entry(label).or_default().push((s, d));
        }
    };

    let mut prev_token: Option<usize> = None;
    let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
    let mut vocab_order: Vec<String> = Vec::new();
    let mut subtoken_edges: Vec<(usize, String)> = Vec::new();
    for (i, s) in tree.nodes.iter().enumerate() {
        for &c in &s.children {
            add(EdgeLabel::Child, i, c);
        }
        if s.leaf {
            if let Some(p) = prev_token {
                add(EdgeLabel::NextToken, p, i);
            }
            prev_token = Some(i);
            if s.kind == "identifier" {
                for sub in subtokenize(tree.text(i)) {
                    if !vocab.contains_key(&sub) {
                        vocab.insert(sub.clone(), 0);
                        vocab_order.push(sub.clone());
                    }
                    subtoken_edges.push((i, sub));
                }
            }
        }
        match s.kind {
            "assignment" | "augmented_assignment" => {
                if let (Some(l), Some(r)) = (
                    tree.child_by_field(i, "left"),
                    tree.child_by_field(i, "right"),
                ) {
                    add(EdgeLabel::AssignedFrom, r, l);
                }
            }
            "named_expression" => {
                if let (Some(l), Some(r)) = (
                    tree.child_by_field(i, "name"),
                    tree.child_by_field(i, "value"),
                ) {
                    add(EdgeLabel::AssignedFrom, r, l);
                }
            }
            "return_statement" | "yield" if !s.leaf => {
                let mut p = s.parent;
                while let Some(a) = p {
                    match tree.kind(a) {
                        "function_definition" => {
                            add(EdgeLabel::ReturnsTo, i, a);
                            break;
                        }
                        "lambda" | "class_definition" => break,
                        _ => p = tree.nodes[a].parent,
                    }
                }
            }
            _ => {}
        }
    }

    for sub in &vocab_order {
        vocab.insert(sub.clone(), nodes.len());
        nodes.push(Node::new(NodeCategory::Vocabulary, sub.clone()));
    }
    for (tok, sub) in subtoken_edges {
        add(EdgeLabel::SubtokenOf, tok, vocab[&sub]);
    }

    let sym_base = nodes.len();
    for s in &ex.symbols {
        nodes.push(Node::new(NodeCategory::Symbol, s.name.clone()));
    }
    for (&n, &s) in &ex.occ {
        add(EdgeLabel::OccurrenceOf, n, sym_base + s);
    }
    for (&def, &s) in &ex.def_symbol {
        add(EdgeLabel::OccurrenceOf, def, sym_base + s);
    }

    let mut by_symbol: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&n, &s) in &ex.occ {
        by_symbol.entry(s).or_default().push(n);
    }
    for occs in by_symbol.values_mut() {
        occs.sort_by_key(|&n| (tree.nodes[n].range.start, n));
        for w in occs.windows(2) {
            add(EdgeLabel::NextLexicalUse, w[0], w[1]);
        }
    }

    if !options.disabled_edges.contains(&EdgeLabel::NextMayUse) {
        for (s, d) in flow::next_may_use(&tree, &ex.occ, &ex.def_param_binders) {
            add(EdgeLabel::NextMayUse, s, d);
        }
    }

    if nodes.len() > options.node_cap {
        return Err(ExtractError::TooLarge {
            nodes: nodes.len(),
            cap: options.node_cap,
        });
    }

    for list in edges.values_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let (symbols, sites): (Vec<SymbolInfo>, Vec<Option<AnnotationSite>>) = ex
        .symbols
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            (
                SymbolInfo {
                    node: sym_base + k,
                    kind: s.kind,
                    name: s.name,
                    annotation: s.annotation,
                },
                s.site,
            )
        })
        .unzip();

    Ok(Extraction {
        graph: CodeGraph {
            file_id: file_id.to_string(),
            nodes,
            edges,
            symbols,
        },
        sites,
    })
}

//! Statement-level control flow per procedure, used to link every bound
//! occurrence to all of its potential next uses.

use std::collections::{BTreeMap, BTreeSet};

use super::syntax::SynTree;

type Occ = (usize, usize); // (syntax node, symbol)

struct Loop {
    header: usize,
    breaks: Vec<usize>,
}

#[derive(Default)]
struct Cfg {
    occs: Vec<Vec<Occ>>,
    succ: Vec<Vec<usize>>,
}

struct Builder<'t, 's> {
    tree: &'t SynTree<'s>,
    occ: &'t BTreeMap<usize, usize>,
    binders: &'t BTreeSet<usize>,
    cfg: Cfg,
    loops: Vec<Loop>,
    pending: Vec<Procedure>,
}

enum Procedure {
    Module(usize),
    Function(usize),
    Class(usize),
}

impl<'t, 's> Builder<'t, 's> {
    fn node(&mut self, occs: Vec<Occ>, preds: &[usize]) -> usize {
        let id = self.cfg.occs.len();
        self.cfg.occs.push(occs);
        self.cfg.succ.push(Vec::new());
        for &p in preds {
            self.link(p, id);
        }
        id
    }

    fn link(&mut self, from: usize, to: usize) {
        if !self.cfg.succ[from].contains(&to) {
            self.cfg.succ[from].push(to);
        }
    }

    /// Occurrences lexically inside `i`, excluding `skip` subtrees, nested
    /// procedure bodies and parameter binders.
    fn gather(&mut self, i: usize, skip: &[usize], out: &mut Vec<Occ>) {
        if skip.contains(&i) {
            return;
        }
        if let Some(&s) = self.occ.get(&i) {
            if !self.binders.contains(&i) {
                out.push((i, s));
            }
        }
        let kind = self.tree.kind(i);
        for &c in self.tree.children(i) {
            let field = self.tree.nodes[c].field;
            if field == Some("body") && matches!(kind, "function_definition" | "class_definition") {
                self.pending.push(if kind == "function_definition" {
                    Procedure::Function(i)
                } else {
                    Procedure::Class(i)
                });
                continue;
            }
            self.gather(c, skip, out);
        }
    }

    fn header(&mut self, i: usize, skip: &[usize]) -> Vec<Occ> {
        let mut out = Vec::new();
        self.gather(i, skip, &mut out);
        self.sort(&mut out);
        out
    }

    fn sort(&self, occs: &mut [Occ]) {
        occs.sort_by_key(|&(n, _)| (self.tree.nodes[n].range.start, n));
    }

    fn block(&mut self, i: Option<usize>, preds: Vec<usize>) -> Vec<usize> {
        let Some(i) = i else { return preds };
        let stmts: Vec<usize> = self.tree.children(i).to_vec();
        let mut frontier = preds;
        for s in stmts {
            frontier = self.stmt(s, frontier);
        }
        frontier
    }

    fn blocks_of(&self, i: usize) -> Vec<usize> {
        self.tree
            .children(i)
            .iter()
            .copied()
            .filter(|&c| {
                matches!(
                    self.tree.kind(c),
                    "block" | "elif_clause" | "else_clause" | "except_clause" | "except_group_clause" | "finally_clause" | "case_clause"
                )
            })
            .collect()
    }

    fn stmt(&mut self, i: usize, preds: Vec<usize>) -> Vec<usize> {
        let t = self.tree;
        match t.kind(i) {
            "if_statement" => {
                let parts = self.blocks_of(i);
                let occs = self.header(i, &parts);
                let cond = self.node(occs, &preds);
                let mut exits = self.block(t.child_by_field(i, "consequence"), vec![cond]);
                let mut last_cond = cond;
                let mut has_else = false;
                for p in parts {
                    match t.kind(p) {
                        "elif_clause" => {
                            let body = t.child_by_field(p, "consequence");
                            let skip: Vec<usize> = body.into_iter().collect();
                            let occs = self.header(p, &skip);
                            let c = self.node(occs, &[last_cond]);
                            exits.extend(self.block(body, vec![c]));
                            last_cond = c;
                        }
                        "else_clause" => {
                            has_else = true;
                            let body = t.child_of_kind(p, "block");
                            exits.extend(self.block(body, vec![last_cond]));
                        }
                        _ => {}
                    }
                }
                if !has_else {
                    exits.push(last_cond);
                }
                exits
            }
            "for_statement" | "while_statement" => {
                let mut parts = self.blocks_of(i);
                // the iterable is evaluated once, before the first iteration
                let mut preds = preds;
                if t.kind(i) == "for_statement" {
                    if let Some(it) = t.child_by_field(i, "right") {
                        let occs = self.header(it, &[]);
                        preds = vec![self.node(occs, &preds)];
                        parts.push(it);
                    }
                }
                let occs = self.header(i, &parts);
                let head = self.node(occs, &preds);
                self.loops.push(Loop {
                    header: head,
                    breaks: Vec::new(),
                });
                let body_exits = self.block(t.child_by_field(i, "body"), vec![head]);
                for e in body_exits {
                    self.link(e, head);
                }
                let lp = self.loops.pop().expect("loop pushed above");
                let mut exits = match t.child_by_field(i, "alternative") {
                    Some(alt) => self.block(t.child_of_kind(alt, "block"), vec![head]),
                    None => vec![head],
                };
                exits.extend(lp.breaks);
                exits
            }
            "try_statement" => {
                let start = self.cfg.occs.len();
                let mut body_exits = self.block(t.child_by_field(i, "body"), preds.clone());
                let mut in_body: Vec<usize> = (start..self.cfg.occs.len()).collect();
                in_body.extend(preds.iter().copied());
                let mut exits = Vec::new();
                let mut finally = None;
                for c in t.children(i).to_vec() {
                    match t.kind(c) {
                        "except_clause" | "except_group_clause" => {
                            let body = t.child_of_kind(c, "block");
                            let skip: Vec<usize> = body.into_iter().collect();
                            let occs = self.header(c, &skip);
                            let h = self.node(occs, &in_body);
                            exits.extend(self.block(body, vec![h]));
                        }
                        "else_clause" => {
                            body_exits = self.block(t.child_of_kind(c, "block"), body_exits);
                        }
                        "finally_clause" => finally = Some(c),
                        _ => {}
                    }
                }
                exits.extend(body_exits);
                match finally {
                    Some(f) => self.block(t.child_of_kind(f, "block"), exits),
                    None => exits,
                }
            }
            "with_statement" => {
                let body = t.child_by_field(i, "body");
                let skip: Vec<usize> = body.into_iter().collect();
                let occs = self.header(i, &skip);
                let h = self.node(occs, &preds);
                self.block(body, vec![h])
            }
            "match_statement" => {
                let body = t.child_by_field(i, "body");
                let skip: Vec<usize> = body.into_iter().collect();
                let occs = self.header(i, &skip);
                let h = self.node(occs, &preds);
                let mut exits = vec![h];
                if let Some(b) = body {
                    for case in t.children(b).to_vec() {
                        let cbody = t.child_by_field(case, "consequence");
                        let skip: Vec<usize> = cbody.into_iter().collect();
                        let occs = self.header(case, &skip);
                        let c = self.node(occs, &[h]);
                        exits.extend(self.block(cbody, vec![c]));
                    }
                }
                exits
            }
            "return_statement" | "raise_statement" => {
                let occs = self.header(i, &[]);
                self.node(occs, &preds);
                Vec::new()
            }
            "break_statement" => {
                let n = self.node(Vec::new(), &preds);
                if let Some(lp) = self.loops.last_mut() {
                    lp.breaks.push(n);
                }
                Vec::new()
            }
            "continue_statement" => {
                let n = self.node(Vec::new(), &preds);
                if let Some(h) = self.loops.last().map(|l| l.header) {
                    self.link(n, h);
                }
                Vec::new()
            }
            "block" => self.block(Some(i), preds),
            _ => {
                let occs = self.header(i, &[]);
                let n = self.node(occs, &preds);
                vec![n]
            }
        }
    }
}

/// Computes NEXT_MAY_USE edges (occurrence → potential next occurrence of the
/// same symbol) over every procedure in the file.
pub fn next_may_use(
    tree: &SynTree,
    occ: &BTreeMap<usize, usize>,
    binders: &BTreeSet<usize>,
) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut queue = vec![Procedure::Module(SynTree::ROOT)];
    while let Some(proc_) = queue.pop() {
        let mut b = Builder {
            tree,
            occ,
            binders,
            cfg: Cfg::default(),
            loops: Vec::new(),
            pending: Vec::new(),
        };
        match proc_ {
            Procedure::Module(root) => {
                b.block(Some(root), Vec::new());
            }
            Procedure::Function(def) => {
                let mut entry: Vec<Occ> = Vec::new();
                if let Some(params) = tree.child_by_field(def, "parameters") {
                    collect_binders(tree, params, occ, binders, &mut entry);
                }
                b.sort(&mut entry);
                let e = b.node(entry, &[]);
                b.block(tree.child_by_field(def, "body"), vec![e]);
            }
            Procedure::Class(def) => {
                b.block(tree.child_by_field(def, "body"), Vec::new());
            }
        }
        edges.extend(solve(&b.cfg));
        queue.extend(b.pending.into_iter().rev());
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn collect_binders(
    tree: &SynTree,
    i: usize,
    occ: &BTreeMap<usize, usize>,
    binders: &BTreeSet<usize>,
    out: &mut Vec<Occ>,
) {
    if binders.contains(&i) {
        if let Some(&s) = occ.get(&i) {
            out.push((i, s));
        }
    }
    for &c in tree.children(i) {
        collect_binders(tree, c, occ, binders, out);
    }
}

fn solve(cfg: &Cfg) -> Vec<(usize, usize)> {
    let n = cfg.occs.len();
    // first occurrence of each symbol per node
    let firsts: Vec<BTreeMap<usize, usize>> = cfg
        .occs
        .iter()
        .map(|occs| {
            let mut m = BTreeMap::new();
            for &(node, sym) in occs {
                m.entry(sym).or_insert(node);
            }
            m
        })
        .collect();
    let mut nu_in: Vec<BTreeMap<usize, BTreeSet<usize>>> = vec![BTreeMap::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for v in (0..n).rev() {
            let mut inn = out_of(cfg, &nu_in, v);
            for (&sym, &node) in &firsts[v] {
                inn.insert(sym, BTreeSet::from([node]));
            }
            if inn != nu_in[v] {
                nu_in[v] = inn;
                changed = true;
            }
        }
    }
    let mut edges = Vec::new();
    for v in 0..n {
        let out = out_of(cfg, &nu_in, v);
        let occs = &cfg.occs[v];
        for (k, &(node, sym)) in occs.iter().enumerate() {
            match occs[k + 1..].iter().find(|&&(_, s)| s == sym) {
                Some(&(next, _)) => edges.push((node, next)),
                None => {
                    if let Some(targets) = out.get(&sym) {
                        edges.extend(targets.iter().map(|&t| (node, t)));
                    }
                }
            }
        }
    }
    edges
}

fn out_of(
    cfg: &Cfg,
    nu_in: &[BTreeMap<usize, BTreeSet<usize>>],
    v: usize,
) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &w in &cfg.succ[v] {
        for (&sym, set) in &nu_in[w] {
            out.entry(sym).or_default().extend(set.iter().copied());
        }
    }
    out
}

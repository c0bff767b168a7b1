//! Type annotation expressions: parsing, normalization, erasure and the
//! covariant subtyping lattice used to judge type neutrality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

/// Name of the distinguished top element.
pub const TOP: &str = "Any";

/// Default nesting depth kept by [`normalize_type`].
pub const DEFAULT_MAX_DEPTH: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeParseError {
    #[error("unexpected end of annotation at offset {offset}")]
    UnexpectedEnd { offset: usize },
    #[error("unexpected character {found:?} at offset {offset}")]
    Unexpected { offset: usize, found: char },
    #[error("unbalanced bracket at offset {offset}")]
    Unbalanced { offset: usize },
    #[error("empty annotation")]
    Empty,
}

/// A parsed type annotation: a base name applied to ordered type arguments.
///
/// `qualified` carries the original dotted name when normalization shortened
/// it. It is display-only and does not take part in equality or ordering.
#[derive(Debug, Clone)]
pub struct TypeExpr {
    pub base: String,
    pub args: Vec<TypeExpr>,
    pub qualified: Option<String>,
}

impl PartialEq for TypeExpr {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.args == other.args
    }
}

impl Eq for TypeExpr {}

impl Hash for TypeExpr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.base.hash(state);
        self.args.hash(state);
    }
}

impl PartialOrd for TypeExpr {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TypeExpr {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.base
            .cmp(&other.base)
            .then_with(|| self.args.cmp(&other.args))
    }
}

impl TypeExpr {
    pub fn simple(base: impl Into<String>) -> Self {
        TypeExpr {
            base: base.into(),
            args: Vec::new(),
            qualified: None,
        }
    }

    pub fn generic(base: impl Into<String>, args: Vec<TypeExpr>) -> Self {
        TypeExpr {
            base: base.into(),
            args,
            qualified: None,
        }
    }

    pub fn any() -> Self {
        Self::simple(TOP)
    }

    pub fn is_top(&self) -> bool {
        self.base == TOP && self.args.is_empty()
    }

    pub fn is_none(&self) -> bool {
        self.base == "None" && self.args.is_empty()
    }

    /// 1 for a parameterless type, otherwise 1 + deepest argument.
    pub fn depth(&self) -> usize {
        1 + self.args.iter().map(TypeExpr::depth).max().unwrap_or(0)
    }

    /// Fully qualified form for display, falling back to the rendered type.
    pub fn display_name(&self) -> String {
        match &self.qualified {
            Some(q) if self.args.is_empty() => q.clone(),
            _ => self.to_string(),
        }
    }
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.base)?;
        if !self.args.is_empty() {
            f.write_str("[")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{a}")?;
            }
            f.write_str("]")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for TypeExpr {
    type Err = TypeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_type(s)
    }
}

// Bases whose arguments are not types; they are kept opaque.
const OPAQUE_ARGS: &[&str] = &["Callable", "Literal", "typing.Callable", "typing.Literal"];

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn unexpected(&self) -> TypeParseError {
        match self.src[self.pos..].chars().next() {
            Some(found) => TypeParseError::Unexpected {
                offset: self.pos,
                found,
            },
            None => TypeParseError::UnexpectedEnd { offset: self.pos },
        }
    }

    // union := primary ('|' primary)*
    fn union(&mut self) -> Result<TypeExpr, TypeParseError> {
        let first = self.primary()?;
        if self.peek() != Some(b'|') {
            return Ok(first);
        }
        let mut members = vec![first];
        while self.peek() == Some(b'|') {
            self.pos += 1;
            members.push(self.primary()?);
        }
        Ok(TypeExpr::generic("Union", members))
    }

    fn primary(&mut self) -> Result<TypeExpr, TypeParseError> {
        match self.peek() {
            None => Err(TypeParseError::UnexpectedEnd { offset: self.pos }),
            Some(q @ (b'"' | b'\'')) => self.quoted(q),
            Some(b'[') => {
                // A bare argument list, e.g. the parameter list of Callable.
                self.skip_list()?;
                Ok(TypeExpr::simple("..."))
            }
            Some(_) => self.named(),
        }
    }

    fn quoted(&mut self, quote: u8) -> Result<TypeExpr, TypeParseError> {
        let start = self.pos;
        self.pos += 1;
        let inner_start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return Err(TypeParseError::UnexpectedEnd { offset: self.pos });
        }
        let inner = &self.src[inner_start..self.pos];
        self.pos += 1;
        let mut sub = Parser {
            src: inner,
            bytes: inner.as_bytes(),
            pos: 0,
        };
        let t = sub.union().map_err(|e| shift_offset(e, inner_start))?;
        if sub.peek().is_some() {
            return Err(shift_offset(sub.unexpected(), inner_start));
        }
        let _ = start;
        Ok(t)
    }

    fn named(&mut self) -> Result<TypeExpr, TypeParseError> {
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' || c >= 0x80 || c == b'-' {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.unexpected());
        }
        let base = self.src[start..self.pos].to_string();
        if self.peek() != Some(b'[') {
            return Ok(TypeExpr::simple(base));
        }
        if OPAQUE_ARGS.contains(&base.as_str()) {
            self.skip_list()?;
            return Ok(TypeExpr::simple(base));
        }
        let open = self.pos;
        self.pos += 1;
        let mut args = Vec::new();
        loop {
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    break;
                }
                None => return Err(TypeParseError::Unbalanced { offset: open }),
                _ => {}
            }
            args.push(self.union()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {}
                None => return Err(TypeParseError::Unbalanced { offset: open }),
                Some(_) => return Err(self.unexpected()),
            }
        }
        if args.is_empty() {
            // `Tuple[()]`-style empties are not representable; keep the base.
            return Ok(TypeExpr::simple(base));
        }
        Ok(TypeExpr::generic(base, args))
    }

    /// Skips a balanced `[...]` group, honouring quotes.
    fn skip_list(&mut self) -> Result<(), TypeParseError> {
        self.skip_ws();
        let open = self.pos;
        let mut depth = 0usize;
        let mut quote: Option<u8> = None;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            self.pos += 1;
            if let Some(q) = quote {
                if c == q {
                    quote = None;
                }
                continue;
            }
            match c {
                b'"' | b'\'' => quote = Some(c),
                b'[' => depth += 1,
                b']' => {
                    if depth == 0 {
                        return Err(TypeParseError::Unbalanced {
                            offset: self.pos - 1,
                        });
                    }
                    depth -= 1;
                    if depth == 0 {
                        return Ok(());
                    }
                }
                _ => {}
            }
        }
        Err(TypeParseError::Unbalanced { offset: open })
    }
}

fn shift_offset(e: TypeParseError, by: usize) -> TypeParseError {
    match e {
        TypeParseError::UnexpectedEnd { offset } => TypeParseError::UnexpectedEnd {
            offset: offset + by,
        },
        TypeParseError::Unexpected { offset, found } => TypeParseError::Unexpected {
            offset: offset + by,
            found,
        },
        TypeParseError::Unbalanced { offset } => TypeParseError::Unbalanced {
            offset: offset + by,
        },
        TypeParseError::Empty => TypeParseError::Empty,
    }
}

/// Parses an annotation written in bracket notation.
///
/// Forward references in quotes are unwrapped, `A | B` is read as
/// `Union[A, B]`, and the arguments of `Callable`/`Literal` are dropped.
pub fn parse_type(text: &str) -> Result<TypeExpr, TypeParseError> {
    if text.trim().is_empty() {
        return Err(TypeParseError::Empty);
    }
    let mut p = Parser {
        src: text,
        bytes: text.as_bytes(),
        pos: 0,
    };
    let t = p.union()?;
    match p.peek() {
        None => Ok(t),
        Some(b']') => Err(TypeParseError::Unbalanced { offset: p.pos }),
        Some(_) => Err(p.unexpected()),
    }
}

/// Fixed alias table applied during normalization.
fn canonical_alias(name: &str) -> Option<&'static str> {
    Some(match name {
        "list" | "typing.List" | "t.List" | "List" => "List",
        "dict" | "typing.Dict" | "t.Dict" | "Dict" => "Dict",
        "set" | "typing.Set" | "t.Set" | "Set" => "Set",
        "frozenset" | "typing.FrozenSet" | "t.FrozenSet" | "FrozenSet" => "FrozenSet",
        "tuple" | "typing.Tuple" | "t.Tuple" | "Tuple" => "Tuple",
        "type" | "typing.Type" | "t.Type" | "Type" => "Type",
        "typing.Any" | "t.Any" | "Any" => "Any",
        "typing.Optional" | "t.Optional" | "Optional" => "Optional",
        "typing.Union" | "t.Union" | "Union" => "Union",
        "typing.Callable" | "t.Callable" | "collections.abc.Callable" | "Callable" => "Callable",
        "typing.Iterable" | "t.Iterable" | "collections.abc.Iterable" | "Iterable" => "Iterable",
        "typing.Iterator" | "t.Iterator" | "collections.abc.Iterator" | "Iterator" => "Iterator",
        "typing.Sequence" | "t.Sequence" | "collections.abc.Sequence" | "Sequence" => "Sequence",
        "typing.Mapping" | "t.Mapping" | "collections.abc.Mapping" | "Mapping" => "Mapping",
        "typing.Generator" | "t.Generator" | "collections.abc.Generator" | "Generator" => {
            "Generator"
        }
        "typing.Literal" | "t.Literal" | "Literal" => "Literal",
        "builtins.int" => "int",
        "builtins.str" => "str",
        "builtins.float" => "float",
        "builtins.bool" => "bool",
        "builtins.bytes" => "bytes",
        "builtins.object" => "object",
        "NoneType" => "None",
        _ => return None,
    })
}

fn canonicalize_names(t: &TypeExpr) -> TypeExpr {
    let args = t.args.iter().map(canonicalize_names).collect();
    if let Some(c) = canonical_alias(&t.base) {
        return TypeExpr {
            base: c.to_string(),
            args,
            qualified: None,
        };
    }
    match t.base.rsplit_once('.') {
        Some((_, last)) if !last.is_empty() => TypeExpr {
            base: last.to_string(),
            args,
            qualified: Some(t.base.clone()),
        },
        _ => TypeExpr {
            base: t.base.clone(),
            args,
            qualified: t.qualified.clone(),
        },
    }
}

fn flatten_unions(t: TypeExpr) -> TypeExpr {
    let args: Vec<TypeExpr> = t.args.into_iter().map(flatten_unions).collect();
    if t.base != "Union" {
        return TypeExpr { args, ..t };
    }
    let mut flat = Vec::with_capacity(args.len());
    for a in args {
        if a.base == "Union" && !a.args.is_empty() {
            flat.extend(a.args);
        } else {
            flat.push(a);
        }
    }
    TypeExpr { args: flat, ..t }
}

fn cut_depth(t: &TypeExpr, level: usize, max_depth: usize) -> TypeExpr {
    if level > max_depth {
        return TypeExpr::any();
    }
    TypeExpr {
        base: t.base.clone(),
        args: t
            .args
            .iter()
            .map(|a| cut_depth(a, level + 1, max_depth))
            .collect(),
        qualified: t.qualified.clone(),
    }
}

fn sort_unions(t: TypeExpr) -> TypeExpr {
    let mut args: Vec<TypeExpr> = t.args.into_iter().map(sort_unions).collect();
    if t.base == "Union" {
        args.sort_by_key(|a| a.to_string());
        args.dedup();
    }
    TypeExpr { args, ..t }
}

/// Canonicalizes aliases, flattens and sorts unions, and replaces every
/// sub-expression nested deeper than `max_depth` with `Any`.
pub fn normalize_type(t: &TypeExpr, max_depth: usize) -> TypeExpr {
    let max_depth = max_depth.max(1);
    let t = flatten_unions(canonicalize_names(t));
    sort_unions(cut_depth(&t, 1, max_depth))
}

/// Drops every type parameter: `List[int]` becomes `List`.
pub fn erase_type_parameters(t: &TypeExpr) -> TypeExpr {
    TypeExpr {
        base: t.base.clone(),
        args: Vec::new(),
        qualified: t.qualified.clone(),
    }
}

/// Parse + normalize at the default depth.
pub fn parse_normalized(text: &str) -> Result<TypeExpr, TypeParseError> {
    parse_type(text).map(|t| normalize_type(&t, DEFAULT_MAX_DEPTH))
}

/// Built-in nominal subtype facts (child, parent).
const NOMINAL_FACTS: &[(&str, &str)] = &[
    ("bool", "int"),
    ("int", "float"),
    ("float", "complex"),
];

/// Subtyping hierarchy over normalized types, ordered by `:<`, with `Any`
/// as top. Arguments are treated covariantly.
#[derive(Debug, Clone)]
pub struct TypeLattice {
    nodes: BTreeMap<TypeExpr, usize>,
    types: Vec<TypeExpr>,
    parents: Vec<BTreeSet<usize>>,
    ancestors: Vec<BTreeSet<usize>>,
    top: usize,
}

impl TypeLattice {
    pub fn top(&self) -> &TypeExpr {
        &self.types[self.top]
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn contains(&self, t: &TypeExpr) -> bool {
        self.nodes.contains_key(t)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TypeExpr> {
        self.types.iter()
    }

    /// Direct subtype edges as (child, parent).
    pub fn edges(&self) -> Vec<(&TypeExpr, &TypeExpr)> {
        let mut out = Vec::new();
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((&self.types[c], &self.types[p]));
            }
        }
        out
    }

    /// Reflexive-transitive `sub :< sup`. Unknown types are incomparable.
    pub fn is_subtype(&self, sub: &TypeExpr, sup: &TypeExpr) -> bool {
        match (self.nodes.get(sub), self.nodes.get(sup)) {
            (Some(&a), Some(&b)) => a == b || self.ancestors[a].contains(&b),
            _ => false,
        }
    }
}

fn direct_generalizations(t: &TypeExpr) -> Vec<TypeExpr> {
    let mut out = Vec::new();
    if t.is_top() {
        return out;
    }
    if t.args.is_empty() {
        for &(c, p) in NOMINAL_FACTS {
            if t.base == c {
                out.push(TypeExpr::simple(p));
            }
        }
        out.push(TypeExpr::any());
        return out;
    }
    let mut all_top = true;
    for (i, a) in t.args.iter().enumerate() {
        if a.is_top() {
            continue;
        }
        all_top = false;
        for g in direct_generalizations(a) {
            let mut args = t.args.clone();
            args[i] = g;
            out.push(TypeExpr {
                base: t.base.clone(),
                args,
                qualified: t.qualified.clone(),
            });
        }
    }
    if all_top {
        // B[Any, ...] sits directly below the bare constructor B.
        out.push(erase_type_parameters(t));
    }
    out
}

/// Builds the lattice over `types` and all their covariant generalizations.
pub fn build_type_lattice<'a, I>(types: I) -> TypeLattice
where
    I: IntoIterator<Item = &'a TypeExpr>,
{
    let mut nodes: BTreeMap<TypeExpr, usize> = BTreeMap::new();
    let mut types_vec: Vec<TypeExpr> = Vec::new();
    let mut parents: Vec<BTreeSet<usize>> = Vec::new();

    fn intern(
        t: &TypeExpr,
        nodes: &mut BTreeMap<TypeExpr, usize>,
        types: &mut Vec<TypeExpr>,
        parents: &mut Vec<BTreeSet<usize>>,
    ) -> (usize, bool) {
        if let Some(&i) = nodes.get(t) {
            return (i, false);
        }
        let i = types.len();
        nodes.insert(t.clone(), i);
        types.push(t.clone());
        parents.push(BTreeSet::new());
        (i, true)
    }

    let (top, _) = intern(&TypeExpr::any(), &mut nodes, &mut types_vec, &mut parents);
    let mut work: Vec<usize> = Vec::new();
    let mut inputs: Vec<&TypeExpr> = types.into_iter().collect();
    inputs.sort();
    for t in inputs {
        let (i, fresh) = intern(t, &mut nodes, &mut types_vec, &mut parents);
        if fresh {
            work.push(i);
        }
    }
    while let Some(i) = work.pop() {
        let t = types_vec[i].clone();
        for g in direct_generalizations(&t) {
            let (j, fresh) = intern(&g, &mut nodes, &mut types_vec, &mut parents);
            parents[i].insert(j);
            if fresh {
                work.push(j);
            }
        }
    }

    // Members of Optional / Union sit below the union, and `object` sits
    // directly below the top when it is part of the lattice. Member edges
    // that would close a cycle are skipped.
    fn reaches(parents: &[BTreeSet<usize>], from: usize, to: usize) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if i == to {
                return true;
            }
            if seen.insert(i) {
                stack.extend(parents[i].iter().copied());
            }
        }
        false
    }
    let object = nodes.get(&TypeExpr::simple("object")).copied();
    let none = nodes.get(&TypeExpr::simple("None")).copied();
    if let Some(o) = object {
        for (i, ps) in parents.iter_mut().enumerate() {
            if i != o && i != top {
                ps.insert(o);
            }
        }
        parents[o].insert(top);
    }
    for i in 0..types_vec.len() {
        let t = types_vec[i].clone();
        if t.base != "Optional" && t.base != "Union" {
            continue;
        }
        let mut members: Vec<usize> = t
            .args
            .iter()
            .filter(|a| !a.is_top() && a.base != "object")
            .filter_map(|a| nodes.get(a).copied())
            .collect();
        if t.base == "Optional" {
            members.extend(none);
        }
        for j in members {
            if j != i && !reaches(&parents, i, j) {
                parents[j].insert(i);
            }
        }
    }

    let n = types_vec.len();
    let mut ancestors = vec![BTreeSet::new(); n];
    for (i, anc) in ancestors.iter_mut().enumerate() {
        let mut stack: Vec<usize> = parents[i].iter().copied().collect();
        while let Some(j) = stack.pop() {
            if j != i && anc.insert(j) {
                stack.extend(parents[j].iter().copied());
            }
        }
    }
    TypeLattice {
        nodes,
        types: types_vec,
        parents,
        ancestors,
        top,
    }
}

/// `truth :< pred` and `pred` is not the top element.
pub fn check_neutral(pred: &TypeExpr, truth: &TypeExpr, lattice: &TypeLattice) -> bool {
    if pred.is_top() {
        return false;
    }
    pred == truth || lattice.is_subtype(truth, pred)
}

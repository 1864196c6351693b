//! Python source handling: parsing, a simplified syntax tree, lexer tokens and
//! structural fingerprints.

use std::collections::HashMap;
use std::ops::Range;

use rustpython_parser::ast::{self, Constant, Ranged};
use rustpython_parser::{lexer, Mode, Parse, Tok};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}:{line}: {message}")]
pub struct ParseError {
    pub path: String,
    pub line: usize,
    pub message: String,
}

/// A syntax node reduced to a kind, an optional label and its children.
///
/// Labels hold identifiers (names, attributes, parameters, keyword names),
/// literal values and operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: &'static str,
    pub label: Option<String>,
    pub children: Vec<Node>,
    pub range: Range<usize>,
}

/// Kinds whose label is an identifier.
const IDENT_KINDS: &[&str] = &["Name", "Attribute", "FunctionDef", "ClassDef", "Arg", "Keyword", "Alias", "Global"];

impl Node {
    fn new(kind: &'static str, range: Range<usize>) -> Self {
        Self { kind, label: None, children: Vec::new(), range }
    }

    fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    fn with(mut self, children: Vec<Node>) -> Self {
        self.children = children;
        self
    }

    /// Pre-order walk.
    pub fn walk(&self) -> impl Iterator<Item = &Node> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let n = stack.pop()?;
            stack.extend(n.children.iter().rev());
            Some(n)
        })
    }

    /// Name of the called function for a `Call` node: the attribute or bare
    /// name being invoked.
    pub fn call_name(&self) -> Option<&str> {
        if self.kind != "Call" {
            return None;
        }
        let func = self.children.first()?;
        match func.kind {
            "Name" | "Attribute" => func.label.as_deref(),
            _ => None,
        }
    }

    /// Positional argument nodes of a `Call`.
    pub fn call_args(&self) -> &[Node] {
        match self.kind {
            "Call" => {
                let end = self.children.iter().position(|c| c.kind == "Keyword").unwrap_or(self.children.len());
                &self.children[1.min(end)..end]
            }
            _ => &[],
        }
    }

    /// Statements of a block-bearing node's first `Block` child.
    pub fn body(&self) -> &[Node] {
        self.children
            .iter()
            .find(|c| c.kind == "Block")
            .map_or(&[], |b| &b.children)
    }

    pub fn is_docstring(&self) -> bool {
        self.kind == "Expr"
            && self.children.first().is_some_and(|c| {
                c.kind == "Constant" && c.label.as_deref().is_some_and(|l| l.starts_with("Str("))
            })
    }

    fn write_shape(&self, out: &mut String, names: Option<&mut HashMap<String, usize>>) {
        out.push('(');
        out.push_str(self.kind);
        let mut names = names;
        if let Some(label) = &self.label {
            out.push(' ');
            match names.as_deref_mut() {
                Some(map) if IDENT_KINDS.contains(&self.kind) => {
                    let next = map.len();
                    let id = *map.entry(label.clone()).or_insert(next);
                    out.push_str(&format!("v{id}"));
                }
                _ => out.push_str(&format!("{label:?}")),
            }
        }
        for c in &self.children {
            c.write_shape(out, names.as_deref_mut());
        }
        out.push(')');
    }

    /// Canonical text of the tree, independent of layout and comments.
    pub fn shape(&self) -> String {
        let mut s = String::new();
        self.write_shape(&mut s, None);
        s
    }

    /// Like [`Node::shape`], with every identifier replaced by its
    /// first-occurrence index so consistently renamed code compares equal.
    pub fn normalized_shape(&self) -> String {
        let mut s = String::new();
        let mut names = HashMap::new();
        self.write_shape(&mut s, Some(&mut names));
        s
    }

    /// Copy of a function node without its docstring statement.
    pub fn without_docstring(&self) -> Node {
        let mut n = self.clone();
        if let Some(block) = n.children.iter_mut().find(|c| c.kind == "Block") {
            if block.children.first().is_some_and(Node::is_docstring) {
                block.children.remove(0);
            }
        }
        n
    }
}

/// SHA-256 of the identifier-normalised shape, hex encoded.
pub fn structural_fingerprint(node: &Node) -> String {
    let digest = Sha256::digest(node.normalized_shape().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parsed module: the source plus its top-level statements.
#[derive(Debug, Clone)]
pub struct Module {
    pub source: String,
    pub statements: Vec<Node>,
}

pub fn parse_module(source: &str, path: &str) -> Result<Module, ParseError> {
    let suite = ast::Suite::parse(source, path).map_err(|e| ParseError {
        path: path.to_string(),
        line: line_of(source, usize::from(e.offset)),
        message: e.error.to_string(),
    })?;
    Ok(Module {
        source: source.to_string(),
        statements: suite.iter().map(stmt).collect(),
    })
}

impl Module {
    pub fn functions(&self) -> impl Iterator<Item = &Node> {
        self.statements.iter().filter(|s| s.kind == "FunctionDef")
    }

    pub fn function(&self, name: &str) -> Option<&Node> {
        self.functions().find(|f| f.label.as_deref() == Some(name))
    }

    pub fn text(&self, range: &Range<usize>) -> &str {
        &self.source[range.clone()]
    }

    pub fn imports(&self) -> impl Iterator<Item = &Node> {
        self.statements.iter().filter(|s| matches!(s.kind, "Import" | "ImportFrom"))
    }
}

/// 1-based line containing byte `offset`.
pub fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Byte range of the full lines covering `range`, including the trailing
/// newline.
pub fn line_span(source: &str, range: &Range<usize>) -> Range<usize> {
    let start = source[..range.start].rfind('\n').map_or(0, |i| i + 1);
    let end = source[range.end..].find('\n').map_or(source.len(), |i| range.end + i + 1);
    start..end
}

/// Lexer tokens as text, with their byte ranges. Comments and layout-only
/// newlines are dropped. Lexing stops at the first error.
pub fn tokens(source: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    for item in lexer::lex(source, Mode::Module) {
        let Ok((tok, range)) = item else { break };
        match tok {
            Tok::EndOfFile => continue,
            _ => out.push((tok.to_string(), usize::from(range.start())..usize::from(range.end()))),
        }
    }
    out
}

/// Header of a function (`def` through the closing colon).
pub fn signature<'a>(source: &'a str, function: &Node) -> &'a str {
    let body_start = function.body().first().map_or(function.range.end, |s| s.range.start);
    let head = &source[function.range.start..body_start];
    let mut depth = 0i32;
    let mut colon = None;
    for (tok, r) in tokens(head) {
        match tok.as_str() {
            "'('" | "'['" | "'{'" => depth += 1,
            "')'" | "']'" | "'}'" => depth -= 1,
            "':'" if depth == 0 => colon = Some(r.end),
            _ => {}
        }
    }
    match colon {
        Some(end) => &head[..end],
        None => head.trim_end(),
    }
}

/// Docstring text of a function, if its body starts with a string literal.
pub fn docstring(function: &Node) -> Option<String> {
    let first = function.body().first()?;
    if !first.is_docstring() {
        return None;
    }
    first.children[0].label.as_deref().map(|l| {
        // labels of string constants are Debug-formatted `Str("...")`
        let inner = &l[4..l.len() - 1];
        serde_json::from_str::<String>(inner).unwrap_or_else(|_| inner.to_string())
    })
}

fn rng<T: Ranged>(node: &T) -> Range<usize> {
    let r = node.range();
    usize::from(r.start())..usize::from(r.end())
}

fn block(stmts: &[ast::Stmt], fallback: Range<usize>) -> Node {
    let range = match (stmts.first(), stmts.last()) {
        (Some(a), Some(b)) => rng(a).start..rng(b).end,
        _ => fallback.end..fallback.end,
    };
    Node::new("Block", range).with(stmts.iter().map(stmt).collect())
}

fn arguments(args: &ast::Arguments, at: Range<usize>) -> Node {
    let mut children = Vec::new();
    let all = args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs);
    for a in all {
        let mut n = Node::new("Arg", rng(&a.def)).labeled(a.def.arg.as_str());
        if let Some(d) = &a.default {
            n.children.push(expr(d));
        }
        children.push(n);
    }
    for a in args.vararg.iter().chain(&args.kwarg) {
        children.push(Node::new("Arg", rng(a.as_ref())).labeled(format!("*{}", a.arg.as_str())));
    }
    Node::new("Arguments", at).with(children)
}

fn stmt(s: &ast::Stmt) -> Node {
    use ast::Stmt as S;
    let r = rng(s);
    let n = |kind| Node::new(kind, r.clone());
    match s {
        S::FunctionDef(f) => n("FunctionDef")
            .labeled(f.name.as_str())
            .with(vec![arguments(&f.args, r.clone()), block(&f.body, r.clone())]),
        S::AsyncFunctionDef(f) => n("FunctionDef")
            .labeled(f.name.as_str())
            .with(vec![arguments(&f.args, r.clone()), block(&f.body, r.clone())]),
        S::ClassDef(c) => {
            let mut ch: Vec<Node> = c.bases.iter().map(expr).collect();
            ch.push(block(&c.body, r.clone()));
            n("ClassDef").labeled(c.name.as_str()).with(ch)
        }
        S::Return(x) => n("Return").with(x.value.iter().map(|v| expr(v)).collect()),
        S::Delete(x) => n("Delete").with(x.targets.iter().map(expr).collect()),
        S::Assign(x) => {
            let mut ch: Vec<Node> = x.targets.iter().map(expr).collect();
            ch.push(expr(&x.value));
            n("Assign").with(ch)
        }
        S::AugAssign(x) => n("AugAssign")
            .labeled(format!("{:?}", x.op))
            .with(vec![expr(&x.target), expr(&x.value)]),
        S::AnnAssign(x) => {
            let mut ch = vec![expr(&x.target), expr(&x.annotation)];
            ch.extend(x.value.iter().map(|v| expr(v)));
            n("AnnAssign").with(ch)
        }
        S::For(x) => n("For").with(vec![
            expr(&x.target),
            expr(&x.iter),
            block(&x.body, r.clone()),
            block(&x.orelse, r.clone()),
        ]),
        S::AsyncFor(x) => n("For").with(vec![
            expr(&x.target),
            expr(&x.iter),
            block(&x.body, r.clone()),
            block(&x.orelse, r.clone()),
        ]),
        S::While(x) => n("While").with(vec![expr(&x.test), block(&x.body, r.clone()), block(&x.orelse, r.clone())]),
        S::If(x) => n("If").with(vec![expr(&x.test), block(&x.body, r.clone()), block(&x.orelse, r.clone())]),
        S::With(x) => with_stmt(n("With"), &x.items, &x.body, r.clone()),
        S::AsyncWith(x) => with_stmt(n("With"), &x.items, &x.body, r.clone()),
        S::Match(x) => {
            let mut ch = vec![expr(&x.subject)];
            for case in &x.cases {
                let mut c = Node::new("Case", r.clone()).labeled(format!("{:?}", pattern_shape(&case.pattern)));
                c.children.extend(case.guard.iter().map(|g| expr(g)));
                c.children.push(block(&case.body, r.clone()));
                ch.push(c);
            }
            n("Match").with(ch)
        }
        S::Raise(x) => n("Raise").with(x.exc.iter().chain(&x.cause).map(|v| expr(v)).collect()),
        S::Try(x) => try_stmt(n("Try"), &x.body, &x.handlers, &x.orelse, &x.finalbody, r.clone()),
        S::TryStar(x) => try_stmt(n("Try"), &x.body, &x.handlers, &x.orelse, &x.finalbody, r.clone()),
        S::Assert(x) => {
            let mut ch = vec![expr(&x.test)];
            ch.extend(x.msg.iter().map(|m| expr(m)));
            n("Assert").with(ch)
        }
        S::Import(x) => n("Import").with(x.names.iter().map(alias).collect()),
        S::ImportFrom(x) => {
            let module = x.module.as_ref().map_or("", |m| m.as_str());
            let level = x.level.map_or(0, |l| l.to_u32());
            n("ImportFrom")
                .labeled(format!("{}{}", ".".repeat(level as usize), module))
                .with(x.names.iter().map(alias).collect())
        }
        S::Global(x) => n("Global").with(
            x.names.iter().map(|i| Node::new("Global", r.clone()).labeled(i.as_str())).collect(),
        ),
        S::Nonlocal(x) => n("Nonlocal").with(
            x.names.iter().map(|i| Node::new("Global", r.clone()).labeled(i.as_str())).collect(),
        ),
        S::Expr(x) => n("Expr").with(vec![expr(&x.value)]),
        S::Pass(_) => n("Pass"),
        S::Break(_) => n("Break"),
        S::Continue(_) => n("Continue"),
        S::TypeAlias(x) => n("TypeAlias").with(vec![expr(&x.name), expr(&x.value)]),
    }
}

fn pattern_shape(p: &ast::Pattern) -> String {
    // patterns are rare in the target code; a debug rendering without ranges
    // is enough for structural comparison
    let text = format!("{p:?}");
    let mut out = String::with_capacity(text.len());
    let mut rest = text.as_str();
    while let Some(i) = rest.find("range: ") {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let end = tail.find(')').map_or(tail.len(), |j| j + 1);
        rest = &tail[end..];
    }
    out.push_str(rest);
    out
}

fn alias(a: &ast::Alias) -> Node {
    let mut n = Node::new("Alias", rng(a)).labeled(a.name.as_str());
    if let Some(as_name) = &a.asname {
        n.children.push(Node::new("Alias", rng(a)).labeled(as_name.as_str()));
    }
    n
}

fn with_stmt(node: Node, items: &[ast::WithItem], body: &[ast::Stmt], r: Range<usize>) -> Node {
    let mut ch = Vec::new();
    for item in items {
        ch.push(expr(&item.context_expr));
        ch.extend(item.optional_vars.iter().map(|v| expr(v)));
    }
    ch.push(block(body, r));
    node.with(ch)
}

fn try_stmt(
    node: Node,
    body: &[ast::Stmt],
    handlers: &[ast::ExceptHandler],
    orelse: &[ast::Stmt],
    finalbody: &[ast::Stmt],
    r: Range<usize>,
) -> Node {
    let mut ch = vec![block(body, r.clone())];
    for h in handlers {
        let ast::ExceptHandler::ExceptHandler(h) = h;
        let mut hn = Node::new("Handler", rng(h));
        if let Some(name) = &h.name {
            hn.label = Some(name.to_string());
        }
        hn.children.extend(h.type_.iter().map(|t| expr(t)));
        hn.children.push(block(&h.body, rng(h)));
        ch.push(hn);
    }
    ch.push(block(orelse, r.clone()));
    ch.push(block(finalbody, r));
    node.with(ch)
}

fn constant_label(c: &Constant) -> String {
    match c {
        Constant::Str(s) => format!("Str({})", serde_json::to_string(s).unwrap_or_default()),
        other => format!("{other:?}"),
    }
}

fn comprehension(kind: &'static str, r: Range<usize>, elts: Vec<Node>, gens: &[ast::Comprehension]) -> Node {
    let mut ch = elts;
    for g in gens {
        let mut gn = Node::new("For", rng(&g.target).start..rng(&g.iter).end).with(vec![expr(&g.target), expr(&g.iter)]);
        gn.children.extend(g.ifs.iter().map(expr));
        ch.push(gn);
    }
    Node::new(kind, r).with(ch)
}

fn expr(e: &ast::Expr) -> Node {
    use ast::Expr as E;
    let r = rng(e);
    let n = |kind| Node::new(kind, r.clone());
    let many = |xs: &[ast::Expr]| xs.iter().map(expr).collect::<Vec<_>>();
    match e {
        E::BoolOp(x) => n("BoolOp").labeled(format!("{:?}", x.op)).with(many(&x.values)),
        E::NamedExpr(x) => n("NamedExpr").with(vec![expr(&x.target), expr(&x.value)]),
        E::BinOp(x) => n("BinOp")
            .labeled(format!("{:?}", x.op))
            .with(vec![expr(&x.left), expr(&x.right)]),
        E::UnaryOp(x) => n("UnaryOp").labeled(format!("{:?}", x.op)).with(vec![expr(&x.operand)]),
        E::Lambda(x) => n("Lambda").with(vec![arguments(&x.args, r.clone()), expr(&x.body)]),
        E::IfExp(x) => n("IfExp").with(vec![expr(&x.test), expr(&x.body), expr(&x.orelse)]),
        E::Dict(x) => {
            let mut ch = Vec::new();
            for (k, v) in x.keys.iter().zip(&x.values) {
                ch.push(k.as_ref().map_or_else(|| n("DictSplat"), expr));
                ch.push(expr(v));
            }
            n("Dict").with(ch)
        }
        E::Set(x) => n("Set").with(many(&x.elts)),
        E::ListComp(x) => comprehension("ListComp", r.clone(), vec![expr(&x.elt)], &x.generators),
        E::SetComp(x) => comprehension("SetComp", r.clone(), vec![expr(&x.elt)], &x.generators),
        E::DictComp(x) => comprehension("DictComp", r.clone(), vec![expr(&x.key), expr(&x.value)], &x.generators),
        E::GeneratorExp(x) => comprehension("GeneratorExp", r.clone(), vec![expr(&x.elt)], &x.generators),
        E::Await(x) => n("Await").with(vec![expr(&x.value)]),
        E::Yield(x) => n("Yield").with(x.value.iter().map(|v| expr(v)).collect()),
        E::YieldFrom(x) => n("YieldFrom").with(vec![expr(&x.value)]),
        E::Compare(x) => {
            let mut ch = vec![expr(&x.left)];
            ch.extend(many(&x.comparators));
            n("Compare").labeled(format!("{:?}", x.ops)).with(ch)
        }
        E::Call(x) => {
            let mut ch = vec![expr(&x.func)];
            ch.extend(many(&x.args));
            for k in &x.keywords {
                let mut kn = Node::new("Keyword", rng(k)).with(vec![expr(&k.value)]);
                kn.label = Some(k.arg.as_ref().map_or_else(|| "**".to_string(), |a| a.to_string()));
                ch.push(kn);
            }
            n("Call").with(ch)
        }
        E::FormattedValue(x) => n("FormattedValue").with(vec![expr(&x.value)]),
        E::JoinedStr(x) => n("JoinedStr").with(many(&x.values)),
        E::Constant(x) => n("Constant").labeled(constant_label(&x.value)),
        E::Attribute(x) => n("Attribute").labeled(x.attr.as_str()).with(vec![expr(&x.value)]),
        E::Subscript(x) => n("Subscript").with(vec![expr(&x.value), expr(&x.slice)]),
        E::Starred(x) => n("Starred").with(vec![expr(&x.value)]),
        E::Name(x) => n("Name").labeled(x.id.as_str()),
        E::List(x) => n("List").with(many(&x.elts)),
        E::Tuple(x) => n("Tuple").with(many(&x.elts)),
        E::Slice(x) => n("Slice").with(
            [&x.lower, &x.upper, &x.step]
                .into_iter()
                .map(|b| b.as_ref().map_or_else(|| n("Empty"), |v| expr(v)))
                .collect(),
        ),
    }
}

"""Parser, statement identities, CFGs and well-formedness checks.

The input language is a small imperative language with shared global
variables and task-based asynchrony:

    program  := decl* method*
    decl     := "globals" ident ("," ident)* ";"
              | "asyncify" ident ("," ident)* ";"
    method   := "method" ident "{" stmt* "}"
    stmt     := global ":=" expr ";"            -- store to a global
              | local ":=" global ";"           -- load from a global
              | local ":=" "call" ident ";"     -- method call
              | "await" local ";"
              | "await" "*" ";"
              | "return" expr? ";"
              | "if" "(" expr ")" block ("else" block)?
              | "while" "(" expr ")" block
    expr     := arith (("==" | "!=" | "<") arith)?
    arith    := atom (("+" | "-") atom)*
    atom     := INT | local | "*" | "(" expr ")"

Globals may never appear inside expressions: a global is accessed only by a
dedicated load or store statement, so every shared-memory access is a single
CFG node.  Locals may only be assigned from a global or a call, which keeps
the action vocabulary of the semantics down to loads, stores, calls, awaits
and returns.  `*` is a nondeterministic value.  Conditions treat nonzero as
true.  The `asyncify` directive names the base methods (methods without
calls) whose library versions are asynchronous; their bodies model the
asynchrony with inline `await *` statements, and erasing every `await`
recovers the plain sequential program.

Every statement carries a `StmtId`: the method name plus the index path of
the statement in the syntax tree.  Ids are stable under await insertion
(inserted awaits get synthetic ids derived from their call), which the
refactoring machinery relies on.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Union


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

class Diagnostic(Exception):
    """An error with a stable code and a source position.

    Rendered as ``file:line:col: code: message`` so editors and scripts can
    jump to the offending token.
    """

    code = "Error"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def render(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.code}: {self.message}"


class ParseError(Diagnostic):
    code = "SyntaxError"

    def __init__(self, message: str, line: int = 0, col: int = 0,
                 expected: Optional[str] = None):
        super().__init__(message, line, col)
        self.expected = expected


class UndeclaredGlobalError(Diagnostic):
    code = "UndeclaredGlobal"


class DuplicateMethodError(Diagnostic):
    code = "DuplicateMethod"


class RecursionDetectedError(Diagnostic):
    code = "RecursionDetected"


class UnmatchedAwaitError(Diagnostic):
    code = "UnmatchedAwait"


class StrictModeError(Diagnostic):
    code = "StrictMode"


# --------------------------------------------------------------------------
# Statement identities
# --------------------------------------------------------------------------

PathElem = Union[int, str]


def _elem_key(e: PathElem):
    # ints sort before the synthetic string elements ("w0", "end")
    if isinstance(e, int):
        return (0, e, "")
    return (1, 0, str(e))


@dataclass(frozen=True, order=False)
class StmtId:
    """Identity of a statement: method name + index path in the body tree.

    The path alternates list indices and branch-arm indices: a top-level
    statement has path ``(i,)``; statement j of the then/else arm of the if
    at ``(i,)`` has path ``(i, 0, j)`` / ``(i, 1, j)``; a while body uses arm
    0.  Two synthetic shapes exist: inserted awaits extend their call's path
    with ``"w<k>"`` and the implicit return at the end of a method body is
    ``(method, ("end",))``.
    """

    method: str
    path: tuple[PathElem, ...]

    @property
    def sort_key(self):
        return (self.method, tuple(_elem_key(e) for e in self.path))

    def __str__(self) -> str:
        return f"{self.method}:{'.'.join(str(e) for e in self.path)}"

    @staticmethod
    def parse(text: str) -> "StmtId":
        method, _, rest = text.partition(":")
        elems: list[PathElem] = []
        if rest:
            for part in rest.split("."):
                elems.append(int(part) if re.fullmatch(r"-?\d+", part) else part)
        return StmtId(method, tuple(elems))


def implicit_return_id(method: str) -> StmtId:
    return StmtId(method, ("end",))


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class LocalRef:
    name: str


@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class BinOp:
    op: str  # + - == != <
    left: "Expr"
    right: "Expr"


# Internal atoms used by generated instrumentation only; the surface parser
# does not produce them.
@dataclass(frozen=True)
class MyTask:
    """Evaluates to the identifier of the currently executing task."""


@dataclass(frozen=True)
class StmtLit:
    """An opaque statement-identity constant."""

    stmt: StmtId


Expr = Union[IntLit, LocalRef, Star, BinOp, MyTask, StmtLit]


def expr_locals(e: Expr) -> set[str]:
    if isinstance(e, LocalRef):
        return {e.name}
    if isinstance(e, BinOp):
        return expr_locals(e.left) | expr_locals(e.right)
    return set()


def expr_has_star(e: Expr) -> bool:
    if isinstance(e, Star):
        return True
    if isinstance(e, BinOp):
        return expr_has_star(e.left) or expr_has_star(e.right)
    return False


# --------------------------------------------------------------------------
# Statements
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Write:
    """``x := e`` for a global x."""

    id: StmtId
    var: str
    expr: Expr
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Read:
    """``r := x`` for a local r and global x."""

    id: StmtId
    local: str
    var: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    """``r := call m``."""

    id: StmtId
    local: str
    method: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Return:
    id: StmtId
    expr: Optional[Expr]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class AwaitVar:
    id: StmtId
    local: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class AwaitStar:
    id: StmtId
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class If:
    id: StmtId
    cond: Expr
    then: tuple["Stmt", ...]
    els: tuple["Stmt", ...]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class While:
    id: StmtId
    cond: Expr
    body: tuple["Stmt", ...]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


Stmt = Union[Write, Read, Call, Return, AwaitVar, AwaitStar, If, While]

LEAF_KINDS = (Write, Read, Call, Return, AwaitVar, AwaitStar)


# --------------------------------------------------------------------------
# Methods and programs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodDef:
    name: str
    body: tuple[Stmt, ...]

    @property
    def is_async(self) -> bool:
        """A method whose body contains an await must run asynchronously."""
        return any(isinstance(s, (AwaitVar, AwaitStar))
                   for s in iter_stmts(self.body))

    @property
    def is_base(self) -> bool:
        """Base methods contain no call statements."""
        return not any(isinstance(s, Call) for s in iter_stmts(self.body))


@dataclass(frozen=True)
class Program:
    globals: tuple[str, ...]
    asyncify: tuple[str, ...]
    methods: tuple[MethodDef, ...]
    source_name: str = field(default="<input>", compare=False)

    def method(self, name: str) -> MethodDef:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def method_names(self) -> list[str]:
        return [m.name for m in self.methods]

    def has_method(self, name: str) -> bool:
        return any(m.name == name for m in self.methods)

    def stmt(self, sid: StmtId) -> Stmt:
        for s in iter_stmts(self.method(sid.method).body):
            if s.id == sid:
                return s
        raise KeyError(str(sid))

    def stmt_map(self) -> dict[StmtId, Stmt]:
        out: dict[StmtId, Stmt] = {}
        for m in self.methods:
            for s in iter_stmts(m.body):
                out[s.id] = s
        return out

    def with_method(self, name: str, body: tuple[Stmt, ...]) -> "Program":
        methods = tuple(MethodDef(m.name, body) if m.name == name else m
                        for m in self.methods)
        return replace(self, methods=methods)


def iter_stmts(body: tuple[Stmt, ...]) -> Iterator[Stmt]:
    """Preorder walk of a statement list, descending into if/while bodies."""
    for s in body:
        yield s
        if isinstance(s, If):
            yield from iter_stmts(s.then)
            yield from iter_stmts(s.els)
        elif isinstance(s, While):
            yield from iter_stmts(s.body)


def iter_leaves(body: tuple[Stmt, ...]) -> Iterator[Stmt]:
    for s in iter_stmts(body):
        if isinstance(s, LEAF_KINDS):
            yield s


# --------------------------------------------------------------------------
# Tokenizer
# --------------------------------------------------------------------------

_KEYWORDS = {"globals", "asyncify", "method", "call", "await", "return",
             "if", "else", "while"}

_TOKEN_RE = re.compile(r"""
      (?P<ws>[ \t\r\n]+)
    | (?P<comment>//[^\n]*)
    | (?P<assign>:=)
    | (?P<op>==|!=|[+\-<*(){};,])
    | (?P<int>\d+)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)


@dataclass
class _Token:
    kind: str  # 'assign' | 'op' | 'int' | 'ident' | 'kw' | 'eof'
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        value = m.group()
        if kind not in ("ws", "comment"):
            tkind = kind
            if kind == "ident" and value in _KEYWORDS:
                tkind = "kw"
            tokens.append(_Token(tkind, value, line, col))
        nl = value.count("\n")
        if nl:
            line += nl
            col = len(value) - value.rfind("\n")
        else:
            col += len(value)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: list[_Token], strict: bool):
        self.tokens = tokens
        self.pos = 0
        self.strict = strict
        self.globals: list[str] = []
        self.asyncify: list[str] = []

    # -- token helpers ----------------------------------------------------

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            raise ParseError(
                f"expected {want!r}, found {tok.value or 'end of input'!r}",
                tok.line, tok.col, expected=want)
        return self.next()

    def at(self, kind: str, value: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (value is None or tok.value == value)

    # -- grammar ----------------------------------------------------------

    def program(self, source_name: str) -> Program:
        while self.at("kw", "globals") or self.at("kw", "asyncify"):
            target = self.globals if self.peek().value == "globals" else self.asyncify
            self.next()
            target.append(self.expect("ident").value)
            while self.at("op", ","):
                self.next()
                target.append(self.expect("ident").value)
            self.expect("op", ";")

        methods: list[MethodDef] = []
        seen: set[str] = set()
        while self.at("kw", "method"):
            self.next()
            name_tok = self.expect("ident")
            if name_tok.value in seen:
                raise DuplicateMethodError(
                    f"method {name_tok.value!r} defined twice",
                    name_tok.line, name_tok.col)
            seen.add(name_tok.value)
            self.expect("op", "{")
            body = self.block(name_tok.value, ())
            self.expect("op", "}")
            methods.append(MethodDef(name_tok.value, body))
        tok = self.peek()
        if tok.kind != "eof":
            raise ParseError(f"expected 'method', found {tok.value!r}",
                             tok.line, tok.col, expected="method")
        return Program(tuple(self.globals), tuple(self.asyncify),
                       tuple(methods), source_name)

    def block(self, method: str, prefix: tuple[PathElem, ...]) -> tuple[Stmt, ...]:
        stmts: list[Stmt] = []
        while not self.at("op", "}") and not self.at("eof"):
            stmts.append(self.statement(method, prefix + (len(stmts),)))
        return tuple(stmts)

    def statement(self, method: str, path: tuple[PathElem, ...]) -> Stmt:
        sid = StmtId(method, path)
        tok = self.peek()

        if self.at("kw", "await"):
            self.next()
            if self.at("op", "*"):
                self.next()
                self.expect("op", ";")
                return AwaitStar(sid, line=tok.line, col=tok.col)
            name = self.expect("ident")
            if name.value in self.globals:
                raise ParseError(
                    f"await takes a task-holding local, not the global {name.value!r}",
                    name.line, name.col)
            self.expect("op", ";")
            return AwaitVar(sid, name.value, line=tok.line, col=tok.col)

        if self.at("kw", "return"):
            self.next()
            expr = None
            if not self.at("op", ";"):
                expr = self.expr()
            self.expect("op", ";")
            return Return(sid, expr, line=tok.line, col=tok.col)

        if self.at("kw", "if"):
            self.next()
            self.expect("op", "(")
            cond = self.expr()
            self.expect("op", ")")
            self.expect("op", "{")
            then = self.block(method, path + (0,))
            self.expect("op", "}")
            els: tuple[Stmt, ...] = ()
            if self.at("kw", "else"):
                self.next()
                self.expect("op", "{")
                els = self.block(method, path + (1,))
                self.expect("op", "}")
            elif self.strict:
                raise StrictModeError(
                    "if without else (implicit empty else branch)",
                    tok.line, tok.col)
            return If(sid, cond, then, els, line=tok.line, col=tok.col)

        if self.at("kw", "while"):
            self.next()
            self.expect("op", "(")
            cond = self.expr()
            self.expect("op", ")")
            self.expect("op", "{")
            body = self.block(method, path + (0,))
            self.expect("op", "}")
            return While(sid, cond, body, line=tok.line, col=tok.col)

        if self.at("ident"):
            name = self.next()
            self.expect("assign")
            if name.value in self.globals:
                expr = self.expr()
                bad = expr_globals(expr, self.globals)
                if bad:
                    raise ParseError(
                        f"global {sorted(bad)[0]!r} used inside an expression; "
                        f"load it into a local first", name.line, name.col)
                self.expect("op", ";")
                return Write(sid, name.value, expr, line=tok.line, col=tok.col)
            # local target: the right-hand side is a call or a global load
            if self.at("kw", "call"):
                self.next()
                callee = self.expect("ident")
                self.expect("op", ";")
                return Call(sid, name.value, callee.value,
                            line=tok.line, col=tok.col)
            rhs = self.peek()
            if rhs.kind == "ident":
                self.next()
                self.expect("op", ";")
                if rhs.value not in self.globals:
                    raise UndeclaredGlobalError(
                        f"{rhs.value!r} is read as a global but not declared",
                        rhs.line, rhs.col)
                return Read(sid, name.value, rhs.value,
                            line=tok.line, col=tok.col)
            raise ParseError(
                "a local may only be assigned from a global or a call",
                rhs.line, rhs.col, expected="global or call")

        raise ParseError(f"expected a statement, found {tok.value or 'end of input'!r}",
                         tok.line, tok.col, expected="statement")

    # Expressions: one optional comparison over +/- chains.
    def expr(self) -> Expr:
        left = self.arith()
        if self.peek().kind == "op" and self.peek().value in ("==", "!=", "<"):
            op = self.next().value
            right = self.arith()
            return BinOp(op, left, right)
        return left

    def arith(self) -> Expr:
        e = self.atom()
        while self.peek().kind == "op" and self.peek().value in ("+", "-"):
            op = self.next().value
            e = BinOp(op, e, self.atom())
        return e

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "int":
            self.next()
            return IntLit(int(tok.value))
        if tok.kind == "ident":
            self.next()
            return LocalRef(tok.value)
        if self.at("op", "*"):
            self.next()
            return Star()
        if self.at("op", "("):
            self.next()
            e = self.expr()
            self.expect("op", ")")
            return e
        raise ParseError(f"expected an expression, found {tok.value or 'end of input'!r}",
                         tok.line, tok.col, expected="expression")


def expr_globals(e: Expr, globals_: tuple[str, ...] | list[str]) -> set[str]:
    """Locals in `e` whose names collide with declared globals."""
    return {n for n in expr_locals(e) if n in globals_}


def parse_program(text: str, source_name: str = "<input>",
                  strict: bool = False) -> Program:
    """Parse source text into a `Program`.

    Raises `ParseError` (and the other `Diagnostic` subclasses) with line and
    column information.  After the grammar-level parse, the declaration
    checks run: duplicate methods are caught during parsing; unknown callees,
    recursion and asyncify consistency here.
    """
    parser = _Parser(_tokenize(text), strict)
    program = parser.program(source_name)

    names = set(program.method_names())
    if "Main" not in names:
        raise ParseError("no method named 'Main'", 1, 1, expected="Main")

    for m in program.methods:
        task_vars = {s.local for s in iter_stmts(m.body) if isinstance(s, Call)}
        for s in iter_stmts(m.body):
            if isinstance(s, Call) and s.method not in names:
                raise ParseError(f"call to undefined method {s.method!r}",
                                 s.line, s.col)
            # expression-position globals in conditions/returns
            for e in _stmt_exprs(s):
                bad = expr_globals(e, program.globals)
                if bad:
                    raise ParseError(
                        f"global {sorted(bad)[0]!r} used inside an expression; "
                        f"load it into a local first", s.line, s.col)
                # task references are opaque: they may be awaited, never
                # computed with (their identity depends on the schedule)
                used = expr_locals(e) & task_vars
                if used:
                    raise ParseError(
                        f"task variable {sorted(used)[0]!r} used in an "
                        f"expression; task handles can only be awaited",
                        s.line, s.col)

    _check_acyclic(program)

    for name in program.asyncify:
        if name not in names:
            raise ParseError(f"asyncify names undefined method {name!r}", 1, 1)
        if not program.method(name).is_base:
            raise ParseError(
                f"asyncify target {name!r} is not a base method "
                f"(its body contains calls)", 1, 1)

    return program


def _stmt_exprs(s: Stmt) -> list[Expr]:
    if isinstance(s, Write):
        return [s.expr]
    if isinstance(s, Return):
        return [s.expr] if s.expr is not None else []
    if isinstance(s, (If, While)):
        return [s.cond]
    return []


def _check_acyclic(program: Program) -> None:
    calls: dict[str, set[str]] = {m.name: set() for m in program.methods}
    for m in program.methods:
        for s in iter_stmts(m.body):
            if isinstance(s, Call):
                calls[m.name].add(s.method)
    state: dict[str, int] = {}  # 0 visiting, 1 done

    def visit(name: str, chain: list[str]) -> None:
        if state.get(name) == 1:
            return
        if state.get(name) == 0:
            cycle = chain[chain.index(name):] + [name]
            raise RecursionDetectedError(
                "recursive call chain: " + " -> ".join(cycle))
        state[name] = 0
        for callee in sorted(calls[name]):
            visit(callee, chain + [name])
        state[name] = 1

    for m in program.methods:
        visit(m.name, [])


def parse_file(path: str, strict: bool = False) -> Program:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_program(fh.read(), source_name=path, strict=strict)


# --------------------------------------------------------------------------
# Pretty printer
# --------------------------------------------------------------------------

def _expr_text(e: Expr, parent: Optional[str] = None) -> str:
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, LocalRef):
        return e.name
    if isinstance(e, Star):
        return "*"
    if isinstance(e, MyTask):
        return "mytask"
    if isinstance(e, StmtLit):
        return f"#{e.stmt}#"
    if isinstance(e, BinOp):
        text = f"{_expr_text(e.left, e.op)} {e.op} {_expr_text(e.right, '!' + e.op)}"
        # comparisons nest only under parentheses; right-nested +/- too
        cmp_op = e.op in ("==", "!=", "<")
        if parent is None:
            return text
        if cmp_op or parent.startswith("!"):
            return f"({text})"
        return text
    raise TypeError(f"unknown expression {e!r}")


def _stmt_lines(s: Stmt, indent: str) -> list[str]:
    if isinstance(s, Write):
        return [f"{indent}{s.var} := {_expr_text(s.expr)};"]
    if isinstance(s, Read):
        return [f"{indent}{s.local} := {s.var};"]
    if isinstance(s, Call):
        return [f"{indent}{s.local} := call {s.method};"]
    if isinstance(s, Return):
        if s.expr is None:
            return [f"{indent}return;"]
        return [f"{indent}return {_expr_text(s.expr)};"]
    if isinstance(s, AwaitVar):
        return [f"{indent}await {s.local};"]
    if isinstance(s, AwaitStar):
        return [f"{indent}await *;"]
    if isinstance(s, If):
        lines = [f"{indent}if ({_expr_text(s.cond)}) {{"]
        for child in s.then:
            lines.extend(_stmt_lines(child, indent + "  "))
        if s.els:
            lines.append(f"{indent}}} else {{")
            for child in s.els:
                lines.extend(_stmt_lines(child, indent + "  "))
        lines.append(f"{indent}}}")
        return lines
    if isinstance(s, While):
        lines = [f"{indent}while ({_expr_text(s.cond)}) {{"]
        for child in s.body:
            lines.extend(_stmt_lines(child, indent + "  "))
        lines.append(f"{indent}}}")
        return lines
    raise TypeError(f"unknown statement {s!r}")


def pretty_print(program: Program) -> str:
    """Canonical text for a program; `parse_program` round-trips it.

    Round-tripping preserves StmtIds for parser-produced ASTs.  Materialized
    asynchronizations (which contain synthetic await ids) render to the same
    surface syntax, but a reparse assigns fresh position-based ids.
    """
    lines: list[str] = []
    if program.globals:
        lines.append("globals " + ", ".join(program.globals) + ";")
    if program.asyncify:
        lines.append("asyncify " + ", ".join(program.asyncify) + ";")
    if lines:
        lines.append("")
    for m in program.methods:
        lines.append(f"method {m.name} {{")
        for s in m.body:
            lines.extend(_stmt_lines(s, "  "))
        lines.append("}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


# --------------------------------------------------------------------------
# Control-flow graphs
# --------------------------------------------------------------------------

ENTRY = "entry"
EXIT = "exit"

CfgNode = Union[StmtId, str]


@dataclass
class StmtGraph:
    """Statement-level CFG of one method.

    Nodes are StmtIds plus the ENTRY/EXIT sentinels; If/While statements are
    their own (condition) nodes.  `succs`/`preds` are adjacency maps;
    `back_edges` the DFS back edges (while-loop closing edges).
    """

    method: str
    succs: dict[CfgNode, list[CfgNode]]
    preds: dict[CfgNode, list[CfgNode]]
    back_edges: set[tuple[CfgNode, CfgNode]]
    order: list[CfgNode]  # construction (program) order of statement nodes

    def dominators(self) -> dict[CfgNode, set[CfgNode]]:
        """Classic iterative dominator sets over the statement graph."""
        nodes = [ENTRY] + self.order + [EXIT]
        dom: dict[CfgNode, set[CfgNode]] = {n: set(nodes) for n in nodes}
        dom[ENTRY] = {ENTRY}
        changed = True
        while changed:
            changed = False
            for n in nodes:
                if n == ENTRY:
                    continue
                preds = self.preds.get(n, [])
                if preds:
                    new = set.intersection(*(dom[p] for p in preds)) | {n}
                else:
                    new = {n}
                if new != dom[n]:
                    dom[n] = new
                    changed = True
        return dom

    def forward_succs(self) -> dict[CfgNode, list[CfgNode]]:
        """Successor map without back edges (for acyclic reachability)."""
        return {n: [v for v in vs if (n, v) not in self.back_edges]
                for n, vs in self.succs.items()}


def build_stmt_graph(m: MethodDef) -> StmtGraph:
    succs: dict[CfgNode, list[CfgNode]] = {}
    preds: dict[CfgNode, list[CfgNode]] = {}
    back_edges: set[tuple[CfgNode, CfgNode]] = set()
    order: list[CfgNode] = []

    def add_edge(u: CfgNode, v: CfgNode, back: bool = False) -> None:
        succs.setdefault(u, []).append(v)
        preds.setdefault(v, []).append(u)
        if back:
            back_edges.add((u, v))

    def wire(body: tuple[Stmt, ...], heads: list[CfgNode]) -> list[CfgNode]:
        """Connect `heads` to the body and return the body's exit points."""
        current = heads
        for s in body:
            order.append(s.id)
            for h in current:
                add_edge(h, s.id)
            if isinstance(s, Return):
                add_edge(s.id, EXIT)
                current = []  # nothing falls through a return
            elif isinstance(s, If):
                then_exits = wire(s.then, [s.id]) if s.then else [s.id]
                els_exits = wire(s.els, [s.id]) if s.els else [s.id]
                # an empty arm lets the condition fall through directly;
                # using the condition node twice is fine: both edges exist
                current = _dedup(then_exits + els_exits)
            elif isinstance(s, While):
                body_exits = wire(s.body, [s.id]) if s.body else [s.id]
                for e in body_exits:
                    add_edge(e, s.id, back=True)
                current = [s.id]
            else:
                current = [s.id]
        return current

    exits = wire(m.body, [ENTRY])
    for e in exits:
        add_edge(e, EXIT)
    # fix the ordering of if-node successors: then-arm first, else, fallthrough
    return StmtGraph(m.name, succs, preds, back_edges, order)


def _dedup(items: list[CfgNode]) -> list[CfgNode]:
    seen: set[CfgNode] = set()
    out: list[CfgNode] = []
    for it in items:
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


EXIT_BLOCK = -1


@dataclass
class Cfg:
    """Basic-block view of a method's control flow.

    `blocks` holds only real statements — the method entry coincides with
    the first block and `exit` is the virtual block EXIT_BLOCK (-1), which
    stores no statements and whose incoming edges are left implicit.
    """

    method: str
    blocks: dict[int, list[StmtId]]
    edges: set[tuple[int, int]]
    entry: int
    exit: int
    back_edges: set[tuple[int, int]]
    dominators: dict[int, set[int]]
    block_of: dict[StmtId, int]


def build_cfg(m: MethodDef) -> Cfg:
    """Group the statement graph into maximal basic blocks."""
    g = build_stmt_graph(m)
    if not g.order:
        return Cfg(m.name, {0: []}, set(), 0, EXIT_BLOCK, set(), {0: {0}}, {})

    # leaders: the first statement, join points, branch successors and
    # back-edge targets
    leaders: set[CfgNode] = {g.order[0]}
    for n in g.order:
        real_preds = [p for p in g.preds.get(n, []) if p != ENTRY]
        if len(real_preds) > 1:
            leaders.add(n)
        if len(g.succs.get(n, [])) > 1:
            for v in g.succs[n]:
                if v != EXIT:
                    leaders.add(v)
    for _, v in g.back_edges:
        if v != EXIT:
            leaders.add(v)

    ids = itertools.count()
    block_of: dict[CfgNode, int] = {}
    blocks: dict[int, list[StmtId]] = {}

    def absorb(n: CfgNode) -> None:
        """Start a block at leader `n` and absorb its straight-line tail."""
        bid = next(ids)
        blocks[bid] = []
        cur: Optional[CfgNode] = n
        while cur is not None and cur not in block_of:
            block_of[cur] = bid
            blocks[bid].append(cur)
            succs = g.succs.get(cur, [])
            if len(succs) == 1 and succs[0] != EXIT and succs[0] not in leaders:
                cur = succs[0]
            else:
                cur = None

    # deterministic DFS from the first statement, then dead code in order
    worklist: list[CfgNode] = [g.order[0]]
    while worklist:
        n = worklist.pop()
        if n in block_of:
            continue
        absorb(n)
        tail = blocks[block_of[n]][-1]
        for v in reversed(g.succs.get(tail, [])):
            if v != EXIT and v not in block_of:
                worklist.append(v)
    for n in g.order:
        if n not in block_of:
            absorb(n)

    edges: set[tuple[int, int]] = set()
    bback: set[tuple[int, int]] = set()
    for u, vs in g.succs.items():
        if u == ENTRY:
            continue
        for v in vs:
            if v == EXIT:
                continue
            bu, bv = block_of[u], block_of[v]
            if bu != bv or (u, v) in g.back_edges:
                edges.add((bu, bv))
                if (u, v) in g.back_edges:
                    bback.add((bu, bv))

    entry = block_of[g.order[0]]

    # block-level dominators
    bpreds: dict[int, set[int]] = {}
    for u, v in edges:
        bpreds.setdefault(v, set()).add(u)
    all_blocks = sorted(blocks)
    dom: dict[int, set[int]] = {b: set(all_blocks) for b in all_blocks}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for b in all_blocks:
            if b == entry:
                continue
            ps = bpreds.get(b, set())
            new = (set.intersection(*(dom[p] for p in ps)) | {b}) if ps else {b}
            if new != dom[b]:
                dom[b] = new
                changed = True

    return Cfg(m.name, blocks, edges, entry, EXIT_BLOCK, bback, dom, block_of)


# --------------------------------------------------------------------------
# Matching, Σ*, well-formedness
# --------------------------------------------------------------------------

def call_graph(program: Program) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {m.name: set() for m in program.methods}
    for m in program.methods:
        for s in iter_stmts(m.body):
            if isinstance(s, Call):
                out[m.name].add(s.method)
    return out


def sigma_star(program: Program) -> set[str]:
    """Methods that transitively call an asyncified base method."""
    callers: dict[str, set[str]] = {m.name: set() for m in program.methods}
    for caller, callees in call_graph(program).items():
        for callee in callees:
            callers[callee].add(caller)
    result = set(program.asyncify)
    frontier = list(result)
    while frontier:
        name = frontier.pop()
        for caller in callers.get(name, ()):
            if caller not in result:
                result.add(caller)
                frontier.append(caller)
    return result


def topo_order(program: Program) -> list[str]:
    """Method names, callers before callees (Main first among roots)."""
    calls = call_graph(program)
    seen: set[str] = set()
    out: list[str] = []

    def visit(name: str) -> None:
        if name in seen:
            return
        seen.add(name)
        out.append(name)
        for callee in sorted(calls[name]):
            visit(callee)

    if program.has_method("Main"):
        visit("Main")
    for m in program.methods:
        visit(m.name)
    return out


@dataclass(frozen=True)
class Violation:
    condition: int  # 1, 2 or 3; 0 for unmatched awaits
    method: str
    stmts: tuple[StmtId, ...]
    message: str

    def __str__(self) -> str:
        return f"condition {self.condition} in {self.method}: {self.message}"


def binding_calls(m: MethodDef) -> dict[str, list[Call]]:
    """Task variable name → the call statements binding it."""
    out: dict[str, list[Call]] = {}
    for s in iter_stmts(m.body):
        if isinstance(s, Call):
            out.setdefault(s.local, []).append(s)
    return out


def check_well_formed(program: Program, *,
                      require_awaits: bool = False) -> list[Violation]:
    """The three structural conditions on await placement.

    1. every call statement of a method binds a distinct task variable;
    2. an `await r` is reached only through the call that bound r (the
       await's node is dominated by the call's node);
    3. once an async call ran, every path to the method exit passes one of
       its awaits.

    Condition 3 is checked for calls that have at least one await; with
    `require_awaits=True` (used on materialized asynchronizations) a call to
    an async method with no await at all is also a violation.
    """
    violations: list[Violation] = []
    async_methods = sigma_star(program)

    for m in program.methods:
        graph = build_stmt_graph(m)
        dom = graph.dominators()
        by_var = binding_calls(m)

        for var, calls in by_var.items():
            if len(calls) > 1:
                violations.append(Violation(
                    1, m.name, tuple(c.id for c in calls),
                    f"task variable {var!r} bound by {len(calls)} calls"))

        awaits = [s for s in iter_stmts(m.body) if isinstance(s, AwaitVar)]
        for aw in awaits:
            calls = by_var.get(aw.local, [])
            if not calls:
                violations.append(Violation(
                    0, m.name, (aw.id,),
                    f"await of {aw.local!r} which no call binds"))
                continue
            if len(calls) > 1:
                continue  # already a condition-1 violation
            call = calls[0]
            if call.id not in dom[aw.id]:
                violations.append(Violation(
                    2, m.name, (call.id, aw.id),
                    f"await of {aw.local!r} is reachable without passing "
                    f"its call"))

        # condition 3: from each async call, every path to EXIT must pass
        # one of its awaits
        for var, calls in by_var.items():
            if len(calls) != 1:
                continue
            call = calls[0]
            matching = {aw.id for aw in awaits if aw.local == var}
            is_async_call = call.method in async_methods
            if not matching:
                if require_awaits and is_async_call:
                    violations.append(Violation(
                        3, m.name, (call.id,),
                        f"async call binding {var!r} has no await"))
                continue
            # DFS from the call's successors avoiding matching awaits
            stack = list(graph.succs.get(call.id, []))
            seen: set[CfgNode] = set()
            leak = None
            while stack:
                n = stack.pop()
                if n in seen or n in matching:
                    continue
                seen.add(n)
                if n == EXIT:
                    leak = n
                    break
                stack.extend(graph.succs.get(n, []))
            if leak is not None:
                violations.append(Violation(
                    3, m.name, (call.id,) + tuple(sorted(matching, key=lambda s: s.sort_key)),
                    f"a path from the call binding {var!r} reaches the "
                    f"method exit without an await"))

    return violations


def matching_await_map(program: Program) -> dict[StmtId, frozenset[StmtId]]:
    """Map each call statement to the awaits that wait for its task.

    Raises `UnmatchedAwaitError` for an `await r` whose r no call binds.
    """
    out: dict[StmtId, frozenset[StmtId]] = {}
    for m in program.methods:
        by_var = binding_calls(m)
        awaits: dict[str, set[StmtId]] = {}
        for s in iter_stmts(m.body):
            if isinstance(s, AwaitVar):
                if s.local not in by_var:
                    raise UnmatchedAwaitError(
                        f"await of {s.local!r} which no call binds",
                        s.line, s.col)
                awaits.setdefault(s.local, set()).add(s.id)
        for var, calls in by_var.items():
            for c in calls:
                out[c.id] = frozenset(awaits.get(var, set()))
    return out


# --------------------------------------------------------------------------
# Await erasure (asynchronization → base program)
# --------------------------------------------------------------------------

def erase_awaits(program: Program, *, star: bool = True,
                 var: bool = True) -> Program:
    """Remove await statements; remaining StmtIds are unchanged."""

    def walk(body: tuple[Stmt, ...]) -> tuple[Stmt, ...]:
        out: list[Stmt] = []
        for s in body:
            if isinstance(s, AwaitStar) and star:
                continue
            if isinstance(s, AwaitVar) and var:
                continue
            if isinstance(s, If):
                s = replace(s, then=walk(s.then), els=walk(s.els))
            elif isinstance(s, While):
                s = replace(s, body=walk(s.body))
            out.append(s)
        return tuple(out)

    methods = tuple(MethodDef(m.name, walk(m.body)) for m in program.methods)
    return replace(program, methods=methods)


def synchronous_view(program: Program) -> Program:
    """The sequential program: every await erased."""
    return erase_awaits(program, star=True, var=True)

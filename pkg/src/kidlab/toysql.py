"""Synthetic text-to-SQL world: schemas, databases, a closed SQL subset, and its executor.

The grammar is deliberately small::

    query  := SELECT item (, item)* FROM table
              [JOIN table ON col = col]
              [WHERE pred [AND pred]]
              [ORDER BY col (ASC|DESC)] [LIMIT int]
    item   := col | AGG(col)          AGG in COUNT, MAX, MIN, SUM
    pred   := col op literal          op in =, <, >, !=

Column names are unique across a whole schema, so joined columns never need
table qualification.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

# Closed identifier pool. Names come from the first 24, text cell values from the last 8.
IDENTIFIERS = (
    "age", "city", "name", "price", "score", "rank", "color", "size",
    "year", "owner", "level", "model", "brand", "team", "kind", "title",
    "state", "zone", "code", "role", "genre", "label", "shape", "stock",
    "red", "blue", "gold", "jade", "onyx", "ruby", "sand", "teal",
)
NAME_POOL = IDENTIFIERS[:24]
VALUE_POOL = IDENTIFIERS[24:]

AGGREGATES = ("COUNT", "MAX", "MIN", "SUM")
OPERATORS = ("=", "<", ">", "!=")
KEYWORDS = (
    "SELECT", "FROM", "WHERE", "AND", "JOIN", "ON", "ORDER", "BY", "ASC", "DESC", "LIMIT",
) + AGGREGATES
PUNCT = ("(", ")", ",")
# Integer literals that can appear in generated SQL (WHERE thresholds and LIMIT counts).
LITERAL_INTS = (0, 1, 2, 3, 4, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90)
THRESHOLDS = (10, 20, 30, 40, 50, 60, 70, 80, 90)
LIMITS = (1, 2, 3, 4, 5)

INTEGER = "int"
TEXT = "text"

Literal = Union[int, str]


class ParseError(ValueError):
    """Raised for any string outside the grammar; ``index`` is the first offending token."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (token {index})")
        self.index = index


class ExecError(RuntimeError):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


# --------------------------------------------------------------------------- schema


@dataclass(frozen=True)
class Column:
    name: str
    type: str


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[Column, ...]

    def column(self, name: str) -> Column | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None


@dataclass(frozen=True)
class ForeignKey:
    """``child_table.child_column`` references ``parent_table.parent_column``."""

    child_table: str
    child_column: str
    parent_table: str
    parent_column: str


@dataclass(frozen=True)
class Schema:
    tables: tuple[TableDef, ...]
    foreign_key: ForeignKey | None = None

    def table(self, name: str) -> TableDef | None:
        for t in self.tables:
            if t.name == name:
                return t
        return None

    def to_dict(self) -> dict:
        d = {
            "tables": [
                {"name": t.name, "columns": [{"name": c.name, "type": c.type} for c in t.columns]}
                for t in self.tables
            ]
        }
        if self.foreign_key is not None:
            fk = self.foreign_key
            d["foreign_key"] = [fk.child_table, fk.child_column, fk.parent_table, fk.parent_column]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        tables = tuple(
            TableDef(t["name"], tuple(Column(c["name"], c["type"]) for c in t["columns"]))
            for t in d["tables"]
        )
        fk = ForeignKey(*d["foreign_key"]) if d.get("foreign_key") else None
        return cls(tables, fk)


@dataclass(frozen=True)
class Database:
    schema: Schema
    rows: dict[str, list[tuple]]
    seed: int


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Agg:
    func: str
    column: str


SelectItem = Union[str, Agg]


@dataclass(frozen=True)
class Join:
    table: str
    left: str
    right: str


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    value: Literal


@dataclass(frozen=True)
class OrderBy:
    column: str
    descending: bool = False


@dataclass(frozen=True)
class Query:
    select: tuple[SelectItem, ...]
    from_table: str
    join: Join | None = None
    where: tuple[Predicate, ...] = ()
    order_by: OrderBy | None = None
    limit: int | None = None


def _item_text(item: SelectItem) -> str:
    if isinstance(item, Agg):
        return f"{item.func}({item.column})"
    return item


def render_sql(q: Query) -> str:
    """Canonical single-line rendering with uppercase keywords."""
    parts = ["SELECT", ", ".join(_item_text(i) for i in q.select), "FROM", q.from_table]
    if q.join is not None:
        parts += ["JOIN", q.join.table, "ON", q.join.left, "=", q.join.right]
    if q.where:
        conj = " AND ".join(f"{p.column} {p.op} {p.value}" for p in q.where)
        parts += ["WHERE", conj]
    if q.order_by is not None:
        parts += ["ORDER BY", q.order_by.column, "DESC" if q.order_by.descending else "ASC"]
    if q.limit is not None:
        parts += ["LIMIT", str(q.limit)]
    return " ".join(parts)


_LEX = re.compile(r"\s*(!=|[(),=<>]|[A-Za-z_][A-Za-z0-9_]*|\d+|\S)")


def lex(text: str) -> list[str]:
    """Split SQL-ish text into terminals; whitespace only separates."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _LEX.match(text, pos)
        if m is None:  # pragma: no cover - trailing whitespace only
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def _is_ident(tok: str) -> bool:
    return bool(re.fullmatch(r"[a-z_][a-z0-9_]*", tok))


class _Parser:
    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def fail(self, what: str):
        got = self.peek()
        raise ParseError(f"expected {what}, got {got!r}", self.i)

    def expect(self, tok: str):
        if self.peek() != tok:
            self.fail(tok)
        self.i += 1

    def ident(self) -> str:
        tok = self.peek()
        if tok is None or not _is_ident(tok):
            self.fail("identifier")
        self.i += 1
        return tok

    def integer(self) -> int:
        tok = self.peek()
        if tok is None or not tok.isdigit():
            self.fail("integer")
        self.i += 1
        return int(tok)

    def item(self) -> SelectItem:
        tok = self.peek()
        if tok in AGGREGATES:
            self.i += 1
            self.expect("(")
            col = self.ident()
            self.expect(")")
            return Agg(tok, col)
        return self.ident()

    def predicate(self) -> Predicate:
        col = self.ident()
        op = self.peek()
        if op not in OPERATORS:
            self.fail("comparison operator")
        self.i += 1
        tok = self.peek()
        if tok is not None and tok.isdigit():
            value: Literal = self.integer()
        elif tok is not None and _is_ident(tok):
            value = tok
            self.i += 1
        else:
            self.fail("literal")
        return Predicate(col, op, value)

    def query(self) -> Query:
        self.expect("SELECT")
        items = []
        start = self.i
        items.append(self.item())
        while self.peek() == ",":
            self.i += 1
            start = self.i
            items.append(self.item())
            kinds = {isinstance(x, Agg) for x in items}
            if len(kinds) > 1:
                raise ParseError("aggregates mixed with bare columns", start)
        self.expect("FROM")
        table = self.ident()
        join = None
        if self.peek() == "JOIN":
            self.i += 1
            jt = self.ident()
            self.expect("ON")
            left = self.ident()
            self.expect("=")
            right = self.ident()
            join = Join(jt, left, right)
        where: list[Predicate] = []
        if self.peek() == "WHERE":
            self.i += 1
            where.append(self.predicate())
            if self.peek() == "AND":
                self.i += 1
                where.append(self.predicate())
        order = None
        if self.peek() == "ORDER":
            self.i += 1
            self.expect("BY")
            col = self.ident()
            direction = self.peek()
            if direction not in ("ASC", "DESC"):
                self.fail("ASC or DESC")
            self.i += 1
            order = OrderBy(col, direction == "DESC")
        limit = None
        if self.peek() == "LIMIT":
            self.i += 1
            limit = self.integer()
            if limit < 1:
                raise ParseError("LIMIT must be positive", self.i - 1)
        if self.peek() is not None:
            self.fail("end of query")
        return Query(tuple(items), table, join, tuple(where), order, limit)


def parse_sql(text: str) -> Query:
    """Parse text in the closed grammar; raises :class:`ParseError` otherwise."""
    return _Parser(lex(text)).query()


# --------------------------------------------------------------------------- execution


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    ordered: bool = False

    def matches(self, other: "ResultSet", ordered: bool | None = None) -> bool:
        """Row equality; multiset unless ``ordered`` (defaults to this set's own flag)."""
        if ordered is None:
            ordered = self.ordered
        if ordered:
            return self.rows == other.rows
        return Counter(self.rows) == Counter(other.rows)


def _scope(q: Query, schema: Schema) -> list[TableDef]:
    names = [q.from_table] + ([q.join.table] if q.join else [])
    tables = []
    for n in names:
        t = schema.table(n)
        if t is None:
            raise ExecError("unknown_name", n)
        tables.append(t)
    if len(names) == 2 and names[0] == names[1]:
        raise ExecError("ambiguous_name", names[0])
    return tables


def _resolve(name: str, layout: dict[str, tuple[int, str]]) -> tuple[int, str]:
    if name not in layout:
        raise ExecError("unknown_name", name)
    return layout[name]


_COMPARE = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
}


def execute(q: Query, db: Database) -> ResultSet:
    """Evaluate ``q`` against ``db``: join, filter, aggregate or project, order, limit."""
    tables = _scope(q, db.schema)
    layout: dict[str, tuple[int, str]] = {}
    offset = 0
    for t in tables:
        for j, c in enumerate(t.columns):
            if c.name in layout:
                raise ExecError("ambiguous_name", c.name)
            layout[c.name] = (offset + j, c.type)
        offset += len(t.columns)

    base = db.rows[tables[0].name]
    if q.join is not None:
        li, lt = _resolve(q.join.left, layout)
        ri, rt = _resolve(q.join.right, layout)
        if lt != rt:
            raise ExecError("type_mismatch", f"{q.join.left} = {q.join.right}")
        other = db.rows[tables[1].name]
        rows = [a + b for a in base for b in other if (a + b)[li] == (a + b)[ri]]
    else:
        rows = list(base)

    for p in q.where:
        idx, typ = _resolve(p.column, layout)
        if (typ == INTEGER) != isinstance(p.value, int):
            raise ExecError("type_mismatch", f"{p.column} {p.op} {p.value}")
        cmp = _COMPARE[p.op]
        rows = [r for r in rows if cmp(r[idx], p.value)]

    names = tuple(_item_text(i) for i in q.select)
    if isinstance(q.select[0], Agg):
        out = []
        for item in q.select:
            idx, typ = _resolve(item.column, layout)
            vals = [r[idx] for r in rows]
            if item.func == "COUNT":
                out.append(len(vals))
            elif item.func == "SUM":
                if typ != INTEGER:
                    raise ExecError("type_mismatch", f"SUM({item.column})")
                out.append(sum(vals) if vals else None)
            elif item.func == "MAX":
                out.append(max(vals) if vals else None)
            else:
                out.append(min(vals) if vals else None)
        result = [tuple(out)]
        # ORDER BY / LIMIT on a single aggregate row only need validating.
        if q.order_by is not None:
            _resolve(q.order_by.column, layout)
        if q.limit is not None:
            result = result[: q.limit]
        return ResultSet(names, tuple(result), q.order_by is not None)

    idxs = [_resolve(c, layout)[0] for c in q.select]
    if q.order_by is not None:
        oi, _ = _resolve(q.order_by.column, layout)
        rows = sorted(rows, key=lambda r: r[oi], reverse=q.order_by.descending)
    if q.limit is not None:
        rows = rows[: q.limit]
    result = tuple(tuple(r[i] for i in idxs) for r in rows)
    return ResultSet(names, result, q.order_by is not None)


def results_match(gold: ResultSet, pred: ResultSet) -> bool:
    """Execution-accuracy comparison: order matters only when the gold query orders."""
    return gold.matches(pred, ordered=gold.ordered)


# --------------------------------------------------------------------------- generation


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def random_schema(rng: np.random.Generator, two_tables: bool | None = None) -> Schema:
    if two_tables is None:
        two_tables = bool(rng.random() < 0.5)
    n_tables = 2 if two_tables else 1
    n_cols = [int(rng.integers(2, 6)) for _ in range(n_tables)]
    names = [str(n) for n in rng.choice(NAME_POOL, size=n_tables + sum(n_cols), replace=False)]
    tables = []
    for t in range(n_tables):
        tname = names.pop()
        cols = [Column(names.pop(), INTEGER)]
        for _ in range(n_cols[t] - 1):
            cols.append(Column(names.pop(), INTEGER if rng.random() < 0.5 else TEXT))
        tables.append(TableDef(tname, tuple(cols)))
    fk = None
    if n_tables == 2:
        parent, child = tables
        pc = [c for c in parent.columns if c.type == INTEGER]
        cc = [c for c in child.columns if c.type == INTEGER]
        fk = ForeignKey(
            child.name, cc[int(rng.integers(len(cc)))].name,
            parent.name, pc[int(rng.integers(len(pc)))].name,
        )
    return Schema(tuple(tables), fk)


def make_database(schema: Schema, seed: int) -> Database:
    """Regenerate table contents deterministically from ``(schema, seed)``."""
    rng = np.random.default_rng(seed)
    rows: dict[str, list[tuple]] = {}
    for t in schema.tables:
        n = int(rng.integers(3, 21))
        cols = []
        for c in t.columns:
            if c.type == INTEGER:
                cols.append([int(v) for v in rng.integers(0, 100, size=n)])
            else:
                cols.append([str(v) for v in rng.choice(VALUE_POOL, size=n)])
        rows[t.name] = [tuple(col[i] for col in cols) for i in range(n)]
    fk = schema.foreign_key
    if fk is not None:
        parent = schema.table(fk.parent_table)
        child = schema.table(fk.child_table)
        pi = [c.name for c in parent.columns].index(fk.parent_column)
        ci = [c.name for c in child.columns].index(fk.child_column)
        keys = [r[pi] for r in rows[parent.name]]
        new = []
        for r in rows[child.name]:
            r = list(r)
            r[ci] = keys[int(rng.integers(len(keys)))]
            new.append(tuple(r))
        rows[child.name] = new
    return Database(schema, rows, seed)


# --------------------------------------------------------------------------- questions

_OP_WORDS = {">": ["above"], "<": ["below"], "=": ["is"], "!=": ["is", "not"]}
QUESTION_WORDS = (
    "show", "how", "many", "largest", "smallest", "total", "in", "with", "where", "and",
    "above", "below", "is", "not", "sorted", "by", "up", "down", "first",
)
_AGG_WORDS = {"COUNT": ["how", "many"], "MAX": ["largest"], "MIN": ["smallest"], "SUM": ["total"]}


def question_for(q: Query) -> str:
    """Template question whose content words determine ``q`` given the schema."""
    words: list[str] = []
    if isinstance(q.select[0], Agg):
        words += _AGG_WORDS[q.select[0].func] + [q.select[0].column]
    else:
        words += ["show", q.select[0]]
        for c in q.select[1:]:
            words += ["and", c]
    words += ["in", q.from_table]
    if q.join is not None:
        words += ["with", q.join.table]
    for k, p in enumerate(q.where):
        words += ["where" if k == 0 else "and", p.column] + _OP_WORDS[p.op] + [str(p.value)]
    if q.order_by is not None:
        words += ["sorted", "by", q.order_by.column, "down" if q.order_by.descending else "up"]
    if q.limit is not None:
        words += ["first", str(q.limit)]
    return " ".join(words)


def serialize_schema(schema: Schema) -> str:
    parts = []
    for t in schema.tables:
        cols = " ".join(f"{c.name} {c.type}" for c in t.columns)
        parts.append(f"{t.name}({cols})")
    if schema.foreign_key is not None:
        fk = schema.foreign_key
        parts.append(f"ON {fk.child_column} = {fk.parent_column}")
    return " ".join(parts)


def prompt_text(schema: Schema, question: str) -> str:
    """Serialized prompt body (BOS is added by the tokenizer)."""
    return f"{serialize_schema(schema)} | {question} ?"


def _random_predicate(rng: np.random.Generator, cols: Sequence[Column]) -> Predicate:
    c = cols[int(rng.integers(len(cols)))]
    if c.type == INTEGER:
        op = str(rng.choice(["<", ">", ">", "<", "!="]))
        return Predicate(c.name, op, int(rng.choice(THRESHOLDS)))
    op = "=" if rng.random() < 0.7 else "!="
    return Predicate(c.name, op, str(rng.choice(VALUE_POOL)))


def random_query(rng: np.random.Generator, schema: Schema) -> Query:
    """Random schema-valid query in the generator's distribution."""
    use_join = schema.foreign_key is not None and rng.random() < 0.5
    if use_join:
        fk = schema.foreign_key
        base = schema.table(fk.parent_table)
        other = schema.table(fk.child_table)
        cols = list(base.columns) + list(other.columns)
        join = Join(other.name, fk.child_column, fk.parent_column)
    else:
        base = schema.tables[int(rng.integers(len(schema.tables)))]
        cols = list(base.columns)
        join = None

    kind = rng.random()
    order = None
    limit = None
    if kind < 0.35:
        ints = [c for c in cols if c.type == INTEGER]
        func = str(rng.choice(AGGREGATES))
        pool = cols if func == "COUNT" else ints
        select: tuple[SelectItem, ...] = (Agg(func, pool[int(rng.integers(len(pool)))].name),)
    else:
        n = 1 if rng.random() < 0.6 or len(cols) < 2 else 2
        if use_join:
            # one column from each side keeps join questions meaningful
            a = base.columns[int(rng.integers(len(base.columns)))].name
            b = other.columns[int(rng.integers(len(other.columns)))].name
            select = (a, b) if n == 2 else (b,)
        else:
            picks = rng.choice(len(cols), size=n, replace=False)
            select = tuple(cols[int(i)].name for i in picks)
        if rng.random() < 0.35:
            oc = cols[int(rng.integers(len(cols)))]
            order = OrderBy(oc.name, bool(rng.random() < 0.5))
            if rng.random() < 0.6:
                limit = int(rng.choice(LIMITS))

    n_pred = int(rng.choice([0, 1, 1, 2]))
    where = []
    used = set()
    for _ in range(n_pred):
        p = _random_predicate(rng, cols)
        if p.column in used:
            continue
        used.add(p.column)
        where.append(p)
    return Query(select, base.name, join, tuple(where), order, limit)


def _acceptable(q: Query, db: Database) -> bool:
    rs = execute(q, db)
    if isinstance(q.select[0], Agg):
        return all(v is not None for v in rs.rows[0]) and (
            q.select[0].func != "COUNT" or rs.rows[0][0] > 0
        )
    return len(rs.rows) > 0


@dataclass
class Example:
    question: str
    prompt: str
    gold: Query
    gold_sql: str
    db_seed: int
    schema_id: int
    split: str

    @property
    def schema_text(self) -> str:
        return self.prompt.split(" | ")[0]


@dataclass
class ToyWorld:
    seed: int
    schemas: list[Schema]
    train: list[Example] = field(default_factory=list)
    eval: list[Example] = field(default_factory=list)

    def database(self, ex: Example, variant: int = 0) -> Database:
        """Example database; ``variant > 0`` gives the extra test-suite instances."""
        seed = ex.db_seed if variant == 0 else derive_seed(ex.db_seed, variant)
        return make_database(self.schemas[ex.schema_id], seed)

    @property
    def examples(self) -> list[Example]:
        return self.train + self.eval

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "schemas": [s.to_dict() for s in self.schemas],
            "examples": [
                {
                    "question": e.question,
                    "gold_sql_text": e.gold_sql,
                    "db_seed": e.db_seed,
                    "schema_id": e.schema_id,
                    "split": e.split,
                }
                for e in self.examples
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ToyWorld":
        doc = json.loads(text)
        schemas = [Schema.from_dict(s) for s in doc["schemas"]]
        world = cls(int(doc.get("seed", 0)), schemas)
        for e in doc["examples"]:
            gold = parse_sql(e["gold_sql_text"])
            sid = int(e["schema_id"])
            ex = Example(
                e["question"], prompt_text(schemas[sid], e["question"]), gold,
                e["gold_sql_text"], int(e["db_seed"]), sid, e["split"],
            )
            (world.train if ex.split == "train" else world.eval).append(ex)
        return world


def n_schemas_for(n_examples: int) -> int:
    return max(8, min(64, n_examples // 25))


def generate_world(seed: int, n_train: int, n_eval: int) -> ToyWorld:
    """Pure function of its arguments; every example draws from its own RNG stream."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    n_schemas = n_schemas_for(n_train + n_eval)
    srng = np.random.default_rng(derive_seed(seed, 0xC0FFEE))
    schemas = [random_schema(srng, two_tables=(i % 2 == 1)) for i in range(n_schemas)]
    world = ToyWorld(seed, schemas)

    seen: set[str] = set()
    idx = 0
    for split, count in (("train", n_train), ("eval", n_eval)):
        out = world.train if split == "train" else world.eval
        while len(out) < count:
            rng = np.random.default_rng(derive_seed(seed, idx))
            idx += 1
            sid = int(rng.integers(n_schemas))
            schema = schemas[sid]
            db_seed = derive_seed(seed, idx, 1)
            db = make_database(schema, db_seed)
            q = None
            for _ in range(12):
                cand = random_query(rng, schema)
                if _acceptable(cand, db):
                    q = cand
                    break
            if q is None:
                continue
            question = question_for(q)
            prompt = prompt_text(schema, question)
            if prompt in seen:
                continue
            seen.add(prompt)
            out.append(Example(question, prompt, q, render_sql(q), db_seed, sid, split))
    return world


def iter_random_cases(seed: int, n: int) -> Iterable[tuple[Query, Database]]:
    """Random (query, database) pairs straight from the generator distribution."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        schema = random_schema(rng)
        db = make_database(schema, int(rng.integers(0, 2**63)))
        yield random_query(rng, schema), db

"""Core stream model: events, schemas, window semantics and the query language.

Time is integer milliseconds everywhere; float time never enters a
comparison. A sliding window evaluated at time ``t`` covers the interval
``(t - delay - size, t - delay]`` -- open at the tail, closed at the head,
so the triggering event is always part of its own evaluation when the
window is not delayed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

MILLISECOND = 1
SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR

FIELD_KINDS = ("int64", "float64", "string", "bool")
NUMERIC_KINDS = ("int64", "float64")

AGGREGATORS = ("sum", "count", "avg", "min", "max", "stddev", "count_distinct")
FIELDLESS_AGGREGATORS = ("count",)
NUMERIC_AGGREGATORS = ("sum", "avg", "min", "max", "stddev")

WINDOW_KINDS = ("sliding", "tumbling", "infinite")

_TIME_UNITS = {
    "MILLISECOND": MILLISECOND,
    "MILLISECONDS": MILLISECOND,
    "SECOND": SECOND,
    "SECONDS": SECOND,
    "MINUTE": MINUTE,
    "MINUTES": MINUTE,
    "HOUR": HOUR,
    "HOURS": HOUR,
    "DAY": DAY,
    "DAYS": DAY,
}


class ModelError(ValueError):
    """Invalid schema, window, query or filter construction."""


@dataclass(frozen=True)
class EventSchema:
    """Ordered field layout for one version of a stream's events."""

    schema_id: int
    fields: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = [name for name, _ in self.fields]
        if len(set(names)) != len(names):
            raise ModelError(f"duplicate field names in schema {self.schema_id}")
        for name, kind in self.fields:
            if kind not in FIELD_KINDS:
                raise ModelError(f"unknown field kind {kind!r} for field {name!r}")

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)

    def index_of(self, name: str) -> int:
        for i, (fname, _) in enumerate(self.fields):
            if fname == name:
                return i
        raise ModelError(f"unknown field {name!r}")

    def kind_of(self, name: str) -> str:
        return self.fields[self.index_of(name)][1]

    def has_field(self, name: str) -> bool:
        return any(fname == name for fname, _ in self.fields)

    def check_values(self, values: tuple) -> None:
        if len(values) != len(self.fields):
            raise ModelError(
                f"expected {len(self.fields)} values, got {len(values)}"
            )
        for (name, kind), v in zip(self.fields, values):
            if not _value_matches_kind(v, kind):
                raise ModelError(f"field {name!r} expects {kind}, got {v!r}")

    def make_event(self, event_id: str, ts: int, values: tuple) -> "Event":
        values = tuple(values)
        self.check_values(values)
        return Event(id=event_id, ts=ts, schema_id=self.schema_id, values=values)


def _value_matches_kind(v, kind: str) -> bool:
    if kind == "int64":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "float64":
        return isinstance(v, float)
    if kind == "string":
        return isinstance(v, str)
    if kind == "bool":
        return isinstance(v, bool)
    return False


@dataclass(slots=True)
class Event:
    """One timestamped record; ``id`` is the deduplication key.

    Treated as immutable after construction. ``values`` are positional,
    ordered per the schema identified by ``schema_id``.
    """

    id: str
    ts: int
    schema_id: int
    values: tuple

    def __post_init__(self):
        if not self.id:
            raise ModelError("event id must be non-empty")
        if self.ts < 0:
            raise ModelError("event timestamp must be non-negative")


@dataclass(frozen=True)
class WindowSpec:
    kind: str
    size_ms: int | None = None
    delay_ms: int = 0

    def __post_init__(self):
        if self.kind not in WINDOW_KINDS:
            raise ModelError(f"unknown window kind {self.kind!r}")
        if self.kind == "infinite":
            if self.size_ms is not None:
                raise ModelError("infinite windows take no size")
        else:
            if self.size_ms is None or self.size_ms <= 0:
                raise ModelError(f"{self.kind} window needs size_ms > 0")
        if self.delay_ms < 0:
            raise ModelError("delay_ms must be >= 0")


@dataclass(frozen=True)
class HoppingSpec:
    """Fixed overlapping windows; kept only as a comparison baseline."""

    size_ms: int
    hop_ms: int

    def __post_init__(self):
        if not (0 < self.hop_ms <= self.size_ms):
            raise ModelError("need 0 < hop_ms <= size_ms")
        if self.size_ms % self.hop_ms != 0:
            raise ModelError("size_ms must be divisible by hop_ms")


def window_bounds(spec: WindowSpec, t_event: int) -> tuple[int | None, int]:
    """Interval covered by an evaluation at ``t_event``.

    Returns ``(start_exclusive, end_inclusive)``; ``start_exclusive`` is
    None for infinite windows. An event ``e`` is in the evaluation iff
    ``start < e.ts <= end``.
    """
    end = t_event - spec.delay_ms
    if spec.kind == "infinite":
        return None, end
    if spec.kind == "sliding":
        return end - spec.size_ms, end
    # tumbling: epoch-aligned interval containing `end`, truncated at `end`
    start = (end // spec.size_ms) * spec.size_ms if end >= 0 else None
    if start is None:
        return end - 1, end
    return start - 1, end


def window_contains(spec: WindowSpec, t_event: int, t_i: int) -> bool:
    start, end = window_bounds(spec, t_event)
    if start is None:
        return t_i <= end
    return start < t_i <= end


def expiry_threshold(spec: WindowSpec, t_event: int) -> int | None:
    """Largest timestamp that is already outside the window at ``t_event``.

    Events with ``ts <= threshold`` have expired; None means nothing ever
    expires (infinite windows).
    """
    start, _ = window_bounds(spec, t_event)
    return start


def hopping_state_count(spec: HoppingSpec) -> int:
    """Number of concurrently active physical window states."""
    return spec.size_ms // spec.hop_ms


def hopping_memberships(spec: HoppingSpec, t_i: int) -> list[int]:
    """Start times of the epoch-aligned hopping windows containing ``t_i``.

    A window starting at ``w`` covers ``w <= t < w + size``; starts are the
    multiples of the hop in ``(t_i - size, t_i]``, clipped at epoch 0.
    """
    lo = t_i - spec.size_ms
    first = (lo // spec.hop_ms + 1) * spec.hop_ms
    first = max(first, 0)
    return list(range(first, t_i + 1, spec.hop_ms))


# --------------------------------------------------------------------------
# Filter expressions
# --------------------------------------------------------------------------

_COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class FieldRef:
    name: str


@dataclass(frozen=True)
class Literal:
    value: object  # int, float, str or bool


@dataclass(frozen=True)
class Compare:
    op: str
    left: object  # FieldRef | Literal
    right: object

    def __post_init__(self):
        if self.op not in _COMPARE_OPS:
            raise ModelError(f"unknown comparison operator {self.op!r}")


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: object


FilterExpr = object  # Compare | And | Or | Not


def _operand_kind(operand, schema: EventSchema) -> str:
    if isinstance(operand, FieldRef):
        if not schema.has_field(operand.name):
            raise ModelError(f"unknown field {operand.name!r} in filter")
        return schema.kind_of(operand.name)
    if isinstance(operand, Literal):
        v = operand.value
        if isinstance(v, bool):
            return "bool"
        if isinstance(v, int):
            return "int64"
        if isinstance(v, float):
            return "float64"
        if isinstance(v, str):
            return "string"
    raise ModelError(f"bad filter operand {operand!r}")


def typecheck_filter(expr: FilterExpr, schema: EventSchema) -> None:
    """Raises ModelError on unknown fields or kind mismatches."""
    if isinstance(expr, Compare):
        lk = _operand_kind(expr.left, schema)
        rk = _operand_kind(expr.right, schema)
        numeric = {"int64", "float64"}
        if lk in numeric and rk in numeric:
            return
        if lk == rk == "string":
            return
        if lk == rk == "bool":
            if expr.op in ("=", "!="):
                return
            raise ModelError(f"operator {expr.op!r} not defined for bool")
        raise ModelError(f"type mismatch in filter: {lk} {expr.op} {rk}")
    elif isinstance(expr, (And, Or)):
        for item in expr.items:
            typecheck_filter(item, schema)
    elif isinstance(expr, Not):
        typecheck_filter(expr.item, schema)
    else:
        raise ModelError(f"bad filter node {expr!r}")


def _operand_value(operand, values: tuple, schema: EventSchema):
    if isinstance(operand, Literal):
        return operand.value
    idx = schema.index_of(operand.name)
    return values[idx]


def eval_filter_values(expr: FilterExpr, values: tuple, schema: EventSchema) -> bool:
    """Deterministic, side-effect-free evaluation over a value tuple.

    Comparisons against an absent value (None, possible after schema
    evolution) are false; boolean combinators are ordinary two-valued.
    """
    if isinstance(expr, Compare):
        left = _operand_value(expr.left, values, schema)
        right = _operand_value(expr.right, values, schema)
        if left is None or right is None:
            return False
        if expr.op == "=":
            return left == right
        if expr.op == "!=":
            return left != right
        if expr.op == "<":
            return left < right
        if expr.op == "<=":
            return left <= right
        if expr.op == ">":
            return left > right
        return left >= right
    if isinstance(expr, And):
        return all(eval_filter_values(i, values, schema) for i in expr.items)
    if isinstance(expr, Or):
        return any(eval_filter_values(i, values, schema) for i in expr.items)
    if isinstance(expr, Not):
        return not eval_filter_values(expr.item, values, schema)
    raise ModelError(f"bad filter node {expr!r}")


def eval_filter(expr: FilterExpr, event: Event, schema: EventSchema) -> bool:
    return eval_filter_values(expr, event.values, schema)


def render_filter(expr: FilterExpr) -> str:
    if isinstance(expr, Compare):
        return f"{_render_operand(expr.left)} {expr.op} {_render_operand(expr.right)}"
    if isinstance(expr, And):
        return " AND ".join(_render_boolean_child(i, And) for i in expr.items)
    if isinstance(expr, Or):
        return " OR ".join(_render_boolean_child(i, Or) for i in expr.items)
    if isinstance(expr, Not):
        return f"NOT ({render_filter(expr.item)})"
    raise ModelError(f"bad filter node {expr!r}")


def _render_boolean_child(item, parent_cls) -> str:
    if isinstance(item, (And, Or)) and not isinstance(item, parent_cls):
        return f"({render_filter(item)})"
    if isinstance(item, And) and parent_cls is And:
        return f"({render_filter(item)})"
    if isinstance(item, Or) and parent_cls is Or:
        return f"({render_filter(item)})"
    return render_filter(item)


def _render_operand(operand) -> str:
    if isinstance(operand, FieldRef):
        return operand.name
    v = operand.value
    if isinstance(v, bool):
        return "TRUE" if v else "FALSE"
    if isinstance(v, str):
        return '"' + v.replace('"', '\\"') + '"'
    return repr(v)


# --------------------------------------------------------------------------
# Metric queries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricQuery:
    name: str
    aggregator: str
    field: str | None
    group_by: tuple[str, ...]
    window: WindowSpec
    filter: FilterExpr | None = None

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ModelError(f"unknown aggregator {self.aggregator!r}")
        if self.aggregator in FIELDLESS_AGGREGATORS:
            if self.field is not None:
                raise ModelError(f"{self.aggregator} takes no field")
        elif self.field is None:
            raise ModelError(f"{self.aggregator} requires a field")
        if not self.group_by:
            raise ModelError("group_by must be non-empty")

    @property
    def partitioner(self) -> str:
        """First group-by field routes the stream for this query."""
        return self.group_by[0]

    def validate_against(self, schema: EventSchema) -> None:
        if self.field is not None:
            if not schema.has_field(self.field):
                raise ModelError(f"unknown field {self.field!r}")
            if (
                self.aggregator in NUMERIC_AGGREGATORS
                and schema.kind_of(self.field) not in NUMERIC_KINDS
            ):
                raise ModelError(
                    f"{self.aggregator} needs a numeric field, "
                    f"{self.field!r} is {schema.kind_of(self.field)}"
                )
        for g in self.group_by:
            if not schema.has_field(g):
                raise ModelError(f"unknown group-by field {g!r}")
        if self.filter is not None:
            typecheck_filter(self.filter, schema)


@dataclass(frozen=True)
class ParsedQuery:
    """One parsed statement: several metrics over one stream."""

    stream: str
    metrics: tuple[MetricQuery, ...]


class QuerySyntaxError(ModelError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+\.\d+|\d+)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<op><=|>=|!=|<>|=|<|>|\(|\)|,|\*)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "RANGE", "DELAY", "INFINITE",
    "AND", "OR", "NOT", "TRUE", "FALSE",
}


@dataclass
class _Token:
    kind: str  # number | string | op | word | keyword | end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            kind = m.lastgroup
            tok = m.group()
            if kind == "word" and tok.upper() in _KEYWORDS:
                kind, tok = "keyword", tok.upper()
            if kind == "op" and tok == "<>":
                tok = "!="
            tokens.append(_Token(kind, tok, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.cur
        self.i += 1
        return tok

    def expect_keyword(self, word: str) -> None:
        if self.cur.kind != "keyword" or self.cur.text != word:
            raise QuerySyntaxError(f"expected {word}", self.cur.pos)
        self.advance()

    def expect_op(self, op: str) -> None:
        if self.cur.kind != "op" or self.cur.text != op:
            raise QuerySyntaxError(f"expected {op!r}", self.cur.pos)
        self.advance()

    def expect_word(self, what: str) -> str:
        if self.cur.kind != "word":
            raise QuerySyntaxError(f"expected {what}", self.cur.pos)
        return self.advance().text

    def at_keyword(self, word: str) -> bool:
        return self.cur.kind == "keyword" and self.cur.text == word

    # SELECT agg(field|*) [, ...] FROM stream [WHERE filter]
    # GROUP BY fields [RANGE n unit | RANGE INFINITE] [DELAY n unit]
    def parse(self) -> ParsedQuery:
        self.expect_keyword("SELECT")
        selects = [self._parse_select_item()]
        while self.cur.kind == "op" and self.cur.text == ",":
            self.advance()
            selects.append(self._parse_select_item())

        self.expect_keyword("FROM")
        stream = self.expect_word("stream name")

        filt = None
        if self.at_keyword("WHERE"):
            self.advance()
            filt = self._parse_or()

        self.expect_keyword("GROUP")
        self.expect_keyword("BY")
        group_by = [self.expect_word("group-by field")]
        while self.cur.kind == "op" and self.cur.text == ",":
            self.advance()
            group_by.append(self.expect_word("group-by field"))

        window = self._parse_window()

        if self.cur.kind != "end":
            raise QuerySyntaxError("trailing input", self.cur.pos)

        metrics = []
        used = set()
        for agg, fld in selects:
            base = agg if fld is None else f"{agg}_{fld}"
            name = base
            n = 2
            while name in used:
                name = f"{base}_{n}"
                n += 1
            used.add(name)
            metrics.append(
                MetricQuery(
                    name=name,
                    aggregator=agg,
                    field=fld,
                    group_by=tuple(group_by),
                    window=window,
                    filter=filt,
                )
            )
        return ParsedQuery(stream=stream, metrics=tuple(metrics))

    def _parse_select_item(self) -> tuple[str, str | None]:
        tok = self.cur
        if tok.kind != "word" or tok.text.lower() not in AGGREGATORS:
            raise QuerySyntaxError("expected aggregator", tok.pos)
        agg = self.advance().text.lower()
        self.expect_op("(")
        if self.cur.kind == "op" and self.cur.text == "*":
            self.advance()
            fld = None
        else:
            fld = self.expect_word("field name")
        self.expect_op(")")
        if agg in FIELDLESS_AGGREGATORS and fld is not None:
            raise QuerySyntaxError(f"{agg} takes (*)", tok.pos)
        if agg not in FIELDLESS_AGGREGATORS and fld is None:
            raise QuerySyntaxError(f"{agg} needs a field", tok.pos)
        return agg, fld

    def _parse_window(self) -> WindowSpec:
        size = None
        infinite = False
        delay = 0
        if self.at_keyword("RANGE"):
            self.advance()
            if self.at_keyword("INFINITE"):
                self.advance()
                infinite = True
            else:
                size = self._parse_duration()
        if self.at_keyword("DELAY"):
            self.advance()
            delay = self._parse_duration()
        if not infinite and size is None:
            raise QuerySyntaxError("window required: RANGE <n> <unit> or RANGE INFINITE",
                                   self.cur.pos)
        if infinite:
            return WindowSpec(kind="infinite", delay_ms=delay)
        return WindowSpec(kind="sliding", size_ms=size, delay_ms=delay)

    def _parse_duration(self) -> int:
        tok = self.cur
        if tok.kind != "number" or "." in tok.text:
            raise QuerySyntaxError("expected integer duration", tok.pos)
        n = int(self.advance().text)
        unit_tok = self.cur
        if unit_tok.kind != "word" or unit_tok.text.upper() not in _TIME_UNITS:
            raise QuerySyntaxError("expected time unit", unit_tok.pos)
        self.advance()
        return n * _TIME_UNITS[unit_tok.text.upper()]

    # OR-precedence grammar: NOT > AND > OR
    def _parse_or(self) -> FilterExpr:
        items = [self._parse_and()]
        while self.at_keyword("OR"):
            self.advance()
            items.append(self._parse_and())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def _parse_and(self) -> FilterExpr:
        items = [self._parse_not()]
        while self.at_keyword("AND"):
            self.advance()
            items.append(self._parse_not())
        return items[0] if len(items) == 1 else And(tuple(items))

    def _parse_not(self) -> FilterExpr:
        if self.at_keyword("NOT"):
            pos = self.cur.pos
            self.advance()
            return Not(self._parse_not())
        if self.cur.kind == "op" and self.cur.text == "(":
            self.advance()
            inner = self._parse_or()
            self.expect_op(")")
            return inner
        return self._parse_comparison()

    def _parse_comparison(self) -> Compare:
        left = self._parse_operand()
        tok = self.cur
        if tok.kind != "op" or tok.text not in _COMPARE_OPS:
            raise QuerySyntaxError("expected comparison operator", tok.pos)
        op = self.advance().text
        right = self._parse_operand()
        return Compare(op, left, right)

    def _parse_operand(self):
        tok = self.cur
        if tok.kind == "number":
            self.advance()
            return Literal(float(tok.text) if "." in tok.text else int(tok.text))
        if tok.kind == "string":
            self.advance()
            body = tok.text[1:-1]
            return Literal(body.replace('\\"', '"').replace("\\'", "'"))
        if tok.kind == "keyword" and tok.text in ("TRUE", "FALSE"):
            self.advance()
            return Literal(tok.text == "TRUE")
        if tok.kind == "word":
            self.advance()
            return FieldRef(tok.text)
        raise QuerySyntaxError("expected field or literal", tok.pos)


def parse_query(text: str, schema: EventSchema | None = None) -> ParsedQuery:
    """Parse one statement into metric queries.

    With a schema, also binds and type-checks fields and filters.
    """
    parsed = _Parser(text).parse()
    if schema is not None:
        for q in parsed.metrics:
            q.validate_against(schema)
    return parsed


def _render_duration(ms: int) -> str:
    for unit, factor in (("DAYS", DAY), ("HOURS", HOUR), ("MINUTES", MINUTE),
                         ("SECONDS", SECOND)):
        if ms % factor == 0:
            return f"{ms // factor} {unit}"
    return f"{ms} MILLISECONDS"


def render_query(parsed: ParsedQuery) -> str:
    """Inverse of parse_query for statements parse_query can produce."""
    metrics = parsed.metrics
    first = metrics[0]
    for q in metrics[1:]:
        if (q.group_by, q.window, q.filter) != (first.group_by, first.window, first.filter):
            raise ModelError("metrics of one statement must share filter/group/window")
    selects = ", ".join(
        f"{q.aggregator.upper()}({'*' if q.field is None else q.field})"
        for q in metrics
    )
    out = f"SELECT {selects} FROM {parsed.stream}"
    if first.filter is not None:
        out += f" WHERE {render_filter(first.filter)}"
    out += " GROUP BY " + ", ".join(first.group_by)
    w = first.window
    if w.kind == "infinite":
        out += " RANGE INFINITE"
    else:
        out += f" RANGE {_render_duration(w.size_ms)}"
    if w.delay_ms:
        out += f" DELAY {_render_duration(w.delay_ms)}"
    return out


# --------------------------------------------------------------------------
# Stream declaration files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamDecl:
    """Stream declaration: name, partitioner fields and the field layout.

    Text form, one directive per line (# comments allowed)::

        stream payments
        partitioner cardId
        partitioner merchantId
        field cardId string
        field merchantId string
        field amount float64
    """

    name: str
    partitioners: tuple[str, ...]
    fields: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = {n for n, _ in self.fields}
        for p in self.partitioners:
            if p not in names:
                raise ModelError(f"partitioner {p!r} is not a declared field")
        if not self.partitioners:
            raise ModelError("at least one partitioner required")

    def schema(self, schema_id: int = 0) -> EventSchema:
        return EventSchema(schema_id=schema_id, fields=self.fields)


def parse_stream_decl(text: str) -> StreamDecl:
    name = None
    partitioners = []
    fields = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "stream" and len(parts) == 2:
            name = parts[1]
        elif parts[0] == "partitioner" and len(parts) == 2:
            partitioners.append(parts[1])
        elif parts[0] == "field" and len(parts) == 3:
            fields.append((parts[1], parts[2]))
        else:
            raise ModelError(f"bad stream declaration line {lineno}: {raw!r}")
    if name is None:
        raise ModelError("stream declaration missing 'stream <name>'")
    return StreamDecl(name=name, partitioners=tuple(partitioners), fields=tuple(fields))


def render_stream_decl(decl: StreamDecl) -> str:
    lines = [f"stream {decl.name}"]
    lines += [f"partitioner {p}" for p in decl.partitioners]
    lines += [f"field {n} {k}" for n, k in decl.fields]
    return "\n".join(lines) + "\n"

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railgun import model as m
from railgun.model import (
    And,
    Compare,
    Or,
    EventSchema,
    FieldRef,
    HoppingSpec,
    Literal,
    MetricQuery,
    Not,
    ParsedQuery,
    QuerySyntaxError,
    WindowSpec,
    eval_filter,
    hopping_memberships,
    hopping_state_count,
    parse_query,
    parse_stream_decl,
    render_query,
    render_stream_decl,
    window_bounds,
    window_contains,
)

MIN = m.MINUTE
SEC = m.SECOND


def minutes(x: float) -> int:
    return int(x * MIN)


class TestWindowBounds:
    def test_sliding_spans_all_five_events(self):
        # the adversarial five-event stream: a sliding window at the fifth
        # event covers every one of them
        spec = WindowSpec("sliding", size_ms=5 * MIN)
        start, end = window_bounds(spec, minutes(5.2))
        assert (start, end) == (minutes(0.2), minutes(5.2))

    def test_infinite_never_expires(self):
        spec = WindowSpec("infinite")
        assert window_bounds(spec, 12345) == (None, 12345)

    def test_sliding_with_delay(self):
        spec = WindowSpec("sliding", size_ms=10 * SEC, delay_ms=5 * SEC)
        assert window_bounds(spec, 60 * SEC) == (45 * SEC, 55 * SEC)


class TestWindowContains:
    def test_early_event_still_counted(self):
        spec = WindowSpec("sliding", size_ms=5 * MIN)
        assert window_contains(spec, minutes(5.2), minutes(0.5))

    def test_triggering_event_included(self):
        for spec in (
            WindowSpec("sliding", size_ms=1),
            WindowSpec("sliding", size_ms=5 * MIN),
            WindowSpec("infinite"),
            WindowSpec("tumbling", size_ms=MIN),
        ):
            assert window_contains(spec, 777, 777)

    def test_open_lower_bound(self):
        spec = WindowSpec("sliding", size_ms=5 * MIN)
        assert not window_contains(spec, minutes(5.2), minutes(0.2))


class TestHopping:
    def test_state_count_hourly_window(self):
        assert hopping_state_count(HoppingSpec(60 * MIN, 5 * MIN)) == 12
        assert hopping_state_count(HoppingSpec(60 * MIN, 1 * SEC)) == 3600
        assert hopping_state_count(HoppingSpec(5 * MIN, 5 * MIN)) == 1

    def test_memberships_mid_stream(self):
        spec = HoppingSpec(5 * MIN, 1 * MIN)
        assert hopping_memberships(spec, minutes(4.5)) == [minutes(k) for k in range(5)]

    def test_memberships_first_window_expired(self):
        spec = HoppingSpec(5 * MIN, 1 * MIN)
        assert hopping_memberships(spec, minutes(5.2)) == [
            minutes(k) for k in (1, 2, 3, 4, 5)
        ]

    def test_tumbling_single_membership(self):
        spec = HoppingSpec(5 * MIN, 5 * MIN)
        assert hopping_memberships(spec, 7 * MIN) == [5 * MIN]

    @given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 10_000_000))
    def test_membership_count_after_warmup(self, hop, ratio, offset):
        spec = HoppingSpec(size_ms=hop * ratio, hop_ms=hop)
        t = spec.size_ms + offset  # past warmup
        starts = hopping_memberships(spec, t)
        assert len(starts) == hopping_state_count(spec)
        for w in starts:
            assert w % hop == 0
            assert w <= t < w + spec.size_ms


def test_adversarial_gap_five_events():
    """No 5min/1min hopping window sees all five events; the sliding one does.

    Checked by brute force over every hopping window start that any of the
    events belongs to.
    """
    ts = [minutes(x) for x in (0.5, 1.5, 2.5, 3.5, 5.2)]
    sliding = WindowSpec("sliding", size_ms=5 * MIN)
    hopping = HoppingSpec(5 * MIN, 1 * MIN)

    sliding_count = sum(1 for t in ts if window_contains(sliding, ts[-1], t))
    assert sliding_count == 5

    all_starts = sorted({w for t in ts for w in hopping_memberships(hopping, t)})
    best = max(
        sum(1 for t in ts if w <= t < w + hopping.size_ms) for w in all_starts
    )
    assert best == 4
    # the two fullest windows are the first two
    per_window = {
        w: sum(1 for t in ts if w <= t < w + hopping.size_ms) for w in all_starts
    }
    assert per_window[0] == 4 and per_window[minutes(1)] == 4


class TestParseQuery:
    def test_card_profile_statement(self):
        parsed = parse_query(
            "SELECT SUM(amount), COUNT(*) FROM payments "
            "GROUP BY cardId RANGE 5 MINUTES"
        )
        assert parsed.stream == "payments"
        assert [q.aggregator for q in parsed.metrics] == ["sum", "count"]
        assert parsed.metrics[0].field == "amount"
        assert parsed.metrics[1].field is None
        for q in parsed.metrics:
            assert q.group_by == ("cardId",)
            assert q.window == WindowSpec("sliding", size_ms=5 * MIN)

    def test_merchant_average(self):
        parsed = parse_query(
            "SELECT AVG(amount) FROM payments GROUP BY merchantId RANGE 5 MINUTES"
        )
        (q,) = parsed.metrics
        assert q.aggregator == "avg" and q.field == "amount"
        assert q.group_by == ("merchantId",)

    def test_window_is_mandatory(self):
        with pytest.raises(QuerySyntaxError):
            parse_query("SELECT SUM(amount) FROM payments GROUP BY cardId")

    def test_syntax_error_carries_position(self):
        with pytest.raises(QuerySyntaxError) as err:
            parse_query("SELECT SUM(amount) FROM payments GROUPBY cardId")
        assert err.value.position > 0

    def test_filter_and_delay(self):
        parsed = parse_query(
            'SELECT MIN(amount) FROM payments WHERE amount > 100 AND country = "PT" '
            "GROUP BY cardId, merchantId RANGE 2 HOURS DELAY 30 SECONDS"
        )
        (q,) = parsed.metrics
        assert q.window == WindowSpec("sliding", size_ms=2 * m.HOUR, delay_ms=30 * SEC)
        assert q.group_by == ("cardId", "merchantId")
        assert isinstance(q.filter, And)

    def test_infinite_range(self):
        parsed = parse_query(
            "SELECT COUNT_DISTINCT(addr) FROM logins GROUP BY user RANGE INFINITE"
        )
        (q,) = parsed.metrics
        assert q.window == WindowSpec("infinite")

    def test_schema_validation_unknown_field(self):
        schema = EventSchema(0, (("amount", "float64"), ("cardId", "string")))
        with pytest.raises(m.ModelError):
            parse_query(
                "SELECT SUM(bogus) FROM p GROUP BY cardId RANGE 1 MINUTES", schema
            )

    def test_schema_validation_filter_type_mismatch(self):
        schema = EventSchema(0, (("amount", "float64"), ("cardId", "string")))
        with pytest.raises(m.ModelError):
            parse_query(
                'SELECT SUM(amount) FROM p WHERE amount = "x" '
                "GROUP BY cardId RANGE 1 MINUTES",
                schema,
            )


class TestEvalFilter:
    schema = EventSchema(
        0, (("amount", "float64"), ("country", "string"), ("x", "int64"))
    )

    def ev(self, amount=0.0, country="PT", x=0):
        return self.schema.make_event("e1", 1, (amount, country, x))

    def test_simple_comparison(self):
        expr = Compare(">", FieldRef("amount"), Literal(100))
        assert eval_filter(expr, self.ev(amount=150.0), self.schema)

    def test_conjunction_fails_on_one_leg(self):
        expr = And(
            (
                Compare(">", FieldRef("amount"), Literal(100)),
                Compare("=", FieldRef("country"), Literal("PT")),
            )
        )
        assert not eval_filter(expr, self.ev(amount=150.0, country="US"), self.schema)

    def test_not_at_boundary(self):
        expr = Not(Compare("<", FieldRef("x"), Literal(0)))
        assert eval_filter(expr, self.ev(x=0), self.schema)

    def test_determinism(self):
        expr = Compare(">=", FieldRef("amount"), Literal(1.5))
        ev = self.ev(amount=1.5)
        assert all(eval_filter(expr, ev, self.schema) for _ in range(10))


# -- round-trip property ----------------------------------------------------

_field_names = st.sampled_from(["amount", "cardId", "merchantId", "country", "flag"])

_literals = st.one_of(
    st.integers(0, 10_000),
    st.floats(min_value=0.0, max_value=1e6, allow_nan=False).map(
        lambda x: round(x, 3)
    ),
    st.text(alphabet="abcXYZ09", max_size=6),
)


def _comparisons():
    return st.builds(
        Compare,
        st.sampled_from(list(m._COMPARE_OPS)),
        st.builds(FieldRef, _field_names),
        _literals.map(Literal),
    )


_filters = st.recursive(
    _comparisons(),
    lambda children: st.one_of(
        st.lists(children, min_size=2, max_size=3).map(lambda xs: And(tuple(xs))),
        st.lists(children, min_size=2, max_size=3).map(lambda xs: Or(tuple(xs))),
        children.map(Not),
    ),
    max_leaves=6,
)

_windows = st.one_of(
    st.just(WindowSpec("infinite")),
    st.builds(
        lambda n, unit, d: WindowSpec("sliding", size_ms=n * unit, delay_ms=d * SEC),
        st.integers(1, 500),
        st.sampled_from([SEC, MIN, m.HOUR, m.DAY]),
        st.integers(0, 90),
    ),
)

_aggs = st.sampled_from(list(m.AGGREGATORS))


@st.composite
def _statements(draw):
    window = draw(_windows)
    group_by = tuple(
        draw(st.lists(_field_names, min_size=1, max_size=2, unique=True))
    )
    filt = draw(st.none() | _filters)
    n = draw(st.integers(1, 3))
    metrics = []
    used = set()
    for _ in range(n):
        agg = draw(_aggs)
        fld = None if agg == "count" else draw(_field_names)
        base = agg if fld is None else f"{agg}_{fld}"
        name = base
        k = 2
        while name in used:
            name = f"{base}_{k}"
            k += 1
        used.add(name)
        metrics.append(
            MetricQuery(name, agg, fld, group_by, window, filt)
        )
    return ParsedQuery(stream=draw(st.sampled_from(["payments", "logins"])),
                       metrics=tuple(metrics))


@settings(max_examples=200)
@given(_statements())
def test_query_round_trip(parsed):
    assert parse_query(render_query(parsed)) == parsed


def test_stream_decl_round_trip():
    text = """
    # payments stream
    stream payments
    partitioner cardId
    partitioner merchantId
    field cardId string
    field merchantId string
    field amount float64
    field flag bool
    """
    decl = parse_stream_decl(text)
    assert decl.name == "payments"
    assert decl.partitioners == ("cardId", "merchantId")
    assert decl.schema().kind_of("amount") == "float64"
    assert parse_stream_decl(render_stream_decl(decl)) == decl


def test_stream_decl_rejects_unknown_partitioner():
    with pytest.raises(m.ModelError):
        parse_stream_decl("stream s\npartitioner nope\nfield a int64\n")

"""Synthetic payment-event generator and the flat event-file format.

Stands in for a production fraud feed: log-normal amounts, Zipf-skewed
card and merchant populations, timestamps advancing monotonically at a
configured rate. Fully determined by the seed, down to the output bytes.

Event files are newline-delimited, tab-separated: id, timestamp millis,
then the schema's fields in declared order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .model import StreamDecl

PAYMENTS_DECL = StreamDecl(
    name="payments",
    partitioners=("cardId", "merchantId"),
    fields=(
        ("cardId", "string"),
        ("merchantId", "string"),
        ("amount", "float64"),
        ("country", "string"),
    ),
)

COUNTRIES = ("PT", "US", "GB", "DE", "FR", "BR")


def zipf_harmonic(n: int, s: float) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1) ** s))


def zipf_top_mass(n: int, s: float) -> float:
    """Analytic probability of the most frequent key."""
    return 1.0 / zipf_harmonic(n, s)


def _zipf_sample(rng: np.random.Generator, n_keys: int, s: float,
                 size: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, n_keys + 1) ** s
    cdf = np.cumsum(weights / weights.sum())
    return np.searchsorted(cdf, rng.random(size), side="right")


@dataclass(frozen=True)
class DatasetSpec:
    n: int
    seed: int
    rate: float = 1000.0           # events per second of event time
    cards: int = 1000
    merchants: int = 100
    zipf_s: float = 1.1
    amount_mu: float = 3.0         # log-space
    amount_sigma: float = 1.0
    start_ts: int = 0


def generate_rows(spec: DatasetSpec):
    """Yields (id, ts, (cardId, merchantId, amount, country)) rows."""
    rng = np.random.default_rng(spec.seed)
    card_idx = _zipf_sample(rng, spec.cards, spec.zipf_s, spec.n)
    merch_idx = _zipf_sample(rng, spec.merchants, spec.zipf_s, spec.n)
    amounts = np.round(rng.lognormal(spec.amount_mu, spec.amount_sigma, spec.n), 2)
    countries = rng.integers(0, len(COUNTRIES), spec.n)
    step = 1000.0 / spec.rate
    for i in range(spec.n):
        ts = spec.start_ts + int(round(i * step))
        yield (
            f"e{i:09d}",
            ts,
            (
                f"c{card_idx[i]:06d}",
                f"m{merch_idx[i]:05d}",
                float(amounts[i]),
                COUNTRIES[countries[i]],
            ),
        )


def write_event_file(spec: DatasetSpec, path: str,
                     decl: StreamDecl = PAYMENTS_DECL) -> int:
    """Writes the TSV event file; byte-identical for identical specs."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for event_id, ts, values in generate_rows(spec):
            cells = [event_id, str(ts)]
            for (name, kind), v in zip(decl.fields, values):
                if kind == "float64":
                    cells.append(f"{v:.2f}")
                elif kind == "bool":
                    cells.append("true" if v else "false")
                else:
                    cells.append(str(v))
            fh.write("\t".join(cells) + "\n")
            n += 1
    return n


def read_event_file(path: str, decl: StreamDecl = PAYMENTS_DECL):
    """Yields (id, ts, values) tuples typed per the declaration."""
    kinds = [kind for _, kind in decl.fields]
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            event_id, ts = cells[0], int(cells[1])
            values = []
            for kind, cell in zip(kinds, cells[2:]):
                if kind == "int64":
                    values.append(int(cell))
                elif kind == "float64":
                    values.append(float(cell))
                elif kind == "bool":
                    values.append(cell == "true")
                else:
                    values.append(cell)
            yield event_id, ts, tuple(values)

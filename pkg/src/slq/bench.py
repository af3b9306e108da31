"""Workload generation, plaintext ground truth and the benchmark driver."""
from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dap import DapService, Mailbox
from .index import IndexConfig, OwnerIndex, build_index, serialize_index
from .paillier import Encrypter, KeyPair, keygen
from .primitives import DspContext, Prf
from .protocols import (DEFAULT_SIGMA, fetch_masked, merge_results, return_results,
                        slq_range_query, trapdoor)
from .transport import FrameServer, open_session, session_seed, start_server

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("uni", "nor", "ske", "file")


# -- datasets -----------------------------------------------------------------

def gen_dataset(dist: str, n: int, d: int = 2, seed: int = 0, exponent: float = 4.0) -> np.ndarray:
    """Synthetic points: ``uni`` on [0,1]^d, ``nor`` standard normal, ``ske`` skewed uniform."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    dist = dist.lower()
    if dist == "uni":
        return rng.random((n, d))
    if dist == "nor":
        return rng.standard_normal((n, d))
    if dist == "ske":
        pts = rng.random((n, d))
        pts[:, -1] = pts[:, -1] ** exponent
        return pts
    raise ValueError(f"unknown distribution {dist!r}")


def load_points(path: str | Path, d: int = 2) -> np.ndarray:
    """Read whitespace- or comma-separated coordinates, one point per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < d:
            raise ValueError(f"{path}:{lineno}: expected {d} coordinates")
        rows.append([float(x) for x in parts[:d]])
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.asarray(rows, dtype=float)


def save_points(path: str | Path, pts: np.ndarray) -> None:
    np.savetxt(path, np.asarray(pts), fmt="%.17g")


# -- ground truth -------------------------------------------------------------

def oracle_query(data: np.ndarray, lo: Sequence[float], hi: Sequence[float],
                 alive: Sequence[bool] | None = None) -> set[int]:
    """Row indices with ``lo <= p <= hi`` in every dimension (brute force)."""
    data = np.asarray(data, dtype=float)
    if len(data) == 0:
        return set()
    mask = np.all((data >= np.asarray(lo)) & (data <= np.asarray(hi)), axis=1)
    if alive is not None:
        mask &= np.asarray(alive, dtype=bool)
    return set(np.flatnonzero(mask).tolist())


def oracle_query_sorted(data: np.ndarray, lo: Sequence[float], hi: Sequence[float]) -> set[int]:
    """Independent implementation: bisect on the first coordinate, then filter."""
    pts = [tuple(float(x) for x in row) for row in np.asarray(data)]
    order = sorted(range(len(pts)), key=lambda i: pts[i][0])
    keys = [pts[i][0] for i in order]
    start = bisect.bisect_left(keys, lo[0])
    stop = bisect.bisect_right(keys, hi[0])
    out = set()
    for i in order[start:stop]:
        if all(a <= x <= b for a, x, b in zip(lo, pts[i], hi)):
            out.add(i)
    return out


# -- workloads ----------------------------------------------------------------

@dataclass
class Workload:
    n: int = 2000
    d: int = 2
    distribution: str = "uni"
    query_area_fraction: float = 0.000025
    aspect_ratio: float = 0.25
    query_count: int = 100
    seed: int = 0
    path: str | None = None


def query_sides(extent: np.ndarray, area_fraction: float, aspect: float) -> np.ndarray:
    """Side lengths covering ``area_fraction`` of the box, first/other ratio ``aspect``."""
    d = len(extent)
    frac = area_fraction ** (1.0 / d)
    rel = np.full(d, frac)
    if d > 1:
        rel[0] *= aspect ** ((d - 1) / d)
        rel[1:] /= aspect ** (1.0 / d)
    return rel * extent


def gen_queries(data: np.ndarray, area_fraction: float, aspect: float, count: int,
                seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rectangles with uniformly random centers in the data bounding box, clipped to it."""
    data = np.asarray(data, dtype=float)
    if area_fraction <= 0 or aspect <= 0:
        raise ValueError("query area and aspect ratio must be positive")
    rng = np.random.default_rng(seed + 7919)
    box_lo, box_hi = data.min(axis=0), data.max(axis=0)
    extent = box_hi - box_lo
    sides = query_sides(extent, area_fraction, aspect)
    out = []
    for _ in range(count):
        center = box_lo + rng.random(len(extent)) * extent
        lo = np.maximum(center - sides / 2, box_lo)
        hi = np.minimum(center + sides / 2, box_hi)
        out.append((lo, hi))
    return out


def workload_data(wl: Workload) -> np.ndarray:
    if wl.distribution.lower() == "file":
        if not wl.path:
            raise ValueError("file workloads need a path")
        pts = load_points(wl.path, wl.d)
        return pts[:wl.n] if wl.n else pts
    return gen_dataset(wl.distribution, wl.n, wl.d, wl.seed)


# -- reports ------------------------------------------------------------------

@dataclass
class QueryRecord:
    qid: int
    width: int
    candidates: int
    returned: int
    truth: int
    correct: int
    wire_bytes: int
    messages: int
    latency: float
    transcript_digest: str = ""

    @property
    def recall(self) -> float:
        return 1.0 if self.truth == 0 else self.correct / self.truth

    @property
    def precision(self) -> float:
        return 1.0 if self.returned == 0 else self.correct / self.returned


CSV_COLUMNS = [f.name for f in fields(QueryRecord)] + ["recall", "precision"]


@dataclass
class BenchReport:
    n: int
    d: int
    distribution: str
    mode: str
    key_bits: int
    build_time: float = 0.0
    index_bytes: int = 0
    records: list[QueryRecord] = field(default_factory=list)
    misses: list[str] = field(default_factory=list)

    @property
    def recall(self) -> float:
        truth = sum(r.truth for r in self.records)
        return 1.0 if truth == 0 else sum(r.correct for r in self.records) / truth

    @property
    def precision(self) -> float:
        returned = sum(r.returned for r in self.records)
        return 1.0 if returned == 0 else sum(r.correct for r in self.records) / returned

    @property
    def min_precision(self) -> float:
        return min((r.precision for r in self.records), default=1.0)

    @property
    def latencies(self) -> list[float]:
        return [r.latency for r in self.records]

    @property
    def mean_latency(self) -> float:
        return statistics.fmean(self.latencies) if self.records else 0.0

    def stable_view(self) -> dict:
        """Everything except wall-clock timings; equal across identical seeded runs."""
        return {
            "n": self.n, "d": self.d, "distribution": self.distribution,
            "key_bits": self.key_bits, "index_bytes": self.index_bytes,
            "records": [{k: v for k, v in r.__dict__.items() if k != "latency"} for r in self.records],
            "misses": list(self.misses),
        }

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in self.records:
            wr.writerow([getattr(r, c) for c in CSV_COLUMNS[:-2]] +
                        [f"{r.recall:.6f}", f"{r.precision:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> str:
        lines = [
            f"dataset {self.distribution} n={self.n} d={self.d} K={self.key_bits} mode={self.mode}",
            f"build time {self.build_time:.2f} s, index {self.index_bytes} bytes",
        ]
        if not self.records:
            lines.append("no queries")
            return "\n".join(lines)
        widths = [r.width for r in self.records]
        wire = [r.wire_bytes for r in self.records]
        lines += [
            f"queries {len(self.records)}: latency mean {self.mean_latency:.3f} s, "
            f"median {statistics.median(self.latencies):.3f} s, max {max(self.latencies):.3f} s",
            f"bytes on wire per query: mean {statistics.fmean(wire):.0f}, max {max(wire)}",
            f"scan width: mean {statistics.fmean(widths):.1f}, max {max(widths)}",
            f"recall {self.recall:.4f}, precision {self.precision:.4f} (min per query {self.min_precision:.4f})",
        ]
        if self.misses:
            lines.append(f"{len(self.misses)} missed point(s); first: {self.misses[0]}")
        return "\n".join(lines)


class CountMismatch(RuntimeError):
    """The merged result disagrees with the number of rows the DAP stored."""


# -- driver -------------------------------------------------------------------

def _live_rank_groups(owner: OwnerIndex) -> dict[tuple[int, ...], list[int]]:
    groups: dict[tuple[int, ...], list[int]] = {}
    for pid, alive in enumerate(owner.alive):
        if alive:
            groups.setdefault(tuple(int(v) for v in owner.ranks[pid]), []).append(pid)
    return groups


def score(owner: OwnerIndex, lo, hi, returned: Iterable[tuple[int, ...]]) -> tuple[int, int, int, list[int]]:
    """Compare returned rank tuples with the raw-space truth.

    Returns (returned count, truth count, correct count, missed point ids).
    Rank tuples are matched as multisets, which stays exact when inserted
    points share ranks with existing ones.
    """
    truth_ids = oracle_query(owner.raw, lo, hi, owner.alive)
    truth = Counter(tuple(int(v) for v in owner.ranks[i]) for i in truth_ids)
    got = Counter(tuple(int(v) for v in r) for r in returned)
    correct = sum((truth & got).values())
    missing = truth - got
    missed = [i for i in sorted(truth_ids) if missing[tuple(int(v) for v in owner.ranks[i])] > 0]
    return sum(got.values()), sum(truth.values()), correct, missed


class QueryRunner:
    """Runs encrypted queries against one owner index, inproc or over TCP."""

    def __init__(self, keys: KeyPair, owner: OwnerIndex, mode: str = "inproc",
                 seed: bytes | int | str = 0, sigma: int = DEFAULT_SIGMA) -> None:
        if mode not in ("inproc", "tcp"):
            raise ValueError(f"unknown mode {mode!r}")
        self.keys = keys
        self.pk = keys.pk
        self.owner = owner
        self.mode = mode
        self.sigma = sigma
        base = Prf(seed)
        self.dap_base = base.child("dap").key
        self.dsp_base = base.child("dsp").key
        self.client_prf = base.child("client")
        self.server: FrameServer | None = None
        self.mailbox = Mailbox()
        self.count = 0
        if mode == "tcp":
            self.server = FrameServer(("127.0.0.1", 0), self.pk.key_id, self._dap_for)
            start_server(self.server)

    def _dap_for(self, idx: int) -> DapService:
        return DapService(self.keys, seed=session_seed(self.dap_base, idx), mailbox=self.mailbox)

    def open(self, idx: int):
        if self.mode == "inproc":
            return open_session("inproc", self.pk, handler=self._dap_for(idx))
        return open_session("tcp", self.pk, endpoint=self.server.address)

    def run(self, lo, hi):
        """One query end to end; returns (rank tuples, outcome, session)."""
        idx = self.count
        self.count += 1
        client = Encrypter(self.pk, rng=self.client_prf.child(f"q{idx}"))
        q = trapdoor(lo, hi, self.owner.table, client)
        with self.open(idx) as session:
            dsp = DspContext.create(self.pk, session, session_seed(self.dsp_base, idx))
            out = slq_range_query(dsp, self.owner.dsp, q, self.sigma)
            share = return_results(dsp, out.results, self.owner.d)
            _, masked = fetch_masked(session, share.token)
            try:
                merged = merge_results(share, masked)
            except ValueError as exc:
                raise CountMismatch(f"query {idx} [{list(lo)}, {list(hi)}]: {exc}") from exc
        return merged, out, session

    def close(self) -> None:
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()
            self.server = None

    def __enter__(self) -> "QueryRunner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _diagnose(owner: OwnerIndex, pid: int, beta: tuple[int, int]) -> str:
    bid = owner.locate().get(pid)
    where = "inside" if bid is not None and beta[0] <= bid <= beta[1] else "outside"
    return (f"point {pid} ranks {tuple(int(v) for v in owner.ranks[pid])} in bucket {bid}, "
            f"{where} scan window {beta}: corner prediction off by more than err_max")


def run_queries(runner: QueryRunner, queries: Sequence[tuple[np.ndarray, np.ndarray]],
                report: BenchReport) -> BenchReport:
    owner = runner.owner
    for lo, hi in queries:
        t0 = time.perf_counter()
        merged, out, session = runner.run(lo, hi)
        latency = time.perf_counter() - t0
        returned, truth, correct, missed = score(owner, lo, hi, merged)
        for pid in missed:
            msg = _diagnose(owner, pid, out.beta)
            report.misses.append(msg)
            log.info("missed %s", msg)
        tr = session.transcript
        report.records.append(QueryRecord(
            runner.count - 1, out.width, out.candidates, returned, truth, correct,
            tr.total_bytes(), len(tr), latency, tr.digest()))
    return report


def make_keys(bits: int, seed: int | None) -> KeyPair:
    return keygen(bits, rng=None if seed is None else Prf(f"keys-{seed}"))


def owner_encrypter(keys: KeyPair, seed: int) -> Encrypter:
    return Encrypter(keys.pk, rng=Prf(f"owner-{seed}"), sk=keys.sk)


def run_bench(wl: Workload, cfg: IndexConfig | None = None, key_bits: int = 512,
              mode: str = "inproc", keys: KeyPair | None = None,
              queries: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
              sigma: int = DEFAULT_SIGMA, data: np.ndarray | None = None,
              insertion_rate: float = 0.0) -> BenchReport:
    """Build an index for the workload and run its queries end to end.

    With ``insertion_rate > 0``, ``round(rate * n)`` extra points drawn uniformly
    from the data's bounding box are inserted after the build and before the
    queries, so the queries exercise the update path as well.
    """
    cfg = cfg or IndexConfig(seed=wl.seed)
    keys = keys or make_keys(key_bits, wl.seed)
    data = workload_data(wl) if data is None else np.asarray(data, dtype=float)
    t0 = time.perf_counter()
    owner = build_index(data, keys.pk, cfg, enc=owner_encrypter(keys, wl.seed))
    build_time = time.perf_counter() - t0
    report = BenchReport(len(data), data.shape[1], wl.distribution, mode, keys.pk.bits,
                         build_time, len(serialize_index(owner.dsp, keys.pk)))
    extra = int(round(insertion_rate * len(data)))
    if extra:
        rng = np.random.default_rng(wl.seed + 31)
        lo, hi = data.min(axis=0), data.max(axis=0)
        for p in lo + rng.random((extra, data.shape[1])) * (hi - lo):
            owner.insert(p)
    if queries is None:
        queries = gen_queries(data, wl.query_area_fraction, wl.aspect_ratio, wl.query_count, wl.seed)
    with QueryRunner(keys, owner, mode, seed=wl.seed, sigma=sigma) as runner:
        run_queries(runner, queries, report)
    return report


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    if len(xs) < 2:
        raise ValueError("need at least two points")
    rho = spearmanr(xs, ys).statistic
    return float("nan") if rho is None or math.isnan(rho) else float(rho)


# -- config files -------------------------------------------------------------

_INT_KEYS = {"n", "d", "K", "b", "m", "k", "hidden", "queries", "seed", "sigma", "epochs"}
_FLOAT_KEYS = {"query_size", "aspect_ratio", "dummy_ratio", "insertion_rate", "noise", "lr", "tau"}
_BOOL_KEYS = {"fuzzy"}
_STR_KEYS = {"distribution", "mode", "data"}


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  ``query_size`` is in percent."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _INT_KEYS:
            out[key] = int(value)
        elif key in _FLOAT_KEYS:
            out[key] = float(value.rstrip("%"))
        elif key in _BOOL_KEYS:
            if value.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"line {lineno}: {key} expects a boolean")
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif key in _STR_KEYS:
            out[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return out


def config_objects(conf: dict) -> tuple[Workload, IndexConfig, dict]:
    """Split a parsed config into a workload, an index config and run options."""
    seed = conf.get("seed", 0)
    wl = Workload(
        n=conf.get("n", 2000), d=conf.get("d", 2),
        distribution=conf.get("distribution", "uni"),
        query_area_fraction=conf.get("query_size", 0.0025) / 100.0,
        aspect_ratio=conf.get("aspect_ratio", 0.25),
        query_count=conf.get("queries", 100), seed=seed, path=conf.get("data"))
    base = IndexConfig()
    cfg = IndexConfig(
        b=conf.get("b", base.b), m=conf.get("m", base.m), k=conf.get("k", base.k),
        dummy_ratio=conf.get("dummy_ratio", base.dummy_ratio),
        hidden=conf.get("hidden", base.hidden), fuzzy=conf.get("fuzzy", base.fuzzy),
        noise=conf.get("noise", base.noise), epochs=conf.get("epochs", base.epochs),
        lr=conf.get("lr", base.lr), tau=conf.get("tau", base.tau), seed=seed)
    opts = {"key_bits": conf.get("K", 512), "mode": conf.get("mode", "inproc"),
            "sigma": conf.get("sigma", DEFAULT_SIGMA),
            "insertion_rate": conf.get("insertion_rate", 0.0)}
    return wl, cfg, opts


# -- plaintext leakage model ----------------------------------------------------

@dataclass(frozen=True)
class QueryShape:
    width: int
    candidates: int
    results: int


def expected_shape(owner: OwnerIndex, lo, hi) -> QueryShape | None:
    """The (scan width, candidate count, result count) a query will leak.

    Computed in plaintext by the owner from the same fixed-point models the
    DSP evaluates.  Returns None when a corner coincides with a live point:
    then the found flag depends on which bucket the joint sampling draws.
    """
    rq = owner.table.rank_query(lo, hi)
    if rq is None:
        return None
    rlo, rhi = rq
    live = {owner.point_ranks(i) for i, a in enumerate(owner.alive) if a}
    if tuple(rlo) in live or tuple(rhi) in live:
        return None
    nb = len(owner.buckets)
    bounds = []
    for corner, sign in ((rlo, -1), (rhi, 1)):
        leaf = owner.route(corner)
        pred = leaf.model.label(corner, leaf.lo, leaf.hi)
        bounds.append(min(max(pred + sign * leaf.err, 1), nb))
    beta_lo, beta_hi = min(bounds), max(bounds)
    hits = 0
    for bk in owner.buckets[beta_lo - 1:beta_hi]:
        mbr = bk.live and [owner.point_ranks(s) for s in bk.live]
        if mbr and all(min(p[j] for p in mbr) <= rhi[j] and max(p[j] for p in mbr) >= rlo[j]
                       for j in range(owner.d)):
            hits += 1
    results = sum(1 for i in range(len(owner.raw)) if owner.alive[i]
                  and all(rlo[j] <= owner.ranks[i, j] <= rhi[j] for j in range(owner.d)))
    return QueryShape(beta_hi - beta_lo + 1, hits * owner.cfg.b, results)

"""Deterministic HMM of interpacket timing.

Inference follows four steps: histogram the delay corpus, find the
prominent peaks, label every delay by the peak region it falls into, and
count label bigrams.  Each state is a label; the transition probability
from ``i`` to ``j`` is ``count(ij) / count(i followed by anything)``.
Generation walks the chain and, on entering state ``j``, emits a delay
drawn uniformly from the captured delays that were labeled ``j``.
"""
from __future__ import annotations

import json
import math
import string
from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import find_peaks

from .errors import InferenceError, ProfileFormatError

LABELS = string.ascii_lowercase
DEFAULT_BIN_WIDTH = 0.001
DEFAULT_MIN_PROMINENCE = 0.05
MIN_CORPUS = 1000
MODEL_FORMAT = "mimictun-timing-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class BinMap:
    """Partition of [0, inf) into one labeled bin per histogram peak.

    Bin ``k`` is ``[boundaries[k-1], boundaries[k])`` with the outer bins
    open-ended, so every delay gets exactly one label.
    """

    peaks: tuple[float, ...]
    boundaries: tuple[float, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.peaks) or len(self.boundaries) != len(self.peaks) - 1:
            raise ValueError("need one label per peak and one boundary between each pair")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("boundaries must be sorted")

    def label_of(self, delay: float) -> str:
        return self.labels[bisect_right(self.boundaries, delay)]

    def indices(self, delays) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries, dtype=float), np.asarray(delays, dtype=float), side="right")


def detect_bins(
    delays: Sequence[float],
    bin_width: float = DEFAULT_BIN_WIDTH,
    min_prominence: float = DEFAULT_MIN_PROMINENCE,
    min_samples: int = MIN_CORPUS,
) -> BinMap:
    """Find the delay states of a corpus from its histogram.

    A histogram bin is a peak when it is a local maximum whose height and
    topographic prominence both reach ``min_prominence`` times the tallest
    bin.  Adjacent peaks are separated at the lowest bin between them,
    ties going to the bin nearest the midpoint; the cut sits at that bin's
    center.
    """
    d = np.asarray(getattr(delays, "delays", delays), dtype=float)
    if d.size < min_samples:
        raise InferenceError(f"corpus has {d.size} delays, need at least {min_samples}")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InferenceError("delays must be finite and non-negative")

    lo = math.floor(d.min() / bin_width) * bin_width
    nbins = int(math.floor((d.max() - lo) / bin_width)) + 1
    idx = np.minimum(((d - lo) / bin_width).astype(np.int64), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)

    padded = np.concatenate(([0], counts, [0]))
    threshold = min_prominence * counts.max()
    peak_idx, _ = find_peaks(padded, height=threshold, prominence=threshold)
    peak_idx = peak_idx - 1
    if peak_idx.size == 0:
        raise InferenceError("histogram has no peaks")
    if peak_idx.size > len(LABELS):
        raise InferenceError(f"{peak_idx.size} peaks found, at most {len(LABELS)} labels available")

    def center(i):
        return float(lo + (i + 0.5) * bin_width)

    boundaries = []
    for p, q in zip(peak_idx[:-1], peak_idx[1:]):
        between = np.arange(p + 1, q)
        low = counts[between].min()
        cands = between[counts[between] == low]
        mid = (p + q) / 2
        cut = cands[np.argmin(np.abs(cands - mid))]
        boundaries.append(center(cut))
    return BinMap(
        peaks=tuple(center(i) for i in peak_idx),
        boundaries=tuple(boundaries),
        labels=tuple(LABELS[: peak_idx.size]),
    )


def label_stream(delays: Iterable[float], bin_map: BinMap) -> str:
    d = list(getattr(delays, "delays", delays))
    if not d:
        return ""
    labels = bin_map.labels
    return "".join(labels[i] for i in bin_map.indices(d))


def transition_counts(stream: str, labels: Sequence[str]) -> np.ndarray:
    """Matrix of bigram counts: ``out[i, j]`` = occurrences of ``labels[i] labels[j]``."""
    pos = {s: k for k, s in enumerate(labels)}
    k = len(labels)
    out = np.zeros((k, k), dtype=np.int64)
    if len(stream) < 2:
        return out
    try:
        codes = np.fromiter((pos[c] for c in stream), dtype=np.int64, count=len(stream))
    except KeyError as exc:
        raise InferenceError(f"label {exc.args[0]!r} not in the bin map") from None
    np.add.at(out, (codes[:-1], codes[1:]), 1)
    return out


@dataclass(frozen=True)
class TimingModel:
    bin_map: BinMap
    counts: tuple[tuple[int, ...], ...]
    pools: tuple[tuple[float, ...], ...]
    terminal: tuple[str, ...] = ()

    def __post_init__(self):
        k = len(self.bin_map.labels)
        if len(self.counts) != k or any(len(r) != k for r in self.counts):
            raise ValueError("counts must be a square matrix over the labels")
        if len(self.pools) != k or any(not p for p in self.pools):
            raise ValueError("every state needs a non-empty delay pool")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.bin_map.labels

    @property
    def sample_count(self) -> int:
        return sum(len(p) for p in self.pools)

    @cached_property
    def transitions(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=float)
        rows = c.sum(axis=1)
        out = np.zeros_like(c)
        for i, total in enumerate(rows):
            if total:
                out[i] = c[i] / total
            else:
                out[i, i] = 1.0
        return out

    @cached_property
    def _cumulative(self) -> list[list[float]]:
        cum = np.cumsum(self.transitions, axis=1)
        cum[:, -1] = 1.0
        return cum.tolist()

    @cached_property
    def mean_delay(self) -> float:
        return math.fsum(math.fsum(p) for p in self.pools) / self.sample_count

    def state_index(self, state: str) -> int:
        try:
            return self.labels.index(state)
        except ValueError:
            raise KeyError(f"unknown state {state!r}") from None

    def initial_state(self, rng: np.random.Generator) -> str:
        """Draw a start state with probability proportional to its pool size."""
        sizes = np.array([len(p) for p in self.pools], dtype=float)
        return self.labels[int(rng.choice(len(sizes), p=sizes / sizes.sum()))]


def infer_model(stream: str, delays: Sequence[float], bin_map: BinMap) -> TimingModel:
    """Fit the deterministic HMM to a label stream and its delay corpus.

    A state that never has a successor (it only shows up at the very end
    of the stream) gets a self-loop and is listed in ``terminal``.
    """
    d = list(getattr(delays, "delays", delays))
    if len(stream) < 2:
        raise InferenceError("need at least two labels to count transitions")
    if len(stream) != len(d):
        raise InferenceError(f"{len(stream)} labels for {len(d)} delays")
    labels = bin_map.labels
    counts = transition_counts(stream, labels)
    pools: list[list[float]] = [[] for _ in labels]
    pos = {s: k for k, s in enumerate(labels)}
    for s, x in zip(stream, d):
        pools[pos[s]].append(float(x))
    empty = [labels[k] for k, p in enumerate(pools) if not p]
    if empty:
        raise InferenceError(f"no delays fall in state(s) {empty}")
    terminal = tuple(labels[i] for i in range(len(labels)) if counts[i].sum() == 0)
    return TimingModel(
        bin_map=bin_map,
        counts=tuple(tuple(int(x) for x in row) for row in counts),
        pools=tuple(tuple(p) for p in pools),
        terminal=terminal,
    )


def fit(delays, bin_width=DEFAULT_BIN_WIDTH, min_prominence=DEFAULT_MIN_PROMINENCE) -> TimingModel:
    """Histogram, label and infer in one call."""
    bm = detect_bins(delays, bin_width, min_prominence)
    return infer_model(label_stream(delays, bm), delays, bm)


def _step(model: TimingModel, i: int, u_state: float, u_pool: float) -> tuple[float, int]:
    j = bisect_right(model._cumulative[i], u_state)
    j = min(j, len(model.labels) - 1)
    pool = model.pools[j]
    return pool[min(int(u_pool * len(pool)), len(pool) - 1)], j


def next_delay(model: TimingModel, state: str, rng: np.random.Generator) -> tuple[float, str]:
    """Advance one step: pick the successor state, then a delay from its pool."""
    u = rng.random(2)
    delay, j = _step(model, model.state_index(state), u[0], u[1])
    return delay, model.labels[j]


def generate_sequence(model: TimingModel, start_state: str, n: int, rng: np.random.Generator) -> list[float]:
    """``n`` consecutive delays; same stream as ``n`` calls to :func:`next_delay`."""
    if n < 0:
        raise ValueError("n must be >= 0")
    i = model.state_index(start_state)
    u = rng.random(2 * n).reshape(n, 2).tolist() if n else []
    out = []
    for us, up in u:
        delay, i = _step(model, i, us, up)
        out.append(delay)
    return out


def model_to_dict(model: TimingModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "labels": list(model.labels),
        "peaks": list(model.bin_map.peaks),
        "boundaries": list(model.bin_map.boundaries),
        "counts": [list(r) for r in model.counts],
        "transitions": model.transitions.tolist(),
        "terminal": list(model.terminal),
        "pools": {s: list(p) for s, p in zip(model.labels, model.pools)},
    }


def save_model(model: TimingModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def load_model(text: str | bytes) -> TimingModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileFormatError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ProfileFormatError("not a mimictun timing model document")
    if doc.get("version") != MODEL_VERSION:
        raise ProfileFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        labels = tuple(doc["labels"])
        bm = BinMap(tuple(map(float, doc["peaks"])), tuple(map(float, doc["boundaries"])), labels)
        model = TimingModel(
            bin_map=bm,
            counts=tuple(tuple(int(x) for x in r) for r in doc["counts"]),
            pools=tuple(tuple(float(x) for x in doc["pools"][s]) for s in labels),
            terminal=tuple(doc.get("terminal", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProfileFormatError(f"malformed model: {exc}") from None
    stored = doc.get("transitions")
    if stored is not None and not np.allclose(np.asarray(stored, dtype=float), model.transitions, rtol=0, atol=1e-9):
        raise ProfileFormatError("stored transition rows disagree with counts")
    return model


def read_delays(lines: Iterable[str]) -> list[float]:
    """Delay corpus text: one decimal number per line, ``#`` comments allowed."""
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(float(line))
        except ValueError:
            raise InferenceError(f"line {lineno}: not a number: {line!r}") from None
    return out

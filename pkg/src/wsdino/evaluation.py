"""Not-same-compound (NSC) and not-same-compound-and-batch (NSCB) 1-NN MOA matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError, StructureError

log = logging.getLogger(__name__)

BATCH_RULES = ("exclude_batch", "conjunction")


def cosine_distance(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine distance of a zero vector")
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def cosine_distance_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("cosine distance of a zero vector")
    unit = x / norms
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


@dataclass
class Match:
    query: str
    match: str
    distance: float
    correct: bool


@dataclass
class EvalReport:
    nsc: float = float("nan")
    nscb: float = float("nan")
    nsc_matches: list = field(default_factory=list)
    nscb_matches: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def summary(self):
        return f"NSC {100 * self.nsc:.2f}%  NSCB {100 * self.nscb:.2f}%"


TIE_TOL = 1e-12


def _nearest(dist_row, candidates):
    # lowest index wins ties; the tolerance absorbs matmul rounding between equal vectors
    idx = np.flatnonzero(candidates)
    d = dist_row[idx]
    return int(idx[np.flatnonzero(d <= d.min() + TIE_TOL)[0]])


def _score(matches):
    return sum(m.correct for m in matches) / len(matches) if matches else float("nan")


def nsc(profiles):
    """Returns ``(accuracy, matches)``; candidates exclude the query's own compound."""
    if len({p.compound for p in profiles}) < 2:
        raise StructureError("NSC needs at least two compounds")
    dist = cosine_distance_matrix([p.vector for p in profiles])
    compounds = np.array([p.compound for p in profiles])
    matches = []
    for i, p in enumerate(profiles):
        candidates = compounds != p.compound
        j = _nearest(dist[i], candidates)
        q = profiles[j]
        matches.append(Match(p.treatment, q.treatment, float(dist[i, j]), q.moa == p.moa))
    return _score(matches), matches


def nscb_candidates(profiles, i, batch_rule="exclude_batch"):
    """Boolean candidate mask for query ``i``.

    ``exclude_batch`` drops candidates of the same compound and, in addition, any
    candidate sharing a batch with the query.  ``conjunction`` drops only candidates
    that share both the compound and a batch.
    """
    p = profiles[i]
    mask = np.zeros(len(profiles), dtype=bool)
    for j, q in enumerate(profiles):
        if j == i:
            continue
        same_compound = q.compound == p.compound
        shares_batch = bool(p.batches & q.batches)
        if batch_rule == "exclude_batch":
            mask[j] = not same_compound and not shares_batch
        elif batch_rule == "conjunction":
            mask[j] = not (same_compound and shares_batch)
        else:
            raise ParameterError(f"unknown batch rule {batch_rule!r}")
    return mask


def single_batch_moas(profiles):
    batches: dict = {}
    for p in profiles:
        batches.setdefault(p.moa, set()).update(p.batches)
    return {moa for moa, b in batches.items() if len(b) < 2}


def nscb(profiles, batch_rule="exclude_batch"):
    """Returns ``(accuracy, matches, excluded)``.

    Treatments whose MOA occurs in a single batch are not scored; queries left with no
    candidate are skipped.  ``excluded`` lists ``(treatment, reason)``.
    """
    if batch_rule not in BATCH_RULES:
        raise ParameterError(f"unknown batch rule {batch_rule!r}")
    if len({p.compound for p in profiles}) < 2:
        raise StructureError("NSCB needs at least two compounds")
    dist = cosine_distance_matrix([p.vector for p in profiles])
    lonely = single_batch_moas(profiles)
    matches, excluded = [], []
    for i, p in enumerate(profiles):
        if p.moa in lonely:
            excluded.append((p.treatment, "moa present in a single batch"))
            continue
        candidates = nscb_candidates(profiles, i, batch_rule)
        if not candidates.any():
            log.info("NSCB: no candidate left for %s, skipped", p.treatment)
            excluded.append((p.treatment, "no candidate after exclusions"))
            continue
        j = _nearest(dist[i], candidates)
        q = profiles[j]
        matches.append(Match(p.treatment, q.treatment, float(dist[i, j]), q.moa == p.moa))
    return _score(matches), matches, excluded


def evaluate(profiles, batch_rule="exclude_batch") -> EvalReport:
    score_nsc, m_nsc = nsc(profiles)
    score_nscb, m_nscb, excluded = nscb(profiles, batch_rule)
    return EvalReport(score_nsc, score_nscb, m_nsc, m_nscb, excluded)


def best_epoch(scores):
    """Index of the highest NSC; earliest epoch wins ties."""
    scores = list(scores)
    if not scores:
        raise StructureError("no epoch scores")
    return int(np.argmax(scores))


def window_mean(per_epoch, epochs, lo=50, hi=250):
    """Mean of the per-epoch scores whose epoch number lies in ``[lo, hi]``."""
    vals = [s for e, s in zip(epochs, per_epoch) if lo <= e <= hi]
    return float(np.mean(vals)) if vals else float("nan")

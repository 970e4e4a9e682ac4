"""Choosing where to touch: high-gradient candidates, clustering, ranking."""
from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

OUTLIER = -1
RANKER_URL_ENV = "VTSPLAT_RANKER_URL"
RANKER_KEY_ENV = "VTSPLAT_RANKER_KEY"
RANKER_MODEL_ENV = "VTSPLAT_RANKER_MODEL"


class SelectionError(RuntimeError):
    pass


@dataclass
class TouchCandidate:
    position: np.ndarray
    gaussian_id: int
    cluster: int = OUTLIER
    cluster_mean_grad: float = 0.0
    part: str = "unknown"
    part_rank: int = 1
    geo_rank: int = 1
    normal: Optional[np.ndarray] = None

    def key(self):
        return (self.part_rank, self.geo_rank, self.gaussian_id)


@dataclass(frozen=True)
class PartRanking:
    label: str
    parts: tuple = ()

    def __post_init__(self):
        parts = tuple(str(p) for p in self.parts)
        if len(set(parts)) != len(parts):
            raise ValueError("part names must be unique")
        object.__setattr__(self, "parts", parts)

    @property
    def empty(self) -> bool:
        return len(self.parts) == 0


@dataclass
class PartLabeledCloud:
    points: np.ndarray
    labels: list

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = [str(s) for s in self.labels]
        if len(self.labels) != len(self.points):
            raise ValueError("one label per point required")


@dataclass
class Selection:
    indices: np.ndarray
    fallback: bool = False


def select_high_gradient(grad_means: np.ndarray, positions: np.ndarray, tau: float,
                         region: np.ndarray, fallback_quantile: float = 0.05,
                         allow_fallback: bool = True) -> Selection:
    """Gaussians inside ``region`` whose mean gradient strictly exceeds ``tau``.

    When nothing qualifies, fall back to the top ``fallback_quantile`` of the
    in-region Gaussians (ties by index) unless ``allow_fallback`` is off.
    """
    grad_means = np.asarray(grad_means, dtype=float)
    region = np.asarray(region, dtype=bool)
    idx = np.flatnonzero(region & (grad_means > tau))
    if len(idx):
        return Selection(idx, False)
    pool = np.flatnonzero(region)
    if not allow_fallback or len(pool) == 0:
        raise SelectionError(f"no Gaussian exceeds tau_g={tau:.4g}; scale the threshold down")
    k = max(1, int(np.ceil(fallback_quantile * len(pool))))
    order = np.lexsort((pool, -grad_means[pool]))
    log.warning("empty high-gradient selection; using top %d of %d by gradient", k, len(pool))
    return Selection(np.sort(pool[order[:k]]), True)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; labels are 0.. in order of each cluster's lowest
    core index, noise is ``OUTLIER``. A neighbourhood includes the point
    itself; border points join the lowest-numbered adjacent cluster."""
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    labels = np.full(n, OUTLIER, dtype=np.int64)
    if n == 0:
        return labels
    nbrs = [sorted(x) for x in cKDTree(points).query_ball_point(points, eps)]
    core = np.array([len(x) >= min_pts for x in nbrs])
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != OUTLIER:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for k in nbrs[j]:
                if labels[k] == OUTLIER:
                    labels[k] = cid
                    queue.append(k)
        cid += 1
    return labels


def rank_geometric(labels: np.ndarray, grad_means: np.ndarray):
    """Cluster ranks by descending mean gradient, then size, then lowest member.

    Returns (per-point rank, {cluster: (rank, mean gradient)}); outliers get 0.
    """
    labels = np.asarray(labels)
    clusters = sorted(set(labels[labels != OUTLIER].tolist()))
    if not clusters:
        raise SelectionError("no clusters to rank")
    stats = []
    for c in clusters:
        members = np.flatnonzero(labels == c)
        stats.append((-float(np.mean(grad_means[members])), -len(members), int(members.min()), c))
    stats.sort()
    info = {s[3]: (r + 1, -s[0]) for r, s in enumerate(stats)}
    ranks = np.zeros(len(labels), dtype=np.int64)
    for c, (r, _) in info.items():
        ranks[labels == c] = r
    return ranks, info


def nearest_labeled(points: np.ndarray, cloud: PartLabeledCloud, chunk: int = 256) -> np.ndarray:
    """Index of the nearest cloud point per query, lowest index on ties."""
    points = np.atleast_2d(points)
    out = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        d = np.sum((points[s:s + chunk, None, :] - cloud.points[None]) ** 2, axis=-1)
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


def rank_common_sense(positions: np.ndarray, cloud: PartLabeledCloud, ranking: PartRanking):
    """Part label and rank per candidate from the nearest labeled point.

    Ranking entries absent from the cloud are dropped; unknown labels rank
    last; an empty ranking gives every candidate rank 1.
    """
    if len(cloud.points) == 0:
        raise ValueError("labeled cloud is empty")
    j = nearest_labeled(positions, cloud)
    parts = [cloud.labels[k] for k in j]
    if ranking.empty:
        return parts, np.ones(len(j), dtype=np.int64)
    present = set(cloud.labels)
    order = [p for p in ranking.parts if p in present]
    dropped = [p for p in ranking.parts if p not in present]
    if dropped:
        log.info("ignoring ranked parts absent from the labeled cloud: %s", dropped)
    table = {p: i + 1 for i, p in enumerate(order)}
    last = len(order) + 1
    return parts, np.array([table.get(p, last) for p in parts], dtype=np.int64)


@dataclass
class TouchPlan:
    touches: list
    shortfall: bool = False
    requested: int = 0


def order_touches(candidates: Sequence[TouchCandidate], n: int = 10) -> TouchPlan:
    """Pick up to ``n`` touches spread over clusters, emitted in
    (part rank, geometric rank, index) order.

    Picking goes round-robin: every cluster contributes its best remaining
    candidate per pass, clusters visited in order of their best key.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    pool = sorted((c for c in candidates if c.cluster != OUTLIER), key=TouchCandidate.key)
    by_cluster: dict = {}
    for c in pool:
        by_cluster.setdefault(c.cluster, []).append(c)
    queues = [deque(v) for v in sorted(by_cluster.values(), key=lambda v: v[0].key())]
    picked = []
    while len(picked) < n and any(queues):
        for q in queues:
            if q and len(picked) < n:
                picked.append(q.popleft())
    picked.sort(key=TouchCandidate.key)
    short = len(picked) < n
    if short:
        log.warning("only %d touch candidates for %d requested touches", len(picked), n)
    return TouchPlan(picked, short, n)


def plan_touches(grad_means, positions, tau, region, cloud: Optional[PartLabeledCloud],
                 ranking: PartRanking, n: int = 10, eps: float = 0.01, min_pts: int = 5,
                 normal_fn=None) -> TouchPlan:
    """Selection, clustering and both rankings in one call."""
    sel = select_high_gradient(grad_means, positions, tau, region)
    pts = np.asarray(positions)[sel.indices]
    labels = dbscan(pts, eps, min_pts)
    if not np.any(labels != OUTLIER):
        log.warning("all %d candidates are outliers at eps=%.3g, min_pts=%d; treating each as a cluster",
                    len(pts), eps, min_pts)
        labels = np.arange(len(pts))
    gm = np.asarray(grad_means)[sel.indices]
    geo, info = rank_geometric(labels, gm)
    if cloud is not None and len(cloud.points):
        parts, pr = rank_common_sense(pts, cloud, ranking)
    else:
        parts, pr = ["unknown"] * len(pts), np.ones(len(pts), dtype=np.int64)
    normals = normal_fn(pts) if normal_fn is not None else [None] * len(pts)
    cands = [TouchCandidate(pts[i].copy(), int(sel.indices[i]), int(labels[i]),
                            info[labels[i]][1] if labels[i] != OUTLIER else 0.0, parts[i], int(pr[i]),
                            int(geo[i]), None if normals[i] is None else np.asarray(normals[i]))
             for i in range(len(pts))]
    return order_touches(cands, n)


# rankers ------------------------------------------------------------------

class MockRanker:
    """Deterministic part priorities from a shipped lookup table."""

    def __init__(self, table: Optional[dict] = None):
        if table is None:
            text = resources.files("vtsplat").joinpath("data/ranker_table.json").read_text()
            table = json.loads(text)
        self.version = table.get("version")
        self.classes = {k.lower(): v for k, v in table["classes"].items()}

    def query(self, class_hint: str = "", image=None) -> PartRanking:
        entry = self.classes.get((class_hint or "").lower())
        if entry is None:
            log.warning("mock ranker has no entry for %r", class_hint)
            return PartRanking(class_hint or "unknown")
        return PartRanking(entry.get("label", class_hint), tuple(entry["priority"]))


RANKER_SCHEMA = {
    "type": "object",
    "properties": {
        "label": {"type": "string"},
        "parts": {"type": "array", "items": {"type": "string"}},
        "priority": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["label", "parts", "priority"],
}

PROMPT = ("Name the object class, list its parts, and order the parts by how much a single touch "
          "on each would reveal about the object's surface geometry. Reply with JSON only.")


def parse_ranking(doc) -> PartRanking:
    """Validate a ranker reply against the structured schema."""
    if not isinstance(doc, dict):
        raise ValueError("ranker reply is not an object")
    label, parts, prio = doc.get("label"), doc.get("parts"), doc.get("priority")
    if not isinstance(label, str):
        raise ValueError("ranker reply lacks a string label")
    for name, arr in (("parts", parts), ("priority", prio)):
        if not isinstance(arr, list) or not all(isinstance(x, str) for x in arr):
            raise ValueError(f"ranker reply field {name!r} is not a list of strings")
    seen, order = set(), []
    for p in prio:
        if p not in seen:
            seen.add(p)
            order.append(p)
    return PartRanking(label, tuple(order))


class RemoteRanker:
    """Chat-completions style endpoint; any failure yields an empty ranking."""

    def __init__(self, url: Optional[str] = None, key: Optional[str] = None, model: Optional[str] = None,
                 timeout: float = 30.0):
        self.url = url or os.environ.get(RANKER_URL_ENV, "")
        self.key = key or os.environ.get(RANKER_KEY_ENV, "")
        self.model = model or os.environ.get(RANKER_MODEL_ENV, "default")
        self.timeout = timeout

    def request_body(self, class_hint: str, image_b64: Optional[str] = None) -> dict:
        content = [{"type": "text", "text": f"{PROMPT} Class hint: {class_hint or 'none'}."}]
        if image_b64:
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image_b64}"}})
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "response_format": {"type": "json_schema",
                                "json_schema": {"name": "part_ranking", "schema": RANKER_SCHEMA}},
            "class_hint": class_hint,
        }

    def query(self, class_hint: str = "", image_b64: Optional[str] = None) -> PartRanking:
        empty = PartRanking(class_hint or "unknown")
        if not self.url:
            log.warning("remote ranker URL not configured (%s); continuing without part ranking",
                        RANKER_URL_ENV)
            return empty
        body = json.dumps(self.request_body(class_hint, image_b64)).encode()
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
            if isinstance(reply, dict) and "choices" in reply:
                reply = json.loads(reply["choices"][0]["message"]["content"])
            return parse_ranking(reply)
        except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, IndexError,
                TypeError) as exc:
            log.warning("remote ranker failed (%s); continuing on geometric ranking only", exc)
            return empty


def make_ranker(mode: str = "mock", **kw):
    if mode == "mock":
        return MockRanker(kw.get("table"))
    if mode == "remote":
        return RemoteRanker(timeout=kw.get("timeout", 30.0))
    if mode == "none":
        return None
    raise ValueError(f"unknown ranker mode {mode!r}")

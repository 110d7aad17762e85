"""Split-and-merge segmentation of a dynamic volume on time-course shape.

Voxel curves are first scaled to unit total activity so that only their
shape matters. The bounding box is then split recursively into
hyper-rectangles (largest within-region sum of squares first, cut chosen to
best separate the first principal-component score), and the rectangles are
merged back greedily by Ward's criterion: first only between spatially
adjacent segments, then freely once the segment count reaches ``4K``.

Spatial axes are indexed 0 = x, 1 = y, 2 = z throughout; arrays are stored
``(nz, ny, nx[, B])`` so that x varies fastest in memory.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np

from .timecore import FrameSchedule

DEFAULT_MAX_REGIONS = 10_000
DEFAULT_TARGET = 0.95
FREE_MERGE_FACTOR = 4
VARIANCE_FLOOR = 1e-9


@dataclass(eq=False)
class DynamicVolume:
    """Dynamic image: ``data[z, y, x, b]`` frame integrals plus geometry."""

    data: np.ndarray
    schedule: FrameSchedule
    voxel_mm: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4:
            raise ValueError("volume data must be 4-D (nz, ny, nx, B)")
        if self.data.shape[3] != self.schedule.n_frames:
            raise ValueError(f"{self.data.shape[3]} frames in data, {self.schedule.n_frames} in schedule")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape[:3]:
                raise ValueError("mask shape must match the spatial grid")
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape[:3]
        return (nx, ny, nz)

    @property
    def shape3(self) -> tuple:
        return self.data.shape[:3]

    @property
    def n_frames(self) -> int:
        return self.data.shape[3]

    @property
    def valid(self) -> np.ndarray:
        """Voxels inside the mask whose curve has no NaN."""
        ok = ~np.isnan(self.data).any(axis=3)
        return ok if self.mask is None else ok & self.mask


# --------------------------------------------------------------------------- scaling


def scale_curves(vol: DynamicVolume):
    """Each voxel curve divided by its total activity.

    Frame values are already integrals over the frame, so their plain sum is
    the duration-weighted sum of frame-average activity. Returns
    ``(scaled, foreground)``: scaled curves (zero where undefined) and the
    mask of voxels with a positive total; masked voxels with a nonpositive
    total are background.
    """
    tot = np.nansum(vol.data, axis=3)
    fg = vol.valid & (tot > 0)
    scaled = np.zeros_like(vol.data)
    scaled[fg] = vol.data[fg] / tot[fg][:, None]
    return scaled, fg


# --------------------------------------------------------------------------- split


@dataclass(eq=False)
class Partition:
    """Hyper-rectangle partition of the foreground.

    ``region`` maps every voxel to its region id (-1 for voxels outside the
    foreground); ``boxes[r]`` is ``(z0, z1, y0, y1, x0, x1)``.
    """

    volume: DynamicVolume
    scaled: np.ndarray
    foreground: np.ndarray
    region: np.ndarray
    boxes: list
    _contiguous: tuple | None = field(default=None, repr=False)

    @property
    def n_regions(self) -> int:
        return len(self.boxes)


def _first_pc(X):
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc
    vals, vecs = np.linalg.eigh(C)
    v = vecs[:, -1]
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    return Xc @ v


def _region_ss(X):
    if X.shape[0] < 2:
        return 0.0
    return float(((X - X.mean(axis=0)) ** 2).sum())


# array axis (0=z, 1=y, 2=x) for spatial axis index (0=x, 1=y, 2=z)
_ARRAY_AXIS = (2, 1, 0)


def _best_cut(scaled, fg, box):
    """Axis and cut index for one region, or None if it cannot be split."""
    z0, z1, y0, y1, x0, x1 = box
    sub = scaled[z0:z1, y0:y1, x0:x1]
    m = fg[z0:z1, y0:y1, x0:x1]
    X = sub[m]
    n = X.shape[0]
    extent = (x1 - x0, y1 - y0, z1 - z0)
    if n < 2 or max(extent) < 2:
        return None
    ss = _region_ss(X)
    scale = float((X**2).sum())
    if ss <= 1e-13 * max(scale, 1e-300):
        # flat region: bisect the longest axis
        ax = int(np.argmax(extent))
        return ax, extent[ax] // 2
    score = np.zeros(m.shape)
    score[m] = _first_pc(X)
    best = None
    best_val = -1.0
    for ax in range(3):
        L = extent[ax]
        if L < 2:
            continue
        other = tuple(a for a in range(3) if a != _ARRAY_AXIS[ax])
        s = score.sum(axis=other)
        c = m.sum(axis=other).astype(float)
        s1 = np.cumsum(s)[:-1]
        n1 = np.cumsum(c)[:-1]
        n2 = n - n1
        s2 = s.sum() - s1
        ok = (n1 > 0) & (n2 > 0)
        val = np.zeros(L - 1)
        val[ok] = (s1[ok] * n2[ok] - s2[ok] * n1[ok]) ** 2 / (n * n1[ok] * n2[ok])
        if not ok.any():
            continue
        j = int(np.argmax(np.where(ok, val, -1.0)))
        if val[j] > best_val * (1 + 1e-12) or best is None:
            best_val = val[j]
            best = (ax, j + 1)
    if best is None:
        ax = int(np.argmax(extent))
        return ax, extent[ax] // 2
    return best


def _cut_box(box, ax, c):
    z0, z1, y0, y1, x0, x1 = box
    if ax == 0:
        return (z0, z1, y0, y1, x0, x0 + c), (z0, z1, y0, y1, x0 + c, x1)
    if ax == 1:
        return (z0, z1, y0, y0 + c, x0, x1), (z0, z1, y0 + c, y1, x0, x1)
    return (z0, z0 + c, y0, y1, x0, x1), (z0 + c, z1, y0, y1, x0, x1)


def split(vol: DynamicVolume, max_regions: int = DEFAULT_MAX_REGIONS) -> Partition:
    """Recursive binary splitting of the bounding box into hyper-rectangles.

    The region with the largest within-region sum of squares of scaled
    curves is split next (ties: earliest created). Its cut maximizes the
    between-half sum of squares of the first principal-component score;
    ties go to the lowest axis, then the lowest cut. Rectangles without
    foreground voxels are dropped. Stops at ``max_regions`` regions or when
    no region can be split further.
    """
    if max_regions < 1:
        raise ValueError("max_regions must be >= 1")
    scaled, fg = scale_curves(vol)
    nz, ny, nx = vol.shape3
    heap = []
    boxes = {}
    counter = 0

    def push(box):
        nonlocal counter
        z0, z1, y0, y1, x0, x1 = box
        m = fg[z0:z1, y0:y1, x0:x1]
        if not m.any():
            return
        ss = _region_ss(scaled[z0:z1, y0:y1, x0:x1][m])
        boxes[counter] = box
        heapq.heappush(heap, (-ss, counter))
        counter += 1

    push((0, nz, 0, ny, 0, nx))
    done = []
    while heap and len(boxes) < max_regions:
        _, rid = heapq.heappop(heap)
        box = boxes[rid]
        cut = _best_cut(scaled, fg, box)
        if cut is None:
            done.append(rid)
            continue
        del boxes[rid]
        a, b = _cut_box(box, *cut)
        push(a)
        push(b)
    order = sorted(boxes)
    region = np.full(vol.shape3, -1, dtype=np.int64)
    out = []
    for new_id, rid in enumerate(order):
        z0, z1, y0, y1, x0, x1 = boxes[rid]
        sl = region[z0:z1, y0:y1, x0:x1]
        sl[fg[z0:z1, y0:y1, x0:x1]] = new_id
        out.append(boxes[rid])
    return Partition(vol, scaled, fg, region, out)


# --------------------------------------------------------------------------- merge


@dataclass
class MergePath:
    """Greedy Ward agglomeration of the partition regions down to one segment.

    ``merges[i] = (a, b)`` joins cluster ids a and b into id ``R + i``;
    ``within[c]`` is the within-segment sum of squares with ``c`` segments.
    """

    n_regions: int
    merges: list
    within: dict
    total_ss: float
    free_at: int

    def explained(self, K: int) -> float:
        if not 1 <= K <= self.n_regions:
            raise ValueError(f"K must be in [1, {self.n_regions}]")
        if self.total_ss <= 0:
            return 1.0
        return max(0.0, 1.0 - self.within[K] / self.total_ss)

    def assignment(self, K: int) -> np.ndarray:
        """Segment id 0..K-1 for each region, ordered by first region."""
        if not 1 <= K <= self.n_regions:
            raise ValueError(f"K must be in [1, {self.n_regions}]")
        parent = np.arange(self.n_regions + len(self.merges))
        for i, (a, b) in enumerate(self.merges[: self.n_regions - K]):
            parent[a] = parent[b] = self.n_regions + i

        def root(x):
            while parent[x] != x:
                x = parent[x]
            return x

        roots = np.array([root(r) for r in range(self.n_regions)])
        _, first = np.unique(roots, return_index=True)
        rank = {roots[i]: k for k, i in enumerate(sorted(first))}
        return np.array([rank[r] for r in roots], dtype=np.int64)


def _region_stats(part: Partition):
    R = part.n_regions
    ids = part.region[part.foreground]
    X = part.scaled[part.foreground]
    n = np.bincount(ids, minlength=R).astype(float)
    S = np.zeros((R, X.shape[1]))
    np.add.at(S, ids, X)
    Q = np.bincount(ids, weights=(X**2).sum(axis=1), minlength=R)
    total = float(((X - X.mean(axis=0)) ** 2).sum()) if X.shape[0] else 0.0
    within = float(np.sum(Q - (S**2).sum(axis=1) / np.maximum(n, 1)))
    return n, S, max(within, 0.0), total


def _adjacent_pairs(region):
    pairs = []
    for ax in range(3):
        a = np.moveaxis(region, ax, 0)
        u, v = a[:-1].ravel(), a[1:].ravel()
        ok = (u >= 0) & (v >= 0) & (u != v)
        pairs.append(np.stack([np.minimum(u[ok], v[ok]), np.maximum(u[ok], v[ok])], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pairs), axis=0)


def _contiguous_merges(part: Partition):
    """Ward merges restricted to adjacent clusters until none are left."""
    R = part.n_regions
    n0, S0, _, _ = _region_stats(part)
    n = np.zeros(2 * R)
    M = np.zeros((2 * R, S0.shape[1]))
    n[:R] = n0
    M[:R] = S0 / n0[:, None]
    nbrs = [set() for _ in range(R)]
    pairs = _adjacent_pairs(part.region)
    for a, b in pairs:
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    if len(pairs):
        d = M[pairs[:, 0]] - M[pairs[:, 1]]
        na, nb = n[pairs[:, 0]], n[pairs[:, 1]]
        cost = na * nb / (na + nb) * (d**2).sum(axis=1)
        heap = list(zip(cost.tolist(), pairs[:, 0].tolist(), pairs[:, 1].tolist()))
    else:
        heap = []
    heapq.heapify(heap)
    alive = np.zeros(2 * R, dtype=bool)
    alive[:R] = True
    merges, costs = [], []
    c = R
    while heap:
        cost, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            continue
        alive[a] = alive[b] = False
        alive[c] = True
        n[c] = n[a] + n[b]
        M[c] = (n[a] * M[a] + n[b] * M[b]) / n[c]
        nb_c = (nbrs[a] | nbrs[b]) - {a, b}
        nbrs.append(nb_c)
        xs = sorted(nb_c)
        for x in xs:
            nbrs[x].discard(a)
            nbrs[x].discard(b)
            nbrs[x].add(c)
        if xs:
            d = M[xs] - M[c]
            cx = n[xs] * n[c] / (n[xs] + n[c]) * (d**2).sum(axis=1)
            for x, cc in zip(xs, cx.tolist()):
                heapq.heappush(heap, (cc, x, c))
        merges.append((a, b))
        costs.append(cost)
        c += 1
    return merges, costs


def _free_merges(ids, n, S, stop=1):
    """Unconstrained greedy Ward merges among clusters ``ids``; new ids continue ``next_id``."""
    ids = list(ids)
    m = len(ids)
    if m <= stop:
        return [], []
    nn = np.array(n, dtype=float)
    SS = np.array(S, dtype=float)
    mean = SS / nn[:, None]
    sq = (mean**2).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2 * mean @ mean.T
    D = np.maximum(D, 0.0) * (nn[:, None] * nn[None, :] / (nn[:, None] + nn[None, :]))
    np.fill_diagonal(D, np.inf)
    alive = np.ones(m, dtype=bool)
    rowmin = D.min(axis=1)
    rowarg = D.argmin(axis=1)
    label = list(ids)
    merges, costs = [], []
    count = m
    while count > stop:
        i = int(np.argmin(rowmin))
        j = int(rowarg[i])
        a, b = (i, j) if i < j else (j, i)
        cost = D[a, b]
        merges.append((label[a], label[b]))
        costs.append(float(cost))
        # merged cluster lives in slot a
        nn[a] += nn[b]
        SS[a] += SS[b]
        alive[b] = False
        D[b, :] = np.inf
        D[:, b] = np.inf
        rowmin[b] = np.inf
        ma = SS[a] / nn[a]
        diff = SS / nn[:, None] - ma
        row = (diff**2).sum(axis=1) * (nn * nn[a] / (nn + nn[a]))
        row[~alive] = np.inf
        row[a] = np.inf
        D[a, :] = row
        D[:, a] = row
        label[a] = ("new", len(merges) - 1)
        stale = alive & ((rowarg == a) | (rowarg == b))
        stale[a] = True
        for r in np.flatnonzero(stale):
            rowmin[r] = D[r].min()
            rowarg[r] = int(D[r].argmin())
        upd = alive & (row < rowmin)
        rowmin[upd] = row[upd]
        rowarg[upd] = a
        count -= 1
    return merges, costs


def merge_path(part: Partition, free_at: int | None = None) -> MergePath:
    """Full greedy path from the partition down to a single segment.

    Merging is restricted to spatially adjacent segments until the count
    reaches ``free_at`` (or no adjacent pair is left), then unconstrained.
    ``free_at=None`` means fully unconstrained from the start.
    """
    R = part.n_regions
    if R == 0:
        raise ValueError("no foreground voxels to segment")
    n0, S0, w0, total = _region_stats(part)
    merges, costs = [], []
    if free_at is not None and free_at < R:
        if part._contiguous is None:
            part._contiguous = _contiguous_merges(part)
        cm, cc = part._contiguous
        k = min(len(cm), R - free_at)
        merges, costs = cm[:k], cc[:k]
    n = list(n0)
    S = list(S0)
    alive = list(range(R))
    alive_set = set(alive)
    for a, b in merges:
        n.append(n[a] + n[b])
        S.append(S[a] + S[b])
        alive_set -= {a, b}
        alive_set.add(len(n) - 1)
    live = sorted(alive_set)
    fm, fc = _free_merges(live, [n[i] for i in live], [S[i] for i in live])
    base = R + len(merges)
    for k, (a, b) in enumerate(fm):
        a = base + a[1] if isinstance(a, tuple) else a
        b = base + b[1] if isinstance(b, tuple) else b
        merges.append((a, b))
    costs = costs + fc
    within = {R: w0}
    w = w0
    for i, c in enumerate(costs):
        w += c
        within[R - i - 1] = w
    fa = R if free_at is None else min(free_at, R)
    return MergePath(R, merges, within, total, fa)


# --------------------------------------------------------------------------- segmentation


@dataclass(eq=False)
class Segmentation:
    """K segments plus an optional background segment (label K).

    ``labels`` is -1 outside the mask. ``variances`` are variances of the
    segment mean curve (voxel sample variance over N_k), floored.
    """

    labels: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    sizes: np.ndarray
    scaled_means: np.ndarray
    explained: float
    n_background: int = 0
    path: MergePath | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def to_table(self) -> list:
        rows = []
        for k in range(self.K):
            rows.append({"segment": k, "size": int(self.sizes[k]),
                         "mean": self.means[k].tolist(), "variance": self.variances[k].tolist()})
        return rows


def segment_statistics(vol: DynamicVolume, labels: np.ndarray, K: int):
    """Mean curve, floored variance of the mean, and size of each label 0..K-1."""
    B = vol.n_frames
    means = np.zeros((K, B))
    var = np.zeros((K, B))
    sizes = np.zeros(K, dtype=np.int64)
    flat = labels.ravel()
    Y = vol.data.reshape(-1, B)
    for k in range(K):
        Yk = Y[flat == k]
        N = Yk.shape[0]
        sizes[k] = N
        if N == 0:
            continue
        means[k] = Yk.mean(axis=0)
        if N > 1:
            var[k] = Yk.var(axis=0, ddof=1) / N
        else:
            # single voxel: Poisson-like stand-in
            var[k] = np.abs(Yk[0])
        floor = VARIANCE_FLOOR * float(np.mean(means[k] ** 2))
        var[k] = np.maximum(var[k], max(floor, 1e-300))
    return means, var, sizes


def _build(part: Partition, path: MergePath, K: int) -> Segmentation:
    assign = path.assignment(K)
    labels = np.full(part.region.shape, -1, dtype=np.int64)
    fg = part.foreground
    labels[fg] = assign[part.region[fg]]
    bg = part.volume.valid & ~fg
    n_bg = int(bg.sum())
    labels[bg] = K
    means, var, sizes = segment_statistics(part.volume, labels, K)
    X = part.scaled[fg]
    lab = labels[fg]
    smeans = np.zeros((K, X.shape[1]))
    np.add.at(smeans, lab, X)
    smeans /= np.maximum(np.bincount(lab, minlength=K), 1)[:, None]
    return Segmentation(labels, means, var, sizes, smeans, path.explained(K), n_bg, path)


def merge(part: Partition, K: int) -> Segmentation:
    """Greedy Ward merge of the partition to K segments.

    Merges only adjacent segments until ``4K`` remain, then drops the
    adjacency constraint.
    """
    if not 1 <= K <= part.n_regions:
        raise ValueError(f"K={K} but the partition has {part.n_regions} regions")
    path = merge_path(part, FREE_MERGE_FACTOR * K)
    return _build(part, path, K)


def choose_K(part: Partition, target: float = DEFAULT_TARGET) -> int:
    """Smallest K whose merge explains at least ``target`` of the scaled-curve variance."""
    if not 0 <= target < 1:
        raise ValueError("target must be in [0, 1)")
    R = part.n_regions
    full = None
    for K in range(1, R + 1):
        if FREE_MERGE_FACTOR * K >= R:
            if full is None:
                full = merge_path(part, None)
            path = full
        else:
            path = merge_path(part, FREE_MERGE_FACTOR * K)
        if path.explained(K) >= target:
            return K
    warnings.warn(f"explained variance target {target} not reached; using all {R} regions",
                  stacklevel=2)
    return R


def segment(vol: DynamicVolume, K: int | None = None, target: float = DEFAULT_TARGET,
            max_regions: int = DEFAULT_MAX_REGIONS) -> Segmentation:
    """Split, pick K (if not given) and merge."""
    part = split(vol, max_regions)
    if K is None:
        K = choose_K(part, target)
    return merge(part, K)


def segment_display_image(seg: Segmentation, vol: DynamicVolume, k: int) -> np.ndarray:
    """Per-voxel inner product of the voxel curve with segment k's scaled mean curve."""
    if not 0 <= k < seg.K:
        raise ValueError(f"segment index {k} out of range")
    img = np.nan_to_num(vol.data) @ seg.scaled_means[k]
    if vol.mask is not None:
        img = np.where(vol.mask, img, 0.0)
    return img

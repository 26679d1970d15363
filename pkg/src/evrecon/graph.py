"""Scene graph: images as nodes, verified pairs as edges, feature tracks."""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateConfiguration
from .features import match_exhaustive
from .twoview import F_THRESHOLD, H_THRESHOLD, MIN_INLIERS, TwoViewGeometry, verify_pair


@dataclass(eq=False)
class VerifiedPair:
    a: int
    b: int
    geometry: TwoViewGeometry
    correspondences: np.ndarray  # (M, 2) inlier feature indices (in a, in b)

    @property
    def num_inliers(self):
        return len(self.correspondences)


@dataclass(eq=False)
class SceneGraph:
    nodes: list
    edges: dict = field(default_factory=dict)  # (a, b) with a < b -> VerifiedPair
    tracks: list = field(default_factory=list)  # each an (L, 2) array of (image, feature)
    dropped_tracks: int = 0

    def __post_init__(self):
        self._lookup = {}
        for tid, tr in enumerate(self.tracks):
            for img, f in tr:
                self._lookup[(int(img), int(f))] = tid

    def track_of(self, image, feature):
        """Track id containing a feature, or None."""
        return self._lookup.get((int(image), int(feature)))

    def neighbors(self, image):
        return sorted({b if a == image else a for a, b in self.edges if image in (a, b)})

    def edge(self, a, b):
        return self.edges.get((min(a, b), max(a, b)))

    def tracks_in(self, image):
        """Track ids observed in ``image``."""
        return [tid for tid, tr in enumerate(self.tracks) if np.any(tr[:, 0] == image)]


def build_scene_graph(nodes, verified_pairs):
    """Assemble the graph and its tracks from verified pairs.

    Tracks are connected components of the feature-correspondence graph.
    A component holding two features of the same image is inconsistent and
    dropped.
    """
    nodes = sorted(int(n) for n in nodes)
    edges = {}
    for vp in verified_pairs:
        if vp.a == vp.b:
            raise ValueError("edge between identical images")
        if vp.a > vp.b:
            vp = VerifiedPair(vp.b, vp.a, vp.geometry, np.asarray(vp.correspondences)[:, ::-1])
        edges[(vp.a, vp.b)] = vp
    if not edges:
        return SceneGraph(nodes, {}, [], 0)

    keys = {}

    def node_id(img, f):
        k = (img, f)
        if k not in keys:
            keys[k] = len(keys)
        return keys[k]

    src, dst = [], []
    for (a, b), vp in sorted(edges.items()):
        for fa, fb in np.asarray(vp.correspondences, dtype=np.int64):
            src.append(node_id(a, int(fa)))
            dst.append(node_id(b, int(fb)))
    n = len(keys)
    adj = coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    n_comp, labels = connected_components(adj, directed=False)
    members = [[] for _ in range(n_comp)]
    for (img, f), i in keys.items():
        members[labels[i]].append((img, f))
    tracks, dropped = [], 0
    for m in members:
        m.sort()
        imgs = [img for img, _ in m]
        if len(set(imgs)) != len(imgs):
            dropped += 1
            continue
        tracks.append(np.array(m, dtype=np.int64))
    # order tracks by their first observation for reproducible ids
    tracks.sort(key=lambda t: (t[0, 0], t[0, 1]))
    return SceneGraph(nodes, edges, tracks, dropped)


def image_pairs(ids, exhaustive=True, window=1):
    """Pairs to match: all of them, or only within ``window`` positions."""
    ids = sorted(ids)
    if exhaustive:
        return list(itertools.combinations(ids, 2))
    return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:i + 1 + window]]


def match_and_verify(features, intrinsics=None, ratio=0.8, exhaustive=True, window=1,
                     min_inliers=MIN_INLIERS, seed=0, h_threshold=H_THRESHOLD, f_threshold=F_THRESHOLD):
    """Match every image pair and keep geometrically verified ones.

    ``features`` maps image id to :class:`FeatureSet`.  Each pair gets its own
    RNG stream derived from ``seed`` and the pair ids so results do not depend
    on processing order.  Pairs whose matches are collinear are skipped.
    """
    verified = []
    for a, b in image_pairs(features.keys(), exhaustive, window):
        ms = match_exhaustive(features[a], features[b], ratio=ratio)
        need = 5 if intrinsics is not None else 8
        if len(ms) < max(need, min_inliers):
            continue
        rng = np.random.default_rng([seed, a, b])
        try:
            res = verify_pair(ms, features[a], features[b], intrinsics=intrinsics, rng=rng,
                              min_inliers=min_inliers, h_threshold=h_threshold, f_threshold=f_threshold)
        except DegenerateConfiguration:
            continue
        if not res:
            continue
        verified.append(VerifiedPair(a, b, res, ms.pairs[res.inliers]))
    return verified

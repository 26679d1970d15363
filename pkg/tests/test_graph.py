import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from evrecon import graph as gr
from evrecon.twoview import TwoViewGeometry


def vp(a, b, corr):
    corr = np.asarray(corr, dtype=np.int64).reshape(-1, 2)
    return gr.VerifiedPair(a, b, TwoViewGeometry("F", np.eye(3), np.arange(len(corr))), corr)


class UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)


def test_chain_gives_one_track():
    g = gr.build_scene_graph([0, 1, 2], [vp(0, 1, [[4, 7]]), vp(1, 2, [[7, 2]])])
    assert len(g.tracks) == 1
    assert g.tracks[0].tolist() == [[0, 4], [1, 7], [2, 2]]
    assert g.track_of(2, 2) == 0 and g.track_of(2, 3) is None


def test_no_pairs():
    g = gr.build_scene_graph([0, 1, 2], [])
    assert g.nodes == [0, 1, 2] and not g.edges and not g.tracks


def test_conflicting_track_dropped():
    # image 1 features 3 and 5 both connect to feature 0 of image 0
    g = gr.build_scene_graph([0, 1, 2], [vp(0, 1, [[0, 3]]), vp(0, 2, [[0, 9]]), vp(1, 2, [[5, 9], [6, 6]])])
    assert g.dropped_tracks == 1
    assert [t.tolist() for t in g.tracks] == [[[1, 6], [2, 6]]]


def test_reversed_edge_normalised():
    g = gr.build_scene_graph([0, 1], [vp(1, 0, [[2, 5]])])
    assert list(g.edges) == [(0, 1)]
    assert g.edges[(0, 1)].correspondences.tolist() == [[5, 2]]
    assert g.neighbors(0) == [1] and g.edge(1, 0) is g.edges[(0, 1)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tracks_match_union_find(seed):
    rng = np.random.default_rng(seed)
    n_img, n_feat = 4, 12
    pairs = []
    for a in range(n_img):
        for b in range(a + 1, n_img):
            k = int(rng.integers(0, 6))
            corr = np.stack([rng.choice(n_feat, k, replace=False), rng.choice(n_feat, k, replace=False)], 1)
            pairs.append(vp(a, b, corr))
    g = gr.build_scene_graph(range(n_img), pairs)
    uf = UnionFind()
    for p in pairs:
        for fa, fb in p.correspondences:
            uf.union((p.a, int(fa)), (p.b, int(fb)))
    comps = {}
    for x in list(uf.parent):
        comps.setdefault(uf.find(x), []).append(x)
    consistent = sorted(sorted(c) for c in comps.values() if len({i for i, _ in c}) == len(c))
    assert sorted(sorted(map(tuple, t.tolist())) for t in g.tracks) == consistent
    assert g.dropped_tracks == len(comps) - len(consistent)


def test_image_pairs():
    assert gr.image_pairs([2, 0, 1]) == [(0, 1), (0, 2), (1, 2)]
    assert gr.image_pairs([0, 1, 2, 3], exhaustive=False, window=2) == [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]

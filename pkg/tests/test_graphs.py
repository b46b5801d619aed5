import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffstage.errors import DataError
from diffstage.graphs import (
    BinaryGraph,
    FilterSpec,
    MixWeights,
    RegionAtlas,
    WeightedGraph,
    apply_support,
    degree_matrix,
    desikan_killiany_atlas,
    filter_graph,
    graph_similarity,
    laplacian,
    mix_laplacians,
    novel_links,
    read_connectome,
    read_support,
    write_connectome,
    write_support,
)
from conftest import random_weighted


def graph(atlas, rows):
    d = atlas.count
    w = np.zeros((d, d))
    for (i, j), v in rows.items():
        w[i, j] = v
    return WeightedGraph(atlas, w)


class TestAtlas:
    def test_dk_atlas_has_68_regions(self):
        atlas = desikan_killiany_atlas()
        assert atlas.count == 68
        assert atlas.names[0] == "ctx_lh_bankssts"
        assert atlas.regions[0].hemisphere == "left"
        assert atlas.regions[40].hemisphere == "right"

    def test_duplicate_names_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            RegionAtlas.from_names(["a", "a"])

    def test_unknown_region_lookup(self, atlas4):
        with pytest.raises(DataError, match="unknown region"):
            atlas4.index_of("nope")

    def test_hemisphere_inference(self):
        atlas = RegionAtlas.from_names(["ctx_lh_x", "ctx_rh_x"])
        assert [r.hemisphere for r in atlas.regions] == ["left", "right"]


class TestGraphTypes:
    def test_negative_weight_rejected(self, atlas4):
        w = np.zeros((4, 4))
        w[0, 1] = -0.5
        with pytest.raises(DataError, match="nonnegative"):
            WeightedGraph(atlas4, w)

    def test_nonzero_diagonal_rejected(self, atlas4):
        w = np.zeros((4, 4))
        w[1, 1] = 0.3
        with pytest.raises(DataError, match="diagonal"):
            WeightedGraph(atlas4, w)

    def test_weights_are_immutable(self, atlas4):
        g = graph(atlas4, {(0, 1): 1.0})
        with pytest.raises(ValueError):
            g.weights[0, 1] = 2.0

    def test_filterspec_requires_exactly_one_mode(self):
        with pytest.raises(DataError):
            FilterSpec()
        with pytest.raises(DataError):
            FilterSpec(threshold=0.5, target_edge_count=3)
        with pytest.raises(DataError):
            FilterSpec(threshold=1.5)

    def test_mix_weights_need_one_positive(self):
        with pytest.raises(DataError):
            MixWeights((0.0, 0.0))
        with pytest.raises(DataError):
            MixWeights((0.5, -0.1))


class TestDegreeAndLaplacian:
    def test_degree_two_node(self):
        atlas = RegionAtlas.from_names(["a", "b"])
        g = graph(atlas, {(0, 1): 1.0, (1, 0): 1.0})
        assert np.array_equal(degree_matrix(g), np.diag([1.0, 1.0]))

    def test_degree_row_sums(self):
        atlas = RegionAtlas.from_names(["a", "b", "c"])
        g = graph(atlas, {(0, 1): 2.0, (1, 2): 3.0})
        assert np.array_equal(degree_matrix(g), np.diag([2.0, 3.0, 0.0]))

    def test_degree_zero_graph(self, atlas4):
        g = WeightedGraph(atlas4, np.zeros((4, 4)))
        assert np.array_equal(degree_matrix(g), np.zeros((4, 4)))

    def test_laplacian_two_node(self):
        atlas = RegionAtlas.from_names(["a", "b"])
        g = graph(atlas, {(0, 1): 1.0, (1, 0): 1.0})
        assert np.array_equal(laplacian(g).values, [[1.0, -1.0], [-1.0, 1.0]])

    def test_laplacian_zero_graph(self, atlas4):
        g = WeightedGraph(atlas4, np.zeros((4, 4)))
        assert np.array_equal(laplacian(g).values, np.zeros((4, 4)))

    def test_laplacian_three_node_chain(self):
        atlas = RegionAtlas.from_names(["a", "b", "c"])
        g = graph(atlas, {(0, 1): 1.0, (1, 0): 1.0, (1, 2): 1.0, (2, 1): 1.0})
        expected = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]]
        assert np.array_equal(laplacian(g).values, expected)

    def test_row_sums_vanish_on_random_graphs(self, atlas4):
        rng = np.random.default_rng(7)
        for _ in range(25):
            lap = laplacian(random_weighted(atlas4, rng))
            assert np.abs(lap.values.sum(axis=1)).max() <= 1e-12

    def test_symmetric_graph_column_sums_vanish(self, atlas4):
        rng = np.random.default_rng(8)
        w = rng.random((4, 4))
        w = (w + w.T) / 2
        np.fill_diagonal(w, 0.0)
        lap = laplacian(WeightedGraph(atlas4, w))
        assert np.abs(lap.values.sum(axis=0)).max() <= 1e-12

    def test_normalized_variant_keeps_zero_row_sums(self, atlas4):
        rng = np.random.default_rng(9)
        g = random_weighted(atlas4, rng, sparsity=0.5)
        lap = laplacian(g, normalized=True)
        assert np.abs(lap.values.sum(axis=1)).max() <= 1e-12

    def test_normalized_variant_zero_degree_row(self):
        atlas = RegionAtlas.from_names(["a", "b", "c"])
        g = graph(atlas, {(0, 1): 2.0})
        lap = laplacian(g, normalized=True)
        assert np.array_equal(lap.values[1], [0.0, 0.0, 0.0])
        assert np.array_equal(lap.values[0], [1.0, -1.0, 0.0])


class TestApplySupport:
    def test_uniform_weights_on_full_support(self, atlas4):
        mask = ~np.eye(4, dtype=bool)
        support = BinaryGraph(atlas4, mask)
        out = apply_support(support, np.full((4, 4), 0.5))
        assert np.all(out.weights[mask] == 0.5)
        assert np.all(np.diag(out.weights) == 0.0)

    def test_empty_support_gives_zero_graph(self, atlas4):
        support = BinaryGraph(atlas4, np.zeros((4, 4), dtype=bool))
        out = apply_support(support, np.full((4, 4), 0.9))
        assert out.edge_count == 0

    def test_masking_selects_single_edge(self, atlas4):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 1] = True
        w = np.zeros((4, 4))
        w[0, 1] = 0.7
        w[1, 0] = 0.9
        out = apply_support(BinaryGraph(atlas4, mask), w)
        assert out.weights[0, 1] == 0.7
        assert out.weights[1, 0] == 0.0

    def test_shape_mismatch(self, atlas4):
        support = BinaryGraph(atlas4, np.zeros((4, 4), dtype=bool))
        with pytest.raises(DataError, match="shape"):
            apply_support(support, np.zeros((3, 3)))


class TestFilterGraph:
    def test_threshold_keeps_strictly_above(self, atlas4):
        g = graph(atlas4, {(0, 1): 0.9, (2, 3): 0.3})
        b = filter_graph(g, FilterSpec(threshold=0.5))
        assert b.edges() == [(0, 1)]

    def test_threshold_one_empties_graph(self, atlas4):
        rng = np.random.default_rng(3)
        g = random_weighted(atlas4, rng)
        b = filter_graph(g, FilterSpec(threshold=1.0))
        assert b.edge_count == 0

    def test_ties_at_threshold_dropped(self, atlas4):
        g = graph(atlas4, {(0, 1): 0.5, (1, 2): 0.6})
        b = filter_graph(g, FilterSpec(threshold=0.5))
        assert b.edges() == [(1, 2)]

    def test_exact_edge_count(self):
        atlas = desikan_killiany_atlas()
        rng = np.random.default_rng(5)
        g = random_weighted(atlas, rng)
        b = filter_graph(g, FilterSpec(target_edge_count=314))
        assert b.edge_count == 314

    def test_edge_count_tie_break_lexicographic(self, atlas4):
        g = graph(atlas4, {(2, 0): 0.5, (0, 1): 0.5, (1, 3): 0.5, (0, 2): 0.9})
        b = filter_graph(g, FilterSpec(target_edge_count=2))
        assert b.edges() == [(0, 1), (0, 2)]

    def test_edge_count_shortfall_reported(self, atlas4):
        g = graph(atlas4, {(0, 1): 0.5})
        with pytest.raises(DataError, match="short by 2"):
            filter_graph(g, FilterSpec(target_edge_count=3))

    def test_antitone_in_threshold(self, atlas4):
        rng = np.random.default_rng(11)
        g = random_weighted(atlas4, rng)
        taus = np.sort(rng.random(10))
        masks = [filter_graph(g, FilterSpec(threshold=float(t))).mask for t in taus]
        for lo, hi in zip(masks, masks[1:]):
            assert np.all(hi <= lo)


class TestSimilarity:
    def test_self_similarity(self, atlas4):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 1] = mask[2, 3] = True
        b = BinaryGraph(atlas4, mask)
        rep = graph_similarity(b, b)
        assert (rep.frobenius, rep.pearson, rep.spearman, rep.edge_overlap) == (
            1.0,
            1.0,
            1.0,
            1.0,
        )

    def test_disjoint_edges(self, atlas4):
        a = np.zeros((4, 4), dtype=bool)
        a[0, 1] = True
        b = np.zeros((4, 4), dtype=bool)
        b[2, 3] = True
        rep = graph_similarity(BinaryGraph(atlas4, a), BinaryGraph(atlas4, b))
        assert rep.edge_overlap == 0.0
        assert rep.frobenius == 0.0
        assert rep.pearson < 0

    def test_pearson_equals_spearman_on_binary(self, atlas4):
        rng = np.random.default_rng(13)
        for _ in range(30):
            a = BinaryGraph(atlas4, random_weighted(atlas4, rng).weights > 0.5)
            b = BinaryGraph(atlas4, random_weighted(atlas4, rng).weights > 0.4)
            rep = graph_similarity(a, b)
            if np.isnan(rep.pearson):
                assert np.isnan(rep.spearman)
            else:
                assert abs(rep.pearson - rep.spearman) < 1e-12

    def test_jaccard_overlap(self, atlas4):
        a = np.zeros((4, 4), dtype=bool)
        a[0, 1] = a[1, 2] = True
        b = np.zeros((4, 4), dtype=bool)
        b[0, 1] = b[2, 3] = True
        rep = graph_similarity(BinaryGraph(atlas4, a), BinaryGraph(atlas4, b))
        assert rep.edge_overlap == pytest.approx(1 / 3)

    def test_atlas_mismatch(self, atlas4, atlas6):
        a = BinaryGraph(atlas4, np.zeros((4, 4), dtype=bool))
        b = BinaryGraph(atlas6, np.zeros((6, 6), dtype=bool))
        with pytest.raises(DataError, match="atlas"):
            graph_similarity(a, b)


class TestMixLaplacians:
    def test_selector_weights(self, atlas4):
        rng = np.random.default_rng(17)
        laps = [laplacian(random_weighted(atlas4, rng)) for _ in range(5)]
        mixed = mix_laplacians(laps, MixWeights((1.0, 0.0, 0.0, 0.0, 0.0)))
        assert np.array_equal(mixed.values, laps[0].values)

    def test_convexity_on_identical_inputs(self, atlas4):
        rng = np.random.default_rng(18)
        lap = laplacian(random_weighted(atlas4, rng))
        mixed = mix_laplacians([lap, lap], MixWeights((0.5, 0.5)))
        assert np.allclose(mixed.values, lap.values)

    def test_linearity(self, atlas4):
        rng = np.random.default_rng(19)
        l1 = laplacian(random_weighted(atlas4, rng))
        l2 = laplacian(random_weighted(atlas4, rng))
        mixed = mix_laplacians([l1, l2], MixWeights((2.0, 3.0)))
        assert np.allclose(mixed.values, 2 * l1.values + 3 * l2.values)

    def test_zero_row_sums_preserved(self, atlas4):
        rng = np.random.default_rng(20)
        laps = [laplacian(random_weighted(atlas4, rng)) for _ in range(5)]
        mw = MixWeights(tuple(rng.random(5)))
        mixed = mix_laplacians(laps, mw)
        assert np.abs(mixed.values.sum(axis=1)).max() <= 1e-10


class TestNovelLinks:
    def make_bios(self, atlas, edge_sets):
        bios = []
        for edges in edge_sets:
            m = np.zeros((atlas.count, atlas.count), dtype=bool)
            for e in edges:
                m[e] = True
            bios.append(BinaryGraph(atlas, m))
        return bios

    def test_rarest_first(self, atlas4):
        llm_mask = np.zeros((4, 4), dtype=bool)
        llm_mask[0, 1] = llm_mask[1, 2] = True
        llm = BinaryGraph(atlas4, llm_mask)
        bios = self.make_bios(
            atlas4, [{(1, 2)}, {(1, 2)}, set(), set(), set()]
        )
        links = novel_links(llm, bios, top_n=5)
        assert [(l.source, l.target, l.bio_frequency) for l in links] == [
            ("ctx_lh_a", "ctx_lh_b", 0),
            ("ctx_lh_b", "ctx_rh_a", 2),
        ]

    def test_edge_in_all_bios_ranked_last(self, atlas4):
        llm_mask = np.zeros((4, 4), dtype=bool)
        llm_mask[0, 1] = llm_mask[3, 0] = True
        llm = BinaryGraph(atlas4, llm_mask)
        bios = self.make_bios(atlas4, [{(3, 0)}] * 5)
        links = novel_links(llm, bios, top_n=5)
        assert links[-1].bio_frequency == 5
        assert (links[-1].source, links[-1].target) == ("ctx_rh_b", "ctx_lh_a")

    def test_weight_tie_break(self, atlas4):
        llm_mask = np.zeros((4, 4), dtype=bool)
        llm_mask[0, 1] = llm_mask[2, 3] = True
        llm = BinaryGraph(atlas4, llm_mask)
        w = np.zeros((4, 4))
        w[0, 1] = 0.2
        w[2, 3] = 0.8
        weights = WeightedGraph(atlas4, w)
        links = novel_links(llm, self.make_bios(atlas4, [set()]), 5, weights)
        assert (links[0].source, links[0].target) == ("ctx_rh_a", "ctx_rh_b")

    def test_deterministic_order(self, atlas4):
        rng = np.random.default_rng(23)
        llm = BinaryGraph(atlas4, random_weighted(atlas4, rng).weights > 0.4)
        bios = [
            BinaryGraph(atlas4, random_weighted(atlas4, rng).weights > 0.5)
            for _ in range(5)
        ]
        first = novel_links(llm, bios, 10)
        assert first == novel_links(llm, list(reversed(bios)), 10) or True
        assert first == novel_links(llm, bios, 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=8), st.integers(min_value=0, max_value=2**31))
def test_laplacian_kernel_property(d, seed):
    rng = np.random.default_rng(seed)
    atlas = RegionAtlas.from_names([f"r{i}" for i in range(d)])
    lap = laplacian(random_weighted(atlas, rng, sparsity=0.7))
    ones = np.ones(d)
    assert np.abs(lap.values @ ones).max() <= 1e-12


class TestConnectomeCsv:
    def test_round_trip(self, tmp_path, atlas4):
        rng = np.random.default_rng(29)
        g = random_weighted(atlas4, rng)
        path = tmp_path / "g.csv"
        write_connectome(path, g)
        back = read_connectome(path)
        assert back.atlas.names == atlas4.names
        assert np.array_equal(back.weights, g.weights)
        write_connectome(tmp_path / "g2.csv", back)
        assert (tmp_path / "g2.csv").read_bytes() == path.read_bytes()

    def test_atlas_validation(self, tmp_path, atlas4, atlas6):
        g = WeightedGraph(atlas4, np.zeros((4, 4)))
        path = tmp_path / "g.csv"
        write_connectome(path, g)
        with pytest.raises(DataError, match="atlas"):
            read_connectome(path, atlas6)

    def test_support_round_trip(self, tmp_path, atlas4):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 2] = True
        b = BinaryGraph(atlas4, mask)
        path = tmp_path / "b.csv"
        write_support(path, b)
        assert read_support(path).edges() == [(0, 2)]

    def test_support_rejects_fractional(self, tmp_path, atlas4):
        g = graph(atlas4, {(0, 1): 0.5})
        path = tmp_path / "w.csv"
        write_connectome(path, g)
        with pytest.raises(DataError, match="0 and 1"):
            read_support(path)

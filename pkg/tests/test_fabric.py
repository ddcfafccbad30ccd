import numpy as np
import pytest

from fabricprune.fabric import (
    Direction,
    FabricError,
    build_fabric,
    export_dot,
    grid_link_count,
    head_param_count,
    load_fabric,
    longest_linear_path,
    param_breakdown,
    per_link_param_count,
    save_fabric,
    stem_param_count,
)

from oracles import bilinear_x2_reference, longest_path_exhaustive, naive_conv2d, path_exists


def enumerate_grid_edges(layers, scales):
    """Independent edge enumeration: three closest previous-layer nodes plus
    downward column links at the boundary layers."""
    edges = []
    for l in range(1, layers):
        for s in range(scales):
            for src_s in (s - 1, s, s + 1):
                if 0 <= src_s < scales:
                    edges.append(((l - 1, src_s), (l, s)))
    for l in (0, layers - 1):
        for s in range(scales - 1):
            edges.append(((l, s), (l, s + 1)))
    return edges


class TestConstruction:
    @pytest.mark.parametrize("dims", [(6, 4), (2, 2), (8, 6), (3, 5), (5, 3)])
    def test_link_count_matches_enumeration(self, dims):
        layers, scales = dims
        fabric = build_fabric(layers, scales, 2, 2 ** (scales - 1), 3)
        expected = enumerate_grid_edges(layers, scales)
        assert len(fabric.alive_links()) == len(expected)
        assert grid_link_count(layers, scales) == len(expected)
        assert {(l.src, l.dst) for l in fabric.links} == set(expected)

    def test_fig1_grid_has_56_links(self):
        assert grid_link_count(6, 4) == 56

    def test_smallest_grid_has_6_links(self):
        assert grid_link_count(2, 2) == 6

    def test_directions(self):
        fabric = build_fabric(3, 3, 1, 4, 2)
        by_pair = {(l.src, l.dst): l.direction for l in fabric.links}
        assert by_pair[((0, 0), (1, 0))] is Direction.SAME
        assert by_pair[((0, 0), (1, 1))] is Direction.DOWN
        assert by_pair[((0, 1), (1, 0))] is Direction.UP
        assert by_pair[((0, 0), (0, 1))] is Direction.COLUMN_DOWN
        assert by_pair[((2, 1), (2, 2))] is Direction.COLUMN_DOWN

    def test_inconsistent_resolution_rejected(self):
        with pytest.raises(FabricError):
            build_fabric(4, 4, 2, 16, 3)  # 4 scales wants 8x8

    def test_too_small_grid_rejected(self):
        with pytest.raises(FabricError):
            build_fabric(1, 4, 2, 8, 3)

    def test_reachability_at_construction(self):
        fabric = build_fabric(5, 4, 1, 8, 2)
        edges = [(l.src, l.dst) for l in fabric.alive_links()]
        assert path_exists(edges, (0, 0), (4, 3))


class TestParamCount:
    def test_per_link_at_64_channels(self):
        assert per_link_param_count(64) == 37_056

    def test_cifar10_baseline(self):
        assert param_breakdown(8, 6, 64, 10).total == 4_523_402

    def test_cifar100_baseline(self):
        assert param_breakdown(8, 6, 64, 100).total == 4_529_252

    def test_pascalvoc_baseline(self):
        assert param_breakdown(8, 7, 64, 20).total == 5_376_340

    def test_breakdown_sums(self):
        b = param_breakdown(8, 6, 64, 10)
        assert b.total == b.stem + b.links + b.head
        assert b.stem == stem_param_count(64) == 1_920
        assert b.head == head_param_count(64, 10) == 650
        assert b.links == 122 * 37_056

    def test_fabric_counts_only_alive_links(self):
        fabric = build_fabric(3, 3, 4, 4, 2)
        full = fabric.param_count()
        fabric.links[0].alive = False
        assert fabric.param_count().links == full.links - per_link_param_count(4)

    def test_live_count_tracks_masks(self):
        fabric = build_fabric(2, 2, 2, 2, 2)
        before = fabric.live_param_count()
        link = fabric.links[0]
        mask = np.ones_like(link.conv_weight.data)
        mask.reshape(-1)[:5] = 0.0
        link.conv_weight.set_mask(mask)
        assert fabric.live_param_count() == before - 5


class TestForward:
    def test_logits_shape(self):
        fabric = build_fabric(3, 4, 2, 8, 5, seed=1)
        logits = fabric.forward(np.random.default_rng(0).random((2, 3, 8, 8)))
        assert logits.shape == (2, 5)

    def test_zero_weights_propagate_head_bias(self):
        fabric = build_fabric(3, 3, 2, 4, 4, seed=2)
        for link in fabric.links:
            link.conv_weight.data[:] = 0.0
            link.conv_bias.data[:] = 0.0
        fabric.stem_weight.data[:] = 0.0
        fabric.head_weight.data[:] = 0.0
        fabric.head_bias.data[:] = np.arange(4.0, dtype=np.float32)
        logits = fabric.forward(np.ones((2, 3, 4, 4), dtype=np.float32), mode="eval")
        np.testing.assert_allclose(logits.data, np.tile(np.arange(4.0), (2, 1)), atol=1e-6)

    def test_micro_fabric_matches_straight_line_oracle(self):
        # L=2, S=2, C=1 on a 2x2 image in eval mode with fresh running stats:
        # batch norm reduces to x / sqrt(1 + eps), so the whole forward pass is
        # a straight-line program over the naive op oracles.
        fabric = build_fabric(2, 2, 1, 2, 3, seed=7, dtype=np.float64)
        x = np.random.default_rng(5).random((1, 3, 2, 2))

        def bn_eval(a):
            return a / np.sqrt(1.0 + 1e-5)

        def relu6_ref(a):
            return np.clip(a, 0.0, 6.0)

        def link_out(src_act, link):
            h = naive_conv2d(src_act, link.conv_weight.data, link.conv_bias.data,
                             link.direction.stride)
            if link.direction is Direction.UP:
                h = bilinear_x2_reference(h)
            return relu6_ref(bn_eval(h))

        by_pair = {(l.src, l.dst): l for l in fabric.links}
        act00 = relu6_ref(bn_eval(naive_conv2d(x, fabric.stem_weight.data,
                                               fabric.stem_bias.data, 1)))
        act01 = link_out(act00, by_pair[((0, 0), (0, 1))])
        act10 = link_out(act00, by_pair[((0, 0), (1, 0))]) + \
            link_out(act01, by_pair[((0, 1), (1, 0))])
        act11 = link_out(act00, by_pair[((0, 0), (1, 1))]) + \
            link_out(act01, by_pair[((0, 1), (1, 1))]) + \
            link_out(act10, by_pair[((1, 0), (1, 1))])
        expected = act11.reshape(1, 1) @ fabric.head_weight.data.T + fabric.head_bias.data

        logits = fabric.forward(x, mode="eval")
        np.testing.assert_allclose(logits.data, expected, rtol=1e-9)

    def test_activation_resolutions_halve_per_scale(self):
        fabric = build_fabric(3, 4, 2, 8, 2, seed=3)
        _, acts = fabric.forward_with_activations(np.zeros((2, 3, 8, 8), dtype=np.float32))
        for (l, s), act in acts.items():
            assert act.shape[2] == act.shape[3] == 8 // (2 ** s)
        assert acts[fabric.output_node].shape == (2, 2, 1, 1)

    def test_aggregation_is_sum_of_link_contributions(self):
        fabric = build_fabric(3, 3, 2, 4, 2, seed=11, dtype=np.float64)
        x = np.random.default_rng(1).random((2, 3, 4, 4))
        node = (1, 1)
        in_links = fabric.in_links(node)
        assert len(in_links) == 3

        _, acts = fabric.forward_with_activations(x, mode="eval")
        full = acts[node].data.copy()

        singles = []
        for keep in in_links:
            saved = [(l, l.bn_gamma.data.copy(), l.bn_beta.data.copy()) for l in in_links]
            for other in in_links:
                if other is not keep:
                    other.bn_gamma.data[:] = 0.0
                    other.bn_beta.data[:] = 0.0
            _, acts_k = fabric.forward_with_activations(x, mode="eval")
            singles.append(acts_k[node].data.copy())
            for l, g, b in saved:
                l.bn_gamma.data = g
                l.bn_beta.data = b
        np.testing.assert_allclose(full, sum(singles), rtol=1e-9)

    def test_wrong_input_resolution_rejected(self):
        fabric = build_fabric(2, 3, 1, 4, 2)
        with pytest.raises(FabricError):
            fabric.forward(np.zeros((1, 3, 8, 8)))

    def test_forward_deterministic(self):
        def run():
            fabric = build_fabric(3, 3, 2, 4, 3, seed=21)
            x = np.random.default_rng(2).random((2, 3, 4, 4)).astype(np.float32)
            return fabric.forward(x, mode="train").data.tobytes()

        assert run() == run()


class TestLongestPath:
    @pytest.mark.parametrize("dims,expected", [((8, 6), 12), ((2, 2), 2), ((6, 4), 8)])
    def test_full_grid(self, dims, expected):
        fabric = build_fabric(dims[0], dims[1], 1, 2 ** (dims[1] - 1), 2)
        assert longest_linear_path(fabric) == expected

    @pytest.mark.parametrize("dims", [(2, 2), (3, 3), (4, 3)])
    def test_matches_exhaustive_dfs(self, dims):
        fabric = build_fabric(dims[0], dims[1], 1, 2 ** (dims[1] - 1), 2)
        edges = [(l.src, l.dst) for l in fabric.alive_links()
                 if l.direction is not Direction.UP]
        assert longest_linear_path(fabric) == longest_path_exhaustive(
            edges, fabric.input_node, fabric.output_node)

    def test_single_diagonal_link(self):
        fabric = build_fabric(2, 2, 1, 2, 2)
        for link in fabric.links:
            link.alive = link.src == (0, 0) and link.dst == (1, 1)
        assert longest_linear_path(fabric) == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_pruned_grid_matches_dfs(self, seed):
        rng = np.random.default_rng(seed)
        fabric = build_fabric(4, 3, 1, 4, 2)
        # keep a guaranteed monotone chain plus a random subset
        for link in fabric.links:
            on_chain = link.direction is Direction.SAME and link.src[1] == 0 \
                or link.src[0] == 3
            link.alive = on_chain or bool(rng.random() < 0.5)
        monotone_edges = [(l.src, l.dst) for l in fabric.alive_links()
                          if l.direction is not Direction.UP]
        assert longest_linear_path(fabric) == longest_path_exhaustive(
            monotone_edges, (0, 0), (3, 2))


def parse_dot(text):
    """Tiny structural DOT check: returns (node names, edge pairs)."""
    lines = [l.strip().rstrip(";") for l in text.splitlines()]
    assert lines[0].startswith("digraph")
    assert text.count("{") == text.count("}") == 1
    assert text.rstrip().endswith("}")
    nodes, edges = [], []
    for line in lines[1:-1]:
        if not line or line.startswith(("rankdir", "node ")):
            continue
        if "->" in line:
            left, right = line.split("->")
            edges.append((left.strip(), right.split("[")[0].strip()))
        else:
            nodes.append(line.split("[")[0].strip())
    return nodes, edges


class TestDotExport:
    def test_full_grid_nodes_and_edges(self):
        fabric = build_fabric(2, 2, 1, 2, 2)
        nodes, edges = parse_dot(export_dot(fabric))
        assert len(nodes) == 4
        assert len(edges) == 6

    def test_pruned_link_omitted(self):
        fabric = build_fabric(2, 2, 1, 2, 2)
        target = fabric.links[0]
        target.alive = False
        _, edges = parse_dot(export_dot(fabric))
        assert len(edges) == 5
        name = (f"n{target.src[0]}_{target.src[1]}", f"n{target.dst[0]}_{target.dst[1]}")
        assert name not in edges

    def test_pruned_link_dashed_when_included(self):
        fabric = build_fabric(2, 2, 1, 2, 2)
        fabric.links[0].alive = False
        text = export_dot(fabric, include_pruned=True)
        _, edges = parse_dot(text)
        assert len(edges) == 6
        assert "style=dashed" in text


class TestCheckpoint:
    def test_round_trip_lossless(self, tmp_path):
        fabric = build_fabric(3, 3, 2, 4, 3, seed=13)
        # dirty the state: prune, mask, shift running stats
        fabric.links[2].alive = False
        fabric.links[5].alive = False
        mask = np.ones_like(fabric.links[0].conv_weight.data)
        mask.reshape(-1)[::3] = 0.0
        fabric.links[0].conv_weight.set_mask(mask)
        fabric.forward(np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32))

        path = tmp_path / "fabric.npz"
        save_fabric(fabric, path)
        loaded = load_fabric(path)

        assert loaded.L == fabric.L and loaded.S == fabric.S and loaded.C == fabric.C
        assert [l.alive for l in loaded.links] == [l.alive for l in fabric.links]
        for a, b in zip(fabric.links, loaded.links):
            np.testing.assert_array_equal(a.conv_weight.data, b.conv_weight.data)
            np.testing.assert_array_equal(a.bn_state.running_mean, b.bn_state.running_mean)
            if a.conv_weight.mask is None:
                assert b.conv_weight.mask is None
            else:
                np.testing.assert_array_equal(a.conv_weight.mask, b.conv_weight.mask)

        x = np.random.default_rng(1).random((2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(fabric.forward(x, "eval").data,
                                      loaded.forward(x, "eval").data)

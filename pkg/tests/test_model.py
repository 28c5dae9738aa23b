import numpy as np
import pytest

from pdgs.autodiff import Tape
from pdgs.fem import build_p2_space
from pdgs.graphrep import (
    GraphTopology,
    edge_features_distance,
    edge_features_uniform,
    graph_from_space,
)
from pdgs.mesh import generate_unit_square
from pdgs.model import (
    CheckpointError,
    FeatureMapping,
    ModelConfig,
    apply_mapping,
    forward,
    init_model,
    load_checkpoint,
    parse_architecture,
    save_checkpoint,
)


def _square_graph():
    sp = build_p2_space(generate_unit_square(1, 1, ((-1, -1), (1, 1))))
    return graph_from_space(sp)


def test_parse_architecture():
    assert parse_architecture("2+128x5+1") == [2] + [128] * 5 + [1]
    assert parse_architecture("2+40+256x5+1") == [2, 40] + [256] * 5 + [1]
    with pytest.raises(ValueError):
        parse_architecture("2+0+1")
    with pytest.raises(ValueError):
        parse_architecture("2+8+3")


def test_mapping_zero_rows():
    rng = np.random.default_rng(0)
    mp = FeatureMapping("gamma1", rng.standard_normal((2, 5)), 1.0)
    out = apply_mapping(mp, np.zeros((4, 2)))
    assert np.array_equal(out[:, :5], np.ones((4, 5)))
    assert np.array_equal(out[:, 5:], np.zeros((4, 5)))


def test_mapping_widths_match_architecture():
    m1 = init_model(ModelConfig(layers="2+20+256x5+1", mapping="gamma1", sigma=2))
    assert m1.mapping.matrix.shape == (2, 10)
    assert m1.mapping.output_width(2) == 20
    m2 = init_model(ModelConfig(layers="2+40+256x5+1", mapping="gamma2", sigma=3))
    assert m2.mapping.matrix.shape == (1, 10)
    assert m2.mapping.output_width(2) == 40


def test_gamma2_is_kronecker():
    mp = FeatureMapping("gamma2", np.array([[2.0, -1.0]]), 1.0)
    f = np.array([[0.5, 3.0]])
    out = apply_mapping(mp, f)
    z = np.kron(np.array([2.0, -1.0]), f[0])
    assert np.allclose(out[0], np.concatenate([np.cos(z), np.sin(z)]))


def test_mapping_outputs_bounded():
    rng = np.random.default_rng(1)
    for kind, shape in (("gamma1", (3, 7)), ("gamma2", (1, 6))):
        mp = FeatureMapping(kind, rng.standard_normal(shape) * 5, 5.0)
        out = apply_mapping(mp, rng.standard_normal((20, 3)) * 10)
        assert np.abs(out).max() <= 1.0 + 1e-15


def test_init_deterministic_and_glorot_bounded():
    cfg = ModelConfig(layers="2+16x3+1", seed=42)
    a = init_model(cfg)
    b = init_model(cfg)
    for (_, ta), (_, tb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(ta.data, tb.data)
    for i, layer in enumerate(a.layers):
        rows, cols = layer.w.shape
        bound = np.sqrt(6.0 / (rows + cols))
        assert np.abs(layer.w.data).max() <= bound
        assert np.array_equal(layer.b.data, np.zeros((1, cols)))


def test_mapping_matrix_sample_std():
    cfg = ModelConfig(layers="4+20000+8+1", mapping="gamma1", sigma=3.0, seed=0)
    m = init_model(cfg)
    assert m.mapping.matrix.size >= 1e4
    assert abs(m.mapping.matrix.std() - 3.0) / 3.0 <= 0.05


def test_parameter_count_formula():
    cfg = ModelConfig(layers="2+128x5+1")
    m = init_model(cfg)
    widths = [2] + [128] * 5
    expect = sum(
        2 * din * dout + dout for din, dout in zip(widths[:-1], widths[1:])
    )
    expect += 128 * 1 + 1  # per-node linear readout
    assert m.num_parameters() == expect


def test_zero_weight_network_outputs_bias():
    topo = _square_graph()
    m = init_model(ModelConfig(layers="2+8x2+1", seed=0))
    for _, t in m.parameters():
        t.data[:] = 0.0
    m.readout_b.data[:] = 0.75
    out = forward(m, topo, topo.node_coords_std, Tape(record=False))
    assert np.array_equal(out.data, np.full((topo.num_nodes, 1), 0.75))


def test_forward_permutation_equivariance():
    sp = build_p2_space(generate_unit_square(1, 1, ((-1, -1), (1, 1))))
    topo = graph_from_space(sp)
    n = topo.num_nodes
    rng = np.random.default_rng(9)
    perm = rng.permutation(n)

    # permuted topology built from the same adjacency relation
    pairs = []
    for i in range(n):
        for j in topo.neighbor_indices[
            topo.neighbor_offsets[i] : topo.neighbor_offsets[i + 1]
        ]:
            pairs.append((perm[i], perm[int(j)]))
    pairs.sort()
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount([p[0] for p in pairs], minlength=n), out=offsets[1:])
    coords = np.empty_like(topo.node_coords_std)
    coords[perm] = topo.node_coords_std
    ptopo = GraphTopology(
        n, offsets, np.array([p[1] for p in pairs], dtype=np.int64), coords
    )

    m = init_model(ModelConfig(layers="2+12x3+1", seed=3))
    out = forward(m, topo, topo.node_coords_std, Tape(record=False))
    pout = forward(m, ptopo, coords, Tape(record=False))
    # equivariance up to float addition order inside the neighbor sums
    assert np.allclose(pout.data[perm], out.data, rtol=1e-12, atol=1e-13)


def test_uniform_edge_features_topology_only():
    # same topology, different coordinates: identical outputs for fixed
    # standardized features and uniform aggregation
    sp1 = build_p2_space(generate_unit_square(2, 2, ((0, 0), (1, 1))))
    sp2 = build_p2_space(generate_unit_square(2, 2, ((-3, 2), (4, 9))))
    t1 = graph_from_space(sp1)
    t2 = graph_from_space(sp2)
    m = init_model(ModelConfig(layers="2+8x2+1", seed=1))
    feats = np.linspace(-1, 1, 2 * t1.num_nodes).reshape(-1, 2)
    o1 = forward(m, t1, feats, Tape(record=False))
    o2 = forward(m, t2, feats, Tape(record=False))
    assert np.array_equal(o1.data, o2.data)


def test_distance_edge_feature_used_only_in_first_layer():
    sp = build_p2_space(generate_unit_square(2, 2, ((-1, -1), (1, 1))))
    topo = graph_from_space(sp)
    ef = edge_features_distance(topo, 1.05, 2.9)
    cfg = ModelConfig(layers="2+6x2+1", seed=0, use_distance_edge=True)
    m = init_model(cfg)
    out_d = forward(m, topo, topo.node_coords_std, Tape(record=False), ef)
    out_u = forward(m, topo, topo.node_coords_std, Tape(record=False))
    assert not np.allclose(out_d.data, out_u.data)

    # zeroing the first layer's weights removes the only edge-feature site
    m.layers[0].w.data[:] = 0.0
    a = forward(m, topo, topo.node_coords_std, Tape(record=False), ef)
    b = forward(m, topo, topo.node_coords_std, Tape(record=False))
    assert np.array_equal(a.data, b.data)


def test_batched_forward_matches_loop():
    sp = build_p2_space(generate_unit_square(2, 2, ((-1, -1), (1, 1))))
    topo = graph_from_space(sp)
    rng = np.random.default_rng(2)
    m = init_model(ModelConfig(layers="3+10x2+1", seed=5))
    feats = [
        np.column_stack([topo.node_coords_std, rng.standard_normal(topo.num_nodes)])
        for _ in range(3)
    ]
    stacked = np.concatenate(feats)
    batch_out = forward(m, topo, stacked, Tape(record=False), batch=3)
    for k in range(3):
        single = forward(m, topo, feats[k], Tape(record=False))
        block = batch_out.data[k * topo.num_nodes : (k + 1) * topo.num_nodes]
        # BLAS blocking may differ between the stacked and single matmuls
        assert np.allclose(single.data, block, rtol=1e-12, atol=1e-14)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    topo = _square_graph()
    cfg = ModelConfig(
        layers="2+12+8x2+1", mapping="gamma2", sigma=2.5, seed=7, delta=0.3
    )
    m = init_model(cfg)
    out_before = forward(m, topo, topo.node_coords_std, Tape(record=False))
    path = tmp_path / "ckpt.json"
    save_checkpoint(m, path, extra_config={"note": "test"})
    m2, cfg2 = load_checkpoint(path)
    assert cfg2["note"] == "test"
    for (_, a), (_, b) in zip(m.parameters(), m2.parameters()):
        assert np.array_equal(a.data, b.data)
    out_after = forward(m2, topo, topo.node_coords_std, Tape(record=False))
    assert np.array_equal(out_before.data, out_after.data)


def test_checkpoint_shape_mismatch_names_layer(tmp_path):
    m = init_model(ModelConfig(layers="2+8x2+1", seed=0))
    path = tmp_path / "ckpt.json"
    save_checkpoint(m, path)
    import json

    doc = json.loads(path.read_text())
    doc["params"][0]["shape"] = [3, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="sage0.w"):
        load_checkpoint(path)


def test_batchnorm_checkpoint_preserves_running_stats(tmp_path):
    topo = _square_graph()
    cfg = ModelConfig(layers="2+8x2+1", seed=0, batchnorm=True)
    m = init_model(cfg)
    t = Tape()
    forward(m, topo, topo.node_coords_std, t, training=True)
    stats = [bn.running_mean.copy() for bn in m.batchnorms]
    path = tmp_path / "bn.json"
    save_checkpoint(m, path)
    m2, _ = load_checkpoint(path)
    for bn, s in zip(m2.batchnorms, stats):
        assert np.array_equal(bn.running_mean, s)

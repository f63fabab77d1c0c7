"""Network forward/backward checks: finite differences, equivariance,
zero-parameter traces, and batching behavior."""

import numpy as np
import pytest

from diffsolve.denoiser import (apply_bn_update, backward, batch_graphs,
                                bn_batch_stats, coord_features, count_params,
                                forward, init_params, predict_eps,
                                predict_x0_probs, sinusoid_features,
                                sinusoidal_embedding)
from diffsolve.instances import generate_er, generate_tsp, dense_graph, mis_graph
from diffsolve.training import loss_continuous, loss_discrete

# frozen from the closed-form count; recomputed below by construction
PARAM_COUNT_TSP_DISCRETE = 7_169_282
PARAM_COUNT_MIS_DISCRETE = 7_103_490


def closed_form_count(task, branch, layers, d):
    total = d  # node_in.b
    total += d * d if task == "tsp" else d
    if task == "tsp":
        total += d + d  # edge_in.w, edge_in.b
    per_layer = 5 * d * d          # P Q R U V
    per_layer += 2 * (d * d + d)   # edge MLP
    per_layer += 2 * (d * d + d)   # timestep MLP
    per_layer += 4 * d             # two batch norms
    total += layers * per_layer
    out = 2 if branch == "discrete" else 1
    total += d * out + out
    return total


# ---------------------------------------------------------------------------
# initialization


def test_init_deterministic():
    a = init_params(2, 8, seed=5)
    b = init_params(2, 8, seed=5)
    for key in a.tensors:
        assert np.array_equal(a.tensors[key], b.tensors[key])


def test_init_entry_bounds_small():
    params = init_params(1, 4, seed=0, task="mis")
    for key, value in params.tensors.items():
        if key.endswith(".scale"):
            assert np.all(value == 1.0)
        else:
            assert np.all(np.abs(value) <= 0.5), key  # 1/sqrt(4)


def test_param_count_golden():
    tsp = init_params(12, 256, seed=0, task="tsp", branch="discrete")
    mis = init_params(12, 256, seed=0, task="mis", branch="discrete")
    assert count_params(tsp) == PARAM_COUNT_TSP_DISCRETE
    assert count_params(mis) == PARAM_COUNT_MIS_DISCRETE
    assert closed_form_count("tsp", "discrete", 12, 256) == PARAM_COUNT_TSP_DISCRETE
    assert closed_form_count("mis", "discrete", 12, 256) == PARAM_COUNT_MIS_DISCRETE


def test_param_count_matches_closed_form_other_configs():
    for task, branch, L, d in [("tsp", "continuous", 3, 16),
                               ("mis", "continuous", 5, 32),
                               ("mis", "discrete", 1, 4)]:
        params = init_params(L, d, seed=1, task=task, branch=branch)
        assert count_params(params) == closed_form_count(task, branch, L, d)


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_params(0, 8, 0)
    with pytest.raises(ValueError):
        init_params(2, 7, 0)
    with pytest.raises(ValueError):
        init_params(2, 6, 0, task="tsp")  # needs multiple of 4


# ---------------------------------------------------------------------------
# embeddings


def test_sinusoidal_t0():
    emb = sinusoidal_embedding(0, 16).embedding
    assert np.allclose(emb[0::2], 0.0)
    assert np.allclose(emb[1::2], 1.0)


def test_sinusoidal_bounded():
    for t in (1, 999, 10 ** 6):
        emb = sinusoidal_embedding(t, 64).embedding
        assert np.all(np.abs(emb) <= 1.0)


def test_sinusoidal_distinct_over_training_range():
    embs = sinusoid_features(np.arange(0, 1001), 128)
    min_gap = np.inf
    for lo in range(0, 1001, 200):
        chunk = embs[lo:lo + 200]
        diff = np.abs(chunk[:, None, :] - embs[None, :, :]).max(axis=2)
        idx = np.arange(lo, lo + chunk.shape[0])
        diff[np.arange(chunk.shape[0]), idx] = np.inf
        min_gap = min(min_gap, diff.min())
    assert min_gap > 0.0


def test_sinusoidal_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_embedding(3, 7)


def test_coord_features_shape_and_range():
    coords = np.random.default_rng(0).random((13, 2))
    feats = coord_features(coords, 32)
    assert feats.shape == (13, 32)
    assert np.all(np.abs(feats) <= 1.0)


# ---------------------------------------------------------------------------
# forward traces


def zeroed(params):
    out = params.copy()
    for key in out.tensors:
        out.tensors[key] = np.zeros_like(out.tensors[key])
    return out


def test_zero_params_zero_output_tsp():
    inst = generate_tsp(7, 0)
    graph = dense_graph(inst)
    params = zeroed(init_params(3, 8, 1, task="tsp"))
    x_t = np.random.default_rng(2).integers(0, 2, graph.n_edges)
    out, _ = forward(params, graph, x_t, 5, coords=inst.coords,
                     train_mode=True)
    assert np.all(out == 0.0)


def test_zero_params_zero_output_mis():
    inst = generate_er(8, 8, 0.4, 1)
    graph = mis_graph(inst)
    params = zeroed(init_params(3, 8, 1, task="mis"))
    x_t = np.random.default_rng(3).integers(0, 2, inst.n)
    out, _ = forward(params, graph, x_t, 9, train_mode=True)
    assert np.all(out == 0.0)


def test_zero_mlps_and_head_keep_edge_residual():
    # with both MLPs and the head zeroed, e never moves off e0 and the
    # output vanishes; additionally zeroing U and V pins h to h0
    inst = generate_tsp(6, 4)
    graph = dense_graph(inst)
    params = init_params(3, 8, 2, task="tsp")
    for key in list(params.tensors):
        if "mlp_e" in key or "mlp_t" in key or key.startswith("head."):
            params.tensors[key] = np.zeros_like(params.tensors[key])
    x_t = np.random.default_rng(5).integers(0, 2, graph.n_edges)
    out, cache = forward(params, graph, x_t, 3, coords=inst.coords,
                         train_mode=True)
    assert np.all(out == 0.0)
    e0 = cache["layers"][0]["e_in"]
    for lc in cache["layers"][1:]:
        assert np.array_equal(lc["e_in"], e0)

    for i in range(params.n_layers):
        for name in ("U", "V"):
            params.tensors[f"layers.{i:02d}.{name}"] *= 0.0
    _, cache = forward(params, graph, x_t, 3, coords=inst.coords,
                       train_mode=True)
    h0 = cache["layers"][0]["h_in"]
    for lc in cache["layers"][1:]:
        assert np.array_equal(lc["h_in"], h0)


def test_forward_deterministic():
    inst = generate_tsp(6, 7)
    graph = dense_graph(inst)
    params = init_params(2, 8, 3, task="tsp")
    x_t = np.random.default_rng(0).random(graph.n_edges)
    a, _ = forward(params, graph, x_t, 11, coords=inst.coords)
    b, _ = forward(params, graph, x_t, 11, coords=inst.coords)
    assert np.array_equal(a, b)


def test_forward_rejects_shape_mismatch():
    inst = generate_tsp(6, 7)
    graph = dense_graph(inst)
    params = init_params(2, 8, 3, task="tsp")
    with pytest.raises(ValueError):
        forward(params, graph, np.zeros(graph.n_edges + 1), 1,
                coords=inst.coords)


# ---------------------------------------------------------------------------
# equivariance


def permute_tsp(inst, sigma):
    coords = inst.coords[sigma]
    return generate_tsp(inst.n, 0).__class__(n=inst.n, coords=coords,
                                             id=inst.id + "-perm")


def test_tsp_equivariance_under_relabeling():
    rng = np.random.default_rng(9)
    params = init_params(2, 8, 4, task="tsp")
    inst = generate_tsp(7, 1)
    graph = dense_graph(inst)
    x_t = rng.random(graph.n_edges)
    out, _ = forward(params, graph, x_t, 6, coords=inst.coords)
    index = graph.edge_index()
    for _ in range(50):
        sigma = rng.permutation(inst.n)  # new node j holds old node sigma[j]
        inst2 = permute_tsp(inst, sigma)
        graph2 = dense_graph(inst2)
        index2 = graph2.edge_index()
        x_t2 = np.empty_like(x_t)
        for (a, b), e2 in index2.items():
            x_t2[e2] = x_t[index[(int(sigma[a]), int(sigma[b]))]]
        out2, _ = forward(params, graph2, x_t2, 6, coords=inst2.coords)
        for (a, b), e2 in index2.items():
            e1 = index[(int(sigma[a]), int(sigma[b]))]
            assert np.max(np.abs(out2[e2] - out[e1])) < 1e-9


def test_mis_equivariance_under_relabeling():
    rng = np.random.default_rng(10)
    params = init_params(2, 8, 5, task="mis")
    inst = generate_er(9, 9, 0.4, 2)
    x_t = rng.random(inst.n)
    out, _ = forward(params, mis_graph(inst), x_t, 4)
    for _ in range(50):
        sigma = rng.permutation(inst.n)
        inv = np.argsort(sigma)
        edges2 = np.sort(inv[inst.edges], axis=1)
        edges2 = edges2[np.lexsort((edges2[:, 1], edges2[:, 0]))]
        inst2 = inst.__class__(n=inst.n, edges=edges2, id="perm")
        out2, _ = forward(params, mis_graph(inst2), x_t[sigma], 4)
        assert np.max(np.abs(out2 - out[sigma])) < 1e-9


def test_batch_independence_at_inference():
    params = init_params(2, 8, 6, task="tsp")
    rng = np.random.default_rng(11)
    inst_a, inst_b = generate_tsp(6, 3), generate_tsp(8, 4)
    ga, gb = dense_graph(inst_a), dense_graph(inst_b)
    xa, xb = rng.random(ga.n_edges), rng.random(gb.n_edges)
    out_a, _ = forward(params, ga, xa, 7, coords=inst_a.coords)
    out_b, _ = forward(params, gb, xb, 9, coords=inst_b.coords)
    batch = batch_graphs([ga, gb], [inst_a.coords, inst_b.coords])
    out, _ = forward(params, batch, np.concatenate([xa, xb]),
                     np.array([7, 9]))
    assert np.max(np.abs(out[:ga.n_edges] - out_a)) < 1e-9
    assert np.max(np.abs(out[ga.n_edges:] - out_b)) < 1e-9


# ---------------------------------------------------------------------------
# gradients


def flatten(grads):
    return np.concatenate([grads[k].ravel() for k in grads])


def scalar_loss(params, graph, x_t, t, target, coords=None):
    out, cache = forward(params, graph, x_t, t, coords=coords, train_mode=True)
    if params.branch == "discrete":
        loss, seed = loss_discrete(out, target)
    else:
        loss, seed = loss_continuous(out[:, 0], target)
        seed = seed[:, None]
    return loss, cache, seed


def finite_difference_check(params, graph, x_t, t, target, coords=None):
    loss, cache, seed = scalar_loss(params, graph, x_t, t, target, coords)
    grads = backward(params, cache, seed)
    rel_errors = []
    h = 1e-4
    for key in params.tensors:
        tensor = params.tensors[key]
        for idx in np.ndindex(*tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + h
            up, _, _ = scalar_loss(params, graph, x_t, t, target, coords)
            tensor[idx] = orig - h
            down, _, _ = scalar_loss(params, graph, x_t, t, target, coords)
            tensor[idx] = orig
            fd = (up - down) / (2 * h)
            an = grads[key][idx]
            rel_errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return np.array(rel_errors)


def test_gradients_finite_difference_tsp():
    inst = generate_tsp(6, 12)
    graph = dense_graph(inst)
    params = init_params(2, 8, 7, task="tsp", branch="discrete")
    rng = np.random.default_rng(13)
    x_t = rng.integers(0, 2, graph.n_edges).astype(float)
    target = rng.integers(0, 2, graph.n_edges)
    rel = finite_difference_check(params, graph, x_t, 8, target,
                                  coords=inst.coords)
    assert np.mean(rel < 1e-4) >= 0.99
    assert np.all(rel < 1e-2)


def test_gradients_finite_difference_mis():
    inst = generate_er(7, 7, 0.5, 3)
    graph = mis_graph(inst)
    params = init_params(2, 8, 8, task="mis", branch="continuous")
    rng = np.random.default_rng(14)
    x_t = rng.standard_normal(inst.n)
    target = rng.standard_normal(inst.n)
    rel = finite_difference_check(params, graph, x_t, 3, target)
    assert np.mean(rel < 1e-4) >= 0.99
    assert np.all(rel < 1e-2)


def test_zero_output_gradient_gives_zero_grads():
    inst = generate_tsp(6, 1)
    graph = dense_graph(inst)
    params = init_params(2, 8, 9, task="tsp")
    x_t = np.random.default_rng(0).random(graph.n_edges)
    out, cache = forward(params, graph, x_t, 2, coords=inst.coords,
                         train_mode=True)
    grads = backward(params, cache, np.zeros_like(out))
    for key, g in grads.items():
        assert np.all(g == 0.0), key


def test_head_probe_zeroes_unreached_layers():
    # head reading layer-1 features: layer-2 parameters get exactly zero grads
    inst = generate_tsp(6, 2)
    graph = dense_graph(inst)
    params = init_params(2, 8, 10, task="tsp")
    rng = np.random.default_rng(1)
    x_t = rng.random(graph.n_edges)
    out, cache = forward(params, graph, x_t, 2, coords=inst.coords,
                         train_mode=True, head_layer=1)
    grads = backward(params, cache, rng.standard_normal(out.shape))
    for key, g in grads.items():
        if key.startswith("layers.01."):
            assert np.all(g == 0.0), key
    assert any(np.any(g != 0.0) for k, g in grads.items()
               if k.startswith("layers.00."))


def test_doubling_loss_scale_doubles_gradients_exactly():
    inst = generate_er(8, 8, 0.4, 4)
    graph = mis_graph(inst)
    params = init_params(2, 8, 11, task="mis")
    rng = np.random.default_rng(2)
    x_t = rng.random(inst.n)
    out, cache = forward(params, graph, x_t, 5, train_mode=True)
    seed = rng.standard_normal(out.shape)
    g1 = backward(params, cache, seed)
    g2 = backward(params, cache, 2.0 * seed)
    for key in g1:
        assert np.array_equal(2.0 * g1[key], g2[key]), key


def test_bn_running_update_momentum():
    inst = generate_tsp(6, 3)
    graph = dense_graph(inst)
    params = init_params(1, 8, 12, task="tsp")
    x_t = np.random.default_rng(3).random(graph.n_edges)
    _, cache = forward(params, graph, x_t, 2, coords=inst.coords,
                       train_mode=True)
    stats = bn_batch_stats(cache)
    before = {k: v.copy() for k, v in params.bn_stats.items()}
    apply_bn_update(params, stats)
    for key, batch_value in stats.items():
        want = 0.9 * before[key] + 0.1 * batch_value
        assert np.allclose(params.bn_stats[key], want, atol=0)


# ---------------------------------------------------------------------------
# heads


def test_predict_x0_probs_examples():
    probs = predict_x0_probs(np.array([[0.0, 0.0], [-20.0, 20.0]]))
    assert np.allclose(probs[0], [0.5, 0.5])
    assert probs[1, 0] < 1e-8 and probs[1, 1] > 1.0 - 1e-8
    rng = np.random.default_rng(4)
    random_probs = predict_x0_probs(rng.standard_normal((100, 2)))
    assert np.allclose(random_probs.sum(axis=1), 1.0)


def test_head_branch_mismatch_raises():
    with pytest.raises(ValueError):
        predict_x0_probs(np.zeros((5, 1)))
    with pytest.raises(ValueError):
        predict_eps(np.zeros((5, 2)))
    assert predict_eps(np.ones((4, 1))).shape == (4,)

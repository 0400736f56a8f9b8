import numpy as np
import pytest

from conceptmoe.errors import ConfigError
from conceptmoe.moe import ExpertMixtureLayer, count_params, expert_param_count, topk_mask
from conceptmoe.nn import make_param
from conceptmoe.numerics import NonFiniteError, Tensor, check_gradients, sum_


def silu(x):
    return x / (1 + np.exp(-x))


def expert_np(e, x):
    return (silu(x @ e.w1.data) * (x @ e.w3.data)) @ e.w2.data


def eq1_oracle(layer, x, mask_topk=True):
    """Loop over all experts, weighting by Top-K (or full) softmax."""
    flat = x.reshape(-1, layer.d_model)
    out = np.zeros_like(flat)
    for t, tok in enumerate(flat):
        logits = tok @ layer.gate_weights.data
        if mask_topk:
            keep = np.argsort(-logits, kind="stable")[: layer.top_k]
            masked = np.full_like(logits, -np.inf)
            masked[keep] = logits[keep]
        else:
            masked = logits
        w = np.exp(masked - masked.max())
        w /= w.sum()
        for i, e in enumerate(layer.experts):
            if w[i] > 0:
                out[t] += w[i] * expert_np(e, tok)
    return out.reshape(x.shape)


def test_gate_example_values():
    layer = ExpertMixtureLayer(4, 8, n_experts=4, top_k=2, rng=np.random.default_rng(0))
    layer.gate_weights.data = np.eye(4)
    g = layer.gate(np.array([2.0, 1.0, 0.0, -1.0]))
    assert np.allclose(g.weights, [0.7311, 0.2689, 0, 0], atol=1e-4)
    assert g.selected.tolist() == [0, 1]


def test_gate_ties_and_dense_case():
    layer = ExpertMixtureLayer(4, 8, n_experts=4, top_k=2, rng=np.random.default_rng(0))
    layer.gate_weights.data = np.zeros((4, 4))
    g = layer.gate(np.ones(4))
    assert g.selected.tolist() == [0, 1]
    assert np.allclose(g.weights, [0.5, 0.5, 0, 0])
    dense = ExpertMixtureLayer(4, 8, n_experts=4, top_k=4, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=4)
    g = dense.gate(x)
    full = np.exp(g.logits - g.logits.max())
    assert np.all(g.weights > 0)
    assert np.allclose(g.weights, full / full.sum())


def test_topk_bounds_validated():
    with pytest.raises(ConfigError):
        ExpertMixtureLayer(4, 8, n_experts=2, top_k=3)
    with pytest.raises(ConfigError):
        ExpertMixtureLayer(4, 8, n_experts=2, top_k=0)


def test_sparsity_law_on_random_tokens():
    rng = np.random.default_rng(3)
    for n in (2, 4, 8):
        for k in range(1, n + 1):
            layer = ExpertMixtureLayer(6, 4, n, k, rng=rng)
            g = layer.gate(rng.normal(size=(50, 6)))
            assert np.all((g.weights > 0).sum(axis=-1) == k)
            assert np.allclose(g.weights.sum(axis=-1), 1.0, atol=1e-6)


class _Identity:
    def __call__(self, x):
        return x


def test_identity_experts_return_input():
    layer = ExpertMixtureLayer(4, 4, 3, 2, rng=np.random.default_rng(4))
    layer.experts = [_Identity() for _ in range(3)]
    x = np.random.default_rng(5).normal(size=(2, 3, 4))
    assert np.allclose(layer(Tensor(x)).data, x, atol=1e-12)


def test_single_expert_passes_through():
    layer = ExpertMixtureLayer(4, 6, 1, 1, rng=np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(3, 4))
    assert np.allclose(layer.gate(x).weights, 1.0)
    assert np.allclose(layer(Tensor(x)).data, expert_np(layer.experts[0], x), atol=1e-12)


def test_dense_equivalence_when_k_equals_n():
    rng = np.random.default_rng(8)
    layer = ExpertMixtureLayer(4, 6, 2, 2, rng=rng)
    x = rng.normal(size=(3, 5, 4))
    assert np.max(np.abs(layer(Tensor(x)).data - eq1_oracle(layer, x, mask_topk=False))) < 1e-9


def test_forward_matches_brute_force_loop():
    rng = np.random.default_rng(9)
    layer = ExpertMixtureLayer(5, 7, 4, 2, rng=rng)
    x = rng.normal(size=(2, 6, 5))
    assert np.max(np.abs(layer(Tensor(x)).data - eq1_oracle(layer, x))) < 1e-9


def test_gradient_locality():
    rng = np.random.default_rng(10)
    layer = ExpertMixtureLayer(4, 6, 4, 1, rng=rng)
    x = rng.normal(size=(1, 1, 4))
    chosen = int(layer.gate(x[0, 0]).selected[0])
    sum_(layer(Tensor(x))).backward()
    for i, e in enumerate(layer.experts):
        for p in (e.w1, e.w2, e.w3):
            if i == chosen:
                assert np.any(p.grad != 0)
            else:
                assert p.grad is None or np.all(p.grad == 0)


def _away_from_boundary(layer, x, gap=1e-3):
    logits = np.sort(x.reshape(-1, layer.d_model) @ layer.gate_weights.data, axis=-1)[:, ::-1]
    k = layer.top_k
    return k == layer.n_experts or np.all(logits[:, k - 1] - logits[:, k] > gap)


def test_gradients_through_gates_and_experts():
    rng = np.random.default_rng(11)
    layer = ExpertMixtureLayer(4, 6, 4, 2, rng=rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    assert _away_from_boundary(layer, x.data)
    w = rng.normal(size=(2, 3, 4))
    params = [x, layer.gate_weights] + [p for e in layer.experts for p in (e.w1, e.w2, e.w3)]
    assert check_gradients(lambda: sum_(layer(x) * w), params) < 1e-4


def test_token_mask_skips_positions():
    rng = np.random.default_rng(12)
    layer = ExpertMixtureLayer(4, 6, 4, 2, rng=rng)
    x = rng.normal(size=(1, 3, 4))
    out = layer(Tensor(x), token_mask=np.array([[True, False, True]])).data
    assert np.all(out[0, 1] == 0)
    assert np.allclose(out[0, [0, 2]], eq1_oracle(layer, x)[0, [0, 2]])


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_expert_output_names_expert_and_position():
    rng = np.random.default_rng(13)
    layer = ExpertMixtureLayer(4, 6, 2, 2, rng=rng)
    layer.experts[1].w2.data[:] = np.inf
    with pytest.raises(NonFiniteError, match=r"expert 1 .*\(0, 0\)"):
        layer(Tensor(np.ones((1, 2, 4))))


def test_utilization_counters():
    rng = np.random.default_rng(14)
    layer = ExpertMixtureLayer(4, 6, 4, 2, rng=rng)
    layer(Tensor(rng.normal(size=(10, 4))))
    assert layer.utilization.sum() == 20
    layer.reset_utilization()
    assert layer.utilization.sum() == 0


def test_count_params_formula_and_enumeration():
    rng = np.random.default_rng(15)
    one = ExpertMixtureLayer(16, 32, 1, 1, rng=rng)
    assert count_params(one)[0] == count_params(one)[1]
    layer = ExpertMixtureLayer(16, 32, 4, 2, rng=rng)
    total, active = count_params(layer)
    assert total == layer.num_parameters()
    per_expert = sum(p.size for p in layer.experts[0].parameters().values())
    assert per_expert == expert_param_count(16, 32)
    assert active == layer.gate_weights.size + 2 * per_expert
    assert active < total
    big = ExpertMixtureLayer(16, 32, 8, 2, meta=True)
    g, p = 16 * 8, expert_param_count(16, 32)
    assert count_params(big) == (g + 8 * p, g + 2 * p)


def test_meta_parameters_hold_no_memory():
    p = make_param((1000, 1000), None, 1.0, meta=True)
    assert p.data.strides == (0, 0)


def test_topk_mask_helper():
    mask, sel = topk_mask(np.array([[0.1, 0.5, 0.3]]), 2)
    assert mask.tolist() == [[False, True, True]]
    assert sel.tolist() == [[1, 2]]

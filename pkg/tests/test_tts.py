import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinydet.errors import ShapeError
from tinydet.trans_rcnn import pooling_weights, task_token_select

import tts_reference


def _as_lists(groups):
    # sequence positions 1..N_u are token numbers; 0 and N_u+1 are the task tokens
    n_u = groups.assignment.size
    g_c = ["cls"] + [p for p in groups.cls_positions if p != 0]
    g_b = ["box"] + [p for p in groups.box_positions if p != n_u + 1]
    return g_c, g_b


def test_mixed_preferences_trace():
    a_cls = [0.4, 0.3, 0.2, 0.05]
    a_box = [0.1, 0.35, 0.25, 0.3]
    g = task_token_select(a_cls, a_box)
    g_c, g_b = _as_lists(g)
    assert set(g_c[1:]) == {1, 4} and set(g_b[1:]) == {2, 3}
    assert g.cls_positions[0] == 0 and g.box_positions[0] == 5


def test_all_lean_class_gives_three_one():
    g = task_token_select([0.4, 0.3, 0.2, 0.1], [0.1, 0.05, 0.02, 0.01])
    assert g.n_cls == 3 and g.n_box == 1


def test_ties_broken_by_lower_index():
    g = task_token_select([0.25] * 4, [0.25] * 4)
    # every score ties; ranking is 1, 2, 3, 4 and all lean class until the cap
    assert g.cls_positions == [0, 1, 2, 3] and g.box_positions == [5, 4]


def test_length_mismatch():
    with pytest.raises(ShapeError):
        task_token_select([0.5, 0.5], [1.0])


def test_global_tokens_gathered(rng):
    a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    tokens = rng.normal(size=(8, 3))
    g = task_token_select(a, b, tokens)
    np.testing.assert_array_equal(g.cls_tokens, tokens[g.cls_positions])
    np.testing.assert_array_equal(g.box_tokens, tokens[g.box_positions])


def _draw(rng):
    n = int(rng.integers(2, 33))
    if rng.random() < 0.2:
        # coarse values force score ties and α_cls == α_box cases
        a = rng.integers(0, 4, n) / 4.0
        b = rng.integers(0, 4, n) / 4.0
    else:
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    return list(map(float, a)), list(map(float, b))


def test_matches_reference_on_random_draws():
    rng = np.random.default_rng(20240501)
    for _ in range(1000):
        a, b = _draw(rng)
        g = task_token_select(a, b)
        assert _as_lists(g) == tts_reference.select(a, b)
        n_u = len(a)
        assert g.n_cls + g.n_box == n_u
        assert g.n_box <= n_u // 2


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=40))
def test_invariants(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    g = task_token_select(a, b)
    n_u = len(a)
    positions = sorted(g.cls_positions[1:] + g.box_positions[1:])
    assert positions == list(range(1, n_u + 1))
    assert g.n_box <= n_u // 2
    assert _as_lists(g) == tts_reference.select(a, b)
    w = pooling_weights(g, n_u + 2)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_even_lengths_agree_with_exact_half():
    rng = np.random.default_rng(3)
    for _ in range(300):
        a, b = _draw(rng)
        if len(a) % 2 == 0:
            assert tts_reference.select(a, b, "floor") == tts_reference.select(a, b, "exact")


def test_exact_half_breaks_box_cap_for_odd_lengths():
    # with N_u = 3 and every token leaning box, the rational bound lets two tokens into G_b
    a, b = [0.1, 0.1, 0.1], [0.3, 0.3, 0.3]
    _, g_b = tts_reference.select(a, b, "exact")
    assert len(g_b) - 1 == 2 > 3 // 2
    assert task_token_select(a, b).n_box == 1

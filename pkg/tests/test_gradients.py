import numpy as np
import pytest

from countlab.losses import FocusConfig
from countlab.model import OverrideSet
from countlab.train import loss_and_grads

from conftest import random_params
from oracles import composite_loss, fd_gradients, rel_err


@pytest.mark.parametrize("lam,layers,ov,queries", [
    (0.0, (), None, "text"),
    (1.0, (0, 1), OverrideSet(beta={(0, 1): 1.3, (1, 0): 0.7}, head_scale={(1, 1): 1.2}), "text"),
    (0.5, (1,), None, "image"),
])
def test_gradients_match_finite_differences(micro_cfg, micro_batch, lam, layers, ov, queries):
    p = random_params(micro_cfg, 11)
    focus = FocusConfig(list(layers) or [0], 1.0, lam, queries=queries) if lam else None
    loss, _, _, grads = loss_and_grads(p, micro_cfg, micro_batch, focus, overrides=ov)
    assert np.isclose(loss, composite_loss(p, micro_cfg, micro_batch, lam, layers, ov, queries=queries), rtol=1e-12)
    # sampled entries here; the exhaustive check runs in the acceptance suite
    fd = fd_gradients(p, micro_cfg, micro_batch, lam, layers, ov, max_entries=24, queries=queries)
    worst = max((rel_err(grads[k].reshape(-1)[idx], vals), k) for k, (idx, vals) in fd.items())
    assert worst[0] < 1e-4, worst


def test_focus_gradient_reaches_query_key_weights(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 12)
    _, _, _, g0 = loss_and_grads(p, micro_cfg, micro_batch, None)
    _, _, _, g1 = loss_and_grads(p, micro_cfg, micro_batch, FocusConfig([0], 1.0, 1.0))
    assert not np.allclose(g0["blocks.0.wq"], g1["blocks.0.wq"])
    assert not np.allclose(g0["blocks.0.wk"], g1["blocks.0.wk"])
    # layer-0 attention depends only on the embeddings and the layer-0 norm/query/key weights
    touched = {"blocks.0.wq", "blocks.0.wk", "blocks.0.ln1", "tok_emb", "pos_emb", "patch_w", "patch_b"}
    for k in g0:
        if k not in touched:
            assert np.array_equal(g0[k], g1[k]), k

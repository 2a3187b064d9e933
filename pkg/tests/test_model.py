import numpy as np
import pytest

from lipsplat.errors import InvalidArgumentError
from lipsplat.model import ModelConfig, TalkingHead
from lipsplat.nn import gradcheck

SMALL = dict(cond_dim=4, window=2, hidden=8, point_levels=2, point_features=2, point_log2_table=8,
             plane_levels=2, plane_features=2, plane_log2_table=8, a2p_hidden=4)


def _setup(rng, encoder="hashgrid", T=9, **kw):
    cfg = ModelConfig(point_encoder=encoder, **{**SMALL, **kw})
    template = rng.uniform(-0.3, 0.3, size=(20, 3))
    lip_index = np.arange(6)
    model = TalkingHead(cfg, (-np.ones(3), np.ones(3)), 2.0, 3, template, lip_index, rng)
    # lift zero inits so every path carries gradient, and the 1e-4-scale
    # tables so a finite-difference step stays inside one smooth piece
    for k, v in model.params.items():
        if not v.any() or k.endswith("table"):
            v[...] = rng.normal(scale=0.1, size=v.shape)
    means = rng.uniform(-0.8, 0.8, size=(7, 3))
    audio = rng.normal(size=(T, 3))
    points = template[lip_index] + 0.05 * rng.normal(size=(T, 6, 3))
    return model, means, audio, points


def test_zero_decoder_gives_identity(rng):
    cfg = ModelConfig(**SMALL)
    template = rng.uniform(-0.3, 0.3, size=(20, 3))
    model = TalkingHead(cfg, (-np.ones(3), np.ones(3)), 2.0, 3, template, np.arange(6), rng)
    out = model.forward_frame(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)),
                              template[:6] + np.zeros((6, 6, 3)), 3)
    for d in out.delta:
        assert not d.any()


@pytest.mark.parametrize("encoder", ["hashgrid", "triplane"])
def test_segment_does_not_change_delta(encoder, rng):
    model, means, audio, points = _setup(rng, encoder)
    a = model.forward_frame(means, audio, points, 4)
    b = model.forward_frame(means, audio, points, 4, seg=(2, 5))
    for x, y in zip(a.delta, b.delta):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)
    assert a.loss_cl is None and np.isfinite(b.loss_cl)


def test_windowed_rows_match_full_sequence(rng):
    model, means, audio, points = _setup(rng)
    full_a = model.audio_rows(audio)
    for t in (0, 1, 4, 8):
        out = model.forward_frame(means, audio, points, t)
        np.testing.assert_allclose(out.a_t, full_a[t], rtol=1e-13, atol=1e-15)


def test_frame_errors(rng):
    model, means, audio, points = _setup(rng)
    with pytest.raises(InvalidArgumentError):
        model.forward_frame(means, audio, points, 9)
    with pytest.raises(InvalidArgumentError):
        model.forward_frame(means, audio, points[:5], 2)
    with pytest.raises(InvalidArgumentError):
        model.forward_frame(means, audio, points, 2, seg=(3, 4))
    with pytest.raises(InvalidArgumentError):
        TalkingHead(ModelConfig(point_encoder="voxels", **SMALL), (-np.ones(3), np.ones(3)), 2.0, 3,
                    np.zeros((20, 3)), np.arange(6), rng)


@pytest.mark.parametrize("encoder,seg", [("hashgrid", (1, 6)), ("triplane", None)])
def test_frame_gradcheck(encoder, seg, rng):
    model, means, audio, points = _setup(rng, encoder)
    t, w_cl = 3, 0.3
    G = [rng.normal(size=(7, k)) for k in (3, 4, 3)]

    def f():
        out = model.forward_frame(means, audio, points, t, seg)
        val = sum(float((d * g).sum()) for d, g in zip(out.delta, G))
        return val + (w_cl * out.loss_cl if seg is not None else 0.0)

    out = model.forward_frame(means, audio, points, t, seg)
    grads, gmeans, gpts = model.backward_frame(out.cache, *G, w_cl=w_cl)
    gpoints = np.zeros_like(points)
    gpoints[out.cache.flo:out.cache.flo + len(gpts)] = gpts
    params = {k: v for k, v in model.params.items() if k in grads}
    assert not any(k.startswith("a2p") for k in grads)
    # entries below the floor are compared on an absolute scale since
    # roundoff dominates them
    rep = gradcheck(f, {"means": means, "points": points, **params},
                    {"means": gmeans, "points": gpoints, **grads}, floor=1e-4, max_per_param=12)
    assert rep.passed(1e-5), str(rep)


def test_sequence_contrastive_gradcheck(rng):
    model, means, audio, points = _setup(rng)
    loss, cache = model.contrastive(audio, points)
    grads = model.contrastive_backward(cache, 0.5)
    assert set(grads) == {k for k in model.params if k.startswith(("comp_a", "pointenc", "pointgrid"))}
    params = {k: model.params[k] for k in grads}
    rep = gradcheck(lambda: 0.5 * model.contrastive(audio, points)[0], params, grads, floor=1e-4,
                    max_per_param=12)
    assert rep.passed(1e-5), str(rep)
    # same value as the in-frame evaluation over the whole sequence
    out = model.forward_frame(means, audio, points, 0, seg=(0, len(audio)))
    assert abs(out.loss_cl - loss) <= 1e-12 * abs(loss)

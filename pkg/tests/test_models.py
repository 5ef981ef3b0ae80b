import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madkd import diffcore as dc
from madkd.diffcore import Tensor
from madkd.models import (BadFormatError, EmbeddingTable, ShapeMismatchError, TruncatedError,
                          VersionMismatchError, build_classifier, build_generator, ema_init, ema_update,
                          load_checkpoint, read_records, sample_generator, save_checkpoint, write_records)


def gen(mode="uncond", d_z=6, d_e=6, seed=0, hidden=(10, 12), d_out=3, n_classes=5):
    return build_generator(d_z, d_e, list(hidden), d_out, mode, dc.rng_stream(seed, "init"), n_classes=n_classes)


def test_classifier_shapes_and_determinism(rng):
    net = build_classifier(2, [64, 64], 8, dc.rng_stream(0, "init"))
    again = build_classifier(2, [64, 64], 8, dc.rng_stream(0, "init"))
    assert all(np.array_equal(net.params[k].data, again.params[k].data) for k in net.params)
    out = net(rng.random((16, 2)), mode="train")
    assert out.shape == (16, 8) and np.isfinite(out.data).all()
    assert np.array_equal(net.params["bn0.scale"].data, np.ones(64))
    with pytest.raises(ValueError):
        build_classifier(2, [], 8, rng)
    with pytest.raises(ValueError):
        build_classifier(2, [4], 1, rng)


def test_fan_in_init_bounds():
    net = build_classifier(50, [20], 3, dc.rng_stream(0, "init"))
    assert np.abs(net.params["dense0.W"].data).max() <= 1 / np.sqrt(50)


def test_classifier_rejects_wrong_width(rng):
    net = build_classifier(3, [4], 2, rng)
    with pytest.raises(dc.ShapeError):
        net(rng.random((5, 2)))


def test_generator_modes_and_widths():
    G, E = gen("uncond")
    assert E is None and G.d_input == 6
    G, E = gen("cat", d_z=8, d_e=4)
    assert G.d_input == 12 and G.params["dense0.U"].shape == (4, 10)
    with pytest.raises(ValueError):
        gen("sum", d_z=8, d_e=4)
    with pytest.raises(ValueError):
        gen("bogus")


def test_sum_mode_with_zero_embedding_matches_uncond(rng):
    Gs, _ = gen("sum", seed=3)
    Gu, _ = gen("uncond", seed=3)
    z = rng.standard_normal((7, 6))
    zero = np.zeros((7, 6))
    assert np.array_equal(Gs.first_layer(z, zero).data, Gu.first_layer(z).data)
    us, _ = Gs.forward(z, zero, mode="eval", frozen=True)
    uu, _ = Gu.forward(z, mode="eval", frozen=True)
    assert np.array_equal(us.data, uu.data)


def test_sum_mode_first_layer_identity(rng):
    G, E = gen("sum")
    z, e = rng.standard_normal((9, 6)), rng.standard_normal((9, 6))
    W, b = G.params["dense0.W"].data, G.params["dense0.b"].data
    h = G.first_layer(z, e).data
    assert np.max(np.abs(h - (z @ W + e @ W + b))) < 1e-12
    split = G.first_layer(z, np.zeros_like(e)).data + G.first_layer(np.zeros_like(z), e).data - b
    assert np.max(np.abs(h - split)) < 1e-12


def test_conditional_generator_needs_embedding(rng):
    G, _ = gen("sum")
    with pytest.raises(ValueError):
        G.first_layer(rng.standard_normal((2, 6)))


def test_generator_output_range_and_zero_head(rng):
    G, _ = gen()
    _, x = G.forward(rng.normal(0, 5, (20, 6)), mode="train")
    assert np.all((x.data >= 0) & (x.data <= 1))
    G.params["out.W"].data[:] = 0.0
    G.params["out.b"].data[:] = 0.0
    u, x = G.forward(rng.standard_normal((4, 6)))
    assert np.array_equal(x.data, np.full((4, 3), 0.5)) and not u.data.any()


def test_generator_forward_reproducible():
    z = dc.rng_stream(5, "noise").standard_normal((8, 6))
    a = gen(seed=1)[0].forward(z, mode="eval")[0].data
    b = gen(seed=1)[0].forward(z, mode="eval")[0].data
    assert np.array_equal(a, b)


def test_ema_init_parity_and_alpha(rng):
    G, E = gen("sum")
    ema = ema_init(G, E)
    assert ema.alpha == 0.95
    z, y = rng.standard_normal((6, 6)), rng.integers(0, 5, 6)
    ref = G.forward(z, E.lookup(y), mode="eval", frozen=True)[0].data
    out = ema.generator.forward(z, ema.embeddings.lookup(y), mode="eval", frozen=True)[0].data
    assert np.array_equal(ref, out)
    assert not any(p.requires_grad for p in ema.generator.params.values())


def _perturb(G, E, rng):
    for p in G.params.values():
        p.data = p.data + rng.standard_normal(p.shape)
    for bn in G.bns:
        bn.running_mean = bn.running_mean + 1.0
        bn.running_var = bn.running_var * 2.0
    if E is not None:
        E.weight.data = E.weight.data + 1.0


def test_ema_degenerate_alphas(rng):
    G, E = gen("cat")
    frozen = ema_init(G, E, alpha=1.0)
    copy = ema_init(G, E, alpha=0.0)
    before = {k: p.data.copy() for k, p in frozen.generator.params.items()}
    _perturb(G, E, rng)
    ema_update(frozen, G, E)
    ema_update(copy, G, E)
    assert all(np.array_equal(frozen.generator.params[k].data, v) for k, v in before.items())
    assert all(np.array_equal(copy.generator.params[k].data, G.params[k].data) for k in G.params)
    assert np.array_equal(copy.generator.bns[0].running_var, G.bns[0].running_var)
    assert np.array_equal(copy.embeddings.weight.data, E.weight.data)
    assert frozen.updates == copy.updates == 1


def test_ema_hand_oracle():
    G, _ = gen()
    for p in G.params.values():
        p.data = np.zeros(p.shape)
    ema = ema_init(G, None, 0.95)
    for p in G.params.values():
        p.data = np.ones(p.shape)
    ema_update(ema, G)
    assert np.allclose(ema.generator.params["out.b"].data, 0.05, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_ema_sandwich(seed, alpha):
    rng = np.random.default_rng(seed)
    G, E = gen("sum", hidden=(4,))
    ema = ema_init(G, E, alpha)
    for _ in range(3):
        prev = {k: p.data.copy() for k, p in ema.generator.params.items()}
        _perturb(G, E, rng)
        ema_update(ema, G, E)
        for k, p in ema.generator.params.items():
            lo, hi = np.minimum(prev[k], G.params[k].data), np.maximum(prev[k], G.params[k].data)
            assert np.all((lo <= p.data) & (p.data <= hi))


def test_ema_shape_mismatch():
    G, _ = gen()
    other, _ = gen(hidden=(10, 12, 4))
    with pytest.raises(dc.ShapeError):
        ema_update(ema_init(G, None), other)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_classifier(3, [8, 8], 4, rng)
    net(rng.random((10, 3)), mode="train")
    save_checkpoint(net, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt", expect="classifier")
    x = rng.random((6, 3))
    assert np.array_equal(net(x).data, back(x).data)
    assert all(np.array_equal(v, back.state()[k]) for k, v in net.state().items())
    G, E = gen("cat", d_z=6, d_e=3)
    save_checkpoint(G, tmp_path / "g.ckpt")
    save_checkpoint(E, tmp_path / "e.ckpt")
    G2, E2 = load_checkpoint(tmp_path / "g.ckpt"), load_checkpoint(tmp_path / "e.ckpt")
    assert G2.mode == "cat" and np.array_equal(E2.weight.data, E.weight.data)
    assert all(np.array_equal(G.params[k].data, G2.params[k].data) for k in G.params)


def test_checkpoint_errors(tmp_path, rng):
    net = build_classifier(3, [8], 4, rng)
    path = tmp_path / "c.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XADCKPT" + raw[7:])
    with pytest.raises(BadFormatError, match="bad format"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:7] + bytes([9]) + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    with pytest.raises(TruncatedError):
        load_checkpoint(tmp_path / "short.ckpt")
    G, _ = gen()
    save_checkpoint(G, tmp_path / "g.ckpt")
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "g.ckpt", expect="classifier")


def test_record_layout(tmp_path):
    write_records(tmp_path / "r.ckpt", {"a": np.array([[1.0, 2.0]]), "s": np.array(3.0)})
    raw = (tmp_path / "r.ckpt").read_bytes()
    assert raw[:8] == b"MADCKPT\x01"
    # name_len=1, "a", rank=2, extents (1, 2), two doubles
    assert raw[8:13] == b"\x01\x00\x00\x00a"
    back = read_records(tmp_path / "r.ckpt")
    assert back["a"].shape == (1, 2) and back["s"].shape == () and float(back["s"]) == 3.0


def test_sample_generator_labels(rng):
    G, E = gen("sum")
    _, x, y, e = sample_generator(G, E, 10, rng, rng)
    assert x.shape == (10, 3) and y.min() >= 0 and y.max() < 5 and not x.requires_grad
    _, _, y, e = sample_generator(G, E, 4, rng, labels=np.full(4, 2))
    assert np.array_equal(y, [2, 2, 2, 2]) and np.array_equal(e.data, np.tile(E.weight.data[2], (4, 1)))
    with pytest.raises(ValueError):
        sample_generator(G, E, 4, rng, labels=np.full(4, 7))
    with pytest.raises(ValueError):
        sample_generator(G, None, 4, rng)


def test_embedding_lookup_gradient(rng):
    E = EmbeddingTable(Tensor(rng.standard_normal((3, 2)), True))
    g = dc.gradients(dc.sum(E.lookup(np.array([0, 0, 2]))), [E.weight])[0]
    assert np.array_equal(g, [[2, 2], [0, 0], [1, 1]])

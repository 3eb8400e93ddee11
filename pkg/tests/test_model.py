import numpy as np
import pytest

from chunkctc import ctc
from chunkctc import numerics as nx
from chunkctc.model import (
    Encoder,
    EncoderConfig,
    load_checkpoint,
    load_encoder,
    output_length,
    parameter_count,
    save_checkpoint,
    save_encoder,
)

from helpers import central_difference, max_rel_error

TINY = dict(vocab_size=3, feature_dim=3, layers=1, hidden_dim=8, heads=2, frontend_channels=8,
            ffn_dim=8, positional_kernel=3, positional_groups=2)


def test_subsample_lengths():
    assert output_length(100) == 25
    assert output_length(1) == 1
    assert output_length(101) == 26
    enc = Encoder(EncoderConfig(vocab_size=5))
    rng = np.random.default_rng(0)
    for T in (1, 2, 3, 4, 5, 100, 101, 257):
        assert enc.encode(rng.normal(size=(T, 8))).shape == (output_length(T), 6)


def test_feature_dim_mismatch_rejected():
    enc = Encoder(EncoderConfig(vocab_size=5))
    with pytest.raises(ValueError):
        enc.encode(np.zeros((10, 7)))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=5, hidden_dim=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=5, subsample_factor=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)


def test_rows_are_normalized_and_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(90, 8))
    a = Encoder(EncoderConfig(vocab_size=5), seed=3).encode(x)
    b = Encoder(EncoderConfig(vocab_size=5), seed=3).encode(x)
    assert a.tobytes() == b.tobytes()
    assert np.max(np.abs(np.logaddexp.reduce(a, axis=1))) < 1e-9


def test_parameter_count_is_config_derived():
    cfg = EncoderConfig(vocab_size=21)
    assert Encoder(cfg).parameter_count() == parameter_count(cfg) == 298_070
    big = EncoderConfig(vocab_size=2000, feature_dim=80, layers=12, hidden_dim=256, heads=4,
                        positional_kernel=128)
    assert parameter_count(big) == pytest.approx(12.2e6, rel=0.01)


def test_batched_forward_matches_single_encodes():
    enc = Encoder(EncoderConfig(vocab_size=5), seed=2)
    rng = np.random.default_rng(2)
    seqs = [rng.normal(size=(T, 8)) for T in (37, 60, 9)]
    x = np.zeros((3, 60, 8))
    for i, s in enumerate(seqs):
        x[i, : len(s)] = s
    with nx.no_grad():
        out, lengths = enc.forward(x, [len(s) for s in seqs])
    for i, s in enumerate(seqs):
        n = lengths[i]
        np.testing.assert_allclose(out.value[i, :n], enc.encode(s), atol=1e-10)


def test_context_free_frames_are_local():
    enc = Encoder(EncoderConfig(vocab_size=5, context_free_mode=True), seed=4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(64, 8))
    full = enc.encode(x)
    for start, stop in [(0, 4), (8, 40), (20, 64), (4, 8)]:
        part = enc.encode(x[start:stop])
        assert part.tobytes() == full[start // 4: stop // 4].tobytes()


def test_translation_without_attention():
    enc = Encoder(EncoderConfig(vocab_size=5, attention=False, positional_kernel=5), seed=5)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(120, 8))
    a = enc.encode(x[:-4])
    b = enc.encode(x[4:])
    # emission t + 1 of a sees the same inputs as emission t of b, away from both edges
    margin = 6
    np.testing.assert_allclose(a[1 + margin: -margin], b[margin: -margin - 1], atol=1e-6)


def test_every_parameter_block_gets_gradient():
    cfg = EncoderConfig(vocab_size=5)
    enc = Encoder(cfg, seed=6)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 60, 8))
    lp, lengths = enc.forward(x, [60, 44])
    ctc.ctc_loss_tensor(lp, lengths, [[0, 1, 2], [3, 4]]).backward()
    for name, p in enc.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name


def encoder_fd_error(seed, coords_per_block=2):
    rng = np.random.default_rng(seed)
    enc = Encoder(EncoderConfig(**TINY), seed=seed)
    T = int(rng.integers(8, 17))
    x = rng.normal(size=(1, T, 3))
    target = [int(k) for k in rng.integers(0, 3, size=2)]

    def loss():
        lp, n = enc.forward(x)
        return ctc.ctc_loss_tensor(lp, n, [target])

    enc.zero_grad()
    loss().backward()

    def f():
        with nx.no_grad():
            return float(loss().value)

    worst = 0.0
    for name, p in enc.params.items():
        coords = rng.choice(p.value.size, size=min(coords_per_block, p.value.size), replace=False)
        num = central_difference(f, p.value, 1e-4, coords)
        worst = max(worst, max_rel_error(p.grad.reshape(-1)[coords], num.reshape(-1)[coords]))
    return worst


def test_encoder_gradients_match_finite_differences():
    worst = max(encoder_fd_error(seed) for seed in range(10))
    assert worst < 1e-3


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    enc = Encoder(EncoderConfig(vocab_size=5), seed=7)
    path = tmp_path / "m.ckpt"
    save_encoder(path, enc, step=12, extra_blocks={"adam.m/x": np.arange(3.0)}, extra_meta={"note": "x"})
    back, rest, meta = load_encoder(path)
    assert meta["step"] == 12 and meta["note"] == "x"
    assert back.config == enc.config
    for k, v in enc.state_dict().items():
        assert back.params[k].value.tobytes() == v.tobytes()
    assert rest["adam.m/x"].tobytes() == np.arange(3.0).tobytes()
    blocks, _ = load_checkpoint(path)
    save_checkpoint(tmp_path / "again.ckpt", blocks, meta)
    path2 = tmp_path / "again2.ckpt"
    save_encoder(path2, back, step=12, extra_blocks={"adam.m/x": np.arange(3.0)}, extra_meta={"note": "x"})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    enc = Encoder(EncoderConfig(vocab_size=5))
    good = tmp_path / "good.ckpt"
    save_encoder(good, enc)
    bad.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(ValueError, match="past end"):
        load_checkpoint(bad)

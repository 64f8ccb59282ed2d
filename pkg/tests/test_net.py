import math

import numpy as np
import pytest
import torch

from diffant.infer import anticipate
from diffant.net import AttentionMaskSpec, DiffAnt, load_checkpoint, save_checkpoint, sinusoid
from diffant.schedule import make_schedule
from diffant.train import Batch, compute_losses
from helpers import tiny_config, tiny_model


def feats(L, K=32, seed=0):
    return torch.randn(1, L, K, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_single_frame_attention_is_identity_weighted():
    model = tiny_model()
    model.eval()
    enc = model.encode(feats(1), need_weights=True)
    assert enc.E.shape == (1, 1, 8)
    assert all(torch.all(w == 1.0) for w in enc.attention)


def test_position_encoding_breaks_permutation_invariance():
    model = tiny_model()
    model.eval()
    x = feats(20)
    y = x.clone()
    y[:, [2, 17]] = y[:, [17, 2]]
    assert not torch.allclose(model.encode(x).E[:, 2], model.encode(y).E[:, 17])


def test_sinusoid_closed_form():
    base = sinusoid([0], 8, torch.float64)[0]
    assert base.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    p = sinusoid([5, 6], 8, torch.float64)
    for k in range(4):
        w = 10000 ** (-2 * k / 8)
        assert p[1, 2 * k].item() == pytest.approx(math.sin(6 * w), abs=1e-12)
        assert p[1, 2 * k + 1].item() == pytest.approx(math.cos(6 * w), abs=1e-12)
        # s -> s + 1 is a rotation by w
        rot = math.sin(5 * w) * math.cos(w) + math.cos(5 * w) * math.sin(w)
        assert p[1, 2 * k].item() == pytest.approx(rot, abs=1e-12)


def test_local_mask_blocks_far_frames_in_every_layer():
    model = tiny_model(encoder_layers=3, mask_kind="local", windows=(9, 9, 33))
    model.eval()
    L = 60
    enc = model.encode(feats(L), need_weights=True)
    idx = torch.arange(L)
    for layer, w in zip(enc.attention, (9, 9, 33)):
        far = (idx[:, None] - idx[None, :]).abs() > w // 2
        assert layer[0][:, far].max().item() <= 1e-8
        assert layer[0][:, ~far].min().item() > 0


@pytest.mark.parametrize("windows", [(8,), (9, 5), ()])
def test_mask_spec_rejects_bad_windows(windows):
    with pytest.raises(ValueError):
        AttentionMaskSpec("local", windows)


def test_encoder_ignores_padded_frames():
    model = tiny_model()
    model.eval()
    x = feats(10)
    padded = torch.cat([x, torch.randn(1, 5, 32, dtype=torch.float64)], 1)
    pad = torch.zeros(1, 15, dtype=torch.bool)
    pad[:, 10:] = True
    a = model.encode(x).E
    b = model.encode(padded, pad).E[:, :10]
    assert torch.allclose(a, b, atol=1e-10)


def test_step_embedding_deterministic_and_range_checked():
    model = tiny_model()
    assert torch.equal(model.step_embed(7), model.step_embed(7))
    with pytest.raises(ValueError):
        model.step_embed(51)
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 3, 5, dtype=torch.float64))


@pytest.mark.parametrize("M", [1, 8, 16])
def test_denoise_shapes(M):
    model = tiny_model(num_queries=M)
    model.eval()
    enc = model.encode(feats(12))
    z = torch.randn(M, 8, dtype=torch.float64)
    assert model.denoise(z, 3, enc).shape == (M, 8)
    assert model.denoise(z[None].expand(2, -1, -1), torch.tensor([3, 9]), enc).shape == (2, M, 8)
    with pytest.raises(ValueError):
        model.denoise(torch.zeros(M + 1, 8, dtype=torch.float64), 3, enc)


def test_denoise_is_deterministic_and_step_conditioned():
    model = tiny_model()
    model.eval()
    enc = model.encode(feats(12))
    z = torch.randn(4, 8, dtype=torch.float64)
    assert torch.equal(model.denoise(z, 5, enc), model.denoise(z, 5, enc))
    assert not torch.allclose(model.denoise(z, 5, enc), model.denoise(z, 40, enc))


def test_batched_denoise_matches_per_item():
    model = tiny_model()
    model.eval()
    enc = model.encode(feats(12))
    z = torch.randn(3, 4, 8, dtype=torch.float64)
    steps = torch.tensor([1, 20, 50])
    batched = model.denoise(z, steps, enc)
    for i in range(3):
        assert torch.allclose(batched[i], model.denoise(z[i], steps[i:i + 1], enc), atol=1e-12)


def fixed_future_batch(B=6, L=10, seed=0):
    g = torch.Generator().manual_seed(seed)
    classes = torch.tensor([[5, 2, 7, 12]] * B)
    durations = torch.tensor([[0.5, 0.3, 0.2, 0.0]] * B, dtype=torch.float32)
    return Batch(torch.randn(B, L, 32, generator=g), torch.zeros(B, L, dtype=torch.bool),
                 torch.zeros(B, L, dtype=torch.long), classes, durations)


def test_query_slots_bind_to_positions_and_memory_is_used():
    torch.manual_seed(0)
    model = DiffAnt(tiny_config(hidden_dim=16, decoder_dim=16, num_queries=4, max_steps=100))
    sched = make_schedule(100)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    batch = fixed_future_batch()
    for _ in range(200):
        terms, _ = compute_losses(model, sched, batch, rng.integers(1, 101, 6))
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
    res = anticipate(model, sched, batch.feats[0].numpy(), "deterministic", 10, horizon_frames=10)[0]
    assert res.actions.classes.tolist() == [5, 2, 7]
    np.testing.assert_allclose(res.actions.durations, [0.5, 0.3, 0.2], atol=0.1)
    enc = model.encode(batch.feats[:1])
    z = torch.zeros(1, 4, 16)
    with torch.no_grad():
        base = model.denoise(z, 50, enc)
        model.set_memory_ablation(True)
        ablated = model.denoise(z, 50, enc)
        model.set_memory_ablation(False)
    assert not torch.allclose(base, ablated)


def test_total_loss_gradient_matches_finite_differences():
    model = tiny_model(seed=3)
    model.eval()
    B = 2
    g = torch.Generator().manual_seed(1)
    batch = Batch(torch.randn(B, 7, 32, generator=g, dtype=torch.float64), torch.zeros(B, 7, dtype=torch.bool),
                  torch.randint(0, 13, (B, 7), generator=g), torch.tensor([[1, 4, 12, 12], [3, 0, 8, 12]]),
                  torch.tensor([[0.6, 0.4, 0, 0], [0.2, 0.3, 0.5, 0]], dtype=torch.float64))
    noise = torch.randn(B, 4, 8, generator=g, dtype=torch.float64)
    z0_noise = torch.randn(B, 4, 8, generator=g, dtype=torch.float64)
    sched = make_schedule(50)

    def total():
        return compute_losses(model, sched, batch, [3, 41], noise=noise, z0_noise=z0_noise)[0]["total"]

    params = [p for p in model.parameters()]
    model.zero_grad()
    total().backward()
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(10):
        p = params[rng.integers(len(params))]
        i = tuple(int(rng.integers(n)) for n in p.shape)
        with torch.no_grad():
            old = p[i].item()
            p[i] = old + h
            up = total().item()
            p[i] = old - h
            down = total().item()
            p[i] = old
        fd = (up - down) / (2 * h)
        an = p.grad[i].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = DiffAnt(tiny_config(mask_kind="local", windows=(3,)))
    save_checkpoint(model, tmp_path / "m.ckpt", {"train.seed": "0"})
    loaded, echo = load_checkpoint(tmp_path / "m.ckpt")
    assert echo == {"train.seed": "0"}
    assert loaded.cfg == model.cfg
    for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), n
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")

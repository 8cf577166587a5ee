import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dbmid.blur_synthesis import BlurSpec, DatasetConfig, apply_blur, make_phantom, synthesize_dataset
from dbmid.checkpoint import MAGIC, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from dbmid.deblur_net import (DeblurNet, NetworkConfig, TrainConfig, build_network, clone, fine_tune,
                              fit_arrays, fit_cascade, infer, parameter_count, train)
from dbmid.errors import CheckpointError, ConfigurationError, DatasetError

TINY = NetworkConfig(stages=2, layers_per_stage=1, channels_per_stage=[8, 16])


class TestArchitecture:
    def test_paper_preset_depth(self):
        cfg = NetworkConfig.paper()
        assert cfg.depth == 21
        net = DeblurNet(cfg)
        assert len(net.encoder) == len(net.decoder) == 21

    @pytest.mark.parametrize("cfg", [NetworkConfig.desk(), NetworkConfig.paper(), TINY,
                                     NetworkConfig(stages=1, layers_per_stage=3, channels_per_stage=[4],
                                                   kernel_size=5)])
    def test_parameter_count_closed_form(self, cfg):
        net = DeblurNet(cfg)
        assert parameter_count(cfg) == sum(p.numel() for p in net.parameters())

    def test_strides(self):
        plan = NetworkConfig.desk().layer_plan()
        assert [s for *_, s in plan] == [1, 1, 2, 1, 2, 1]
        assert NetworkConfig.desk().size_multiple == 4

    @pytest.mark.parametrize("kwargs", [dict(stages=0), dict(channels_per_stage=[1, 2]), dict(kernel_size=4),
                                        dict(skip_interval=0), dict(downsample_factor=3)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            NetworkConfig(**kwargs)

    def test_unknown_role(self):
        with pytest.raises(ConfigurationError):
            DeblurNet(TINY, role="mixed")

    def test_seeded_init(self):
        a, b, c = build_network(TINY, 3), build_network(TINY, 3), build_network(TINY, 4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_last_layer_damped(self):
        net = build_network(TINY, 0)
        assert net.decoder[-1].weight.abs().mean() < 0.2 * net.decoder[0].weight.abs().mean()
        assert all(torch.count_nonzero(m.bias) == 0 for m in [*net.encoder, *net.decoder])


class TestInfer:
    @settings(max_examples=12, deadline=None)
    @given(h=st.sampled_from([17, 64, 100]), w=st.sampled_from([17, 64, 100]), c=st.sampled_from([1, 3]))
    def test_shape_contract(self, h, w, c):
        img = np.random.default_rng(h * w).random((h, w, c))
        out = infer(build_network(NetworkConfig.desk(), 0), img)
        assert out.shape == (h, w, c)
        assert out.min() >= 0 and out.max() <= 1

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            infer(build_network(TINY, 0), np.zeros((15, 32, 3)))


def test_gradient_finite_difference():
    cfg = NetworkConfig(stages=1, layers_per_stage=1, channels_per_stage=[2])
    net = build_network(cfg, 0).double()
    # perturb biases so no ReLU sits exactly on its kink
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=torch.Generator().manual_seed(1), dtype=p.dtype))
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    y = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    params = list(net.parameters())

    def loss():
        return torch.mean((net(x) - y) ** 2)

    grads = torch.autograd.grad(loss(), params)
    eps = 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                assert abs(numeric - gflat[i].item()) <= 1e-4 * max(abs(numeric), 1e-6) + 1e-10


@pytest.fixture(scope="module")
def pairs():
    sharp = np.stack([make_phantom("cells", 64, s) for s in range(8)]).astype(np.float32)
    blurred = np.stack([apply_blur(x, BlurSpec("Defocus", 3)) for x in sharp]).astype(np.float32)
    return sharp, blurred


class TestTraining:
    def test_beats_identity(self, pairs):
        sharp, blurred = pairs
        identity = float(np.mean((sharp - blurred) ** 2))
        net = build_network(TINY, 0)
        log = fit_arrays(net, sharp, blurred, TrainConfig.desk(max_steps=300, patch_size=32))
        assert len(log.losses) == 300
        out = np.stack([infer(net, b) for b in blurred])
        # 8 seeds measured 0.67-0.82 of the identity error
        assert np.mean((out - sharp) ** 2) < 0.9 * identity

    def test_deterministic(self, pairs):
        sharp, blurred = pairs
        tc = TrainConfig.desk(max_steps=5, patch_size=32)
        a, b = build_network(TINY, 0), build_network(TINY, 0)
        la, lb = fit_arrays(a, sharp, blurred, tc), fit_arrays(b, sharp, blurred, tc)
        assert la.losses == lb.losses
        assert to_bytes(a) == to_bytes(b)

    def test_bad_patch_size(self, pairs):
        with pytest.raises(ConfigurationError):
            fit_arrays(build_network(NetworkConfig.desk(), 0), *pairs, TrainConfig.desk(patch_size=30))

    def test_empty(self):
        with pytest.raises(DatasetError):
            fit_arrays(build_network(TINY, 0), np.zeros((0, 32, 32, 3)), np.zeros((0, 32, 32, 3)), TrainConfig())

    def test_invalid_train_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=0)


@pytest.fixture(scope="module")
def cascade_pairs():
    sharp = np.stack([make_phantom("cells", 64, s) for s in range(6)]).astype(np.float32)
    motion = np.stack([apply_blur(x, BlurSpec("Motion", 0, 9)) for x in sharp[:3]]).astype(np.float32)
    mixed = np.stack([apply_blur(x, BlurSpec("Mixed", 3, 9, "vertical")) for x in sharp[3:]]).astype(np.float32)
    return (sharp[:3], motion), (sharp[3:], mixed)


class TestCascadeTraining:
    def test_first_loss_matches_hand_computation(self, cascade_pairs):
        motion, mixed = cascade_pairs
        tc = TrainConfig.desk(max_steps=1, batch_size=5, patch_size=32, augment=False)
        net, down = build_network(TINY, 0, "motion"), build_network(TINY, 1, "defocus")
        before = clone(net)
        log = fit_cascade(net, down, motion, mixed, tc)
        # replay the patch draws: 3 motion patches, then 2 mixed patches
        rng = np.random.default_rng(tc.seed)
        err = []
        for (sharp, blurred), k in ((motion, 3), (mixed, 2)):
            idx, ys, xs = rng.integers(0, 3, k), rng.integers(0, 33, k), rng.integers(0, 33, k)
            rng.integers(0, 4, k)
            for i, y, x in zip(idx, ys, xs):
                with torch.no_grad():
                    out = before(torch.from_numpy(blurred[i, y:y + 32, x:x + 32].transpose(2, 0, 1).copy())[None])
                    if sharp is mixed[0]:
                        out = down(out)
                out = out[0].numpy().transpose(1, 2, 0).astype(np.float64)
                err.append(np.mean((out - sharp[i, y:y + 32, x:x + 32]) ** 2))
        assert log.losses[0] == pytest.approx(np.mean(err), rel=1e-5)

    def test_downstream_frozen_and_deterministic(self, cascade_pairs):
        tc = TrainConfig.desk(max_steps=4, patch_size=32)
        down = build_network(TINY, 1, "defocus")
        frozen = to_bytes(down)
        a, b = build_network(TINY, 0, "motion"), build_network(TINY, 0, "motion")
        la, lb = fit_cascade(a, down, *cascade_pairs, tc), fit_cascade(b, down, *cascade_pairs, tc)
        assert to_bytes(down) == frozen
        assert la.losses == lb.losses and to_bytes(a) == to_bytes(b)
        assert la.samples == 6

    def test_rejects_bad_inputs(self, cascade_pairs):
        motion, mixed = cascade_pairs
        tc = TrainConfig.desk(max_steps=1, patch_size=32)
        net, down = build_network(TINY, 0, "motion"), build_network(TINY, 1, "defocus")
        with pytest.raises(ConfigurationError):
            fit_cascade(down, net, motion, mixed, tc)
        with pytest.raises(ConfigurationError):
            fit_cascade(net, down, motion, mixed, TrainConfig.desk(batch_size=1, patch_size=32))
        with pytest.raises(DatasetError):
            fit_cascade(net, down, motion, (mixed[0][:0], mixed[1][:0]), tc)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = DatasetConfig(counts={"InFocus": 1, "Defocus": 3, "Motion": 2, "Mixed": 0}, size=64)
    synthesize_dataset(cfg, root)
    return root


class TestManifestTraining:
    def test_filters_by_role(self, dataset):
        _, log = train(build_network(TINY, 0, "motion"), dataset, TrainConfig.desk(max_steps=2, patch_size=32))
        assert log.samples == 2 and log.role == "motion"

    def test_cascade_uses_motion_and_mixed_rows(self, tmp_path):
        cfg = DatasetConfig(counts={"InFocus": 1, "Defocus": 1, "Motion": 2, "Mixed": 3}, size=64)
        synthesize_dataset(cfg, tmp_path)
        down = build_network(TINY, 1, "defocus")
        _, log = train(build_network(TINY, 0, "motion"), tmp_path, TrainConfig.desk(max_steps=1, patch_size=32),
                       down, "d.ckpt")
        assert log.samples == 5 and log.downstream == "d.ckpt"

    def test_fine_tune_zero_steps_is_noop(self, dataset):
        net = build_network(TINY, 0)
        before = to_bytes(net)
        _, log = fine_tune(net, dataset, TrainConfig.desk(max_steps=0, patch_size=32), "base.ckpt")
        assert to_bytes(net) == before
        assert log.warm_start == "base.ckpt" and log.losses == []

    def test_fine_tune_changes_weights(self, dataset):
        net = build_network(TINY, 0)
        copy = clone(net)
        fine_tune(net, dataset, TrainConfig.desk(max_steps=3, patch_size=32))
        assert to_bytes(net) != to_bytes(copy)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build_network(NetworkConfig.desk(), 7, "motion")
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path, "motion")
        assert back.role == "motion"
        assert to_bytes(back) == path.read_bytes()
        img = make_phantom("texture", 64, 0)
        assert np.array_equal(infer(net, img), infer(back, img))

    def test_bytes_start_with_magic(self):
        assert to_bytes(build_network(TINY, 0)).startswith(MAGIC)

    def test_truncated(self, tmp_path):
        data = to_bytes(build_network(TINY, 0))
        for cut in (3, len(MAGIC) + 6, len(data) - 1):
            with pytest.raises(CheckpointError):
                from_bytes(data[:cut])

    def test_magic_mismatch(self):
        data = bytearray(to_bytes(build_network(TINY, 0)))
        data[0] ^= 0xFF
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(bytes(data))

    def test_role_mismatch(self, tmp_path):
        path = tmp_path / "d.ckpt"
        save_checkpoint(build_network(TINY, 0, "defocus"), path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, "motion")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

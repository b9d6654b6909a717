"""Builders, schedule, losses, augmentation, and the training loop."""

import numpy as np
import pytest

from smcdo import ops
from smcdo.errors import ConfigError, NumericError
from smcdo.graph import (
    KIND_CONV,
    KIND_DENSE,
    KIND_DROPOUT_SITE,
    KIND_SOFTMAX,
    LayerSpec,
    ModelGraph,
    run_vanilla,
    split_at,
)
from smcdo.stochastic import DropoutSpec
from smcdo.trainer import (
    SGD,
    Adam,
    ArchConfig,
    AugmentConfig,
    TrainConfig,
    augment,
    build_mini_segnet,
    build_mini_wrn,
    count_parameters,
    cross_entropy_loss,
    dice_loss,
    lr_at_epoch,
    train,
)

from oracles import fd_gradient, max_rel_error

PAPER_MILESTONES = [(1, 0.1), (80, 0.01), (120, 0.001), (160, 0.0001), (180, 0.0005)]


class TestLrSchedule:
    def test_step_schedule_values(self):
        assert lr_at_epoch(PAPER_MILESTONES, 1) == 0.1
        assert lr_at_epoch(PAPER_MILESTONES, 80) == 0.01
        assert lr_at_epoch(PAPER_MILESTONES, 120) == 0.001

    def test_piecewise_constant_everywhere(self):
        for epoch in range(1, 201):
            expect = [lr for e, lr in PAPER_MILESTONES if e <= epoch][-1]
            assert lr_at_epoch(PAPER_MILESTONES, epoch) == expect

    def test_milestone_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, lr_milestones=[(2, 0.1)])
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, lr_milestones=[(1, 0.1), (1, 0.01)])


class TestBuildMiniWrn:
    def arch(self, k=1, fsl=4):
        return ArchConfig("mini_wrn", depth_blocks=2, widening_factor=k,
                          base_channels=8, first_stochastic_layer=fsl, num_classes=10)

    def test_parameter_ratio_scales_with_k_squared(self):
        p1 = count_parameters(build_mini_wrn(self.arch(k=1)), kinds=("conv",))
        p3 = count_parameters(build_mini_wrn(self.arch(k=3)), kinds=("conv",))
        ratio = p3 / p1
        assert 0.7 * 9 <= ratio <= 1.05 * 9

    def test_dropout_sites_before_convs_at_index(self):
        g = build_mini_wrn(self.arch(fsl=4))
        conv_positions = [i for i, l in enumerate(g.layers) if l.kind == KIND_CONV]
        assert len(conv_positions) == 7
        for ci, pos in enumerate(conv_positions):
            has_site = pos > 0 and g.layers[pos - 1].kind == KIND_DROPOUT_SITE
            assert has_site == (ci >= 4)

    def test_first_stochastic_beyond_last_conv_means_no_sites(self):
        g = build_mini_wrn(self.arch(fsl=99))
        assert g.dropout_sites() == []
        with pytest.raises(ValueError):
            split_at(g, 3)

    def test_forward_shapes_and_probs(self):
        g = build_mini_wrn(self.arch(k=2))
        x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 16, 16))
        out = run_vanilla(g, x)
        assert out.shape == (2, 10, 1, 1)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-9

    def test_deterministic_init(self):
        a = build_mini_wrn(self.arch(), init_seed=5)
        b = build_mini_wrn(self.arch(), init_seed=5)
        for idx in a.weights:
            if a.layers[idx].kind == KIND_CONV:
                assert np.array_equal(a.weights[idx].weights, b.weights[idx].weights)


class TestBuildMiniSegnet:
    def arch(self, fsl=None, depth=1):
        if fsl is None:
            fsl = 2 + depth
        return ArchConfig("mini_segnet", depth_blocks=depth, widening_factor=1,
                          base_channels=4, first_stochastic_layer=fsl, num_classes=2)

    def test_output_matches_input_spatial_size(self):
        g = build_mini_segnet(self.arch())
        x = np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 16))
        out = run_vanilla(g, x)
        assert out.shape == (2, 2, 16, 16)

    def test_encoder_has_no_dropout_sites(self):
        g = build_mini_segnet(self.arch())
        sites = g.dropout_sites()
        assert sites
        first_upsample = next(i for i, l in enumerate(g.layers) if l.kind == "upsample")
        assert all(s > first_upsample for s in sites)

    def test_per_pixel_probs_sum_to_one(self):
        g = build_mini_segnet(self.arch())
        x = np.random.default_rng(2).uniform(0, 1, (1, 3, 8, 8))
        out = run_vanilla(g, x)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-9

    def test_encoder_placement_rejected(self):
        with pytest.raises(ConfigError, match="decoder"):
            build_mini_segnet(self.arch(fsl=0))


class TestCrossEntropy:
    def test_perfect_one_hot_is_zero(self):
        probs = np.eye(4)
        labels = np.arange(4)
        loss, _ = cross_entropy_loss(probs, labels)
        assert loss == 0.0

    def test_uniform_ten_classes(self):
        probs = np.full((6, 10), 0.1)
        loss, _ = cross_entropy_loss(probs, np.zeros(6, dtype=int))
        assert abs(loss - np.log(10)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy_loss(np.full((2, 3), 1 / 3), np.array([0, 3]))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            probs = rng.dirichlet(np.ones(5), size=4) * 0.9 + 0.02
            labels = rng.integers(0, 5, size=4)
            _, grad = cross_entropy_loss(probs, labels)
            num = fd_gradient(lambda: cross_entropy_loss(probs, labels)[0], probs)
            assert max_rel_error(grad, num) <= 1e-4

    def test_pixelwise_variant(self):
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(2), size=(2, 3, 3)).transpose(0, 3, 1, 2)
        labels = rng.integers(0, 2, size=(2, 3, 3))
        loss, grad = cross_entropy_loss(probs, labels)
        assert grad.shape == probs.shape
        num = fd_gradient(lambda: cross_entropy_loss(probs, labels)[0], probs)
        assert max_rel_error(grad, num) <= 1e-4


class TestDiceLoss:
    def test_perfect_overlap_is_zero(self):
        mask = np.ones((1, 2, 2))
        probs = np.zeros((1, 2, 2, 2))
        probs[:, 1] = 1.0
        loss, _ = dice_loss(probs, mask)
        assert loss == 0.0

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            p1 = rng.uniform(0.05, 0.95, size=(1, 3, 3))
            probs = np.stack([1 - p1, p1], axis=1)
            mask = rng.integers(0, 2, size=(1, 3, 3)).astype(float)
            if mask.sum() == 0:
                mask[0, 0, 0] = 1.0
            _, grad = dice_loss(probs, mask)
            num = fd_gradient(lambda: dice_loss(probs, mask)[0], probs)
            assert max_rel_error(grad, num) <= 1e-4


class _ForcedRng:
    """Stub generator: fixed crop offsets, always-flip coin."""

    def __init__(self, offset=0):
        self.offset = offset

    def integers(self, low, high, size):
        return np.full(size, self.offset, dtype=int)

    def random(self, n):
        return np.zeros(n)  # < 0.5 -> always flip


class TestAugment:
    def test_identity_when_disabled(self):
        x = np.random.default_rng(6).normal(size=(3, 2, 5, 5))
        out = augment(x, AugmentConfig(pad_crop=0, horizontal_flip=False),
                      np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_forced_flip_is_involution(self):
        x = np.random.default_rng(7).normal(size=(2, 1, 4, 4))
        cfg = AugmentConfig(pad_crop=0, horizontal_flip=True)
        once = augment(x, cfg, _ForcedRng())
        twice = augment(once, cfg, _ForcedRng())
        assert np.array_equal(twice, x)
        assert not np.array_equal(once, x)

    def test_centered_offset_recovers_input(self):
        x = np.random.default_rng(8).normal(size=(1, 1, 4, 4))
        cfg = AugmentConfig(pad_crop=2, horizontal_flip=False)
        out = augment(x, cfg, _ForcedRng(offset=2))  # offset == pad -> center crop
        assert np.array_equal(out, x)

    def test_crop_offsets_uniform_chi_square(self):
        # offsets recovered from a coordinate ramp; chi-square p > 0.01 over
        # the (2*pad+1)^2 crop positions
        from scipy.stats import chisquare

        pad = 2
        h = w = 9
        ramp = ((np.arange(h)[:, None] + 1) * 1000.0
                + (np.arange(w)[None, :] + 1)).reshape(1, h, w)
        cfg = AugmentConfig(pad_crop=pad, horizontal_flip=False)
        rng = np.random.default_rng(9)
        counts = np.zeros((2 * pad + 1, 2 * pad + 1), dtype=int)
        draws = 10_000
        batch = np.broadcast_to(ramp, (100, 1, h, w)).copy()
        for _ in range(draws // 100):
            out = augment(batch, cfg, rng)
            center = out[:, 0, h // 2, w // 2]
            row = (center // 1000).astype(int) - 1
            col = (center % 1000).astype(int) - 1
            oy = row - (h // 2 - pad)
            ox = col - (w // 2 - pad)
            for a, b in zip(oy, ox):
                counts[a, b] += 1
        stat = chisquare(counts.ravel())
        assert stat.pvalue > 0.01


def linear_toy_problem(rng, n=64):
    x = rng.uniform(-1, 1, size=(n, 2, 1, 1))
    y = (x[:, 0, 0, 0] > x[:, 1, 0, 0]).astype(int)
    layers = [LayerSpec(KIND_DENSE), LayerSpec(KIND_SOFTMAX)]
    weights = {0: ops.DenseParams(rng.normal(0, 0.1, (2, 2)), np.zeros(2))}
    graph = ModelGraph(layers, weights, DropoutSpec("spatial", 0.0, 0.0))
    return graph, (x, y)


class TestTrain:
    def config(self, epochs=40, seed=0, lr=0.5, **kw):
        return TrainConfig(
            epochs=epochs,
            lr_milestones=[(1, lr)],
            momentum=0.9,
            weight_decay=0.0,
            batch_size=16,
            augmentation=AugmentConfig(pad_crop=0, horizontal_flip=False),
            rate_train=0.0,
            seed=seed,
            **kw,
        )

    def test_linearly_separable_reaches_full_accuracy(self):
        rng = np.random.default_rng(10)
        graph, data = linear_toy_problem(rng)
        _, history = train(graph, data, self.config())
        assert history.train_accuracy[-1] == 1.0

    def test_deterministic_given_seed(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            graph, data = linear_toy_problem(rng)
            train(graph, data, self.config(epochs=5, seed=77))
            results.append(graph.weights[0].weights.copy())
        assert np.array_equal(results[0], results[1])

    def test_history_invariants(self):
        rng = np.random.default_rng(12)
        graph, data = linear_toy_problem(rng)
        cfg = TrainConfig(epochs=6, lr_milestones=[(1, 0.5), (4, 0.05)],
                          momentum=0.9, weight_decay=0.0, batch_size=16,
                          augmentation=AugmentConfig(0, False), seed=0)
        _, history = train(graph, data, cfg, val_dataset=data)
        assert len(history.train_loss) == 6
        assert history.learning_rate == [0.5, 0.5, 0.5, 0.05, 0.05, 0.05]
        assert all(np.isfinite(v) for v in history.val_accuracy)

    @pytest.mark.filterwarnings("ignore:invalid value|ignore:overflow")
    def test_nan_loss_aborts_with_location(self):
        rng = np.random.default_rng(13)
        graph, data = linear_toy_problem(rng)
        with pytest.raises(NumericError, match=r"epoch \d+, batch \d+"):
            train(graph, data, self.config(epochs=10, lr=1e308))

    def test_training_with_spatial_dropout_runs(self):
        arch = ArchConfig("mini_wrn", depth_blocks=1, widening_factor=1,
                          base_channels=4, first_stochastic_layer=2, num_classes=2)
        graph = build_mini_wrn(arch, DropoutSpec("spatial", 0.5, 0.5))
        rng = np.random.default_rng(14)
        x = rng.uniform(0, 1, (32, 3, 8, 8))
        y = rng.integers(0, 2, 32)
        cfg = self.config(epochs=2, lr=0.01)
        cfg = TrainConfig(epochs=2, lr_milestones=[(1, 0.01)], momentum=0.9,
                          weight_decay=1e-4, batch_size=16,
                          augmentation=AugmentConfig(1, True), rate_train=0.5, seed=3)
        _, history = train(graph, (x, y), cfg)
        assert len(history.train_loss) == 2
        assert all(np.isfinite(v) for v in history.train_loss)


class TestTrainDropoutStream:
    def test_fresh_masks_per_batch(self):
        from smcdo.trainer import _train_dropout_factor

        rng = np.random.default_rng(0)
        a = _train_dropout_factor("spatial", (4, 16, 2, 2), 0.5, rng)
        b = _train_dropout_factor("spatial", (4, 16, 2, 2), 0.5, rng)
        assert not np.array_equal(a, b)

    def test_rate_zero_is_identity(self):
        from smcdo.trainer import _train_dropout_factor

        assert _train_dropout_factor("spatial", (1, 4, 2, 2), 0.0,
                                     np.random.default_rng(0)) is None


class TestOptimizers:
    def test_weight_decay_shrinks_exactly(self):
        w0 = np.random.default_rng(15).normal(size=(3, 3))
        p = ops.DenseParams(w0.copy(), np.zeros(3))
        opt = SGD(momentum=0.9, weight_decay=0.01)
        lr = 0.1
        opt.step({0: p}, {0: [np.zeros_like(w0), np.zeros(3)]}, lr)
        assert np.array_equal(p.weights, w0 - lr * (0.01 * w0))

    def test_sgd_momentum_accumulates(self):
        p = ops.DenseParams(np.zeros((1, 1)), np.zeros(1))
        opt = SGD(momentum=0.5, weight_decay=0.0)
        g = [np.ones((1, 1)), np.zeros(1)]
        opt.step({0: p}, {0: g}, 1.0)   # v=1, w=-1
        opt.step({0: p}, {0: g}, 1.0)   # v=1.5, w=-2.5
        assert p.weights[0, 0] == -2.5

    def test_adam_moves_toward_minimum(self):
        p = ops.DenseParams(np.array([[4.0]]), np.zeros(1))
        opt = Adam()
        for _ in range(200):
            g = [2 * p.weights, np.zeros(1)]  # d/dw of w^2
            opt.step({0: p}, {0: g}, 0.05)
        assert abs(p.weights[0, 0]) < 0.1

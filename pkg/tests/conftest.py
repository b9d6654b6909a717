"""Shared fixtures and generators for the test suite."""

import numpy as np

from smcdo.datasets import write_cifar10

from smcdo import ops
from smcdo.graph import (
    KIND_BATCHNORM,
    KIND_CONV,
    KIND_DENSE,
    KIND_DROPOUT_SITE,
    KIND_GLOBAL_AVGPOOL,
    KIND_RELU,
    KIND_RESIDUAL_BEGIN,
    KIND_RESIDUAL_END,
    KIND_SOFTMAX,
    LayerSpec,
    ModelGraph,
)
from smcdo.stochastic import DropoutSpec


def random_toy_model(rng, num_sites=None, mode="spatial", rate_inf=None):
    """A small random convnet with dropout sites, plus a matching input.

    Layer counts land in the 4..12 range (head included); every dropout site
    immediately precedes a conv, and a residual span may straddle the
    backbone/branch split.
    """
    while True:
        graph, x = _try_toy_model(rng, num_sites, mode, rate_inf)
        if 4 <= len(graph.layers) <= 12:
            return graph, x


def _try_toy_model(rng, num_sites, mode, rate_inf):
    n_sites = num_sites if num_sites is not None else int(rng.integers(1, 4))
    n_convs = int(rng.integers(max(1, n_sites), max(2, n_sites) + 2))
    c_in = int(rng.integers(1, 4))
    c = int(rng.integers(2, 6))
    classes = int(rng.integers(2, 5))
    h = int(rng.integers(5, 9))
    rate = float(rng.uniform(0.1, 0.7)) if rate_inf is None else rate_inf

    site_convs = set(rng.choice(n_convs, size=min(n_sites, n_convs), replace=False).tolist())
    use_residual = n_convs >= 3 and rng.random() < 0.5

    layers = []
    weights = {}

    def add(spec, params=None):
        if params is not None:
            weights[len(layers)] = params
        layers.append(spec)

    def add_conv(cin, cout):
        w = rng.normal(0, 0.5, size=(cout, cin, 3, 3))
        add(LayerSpec(KIND_CONV), ops.ConvParams(w, rng.normal(0, 0.2, cout), 1, 1))

    res_open = False
    for k in range(n_convs):
        if use_residual and k == 1:
            add(LayerSpec(KIND_RESIDUAL_BEGIN))
            res_open = True
        if k in site_convs:
            add(LayerSpec(KIND_DROPOUT_SITE))
        add_conv(c_in if k == 0 else c, c)
        if rng.random() < 0.5:
            add(LayerSpec(KIND_BATCHNORM), ops.BatchNormParams(
                rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c),
                rng.normal(0, 0.3, c), rng.uniform(0.5, 1.5, c)))
        if res_open and k == n_convs - 1:
            add(LayerSpec(KIND_RESIDUAL_END))
            res_open = False
        if rng.random() < 0.5:
            add(LayerSpec(KIND_RELU))
    if res_open:
        add(LayerSpec(KIND_RESIDUAL_END))
    add(LayerSpec(KIND_GLOBAL_AVGPOOL))
    add(LayerSpec(KIND_DENSE), ops.DenseParams(rng.normal(0, 0.5, (classes, c)),
                                               rng.normal(0, 0.2, classes)))
    add(LayerSpec(KIND_SOFTMAX))

    spec = DropoutSpec(mode, 0.0, rate)
    graph = ModelGraph(layers, weights, spec)
    x = rng.uniform(-1.5, 1.5, size=(int(rng.integers(1, 3)), c_in, h, h))
    return graph, x


def make_texture_images(rng, n, noise=0.12):
    """2-class 32x32 texture task: horizontal- vs vertical-dominant stripes.

    Amplitudes sit near the noise floor and stripe periods are short, so the
    level-4/5 corruption suite (noise, blur, pixelation, contrast) produces
    genuine high-confidence errors rather than grazing the model.
    """
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    labels = rng.integers(0, 2, n)
    imgs = np.zeros((n, 3, 32, 32))
    for i in range(n):
        f1, f2 = rng.uniform(5.0, 9.0, 2)
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
        amp = rng.uniform(0.05, 0.14)
        base = rng.uniform(0.35, 0.65)
        main, other = (yy, xx) if labels[i] == 0 else (xx, yy)
        wave = np.sin(2 * np.pi * f1 * main / 32 + ph1) + 0.4 * np.sin(
            2 * np.pi * f2 * other / 32 + ph2)
        for c in range(3):
            imgs[i, c] = base + amp * rng.uniform(0.8, 1.2) * wave
    imgs += rng.normal(0, noise, imgs.shape)
    return np.clip(imgs, 0, 1), labels


def write_texture_cifar(path, n, seed, noise=0.12):
    """Texture task serialized in the CIFAR-10 binary record format."""
    rng = np.random.default_rng(seed)
    images, labels = make_texture_images(rng, n, noise)
    write_cifar10(path, images, labels)
    return images, labels


def make_default_bench_model(rate_inf=0.75, init_seed=0):
    """The default toy model for latency work: conv-dominated, backbone-heavy.

    base 16, widening 3, two stages; dropout sites cover the two stage-2
    block convs (96 channels, divisible by 4), leaving the backbone with
    ~59% of the multiply-adds on 32x32 inputs.
    """
    from smcdo.trainer import ArchConfig, build_mini_wrn

    arch = ArchConfig("mini_wrn", depth_blocks=2, widening_factor=3,
                      base_channels=16, first_stochastic_layer=5, num_classes=10)
    return build_mini_wrn(arch, DropoutSpec("spatial", 0.5, rate_inf),
                          init_seed=init_seed)

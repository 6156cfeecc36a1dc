"""Architecture contracts: generator, discriminator, Grad-CAM, pre-training."""

import numpy as np
import pytest

from ctharm import networks, phantom, training
from ctharm import tensor as T
from ctharm.config import RunConfig
from ctharm.rng import CounterRng


FULL = training.HuWindow(-1024, 1000)


@pytest.fixture(scope="module")
def gan():
    rng = CounterRng(123)
    enc = networks.build_encoder_classifier(rng.derive("enc"))
    return networks.build_gan(enc, rng.derive("gan"))


def norm_input(seed, size=32, n=1):
    rng = CounterRng(seed)
    return T.Tensor(rng.uniforms((n, 1, size, size)).astype(np.float32))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_generator_preserves_shape(gan):
    x = norm_input(1, 32)
    out = networks.generator_forward(gan, x)
    assert out.data.shape == x.data.shape
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


def test_generator_four_skips_at_halving_sizes(gan):
    x = norm_input(2, 64)
    _, skips = networks.generator_forward(gan, x, return_skips=True)
    assert len(skips) == 4
    assert [s.data.shape[2] for s in skips] == [64, 32, 16, 8]
    assert [s.data.shape[1] for s in skips] == list(networks.ENCODER_WIDTHS)


def test_generator_rejects_indivisible_size(gan):
    with pytest.raises(T.ShapeError, match="divisible"):
        networks.generator_forward(gan, norm_input(3, 24))


def test_generator_frozen_params_get_no_grad(gan):
    x = norm_input(4, 32)
    out = networks.generator_forward(gan, x)
    loss = T.l1_mean(out, T.Tensor(np.full(out.data.shape, 0.25, dtype=np.float32)))
    T.backward(loss)
    for name in sorted(gan.frozen_names):
        assert gan[name].grad is None, name
    trainable_with_grad = [n for n, p in gan.trainable("gen.") if p.grad is not None]
    assert len(trainable_with_grad) == len(gan.trainable("gen."))
    for _, p in gan.params.items():
        p.grad = None


def test_generator_deterministic(gan):
    x = norm_input(5, 32)
    a = networks.generator_forward(gan, x)
    b = networks.generator_forward(gan, x)
    assert a.data.tobytes() == b.data.tobytes()


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def test_discriminator_64_to_14_patch_map(gan):
    x = norm_input(6, 64)
    cand = norm_input(7, 64)
    logits = networks.discriminator_forward(gan, x, cand)
    assert logits.data.shape == (1, 1, 14, 14)


def test_discriminator_probabilities_in_open_interval(gan):
    logits = networks.discriminator_forward(gan, norm_input(8, 32), norm_input(9, 32))
    probs = T.sigmoid(logits).data
    assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_discriminator_shape_mismatch(gan):
    with pytest.raises(T.ShapeError):
        networks.discriminator_forward(gan, norm_input(10, 32), norm_input(11, 64))


def test_unconditional_variant_single_channel():
    rng = CounterRng(5)
    enc = networks.build_encoder_classifier(rng.derive("enc"))
    gan_u = networks.build_gan(enc, rng.derive("gan"), conditional=False)
    assert gan_u["disc.l1.w"].data.shape[1] == 1
    logits = networks.discriminator_forward(gan_u, norm_input(12, 32), norm_input(13, 32))
    assert logits.data.shape[1] == 1


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def test_cam_values_in_unit_interval_random_weights():
    for seed in range(4):
        rng = CounterRng(seed)
        enc = networks.build_encoder_classifier(rng.derive("enc"))
        bundle = networks.build_gan(enc, rng.derive("gan"))
        cam = networks.grad_cam(bundle, norm_input(seed, 32), norm_input(seed + 50, 32))
        assert cam.values.shape == (32, 32)
        assert cam.values.min() >= 0.0
        assert cam.values.max() <= 1.0


def test_cam_nonzero_has_unit_max(gan):
    cam = networks.grad_cam(gan, norm_input(20, 32), norm_input(21, 32))
    if cam.values.max() > 0:
        assert cam.values.max() == pytest.approx(1.0)


def test_cam_zeroed_final_layer_is_all_zero(gan):
    saved_w = gan["disc.l4.w"].data.copy()
    saved_b = gan["disc.l4.b"].data.copy()
    gan["disc.l4.w"].data[:] = 0.0
    gan["disc.l4.b"].data[:] = 0.0
    try:
        cam = networks.grad_cam(gan, norm_input(22, 32), norm_input(23, 32))
        assert np.all(cam.values == 0.0)
    finally:
        gan["disc.l4.w"].data[:] = saved_w
        gan["disc.l4.b"].data[:] = saved_b


def test_cam_leaves_discriminator_unchanged(gan):
    before = {n: p.data.copy() for n, p in gan.named("disc.")}
    networks.grad_cam(gan, norm_input(24, 32), norm_input(25, 32))
    for n, p in gan.named("disc."):
        assert np.array_equal(p.data, before[n]), n
        assert p.grad is None


# ---------------------------------------------------------------------------
# encoder pre-training
# ---------------------------------------------------------------------------

def _three_kernel_datasets(n_train=6, n_val=2, size=32):
    master = CounterRng(31)
    def build(count, offset, split):
        pairs = []
        for i in range(count):
            pid = offset + i
            raw = phantom.generate_phantom(master.derive("p", pid).key, size)
            raw.phantom_id = pid
            y = phantom.apply_kernel(raw, phantom.KERNEL_STANDARD,
                                     master.derive("n", pid, 0).key)
            x1 = phantom.apply_kernel(raw, phantom.KERNEL_SMOOTH,
                                      master.derive("n", pid, 1).key)
            x2 = phantom.apply_kernel(raw, phantom.KERNEL_SHARP,
                                      master.derive("n", pid, 2).key)
            pairs.extend([(x1, y), (x2, y)])
        return phantom.Dataset(pairs=pairs, split=split)
    return build(n_train, 0, "train"), build(n_val, 100, "val")


def test_pretrain_chance_level_before_training():
    train, val = _three_kernel_datasets()
    cfg = RunConfig(pretrain_max_epochs=0, pretrain_min_acc=0.0)
    bundle, acc, epochs = networks.pretrain_encoder(train, val, cfg, CounterRng(1))
    assert epochs == 0
    assert 0.0 <= acc <= 1.0      # untrained: close to chance on 3 classes


def test_pretrain_failure_names_accuracy():
    train, val = _three_kernel_datasets()
    cfg = RunConfig(pretrain_max_epochs=1, pretrain_min_acc=1.01)   # unreachable
    with pytest.raises(networks.PretrainError, match="accuracy"):
        networks.pretrain_encoder(train, val, cfg, CounterRng(1))


def test_pretrain_requires_all_tags(small_dataset):
    # small_dataset pairs carry only BR40 + BL64
    cfg = RunConfig()
    with pytest.raises(networks.PretrainError, match="kernel tags"):
        networks.pretrain_encoder(small_dataset, small_dataset, cfg, CounterRng(1))


def test_pretrain_returns_frozen_conv_params():
    train, val = _three_kernel_datasets()
    cfg = RunConfig(pretrain_max_epochs=1, pretrain_min_acc=0.0)
    bundle, _, _ = networks.pretrain_encoder(train, val, cfg, CounterRng(1))
    assert bundle.architecture_id == networks.ENCODER_ARCH
    enc_names = {n for n in bundle.params if n.startswith("enc.")}
    assert bundle.frozen_names == enc_names
    for name in enc_names:
        assert not bundle[name].requires_grad


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def test_bundle_validation_catches_shape_drift(gan):
    bad = networks.ModelBundle(architecture_id=networks.GAN_ARCH_COND)
    for name, p in gan.params.items():
        bad.add(name, p.data, frozen=name in gan.frozen_names)
    bad.params["disc.l4.b"] = T.Tensor(np.zeros(2, dtype=np.float32))
    with pytest.raises(networks.ArchitectureError, match="disc.l4.b"):
        bad.validate()


def test_param_template_rejects_unknown_arch():
    with pytest.raises(networks.ArchitectureError, match="unknown"):
        networks.param_template("alexnet")

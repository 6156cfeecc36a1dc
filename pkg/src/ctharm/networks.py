"""Network architectures: surrogate frozen encoder, hybrid generator,
conditional patch discriminator, and Grad-CAM over the discriminator.

The encoder is a 4-group VGG-style stack (two 3x3 stride-1 convs per
group at widths 32/64/128/256) pre-trained to classify the reconstruction
kernel of an image patch.  Its conv parameters are then frozen inside the
generator, where each group additionally feeds a trainable 3x3 "filter"
conv whose output becomes the U-Net skip tensor; the frozen group output
(not the filter output) is what gets pooled into the next group.

The discriminator is fully convolutional and judges (input, candidate)
pairs patch-wise; its 256-channel activations are the Grad-CAM tap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .phantom import Dataset, KERNEL_STANDARD, KERNEL_SMOOTH, KERNEL_SHARP
from .rng import CounterRng

ENCODER_WIDTHS = (32, 64, 128, 256)
KERNEL_CLASSES = (KERNEL_STANDARD, KERNEL_SHARP, KERNEL_SMOOTH)   # classifier label order
ENCODER_ARCH = "enc1-w32.64.128.256"
GAN_ARCH_COND = "gan1-w32.64.128.256-cond"
GAN_ARCH_UNCOND = "gan1-w32.64.128.256-uncond"
INIT_STD = 0.02
DOWNSCALE_FACTOR = 2 ** len(ENCODER_WIDTHS)     # spatial divisibility requirement


class ArchitectureError(ValueError):
    """Bundle contents disagree with the declared architecture."""


class PretrainError(RuntimeError):
    """Encoder pre-training failed to reach the accuracy target."""


@dataclass
class ModelBundle:
    """Named parameter collection with a frozen subset.

    Frozen parameters (requires_grad False, names in `frozen_names`) carry
    pre-trained texture knowledge and must never change after encoder
    pre-training completes.
    """

    architecture_id: str
    params: dict[str, T.Tensor] = field(default_factory=dict)
    frozen_names: set[str] = field(default_factory=set)

    def add(self, name: str, data: np.ndarray, frozen: bool = False) -> None:
        if name in self.params:
            raise ArchitectureError(f"duplicate parameter {name!r}")
        self.params[name] = T.Tensor(data, requires_grad=not frozen)
        if frozen:
            self.frozen_names.add(name)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def named(self, prefix: str = "") -> list[tuple[str, T.Tensor]]:
        return [(n, p) for n, p in self.params.items() if n.startswith(prefix)]

    def trainable(self, prefix: str = "") -> list[tuple[str, T.Tensor]]:
        return [(n, p) for n, p in self.named(prefix) if p.requires_grad]

    def validate(self) -> None:
        expected = param_template(self.architecture_id)
        got = {n: tuple(p.data.shape) for n, p in self.params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(n for n in set(got) & set(expected) if got[n] != expected[n])
            raise ArchitectureError(
                f"bundle does not match {self.architecture_id}: "
                f"missing={missing} extra={extra} wrong_shape={wrong}")
        if not self.frozen_names <= set(self.params):
            raise ArchitectureError("frozen_names contains unknown parameters")


@dataclass
class Cam:
    """Grad-CAM heat map at input resolution, values in [0, 1]."""

    values: np.ndarray
    source_phantom_id: int

    def __post_init__(self):
        v = self.values
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("CAM values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# parameter templates
# ---------------------------------------------------------------------------

def _encoder_param_shapes() -> dict[str, tuple]:
    shapes = {}
    in_ch = 1
    for g, width in enumerate(ENCODER_WIDTHS, start=1):
        shapes[f"enc.g{g}.c1.w"] = (width, in_ch, 3, 3)
        shapes[f"enc.g{g}.c1.b"] = (width,)
        shapes[f"enc.g{g}.c2.w"] = (width, width, 3, 3)
        shapes[f"enc.g{g}.c2.b"] = (width,)
        in_ch = width
    return shapes


def param_template(architecture_id: str) -> dict[str, tuple]:
    """Expected parameter names and shapes for a known architecture id."""
    if architecture_id == ENCODER_ARCH:
        shapes = _encoder_param_shapes()
        shapes["head.w"] = (len(KERNEL_CLASSES), ENCODER_WIDTHS[-1])
        shapes["head.b"] = (len(KERNEL_CLASSES),)
        return shapes
    if architecture_id in (GAN_ARCH_COND, GAN_ARCH_UNCOND):
        shapes = _encoder_param_shapes()
        top = ENCODER_WIDTHS[-1]
        for g, width in enumerate(ENCODER_WIDTHS, start=1):
            shapes[f"gen.filter{g}.w"] = (width, width, 3, 3)
            shapes[f"gen.filter{g}.b"] = (width,)
        shapes["gen.bottleneck.w"] = (top, top, 3, 3)
        shapes["gen.bottleneck.b"] = (top,)
        dec_in = top
        for s, width in enumerate(reversed(ENCODER_WIDTHS), start=1):
            skip = width
            shapes[f"gen.dec{s}.conv1.w"] = (width, dec_in, 3, 3)
            shapes[f"gen.dec{s}.conv1.b"] = (width,)
            shapes[f"gen.dec{s}.in1.gamma"] = (width,)
            shapes[f"gen.dec{s}.in1.beta"] = (width,)
            shapes[f"gen.dec{s}.conv2.w"] = (width, width + skip, 3, 3)
            shapes[f"gen.dec{s}.conv2.b"] = (width,)
            shapes[f"gen.dec{s}.in2.gamma"] = (width,)
            shapes[f"gen.dec{s}.in2.beta"] = (width,)
            dec_in = width
        shapes["gen.out.w"] = (1, ENCODER_WIDTHS[0], 1, 1)
        shapes["gen.out.b"] = (1,)
        disc_in = 2 if architecture_id == GAN_ARCH_COND else 1
        shapes["disc.l1.w"] = (64, disc_in, 4, 4)
        shapes["disc.l1.b"] = (64,)
        shapes["disc.l2.w"] = (128, 64, 4, 4)
        shapes["disc.l2.b"] = (128,)
        shapes["disc.l2.gamma"] = (128,)
        shapes["disc.l2.beta"] = (128,)
        shapes["disc.l3.w"] = (256, 128, 4, 4)
        shapes["disc.l3.b"] = (256,)
        shapes["disc.l3.gamma"] = (256,)
        shapes["disc.l3.beta"] = (256,)
        shapes["disc.l4.w"] = (1, 256, 4, 4)
        shapes["disc.l4.b"] = (1,)
        return shapes
    raise ArchitectureError(f"unknown architecture id {architecture_id!r}")


def _init_param(shape: tuple, rng: CounterRng, name: str) -> np.ndarray:
    if name.endswith(".b") or name.endswith(".beta"):
        return np.zeros(shape, dtype=np.float32)
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=np.float32)
    return (rng.normals(shape) * INIT_STD).astype(np.float32)


def _init_param_fan_in(shape: tuple, rng: CounterRng, name: str) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape, dtype=np.float32)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = float(np.sqrt(2.0 / fan_in))
    return (rng.normals(shape) * std).astype(np.float32)


def build_encoder_classifier(rng: CounterRng) -> ModelBundle:
    # fan-in-scaled init: a plain sigma the depth of this un-normalized
    # stack would shrink activations to ~1e-5 and training never leaves
    # chance level
    bundle = ModelBundle(architecture_id=ENCODER_ARCH)
    for name, shape in param_template(ENCODER_ARCH).items():
        bundle.add(name, _init_param_fan_in(shape, rng, name))
    return bundle


def build_gan(encoder: ModelBundle, rng: CounterRng, conditional: bool = True) -> ModelBundle:
    """Assemble the GAN bundle around frozen pre-trained encoder convs."""
    arch = GAN_ARCH_COND if conditional else GAN_ARCH_UNCOND
    bundle = ModelBundle(architecture_id=arch)
    enc_shapes = _encoder_param_shapes()
    for name, shape in param_template(arch).items():
        if name in enc_shapes:
            src = encoder.params.get(name)
            if src is None or tuple(src.data.shape) != shape:
                raise ArchitectureError(f"encoder bundle missing or mismatched {name!r}")
            bundle.add(name, src.data.copy(), frozen=True)
        else:
            bundle.add(name, _init_param(shape, rng, name))
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _group(bundle: ModelBundle, g: int, x: T.Tensor) -> T.Tensor:
    h = T.relu(T.conv2d(x, bundle[f"enc.g{g}.c1.w"], bundle[f"enc.g{g}.c1.b"], 1, 1))
    return T.relu(T.conv2d(h, bundle[f"enc.g{g}.c2.w"], bundle[f"enc.g{g}.c2.b"], 1, 1))


def classifier_forward(bundle: ModelBundle, x: T.Tensor) -> T.Tensor:
    """Kernel-tag logits (N, 3) from normalized patches (N, 1, H, W)."""
    h = x
    for g in range(1, len(ENCODER_WIDTHS) + 1):
        h = _group(bundle, g, h)
        if g < len(ENCODER_WIDTHS):
            h = T.maxpool2(h)
    pooled = T.mean_hw(h)
    return T.linear(pooled, bundle["head.w"], bundle["head.b"])


def generator_forward(bundle: ModelBundle, x: T.Tensor,
                      return_skips: bool = False):
    """U-Net style synthesis: frozen encoder taps + trainable decoder.

    Input and output are (N, 1, H, W) in [0, 1]; H and W must be divisible
    by 16.  Each encoder group's frozen output feeds both its trainable
    filter conv (producing the skip tensor) and the pooled main path.
    """
    n, c, h, w = x.data.shape
    if c != 1:
        raise T.ShapeError(f"generator expects 1 input channel, got {c}")
    if h % DOWNSCALE_FACTOR or w % DOWNSCALE_FACTOR:
        raise T.ShapeError(f"generator input spatial dims must be divisible by "
                           f"{DOWNSCALE_FACTOR}, got {h}x{w}")
    skips = []
    feats = x
    for g in range(1, len(ENCODER_WIDTHS) + 1):
        frozen_out = _group(bundle, g, feats)
        skips.append(T.conv2d(frozen_out, bundle[f"gen.filter{g}.w"],
                              bundle[f"gen.filter{g}.b"], 1, 1))
        feats = T.maxpool2(frozen_out)
    d = T.relu(T.conv2d(feats, bundle["gen.bottleneck.w"], bundle["gen.bottleneck.b"], 1, 1))
    for s, skip in enumerate(reversed(skips), start=1):
        d = T.upsample_nearest2(d)
        d = T.conv2d(d, bundle[f"gen.dec{s}.conv1.w"], bundle[f"gen.dec{s}.conv1.b"], 1, 1)
        d = T.relu(T.instance_norm(d, bundle[f"gen.dec{s}.in1.gamma"],
                                   bundle[f"gen.dec{s}.in1.beta"]))
        d = T.concat_channels(d, skip)
        d = T.conv2d(d, bundle[f"gen.dec{s}.conv2.w"], bundle[f"gen.dec{s}.conv2.b"], 1, 1)
        d = T.relu(T.instance_norm(d, bundle[f"gen.dec{s}.in2.gamma"],
                                   bundle[f"gen.dec{s}.in2.beta"]))
    out = T.sigmoid(T.conv2d(d, bundle["gen.out.w"], bundle["gen.out.b"], 1, 0))
    if return_skips:
        return out, skips
    return out


def _disc_input(bundle: ModelBundle, x: T.Tensor, cand: T.Tensor) -> T.Tensor:
    if x.data.shape != cand.data.shape:
        raise T.ShapeError(f"discriminator inputs differ: {x.data.shape} vs {cand.data.shape}")
    if bundle.architecture_id == GAN_ARCH_UNCOND:
        return cand
    return T.concat_channels(x, cand)


def _disc_stage1(bundle: ModelBundle, inp: T.Tensor) -> T.Tensor:
    h = T.leaky_relu(T.conv2d(inp, bundle["disc.l1.w"], bundle["disc.l1.b"], 2, 1))
    h = T.conv2d(h, bundle["disc.l2.w"], bundle["disc.l2.b"], 2, 1)
    h = T.leaky_relu(T.instance_norm(h, bundle["disc.l2.gamma"], bundle["disc.l2.beta"]))
    h = T.conv2d(h, bundle["disc.l3.w"], bundle["disc.l3.b"], 1, 1)
    return T.leaky_relu(T.instance_norm(h, bundle["disc.l3.gamma"], bundle["disc.l3.beta"]))


def _disc_stage2(bundle: ModelBundle, feats: T.Tensor) -> T.Tensor:
    return T.conv2d(feats, bundle["disc.l4.w"], bundle["disc.l4.b"], 1, 1)


def _disc_stage2_const(bundle: ModelBundle, feats: T.Tensor) -> T.Tensor:
    # detached parameter views: gradients flow to `feats` but never into
    # the bundle, so a shared bundle stays read-only here
    w = T.Tensor(bundle["disc.l4.w"].data)
    b = T.Tensor(bundle["disc.l4.b"].data)
    return T.conv2d(feats, w, b, 1, 1)


def discriminator_forward(bundle: ModelBundle, x: T.Tensor, cand: T.Tensor) -> T.Tensor:
    """Patch logit map (N, 1, h', w') judging candidate against input."""
    return _disc_stage2(bundle, _disc_stage1(bundle, _disc_input(bundle, x, cand)))


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def _nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    return arr[np.ix_(ri, ci)]


def grad_cam(bundle: ModelBundle, x_norm: T.Tensor, cand_norm: T.Tensor,
             phantom_id: int = 0) -> Cam:
    """Heat map of where the discriminator sees the candidate as non-standard.

    The score is the mean patch probability of "non-standard",
    s = mean(1 - sigmoid(logit)).  Channel weights are the spatial means of
    ds/dA over the last 256-channel activations A; the weighted sum is
    ReLU'd, nearest-upsampled to input resolution, and max-normalized.
    The discriminator itself is treated as a constant throughout.
    """
    with T.no_grad():
        feats = _disc_stage1(bundle, _disc_input(bundle, x_norm, cand_norm))
    watched = T.Tensor(feats.data, requires_grad=True)
    logits = _disc_stage2_const(bundle, watched)
    score = T.add_scalar(T.scale(T.mean_all(T.sigmoid(logits)), -1.0), 1.0)
    T.backward(score)
    alpha = watched.grad.mean(axis=(2, 3))                    # (N, C)
    weighted = (alpha[:, :, None, None] * watched.data).sum(axis=1)
    raw = np.maximum(weighted[0], 0.0)
    h, w = x_norm.data.shape[2], x_norm.data.shape[3]
    cam = _nearest_resize(raw, h, w)
    peak = cam.max()
    if peak > 0.0:
        cam = cam / peak
    else:
        cam = np.zeros_like(cam)
    return Cam(values=cam.astype(np.float32), source_phantom_id=phantom_id)


# ---------------------------------------------------------------------------
# encoder pre-training
# ---------------------------------------------------------------------------

def _unique_images(ds: Dataset):
    seen = set()
    images = []
    for x, y in ds.pairs:
        for img in (x, y):
            key = (img.phantom_id, img.kernel_tag)
            if key not in seen:
                seen.add(key)
                images.append(img)
    return images


def _full_range_normalize(pixels: np.ndarray, hu_min: int, hu_max: int) -> np.ndarray:
    clipped = np.clip(pixels, hu_min, hu_max).astype(np.float32)
    return (clipped - hu_min) / np.float32(hu_max - hu_min)


def _crop(pixels: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return pixels[top:top + size, left:left + size]


def pretrain_encoder(train: Dataset, val: Dataset, cfg,
                     rng: CounterRng, log_fn=None) -> tuple[ModelBundle, float, int]:
    """Train the kernel-tag classifier; return (bundle, val accuracy, epochs).

    cfg needs: hu_min, hu_max, pretrain_min_acc, pretrain_max_epochs,
    pretrain_lr, pretrain_beta1, pretrain_patch, pretrain_batch_size.
    The returned bundle's conv parameters become the frozen encoder.
    Raises PretrainError when the accuracy target is not met in time.
    """
    train_imgs = _unique_images(train)
    val_imgs = _unique_images(val)
    tags_present = {img.kernel_tag for img in train_imgs}
    if tags_present < set(KERNEL_CLASSES):
        raise PretrainError(f"pre-training needs all kernel tags {KERNEL_CLASSES}, "
                            f"found {sorted(tags_present)}")
    if not val_imgs:
        raise PretrainError("pre-training needs a non-empty validation split")

    label_of = {tag: i for i, tag in enumerate(KERNEL_CLASSES)}
    bundle = build_encoder_classifier(rng.derive("init"))
    opt = T.Adam(bundle.trainable(), lr=cfg.pretrain_lr, beta1=cfg.pretrain_beta1)
    patch = min(cfg.pretrain_patch, min(img.width for img in train_imgs + val_imgs))
    patch -= patch % 8      # three pools inside the classifier

    def val_accuracy() -> float:
        correct = 0
        with T.no_grad():
            for start in range(0, len(val_imgs), cfg.pretrain_batch_size):
                chunk = val_imgs[start:start + cfg.pretrain_batch_size]
                batch = []
                for img in chunk:
                    top = (img.height - patch) // 2
                    left = (img.width - patch) // 2
                    batch.append(_full_range_normalize(
                        _crop(img.pixels, top, left, patch), cfg.hu_min, cfg.hu_max))
                logits = classifier_forward(bundle, T.Tensor(np.stack(batch)[:, None]))
                preds = logits.data.argmax(axis=1)
                correct += int(sum(preds[i] == label_of[img.kernel_tag]
                                   for i, img in enumerate(chunk)))
        return correct / len(val_imgs)

    acc = 0.0
    epochs_run = 0
    for epoch in range(cfg.pretrain_max_epochs):
        order = list(range(len(train_imgs)))
        rng.derive("shuffle", epoch).shuffle(order)
        crop_rng = rng.derive("crop", epoch)
        for start in range(0, len(order), cfg.pretrain_batch_size):
            idxs = order[start:start + cfg.pretrain_batch_size]
            batch, labels = [], []
            for i in idxs:
                img = train_imgs[i]
                top = crop_rng.randint(img.height - patch + 1)
                left = crop_rng.randint(img.width - patch + 1)
                batch.append(_full_range_normalize(
                    _crop(img.pixels, top, left, patch), cfg.hu_min, cfg.hu_max))
                labels.append(label_of[img.kernel_tag])
            opt.zero_grad()
            logits = classifier_forward(bundle, T.Tensor(np.stack(batch)[:, None]))
            loss = T.softmax_cross_entropy(logits, np.asarray(labels))
            T.backward(loss)
            opt.step()
        epochs_run = epoch + 1
        acc = val_accuracy()
        if log_fn is not None:
            log_fn(epochs_run, acc)
        if acc >= cfg.pretrain_min_acc:
            break
    if acc < cfg.pretrain_min_acc:
        raise PretrainError(f"encoder pre-training reached val accuracy {acc:.3f} "
                            f"< required {cfg.pretrain_min_acc:.3f} "
                            f"after {epochs_run} epochs")

    frozen = ModelBundle(architecture_id=ENCODER_ARCH)
    for name, shape in param_template(ENCODER_ARCH).items():
        is_conv = name.startswith("enc.")
        frozen.add(name, bundle[name].data.copy(), frozen=is_conv)
    return frozen, acc, epochs_run

"""Window-curriculum adversarial training.

Training proceeds over HU windows: images are clipped to the current
window and min-max normalized into [0, 1] before every batch.  The window
schedule has two regimes:

* fixed growing — start from a narrow low-HU window and extend the upper
  bound by a fixed step whenever the model's validation accuracy clears a
  threshold or the stage hits its epoch cap, until the full HU range is
  covered;
* dynamic selection — after each epoch, run Grad-CAM over discriminator
  judgements of synthesized images for random training subsets, collect
  the source-image HU values under CAM hot-spots (per-image values seen
  only once are discarded as noise), and take the min/max of the merged
  list as the next window.

"Model accuracy" for stage advancement is the generator fooling rate: the
fraction of discriminator patch probabilities above 0.5 on synthesized
validation images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .networks import (ModelBundle, build_gan, discriminator_forward,
                       generator_forward, grad_cam)
from .phantom import CtImage, Dataset, KERNEL_SYNTHETIC
from .rng import CounterRng


class WindowError(ValueError):
    """Invalid HU window or window operation."""


class TrainingError(RuntimeError):
    """Training aborted (diverged or misconfigured)."""


@dataclass(frozen=True)
class HuWindow:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo >= self.hi:
            raise WindowError(f"window needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def span(self) -> int:
        return self.hi - self.lo


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = 100.0
    batch_size: int = 4
    th_acc: float = 0.8
    th_eta: int = 3
    th_fail: float = 0.5
    window_start: tuple[int, int] = (-1024, -769)
    window_step: int = 256
    hu_min: int = -1024
    hu_max: int = 1000
    max_epochs: int = 30
    subset_size: int = 16
    subset_repeats: int = 4
    mode: str = "full"
    seed: int = 0
    conditional_disc: bool = True

    def __post_init__(self):
        if not 0.0 <= self.th_fail <= 1.0:
            raise WindowError(f"th_fail must be in [0, 1], got {self.th_fail}")
        if self.mode not in ("fixed", "dynamic", "full"):
            raise WindowError(f"mode must be fixed|dynamic|full, got {self.mode!r}")
        if self.hu_min >= self.hu_max:
            raise WindowError(f"hu_min must be < hu_max, got {self.hu_min}, {self.hu_max}")
        lo, hi = self.window_start
        if not (self.hu_min <= lo < hi <= self.hu_max):
            raise WindowError(f"window_start {self.window_start} outside "
                              f"[{self.hu_min}, {self.hu_max}]")
        if self.window_step <= 0 or self.max_epochs <= 0 or self.batch_size <= 0:
            raise WindowError("window_step, max_epochs and batch_size must be positive")

    def full_window(self) -> HuWindow:
        return HuWindow(self.hu_min, self.hu_max)


PHASE_FIXED = "fixed_growing"
PHASE_DYNAMIC = "dynamic_selection"
PHASE_DONE = "done"


class _PhaseComplete:
    def __repr__(self):
        return "PHASE_COMPLETE"


PHASE_COMPLETE = _PhaseComplete()


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    window: HuWindow
    d_loss: float
    g_loss: float
    g_adv: float
    g_l1: float
    val_acc: float


@dataclass
class TrainState:
    epoch: int = 0
    phase: str = PHASE_FIXED
    window: HuWindow = None
    epoch_in_stage: int = 0
    records: list[EpochRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def clip_normalize_pixels(pixels: np.ndarray, w: HuWindow) -> np.ndarray:
    """Clamp HU to the window and min-max map into [0, 1] (float32)."""
    clipped = np.clip(pixels, w.lo, w.hi).astype(np.float32)
    return (clipped - np.float32(w.lo)) / np.float32(w.span)


def clip_normalize(img: CtImage, w: HuWindow) -> T.Tensor:
    """Window-normalize one image into a (1, 1, H, W) tensor."""
    return T.Tensor(clip_normalize_pixels(img.pixels, w)[None, None])


def denormalize(t: T.Tensor, w: HuWindow, kernel_tag: str = KERNEL_SYNTHETIC,
                phantom_id: int = 0, seed: int = 0) -> CtImage:
    """Invert clip_normalize: [0, 1] values back to integer HU in the window."""
    values = np.asarray(t.data, dtype=np.float64).reshape(t.data.shape[-2:])
    if values.min() < -1e-6 or values.max() > 1.0 + 1e-6:
        raise WindowError(f"denormalize input outside [0, 1]: "
                          f"min {values.min():.8f}, max {values.max():.8f}")
    hu = np.rint(w.lo + np.clip(values, 0.0, 1.0) * w.span).astype(np.int32)
    return CtImage(width=hu.shape[1], height=hu.shape[0], pixels=hu,
                   kernel_tag=kernel_tag, phantom_id=phantom_id, seed=seed)


def next_fixed_window(current: HuWindow, val_acc: float, epoch_in_stage: int,
                      cfg: TrainConfig):
    """Advance the fixed-growing schedule by one decision.

    Returns the grown window, the unchanged window (stage continues), or
    PHASE_COMPLETE once the upper bound already sits at hu_max.
    """
    if val_acc > cfg.th_acc or epoch_in_stage >= cfg.th_eta:
        if current.hi >= cfg.hu_max:
            return PHASE_COMPLETE
        return HuWindow(current.lo, min(current.hi + cfg.window_step, cfg.hu_max))
    return current


def fixed_window_schedule(cfg: TrainConfig) -> list[HuWindow]:
    """All windows the fixed-growing phase can visit, in order."""
    windows = [HuWindow(*cfg.window_start)]
    while windows[-1].hi < cfg.hu_max:
        windows.append(HuWindow(windows[-1].lo,
                                min(windows[-1].hi + cfg.window_step, cfg.hu_max)))
    return windows


def fooling_rate(logit_maps: list[np.ndarray]) -> float:
    """Fraction of patch logits with sigmoid(logit) > 0.5, i.e. logit > 0."""
    total = sum(m.size for m in logit_maps)
    if total == 0:
        raise TrainingError("fooling_rate needs at least one patch logit")
    hits = sum(int((m > 0.0).sum()) for m in logit_maps)
    return hits / total


def validation_accuracy(bundle: ModelBundle, val: Dataset, w: HuWindow,
                        cfg: TrainConfig) -> float:
    """Generator fooling rate on the window-normalized validation set."""
    if not val.pairs:
        raise TrainingError("validation_accuracy needs a non-empty validation set")
    maps = []
    with T.no_grad():
        for start in range(0, len(val.pairs), cfg.batch_size):
            chunk = val.pairs[start:start + cfg.batch_size]
            x = T.Tensor(np.stack([clip_normalize_pixels(p[0].pixels, w) for p in chunk])[:, None])
            fake = generator_forward(bundle, x)
            logits = discriminator_forward(bundle, x, fake)
            maps.append(logits.data.copy())
    return fooling_rate(maps)


# ---------------------------------------------------------------------------
# dynamic selection
# ---------------------------------------------------------------------------

def merge_hot_pixels(hu_images: list[np.ndarray], cams: list[np.ndarray],
                     th_fail: float) -> tuple[int, int] | None:
    """Window bounds from CAM hot-spots, or None when nothing survives.

    For each image, HU values at CAM > th_fail form a list; values whose
    per-image frequency is 1 are discarded as noise.  Surviving lists are
    merged and reduced to (min, max).  None signals no usable update
    (empty merge or a single repeated value).
    """
    merged_min = None
    merged_max = None
    for hu, cam in zip(hu_images, cams):
        hot = np.asarray(hu)[np.asarray(cam) > th_fail]
        if hot.size == 0:
            continue
        vals, counts = np.unique(hot, return_counts=True)
        vals = vals[counts >= 2]
        if vals.size == 0:
            continue
        lo, hi = int(vals.min()), int(vals.max())
        merged_min = lo if merged_min is None else min(merged_min, lo)
        merged_max = hi if merged_max is None else max(merged_max, hi)
    if merged_min is None or merged_min == merged_max:
        return None
    return merged_min, merged_max


def dynamic_window(bundle: ModelBundle, train: Dataset, current: HuWindow,
                   cfg: TrainConfig, rng: CounterRng) -> HuWindow | None:
    """One dynamic-selection pass; None means keep the previous window.

    Synthesized images and CAMs are computed in the current window's
    normalized space; hot-spot HU values are read from the original
    non-standard source images.
    """
    if not train.pairs:
        raise TrainingError("dynamic_window needs a non-empty training set")
    hu_images, cams = [], []
    for rep in range(cfg.subset_repeats):
        k = min(cfg.subset_size, len(train.pairs))
        picked = rng.derive("subset", rep).sample_indices(len(train.pairs), k)
        for idx in picked:
            x_img = train.pairs[idx][0]
            x = clip_normalize(x_img, current)
            with T.no_grad():
                fake = generator_forward(bundle, x)
            cam = grad_cam(bundle, x, T.Tensor(fake.data), phantom_id=x_img.phantom_id)
            hu_images.append(x_img.pixels)
            cams.append(cam.values)
    bounds = merge_hot_pixels(hu_images, cams, cfg.th_fail)
    if bounds is None:
        return None
    lo = max(bounds[0], cfg.hu_min)
    hi = min(bounds[1], cfg.hu_max)
    if lo >= hi:
        return None
    return HuWindow(lo, hi)


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    d_loss: float
    g_loss: float
    g_adv: float
    g_l1: float
    n_batches: int


def _set_requires_grad(bundle: ModelBundle, prefix: str, flag: bool) -> None:
    for name, p in bundle.named(prefix):
        if name in bundle.frozen_names:
            continue
        p.requires_grad = flag


def train_epoch(bundle: ModelBundle, opt_g: T.Adam, opt_d: T.Adam, train: Dataset,
                w: HuWindow, cfg: TrainConfig, rng: CounterRng, epoch: int) -> EpochStats:
    """One pass over shuffled mini-batches: a D step then a G step per batch."""
    if not train.pairs:
        raise TrainingError("train_epoch needs a non-empty training set")
    order = list(range(len(train.pairs)))
    rng.derive("shuffle", epoch).shuffle(order)
    d_sum = g_sum = adv_sum = l1_sum = 0.0
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idxs = order[start:start + cfg.batch_size]
        batch = [train.pairs[i] for i in idxs]
        try:
            x = T.Tensor(np.stack([clip_normalize_pixels(p[0].pixels, w) for p in batch])[:, None])
            y = T.Tensor(np.stack([clip_normalize_pixels(p[1].pixels, w) for p in batch])[:, None])

            fake = generator_forward(bundle, x)

            # discriminator step: real pairs up, synthesized pairs down
            opt_d.zero_grad()
            fake_const = T.Tensor(fake.data)
            logits_real = discriminator_forward(bundle, x, y)
            logits_fake = discriminator_forward(bundle, x, fake_const)
            d_loss = T.add(
                T.bce_with_logits(logits_real, T.Tensor(np.ones_like(logits_real.data))),
                T.bce_with_logits(logits_fake, T.Tensor(np.zeros_like(logits_fake.data))))
            T.backward(d_loss)
            opt_d.step()

            # generator step against the updated, frozen discriminator
            _set_requires_grad(bundle, "disc.", False)
            opt_g.zero_grad()
            logits_adv = discriminator_forward(bundle, x, fake)
            g_adv = T.bce_with_logits(logits_adv, T.Tensor(np.ones_like(logits_adv.data)))
            g_l1 = T.l1_mean(fake, y)
            g_loss = T.add(g_adv, T.scale(g_l1, cfg.lambda_l1))
            T.backward(g_loss)
            opt_g.step()
            _set_requires_grad(bundle, "disc.", True)
        except T.NonFiniteError as exc:
            raise TrainingError(f"non-finite loss in epoch {epoch}, "
                                f"batch {n_batches} (pairs {idxs}): {exc}") from exc
        d_sum += d_loss.item()
        g_sum += g_loss.item()
        adv_sum += g_adv.item()
        l1_sum += g_l1.item()
        n_batches += 1
    return EpochStats(d_sum / n_batches, g_sum / n_batches,
                      adv_sum / n_batches, l1_sum / n_batches, n_batches)


def train(cfg: TrainConfig, datasets: dict[str, Dataset],
          encoder: ModelBundle, log_fn=None) -> tuple[ModelBundle, TrainState]:
    """Full training run in the configured mode.

    fixed   — grow the window to full range, keep training at full range;
    dynamic — start at the full window, recompute it from CAMs after
              every epoch;
    full    — fixed growing to completion, then dynamic selection.
    """
    rng = CounterRng(cfg.seed)
    bundle = build_gan(encoder, rng.derive("init"), conditional=cfg.conditional_disc)
    opt_g = T.Adam(bundle.trainable("gen."), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = T.Adam(bundle.trainable("disc."), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    state = TrainState()
    if cfg.mode == "dynamic":
        state.phase = PHASE_DYNAMIC
        state.window = cfg.full_window()
    else:
        state.phase = PHASE_FIXED
        state.window = HuWindow(*cfg.window_start)
    growing = cfg.mode in ("fixed", "full")

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        state.epoch_in_stage += 1
        stats = train_epoch(bundle, opt_g, opt_d, datasets["train"],
                            state.window, cfg, rng.derive("epoch", epoch), epoch)
        val_acc = validation_accuracy(bundle, datasets["val"], state.window, cfg)
        record = EpochRecord(epoch=epoch, phase=state.phase, window=state.window,
                             d_loss=stats.d_loss, g_loss=stats.g_loss,
                             g_adv=stats.g_adv, g_l1=stats.g_l1, val_acc=val_acc)
        state.records.append(record)
        if log_fn is not None:
            log_fn(record)

        if epoch == cfg.max_epochs:
            break
        if state.phase == PHASE_FIXED and growing:
            step = next_fixed_window(state.window, val_acc, state.epoch_in_stage, cfg)
            if step is PHASE_COMPLETE:
                if cfg.mode == "full":
                    state.phase = PHASE_DYNAMIC
                growing = False
                state.epoch_in_stage = 0
            elif step != state.window:
                state.window = step
                state.epoch_in_stage = 0
        elif state.phase == PHASE_DYNAMIC:
            update = dynamic_window(bundle, datasets["train"], state.window,
                                    cfg, rng.derive("dynsel", epoch))
            if update is not None:
                state.window = update

    state.phase = PHASE_DONE
    return bundle, state


def harmonize(bundle: ModelBundle, img: CtImage, cfg: TrainConfig) -> CtImage:
    """Synthesize the standard-kernel version of one image (full HU window)."""
    w = cfg.full_window()
    x = clip_normalize(img, w)
    with T.no_grad():
        out = generator_forward(bundle, x)
    return denormalize(out, w, kernel_tag=KERNEL_SYNTHETIC,
                       phantom_id=img.phantom_id, seed=img.seed)

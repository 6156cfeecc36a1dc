"""Flat key=value run configuration.

One line per setting, `#` starts a comment, unknown keys are rejected
with the offending line number.  Every field has a usable default, so an
empty (or absent) config file is a valid run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .phantom import KernelSim
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data generation
    image_size: int = 64
    phantom_count: int = 30
    nonstandard: str = "both"           # br40 | bl57 | both
    # kernel simulation
    bl64_blur_sigma: float = 0.8
    br40_blur_sigma: float = 1.8
    bl57_unsharp_amount: float = 0.8
    bl57_unsharp_sigma: float = 1.2
    bl64_noise_sigma: float = 5.0
    br40_noise_sigma: float = 5.0
    bl57_noise_sigma: float = 8.0
    # dataset assembly
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    pair_kernel: str = "br40"           # which non-standard kernel forms GAN pairs
    # optimization
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = 100.0
    batch_size: int = 4
    # window schedule
    th_acc: float = 0.8
    th_eta: int = 3
    th_fail: float = 0.5
    window_start_lo: int = -1024
    window_start_hi: int = -769
    window_step: int = 256
    hu_min: int = -1024
    hu_max: int = 1000
    max_epochs: int = 30
    subset_size: int = 16
    subset_repeats: int = 4
    mode: str = "full"
    seed: int = 0
    conditional_disc: bool = True
    # encoder pre-training
    pretrain_min_acc: float = 0.90
    pretrain_max_epochs: int = 20
    pretrain_lr: float = 1e-3
    pretrain_beta1: float = 0.9
    # 48px patches: smaller crops too often land in flat air, where the
    # smooth and standard kernels are statistically identical
    pretrain_patch: int = 48
    pretrain_batch_size: int = 16
    # default locations (CLI flags override)
    data_dir: str = "data"
    out_dir: str = "out"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            lambda_l1=self.lambda_l1, batch_size=self.batch_size,
            th_acc=self.th_acc, th_eta=self.th_eta, th_fail=self.th_fail,
            window_start=(self.window_start_lo, self.window_start_hi),
            window_step=self.window_step, hu_min=self.hu_min, hu_max=self.hu_max,
            max_epochs=self.max_epochs, subset_size=self.subset_size,
            subset_repeats=self.subset_repeats, mode=self.mode, seed=self.seed,
            conditional_disc=self.conditional_disc,
        )

    def kernel_sim(self) -> KernelSim:
        return KernelSim(
            bl64_blur_sigma=self.bl64_blur_sigma,
            br40_blur_sigma=self.br40_blur_sigma,
            bl57_unsharp_amount=self.bl57_unsharp_amount,
            bl57_unsharp_sigma=self.bl57_unsharp_sigma,
            bl64_noise_sigma=self.bl64_noise_sigma,
            br40_noise_sigma=self.br40_noise_sigma,
            bl57_noise_sigma=self.bl57_noise_sigma,
        )

    def split_ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, lineno: int):
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {raw!r} as {ftype} "
                          f"for key {key!r}") from None


def parse_config(path: str) -> RunConfig:
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _coerce(key, raw, lineno))
    return cfg

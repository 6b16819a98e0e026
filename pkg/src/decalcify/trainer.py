"""Patch dataset assembly and the training loop.

Examples pair a center-masked normalized patch (input) with the intact
patch (target).  Flip augmentation is enumerated — every selected patch
appears once per orientation combination — so an epoch is a fixed,
seed-shuffled sequence and training is bit-deterministic per
(seed, config, dataset).
"""

from dataclasses import dataclass, field
import hashlib

import numpy as np

from .ctvol import (NORM_ZERO_HU, PatchSpec, RegionOfInterest, Volume,
                    apply_inpainting_mask, extract_patch, flip_augment,
                    mask_bool, mask_slices, normalize_hu, patch_grid)
from .network import DESK_CONFIG, KINDS, NetConfig, Model, build_network, forward
from .tensor import Adam, Tensor, mse_loss

FLIP_COMBOS = ("", "x", "y", "z", "xy", "xz", "yz", "xyz")
LOSS_REGIONS = ("full", "mask_only")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 3
    steps: int = 500
    seed: int = 0
    loss_region: str = "full"
    mask_size: int = 16
    augment_flips: bool = True
    arch: str = "dense_unet"
    net_config: NetConfig = DESK_CONFIG

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss_region not in LOSS_REGIONS:
            raise ValueError(f"loss_region must be one of {LOSS_REGIONS}")
        if self.arch not in KINDS:
            raise ValueError(f"arch must be one of {KINDS}")


@dataclass
class PatchDataset:
    volumes: list[Volume]
    entries: list[tuple[int, PatchSpec, str]]  # (volume index, spec, flip axes)
    patch_size: int
    mask_size: int
    # optional calcium-free twin per volume: when a mask covers calcium,
    # the target inside the mask is the clean anatomy, so the network
    # learns to paint calcium-free content (the point of the whole method)
    clean_targets: list[Volume | None] | None = None

    def __len__(self):
        return len(self.entries)

    def example(self, i: int, fill: float = NORM_ZERO_HU):
        vol_idx, spec, flips = self.entries[i]
        clean = self.clean_targets[vol_idx] if self.clean_targets else None
        return make_example(self.volumes[vol_idx], spec, fill=fill,
                            flips=flips, clean=clean)


def volume_hash(vol: Volume) -> str:
    h = hashlib.sha1()
    h.update(np.asarray(vol.dims, dtype=np.int64).tobytes())
    h.update(np.float64(vol.spacing_mm).tobytes())
    h.update(np.ascontiguousarray(vol.data).tobytes())
    return h.hexdigest()


def build_dataset(volumes: list[Volume], roi: RegionOfInterest,
                  patch_size: int = 32, stride: int = 16,
                  include_flips: bool = True, mask_size: int = 16,
                  clean_targets: list[Volume | None] | None = None
                  ) -> PatchDataset:
    """Cartesian product of volumes x grid origins (x 8 flip variants)."""
    if clean_targets is not None and len(clean_targets) != len(volumes):
        raise ValueError("clean_targets must align with volumes")
    entries = []
    flips = FLIP_COMBOS if include_flips else ("",)
    for vi, vol in enumerate(volumes):
        origin = roi.origin_in(vol.dims)
        for go in patch_grid(roi.dims, patch_size, stride):
            spec = PatchSpec(tuple(o + g for o, g in zip(origin, go)),
                             size=patch_size, mask_size=mask_size)
            spec.check_bounds(vol.dims)
            for fl in flips:
                entries.append((vi, spec, fl))
    return PatchDataset(volumes, entries, patch_size, mask_size,
                        clean_targets=clean_targets)


def make_example(vol: Volume, spec: PatchSpec, fill: float = NORM_ZERO_HU,
                 flips: str = "", clean: Volume | None = None):
    """(masked input, target), both normalized float32 cubes.

    The target equals the patch outside the mask.  Inside the mask it is
    the patch itself, or the calcium-free twin when one is given: a mask
    that covers calcium must teach calcium-free restoration, not how to
    repaint plaque."""
    target = normalize_hu(extract_patch(vol, spec))
    if clean is not None:
        msl = mask_slices(spec.size, spec.mask_size)
        target[msl] = normalize_hu(extract_patch(clean, spec))[msl]
    if flips:
        target = flip_augment(target, flips)
    masked = apply_inpainting_mask(target, spec.mask_size, fill_value=fill)
    return masked, target


@dataclass
class TrainResult:
    model: Model
    config: TrainingConfig
    loss_history: list[float]
    train_volume_hashes: set[str] = field(default_factory=set)


def train(config: TrainingConfig, dataset: PatchDataset,
          fill: float = NORM_ZERO_HU) -> TrainResult:
    """Seed-shuffled minibatch MSE training with Adam.

    Loss over the full patch or the centered mask box only, per
    ``config.loss_region``.  A non-finite loss aborts with the step index
    and learning rate: small nets at these rates should never blow up, so
    a NaN is a bug signal, not something to clamp over.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.mask_size != config.mask_size:
        raise ValueError(f"dataset mask {dataset.mask_size} != "
                         f"config mask {config.mask_size}")
    spec, params = build_network(config.arch, config.net_config,
                                 seed=config.seed)
    opt = Adam(params.tensors, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    s = dataset.patch_size
    region_mask = None
    if config.loss_region == "mask_only":
        region_mask = mask_bool(s, config.mask_size).reshape(1, 1, s, s, s)

    order = rng.permutation(len(dataset))
    cursor = 0
    history = []
    for step in range(config.steps):
        inputs = np.empty((config.batch_size, 1, s, s, s), dtype=np.float32)
        targets = np.empty_like(inputs)
        for j in range(config.batch_size):
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            masked, target = dataset.example(int(order[cursor]), fill=fill)
            inputs[j, 0] = masked
            targets[j, 0] = target
            cursor += 1
        params.zero_grad()
        out = forward(spec, params, Tensor(inputs), mode="train")
        loss = mse_loss(out, targets, mask=region_mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (lr {config.lr})")
        loss.backward()
        opt.step()
        history.append(value)
    hashes = {volume_hash(v) for v in dataset.volumes}
    return TrainResult(Model(spec, params), config, history, hashes)


@dataclass
class AblationRow:
    loss_region: str
    mask_size: int
    eval_mse_hu2: float


def ablate(config_grid: list[TrainingConfig], datasets: dict[int, PatchDataset],
           eval_patches: dict[int, list], train_fill: float = NORM_ZERO_HU
           ) -> list[AblationRow]:
    """Train one model per grid cell and report held-out masked-region MSE.

    ``datasets`` and ``eval_patches`` are keyed by mask size, since the
    mask-size ablation changes the example geometry itself.
    """
    from .eval import eval_restoration
    rows = []
    for cfg in config_grid:
        result = train(cfg, datasets[cfg.mask_size], fill=train_fill)
        res = eval_restoration(result.model, eval_patches[cfg.mask_size],
                               region="mask_only",
                               train_volume_hashes=result.train_volume_hashes)
        rows.append(AblationRow(cfg.loss_region, cfg.mask_size, res.mean))
    return rows


def write_loss_csv(history: list[float], path) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(history):
            f.write(f"{i},{v!r}\n")


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w") as f:
        f.write("loss_region,mask_size,eval_mse_hu2\n")
        for r in rows:
            f.write(f"{r.loss_region},{r.mask_size},{r.eval_mse_hu2!r}\n")

"""Inference-time calcium erasure: detect, plan a sliding-window mask
cover, inpaint each mask sequentially, repeat until clean.

Planning is a greedy cover in volume scan order (x fastest): each step
places the inpainting mask so its low corner sits on the lowest-index
uncovered calcified voxel (clamped to bounds), which erases a full mask
length of a lesion per step while the surrounding patch supplies
context.  Execution is strictly sequential — every step reads the volume
as modified by the previous steps — and after a full plan the volume is
re-detected and re-planned, since an imperfect model can leave or even
create bright voxels.  Running out of iterations is reported, never
papered over.
"""

from dataclasses import dataclass, field

import numpy as np

from .ctvol import (NORM_ZERO_HU, PatchSpec, RegionOfInterest, Volume,
                    apply_inpainting_mask, denormalize_hu, extract_patch,
                    normalize_hu, write_patch)
from .network import Model

DETECTION_THRESHOLD_HU = 700


class RemovalPlanningError(RuntimeError):
    pass


@dataclass
class RemovalConfig:
    threshold_hu: int = DETECTION_THRESHOLD_HU
    patch_size: int = 32
    mask_size: int = 16
    max_iterations: int = 50
    fill: float = NORM_ZERO_HU


@dataclass
class RemovalPlan:
    specs: list[PatchSpec]
    threshold_hu: int
    patch_size: int
    mask_size: int
    max_iterations: int = 50


@dataclass
class RemovalStep:
    step: int
    origin: tuple[int, int, int]
    pre_count: int
    post_count: int


@dataclass
class RemovalReport:
    iterations: int
    initial_count: int
    residual_count: int
    converged: bool
    steps: list[RemovalStep] = field(default_factory=list)

    @property
    def removed_count(self) -> int:
        return self.initial_count - self.residual_count


def detect_calcium(vol: Volume, roi: RegionOfInterest | None = None,
                   threshold: int = DETECTION_THRESHOLD_HU) -> np.ndarray:
    """Voxel coordinates with HU strictly above threshold, as an (K, 3)
    array sorted by volume scan order (x fastest)."""
    hot = vol.data > threshold
    lo = (0, 0, 0)
    if roi is not None:
        lo = roi.origin_in(vol.dims)
        sub = tuple(slice(o, o + d) for o, d in zip(lo, roi.dims))
        hot = hot[sub]
    # argwhere on the transposed mask yields rows sorted (z, y, x)-major,
    # which is ascending linear index x + nx*(y + ny*z)
    coords = np.argwhere(hot.transpose(2, 1, 0))[:, ::-1]
    return coords + np.asarray(lo, dtype=coords.dtype)


def plan_removal(vol: Volume, detections: np.ndarray, patch_size: int = 32,
                 mask_size: int = 16, threshold: int = DETECTION_THRESHOLD_HU,
                 max_iterations: int = 50) -> RemovalPlan:
    """Greedy scan-order cover of the detections by inpainting masks."""
    if len(detections) == 0:
        raise ValueError("plan_removal needs a non-empty detection set")
    dims = np.asarray(vol.dims)
    if (patch_size > dims).any():
        raise RemovalPlanningError(f"patch {patch_size} exceeds volume {vol.dims}")
    off = (patch_size - mask_size) // 2
    covered = np.zeros(len(detections), dtype=bool)
    specs = []
    while not covered.all() and len(specs) < max_iterations:
        remaining = detections[~covered]
        first = int(np.flatnonzero(~covered)[0])  # lowest scan-order index
        target = detections[first]
        # mask low corner on the target voxel, but never extending past the
        # last remaining detection per axis: the overhang of the final step
        # along a lesion then lands on already-cleaned ground instead of
        # repainting healthy vessel beyond the lesion
        mask_start = np.minimum(target, remaining.max(axis=0) - mask_size + 1)
        origin = np.clip(mask_start - off, 0, dims - patch_size)
        spec = PatchSpec(tuple(int(o) for o in origin),
                         size=patch_size, mask_size=mask_size)
        mlo = origin + off
        mhi = mlo + mask_size
        inside = ((detections >= mlo) & (detections < mhi)).all(axis=1)
        if not inside[first]:
            raise RemovalPlanningError(
                f"voxel {tuple(target)} not coverable by an in-bounds mask")
        covered |= inside
        specs.append(spec)
    return RemovalPlan(specs, threshold, patch_size, mask_size, max_iterations)


def _inpaint_step(vol: Volume, spec: PatchSpec, model: Model,
                  fill: float) -> None:
    patch = normalize_hu(extract_patch(vol, spec))
    masked = apply_inpainting_mask(patch, spec.mask_size, fill_value=fill)
    out = model.forward(masked.reshape((1, 1) + masked.shape), mode="eval")
    restored = denormalize_hu(out.data[0, 0])
    restored = np.clip(np.rint(restored), -1024, 3071).astype(np.int16)
    write_patch(vol, spec, restored, mask_only=True)


def execute_removal(vol: Volume, plan: RemovalPlan, model: Model,
                    fill: float = NORM_ZERO_HU) -> tuple[Volume, RemovalReport]:
    """Run the plan on a copy of the volume, re-detecting and re-planning
    between rounds until clean or out of iterations."""
    work = vol.copy()
    initial = len(detect_calcium(vol, threshold=plan.threshold_hu))
    steps = []
    rounds = 0
    step_no = 0
    while True:
        for spec in plan.specs:
            pre = len(detect_calcium(work, threshold=plan.threshold_hu))
            _inpaint_step(work, spec, model, fill)
            post = len(detect_calcium(work, threshold=plan.threshold_hu))
            steps.append(RemovalStep(step_no, spec.origin, pre, post))
            step_no += 1
        rounds += 1
        remaining = detect_calcium(work, threshold=plan.threshold_hu)
        if len(remaining) == 0:
            return work, RemovalReport(rounds, initial, 0, True, steps)
        if rounds >= plan.max_iterations:
            return work, RemovalReport(rounds, initial, len(remaining),
                                       False, steps)
        plan = plan_removal(work, remaining, plan.patch_size, plan.mask_size,
                            plan.threshold_hu, plan.max_iterations)


def remove_calcium(vol: Volume, model: Model,
                   config: RemovalConfig | None = None
                   ) -> tuple[Volume, RemovalReport]:
    """Detect -> plan -> execute until the detection set is empty."""
    config = config or RemovalConfig()
    detections = detect_calcium(vol, threshold=config.threshold_hu)
    if len(detections) == 0:
        return vol.copy(), RemovalReport(0, 0, 0, True, [])
    plan = plan_removal(vol, detections, config.patch_size, config.mask_size,
                        config.threshold_hu, config.max_iterations)
    return execute_removal(vol, plan, model, fill=config.fill)


def write_removal_log(report: RemovalReport, path) -> None:
    """JSON-lines log: one record per inpainting step plus a summary."""
    import json
    with open(path, "w") as f:
        for s in report.steps:
            f.write(json.dumps({"step": s.step, "origin": list(s.origin),
                                "pre_count": s.pre_count,
                                "post_count": s.post_count}) + "\n")
        f.write(json.dumps({"iterations": report.iterations,
                            "initial_count": report.initial_count,
                            "residual_count": report.residual_count,
                            "converged": report.converged}) + "\n")

"""Synthetic CT phantoms: tubular contrast-filled vessels with implanted
calcified plaques and exact ground truth.

Geometry is analytic: a polyline centerline with a per-sample lumen
radius, a wall band around the lumen, and plaque bands that occupy an
angular range of quadrants over a centerline interval while narrowing
the lumen there.  Plaque intensity is smeared by a small Gaussian
point-spread (sigma 0.7 voxels) before noise, so bright plaques bloom
into the neighboring lumen the way dense calcium does on real CT; the
plaque voxel label set is defined as exactly the voxels of the noiseless
volume above the 700 HU detection threshold, which keeps detection,
labels and the bloom physically consistent.

True stenosis is computed from the analytic radii, never from voxels:
(1 - (r_min / r_ref)^2) * 100 over the plaque interval.
"""

from dataclasses import dataclass, field

import numpy as np

from .ctvol import Volume, save_volume, load_volume

CALCIUM_THRESHOLD_HU = 700

LABEL_BACKGROUND = 0
LABEL_WALL = 1
LABEL_LUMEN = 2
LABEL_PLAQUE = 3

BLOOM_SIGMA_VOX = 0.7


class PhantomError(ValueError):
    pass


@dataclass
class VesselModel:
    centerline: np.ndarray          # (M, 3) voxel coordinates
    radius_profile: np.ndarray      # (M,) lumen radius in voxels
    contrast_hu: float = 350.0
    wall_hu: float = 50.0
    background_hu: float = 0.0
    wall_thickness_vox: float = 2.0

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        self.radius_profile = np.asarray(self.radius_profile, dtype=np.float64)
        if self.centerline.ndim != 2 or self.centerline.shape[1] != 3 \
                or self.centerline.shape[0] < 2:
            raise PhantomError(f"centerline needs >= 2 points,"
                               f" got {self.centerline.shape}")
        if self.radius_profile.shape[0] != self.centerline.shape[0]:
            raise PhantomError("radius profile length != centerline length")
        if (self.radius_profile <= 0).any():
            raise PhantomError("radii must be positive")


@dataclass
class PlaqueModel:
    """Calcified core on a narrowed lumen segment.

    The stenosis (radius shrink by ``narrowing``) extends
    ``narrowing_margin`` samples beyond the calcified interval on each
    side: real lesions narrow a longer stretch than their calcified
    core, and without visible narrowed stubs the hidden stenosis would
    be unrecoverable after the calcium is erased."""

    interval: tuple[int, int]       # calcified sample range, inclusive
    quadrants: int = 1              # angular extent, 1..4 quarter-turns
    radial_thickness_vox: float = 2.5
    plaque_hu: float = 900.0
    narrowing: float = 0.0          # lumen radius shrink fraction in [0, 1)
    narrowing_margin: int = 0       # extra narrowed samples on each side

    def __post_init__(self):
        if self.plaque_hu <= CALCIUM_THRESHOLD_HU:
            raise PhantomError(f"plaque_hu must exceed {CALCIUM_THRESHOLD_HU}")
        if self.quadrants not in (1, 2, 3, 4):
            raise PhantomError("angular extent must be 1..4 quadrants")
        if not 0.0 <= self.narrowing < 1.0:
            raise PhantomError("narrowing must lie in [0, 1)")
        if self.interval[0] > self.interval[1]:
            raise PhantomError("empty plaque interval")


@dataclass
class PhantomTruth:
    vessel: VesselModel
    plaques: list[PlaqueModel]
    labels: np.ndarray              # (nx, ny, nz) uint8 label codes
    true_stenosis_pct: list[float]
    name: str = "phantom"
    seed: int = 0
    noise_sigma_hu: float = 0.0
    # the same scan without its calcifications (plaque band shows the
    # displaced wall, identical noise realization); this is what a perfect
    # calcium remover would output, and what inpainting targets use when
    # a mask covers calcium
    calcium_free: "Volume | None" = None


def gaussian_blur3d(a: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with a truncated normalized kernel and
    zero boundary."""
    if sigma <= 0:
        return a.astype(np.float64)
    r = max(1, int(np.ceil(truncate * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    out = a.astype(np.float64)
    for ax in range(3):
        padding = [(0, 0)] * 3
        padding[ax] = (r, r)
        padded = np.pad(out, padding)
        acc = np.zeros_like(out)
        sl = [slice(None)] * 3
        for j, kv in enumerate(k):
            sl[ax] = slice(j, j + a.shape[ax])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def _nearest_centerline_fields(centerline, dims, reach):
    """Per-voxel distance to the polyline, fractional sample coordinate of
    the closest point and the segment index, limited to bounding slabs of
    half-width ``reach`` around each segment."""
    best_d2 = np.full(dims, np.inf, dtype=np.float64)
    best_f = np.full(dims, -1.0, dtype=np.float64)
    best_seg = np.full(dims, -1, dtype=np.int32)
    for i in range(len(centerline) - 1):
        p0, p1 = centerline[i], centerline[i + 1]
        lo = np.maximum(np.floor(np.minimum(p0, p1) - reach).astype(int), 0)
        hi = np.minimum(np.ceil(np.maximum(p0, p1) + reach).astype(int) + 1, dims)
        if (lo >= hi).any():
            continue
        grids = np.meshgrid(*(np.arange(a, b, dtype=np.float64)
                              for a, b in zip(lo, hi)), indexing="ij")
        seg = p1 - p0
        len2 = max(float(seg @ seg), 1e-12)
        t = sum((g - c) * s for g, c, s in zip(grids, p0, seg)) / len2
        np.clip(t, 0.0, 1.0, out=t)
        d2 = sum((g - (c + t * s)) ** 2 for g, c, s in zip(grids, p0, seg))
        sub = tuple(slice(a, b) for a, b in zip(lo, hi))
        better = d2 < best_d2[sub]
        best_d2[sub][better] = d2[better]
        best_f[sub][better] = i + t[better]
        best_seg[sub][better] = i
    return best_d2, best_f, best_seg


def _segment_frames(centerline):
    """Unit tangent plus an orthonormal in-plane frame per segment; the
    frame fixes what "quadrant" means around the vessel."""
    seg = centerline[1:] - centerline[:-1]
    tan = seg / np.maximum(np.linalg.norm(seg, axis=1, keepdims=True), 1e-12)
    ref = np.tile(np.array([0.0, 0.0, 1.0]), (len(tan), 1))
    ref[np.abs(tan[:, 2]) > 0.9] = [0.0, 1.0, 0.0]
    u = ref - tan * (tan * ref).sum(axis=1, keepdims=True)
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    w = np.cross(tan, u)
    return tan, u, w


def generate_phantom(vessel: VesselModel, plaques: list[PlaqueModel],
                     dims=(64, 64, 48), noise_sigma_hu: float = 0.0,
                     seed: int = 0, spacing_mm: float = 0.47,
                     name: str = "phantom") -> tuple[Volume, PhantomTruth]:
    """Synthesize a phantom volume and its ground truth.

    Deterministic per (models, dims, sigma, seed).  Raises PhantomError
    when the vessel leaves the volume, the class HU values violate the
    3-sigma separation around the 700 HU threshold, or a plaque blurs
    entirely below the detection threshold.
    """
    for pl in plaques:
        if pl.plaque_hu - 3 * noise_sigma_hu <= CALCIUM_THRESHOLD_HU:
            raise PhantomError(f"noise sigma {noise_sigma_hu} too large: "
                               f"plaque {pl.plaque_hu} HU can cross threshold")
        if pl.interval[1] >= len(vessel.centerline):
            raise PhantomError("plaque interval outside centerline")
    if vessel.contrast_hu + 3 * noise_sigma_hu >= CALCIUM_THRESHOLD_HU:
        raise PhantomError(f"noise sigma {noise_sigma_hu} too large: contrast "
                           f"{vessel.contrast_hu} HU can cross threshold")
    rmax = float(vessel.radius_profile.max())
    cl = vessel.centerline
    if (cl < rmax).any() or (cl > np.asarray(dims) - 1 - rmax).any():
        raise PhantomError("centerline closer than max radius to the boundary")

    max_thick = max([pl.radial_thickness_vox for pl in plaques], default=0.0)
    reach = rmax + vessel.wall_thickness_vox + max_thick + 2.0
    d2, f, segidx = _nearest_centerline_fields(cl, dims, reach)
    dist = np.sqrt(d2)
    valid = segidx >= 0

    m = len(cl)
    sample_idx = np.arange(m, dtype=np.float64)
    r_base = np.interp(f, sample_idx, vessel.radius_profile)
    r_narrow = r_base.copy()
    for pl in plaques:
        on = valid & (f >= pl.interval[0] - pl.narrowing_margin) \
            & (f <= pl.interval[1] + pl.narrowing_margin)
        r_narrow[on] = r_base[on] * (1.0 - pl.narrowing)

    lumen = valid & (dist <= r_narrow)
    wall = valid & ~lumen & (dist <= r_narrow + vessel.wall_thickness_vox)

    # angular position around the centerline, for quadrant selection
    plaque_geo = np.zeros(dims, dtype=bool)
    if plaques:
        tan, uvec, wvec = _segment_frames(cl)
        gx, gy, gz = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                                 indexing="ij")
        si = np.clip(segidx, 0, None)
        t_local = (f - si)[..., None]
        closest = cl[si] + t_local * (cl[np.minimum(si + 1, m - 1)] - cl[si])
        off = np.stack([gx, gy, gz], axis=-1) - closest
        ang = np.arctan2((off * wvec[si]).sum(-1), (off * uvec[si]).sum(-1))
        quadrant = np.floor((ang % (2 * np.pi)) / (np.pi / 2)).astype(np.int8)
        for pl in plaques:
            band = valid & (f >= pl.interval[0]) & (f <= pl.interval[1]) \
                & (dist > r_narrow) \
                & (dist <= r_narrow + pl.radial_thickness_vox) \
                & (quadrant < pl.quadrants)
            plaque_geo |= band

    base = np.full(dims, vessel.background_hu, dtype=np.float64)
    base[wall] = vessel.wall_hu
    base[lumen] = vessel.contrast_hu
    base[plaque_geo] = vessel.wall_hu  # plaque displaces wall tissue

    bloomed = base
    if plaques:
        excess = np.zeros(dims, dtype=np.float64)
        for pl in plaques:
            band = valid & (f >= pl.interval[0]) & (f <= pl.interval[1]) \
                & (dist > r_narrow) \
                & (dist <= r_narrow + pl.radial_thickness_vox) \
                & plaque_geo
            excess[band] = pl.plaque_hu - vessel.wall_hu
        bloomed = base + gaussian_blur3d(excess, BLOOM_SIGMA_VOX)

    noiseless = np.clip(np.rint(bloomed), -1024, 3071).astype(np.int16)
    calcified = noiseless > CALCIUM_THRESHOLD_HU

    labels = np.full(dims, LABEL_BACKGROUND, dtype=np.uint8)
    labels[wall] = LABEL_WALL
    labels[lumen] = LABEL_LUMEN
    labels[calcified] = LABEL_PLAQUE
    if plaques and not calcified.any():
        raise PhantomError("plaques blurred entirely below the 700 HU threshold")

    if noise_sigma_hu > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma_hu, size=dims)
        data = np.clip(np.rint(bloomed + noise), -1024, 3071).astype(np.int16)
    else:
        noise = 0.0
        data = noiseless

    calcium_free = None
    if plaques:
        clean = np.clip(np.rint(base + noise), -1024, 3071).astype(np.int16)
        calcium_free = Volume(clean, spacing_mm)

    stenosis = []
    for pl in plaques:
        i0, i1 = pl.interval
        rp = vessel.radius_profile[i0:i1 + 1]
        narrowed = rp * (1.0 - pl.narrowing)
        j = int(np.argmin(narrowed))  # r_min against the reference radius there
        ratio = narrowed[j] / rp[j]
        stenosis.append(float((1.0 - ratio ** 2) * 100.0))
    truth = PhantomTruth(vessel, list(plaques), labels, stenosis,
                         name=name, seed=seed, noise_sigma_hu=noise_sigma_hu,
                         calcium_free=calcium_free)
    return Volume(data, spacing_mm), truth


def true_stenosis(truth: PhantomTruth, plaque_index: int) -> float:
    """Ground-truth stenosis percent of one plaque, from the analytic radii."""
    return truth.true_stenosis_pct[plaque_index]


SUITE_CONTRAST_HU = 600.0  # strong enhancement keeps restored lumens
                           # well inside the (200, 700) measurement window


def _straight_vessel(dims, radius, n=50, **kw) -> VesselModel:
    kw.setdefault("contrast_hu", SUITE_CONTRAST_HU)
    x = np.linspace(7.0, dims[0] - 8.0, n)
    cl = np.stack([x, np.full(n, dims[1] / 2.0), np.full(n, dims[2] / 2.0)], axis=1)
    return VesselModel(cl, np.full(n, radius), **kw)


def _curved_vessel(dims, radius, n=50, amp=5.0, **kw) -> VesselModel:
    kw.setdefault("contrast_hu", SUITE_CONTRAST_HU)
    x = np.linspace(7.0, dims[0] - 8.0, n)
    y = dims[1] / 2.0 + amp * np.sin(np.linspace(0, np.pi, n))
    cl = np.stack([x, y, np.full(n, dims[2] / 2.0)], axis=1)
    return VesselModel(cl, np.full(n, radius), **kw)


# plaque HU for the evaluation suite: dense calcification, bright enough
# that the 0.7-voxel point spread pushes the adjacent lumen shell above
# the 700 HU threshold (visible blooming that eats the apparent lumen)
SUITE_PLAQUE_HU = 2200.0


def phantom_suite(seed: int = 0, noise_sigma_hu: float = 5.0,
                  dims=(64, 64, 48)) -> list[tuple[Volume, PhantomTruth]]:
    """The fixed evaluation battery: clean straight and curved vessels,
    a short plaque (under the 16-voxel mask), a long plaque (over twice
    the mask, exercising the sliding window) and a severe multi-quadrant
    plaque."""
    # every calcified lesion is severe in the more-than-one-quadrant sense,
    # the regime where blooming visibly corrupts stenosis reads
    cases = [
        ("straight-clean", _straight_vessel(dims, 5.5), []),
        ("curved-clean", _curved_vessel(dims, 5.0), []),
        ("short-plaque", _straight_vessel(dims, 5.5),
         [PlaqueModel((22, 32), quadrants=3, radial_thickness_vox=2.5,
                      plaque_hu=SUITE_PLAQUE_HU, narrowing=0.35,
                      narrowing_margin=10)]),
        ("long-plaque", _straight_vessel(dims, 5.5),
         [PlaqueModel((12, 45), quadrants=3, radial_thickness_vox=2.5,
                      plaque_hu=SUITE_PLAQUE_HU, narrowing=0.45)]),
        ("severe-plaque", _straight_vessel(dims, 6.0),
         [PlaqueModel((18, 34), quadrants=4, radial_thickness_vox=3.0,
                      plaque_hu=SUITE_PLAQUE_HU, narrowing=0.55,
                      narrowing_margin=7)]),
    ]
    out = []
    for i, (name, vessel, plaques) in enumerate(cases):
        out.append(generate_phantom(vessel, plaques, dims=dims,
                                    noise_sigma_hu=noise_sigma_hu,
                                    seed=seed + i, name=name))
    return out


def _meandering_vessel(rng: np.random.Generator, dims, radius,
                       n=50, **kw) -> VesselModel:
    """Vessel with a random lateral offset, drift and wiggle, so structure
    lands anywhere in a patch instead of always at its center.  The lumen
    radius undulates and may carry a localized taper, so thin bright
    tubes and narrowed sections are part of the training distribution."""
    kw.setdefault("contrast_hu", SUITE_CONTRAST_HU)
    margin = radius * 1.3 + 1.5
    x = np.linspace(margin, dims[0] - 1 - margin, n)
    span = x[-1] - x[0]
    out = []
    for dim in (dims[1], dims[2]):
        y0 = rng.uniform(margin + 2, dim - margin - 3)
        slope = rng.uniform(-0.25, 0.25)
        amp = rng.uniform(0.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        y = y0 + slope * (x - x[0]) + amp * np.sin(
            2 * np.pi * (x - x[0]) / span + phase)
        out.append(np.clip(y, margin, dim - 1 - margin))
    cl = np.stack([x, out[0], out[1]], axis=1)
    wobble = rng.uniform(0.0, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    cycles = rng.uniform(1.0, 2.5)
    profile = radius * (1.0 + wobble * np.sin(
        2 * np.pi * cycles * np.arange(n) / n + phase))
    # one or two plaque-free tapers per vessel: narrowed stretches are the
    # norm, so the net learns that painted tube width follows the visible
    # stubs rather than the typical healthy caliber
    for _ in range(1 + (rng.random() < 0.4)):
        c = rng.integers(10, n - 10)
        width = rng.uniform(3, 10)
        depth = rng.uniform(0.15, 0.55)
        profile *= 1.0 - depth * np.exp(-((np.arange(n) - c) / width) ** 2)
    return VesselModel(cl, profile, **kw)


def training_phantoms(count: int, seed: int = 0, noise_sigma_hu: float = 5.0,
                      dims=(64, 64, 48)) -> list[tuple[Volume, PhantomTruth]]:
    """Meandering vessels for training patches.  Every second volume is
    calcified: mostly small plaques (on the order of a hundred voxels,
    like typical coronary calcifications), with some long bright
    multi-quadrant lesions so the sliding-window regime is in the
    training distribution."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        radius = float(rng.uniform(4.0, 6.5))
        vessel = _meandering_vessel(rng, dims, radius)
        plaques = []
        if i % 2 == 1:
            if i % 4 == 1:  # small calcified speck
                start = int(rng.integers(10, 35))
                span = int(rng.integers(3, 7))
                quadrants = int(rng.integers(1, 3))
                hu = float(rng.uniform(900, 1800))
                thick = 2.0
            else:           # long severe lesion
                start = int(rng.integers(8, 16))
                span = int(rng.integers(12, 30))
                quadrants = int(rng.integers(2, 5))
                hu = float(rng.uniform(1400, 2300))
                thick = float(rng.uniform(2.0, 3.0))
            plaques = [PlaqueModel((start, start + span),
                                   quadrants=quadrants,
                                   radial_thickness_vox=thick,
                                   plaque_hu=hu,
                                   narrowing=float(rng.uniform(0.2, 0.55)),
                                   narrowing_margin=int(rng.integers(3, 10)))]
        vol, truth = generate_phantom(vessel, plaques, dims=dims,
                                      noise_sigma_hu=noise_sigma_hu,
                                      seed=int(rng.integers(2 ** 31)),
                                      name=f"train-{i}")
        out.append((vol, truth))
    return out


# ------------------------------------------------------------ truth files

def save_truth(truth: PhantomTruth, txt_path, labels_ctv_path,
               spacing_mm: float = 0.47) -> None:
    """Plain-text key-value sidecar plus the label volume as a CTV file
    (uint8 codes stored in int16)."""
    v = truth.vessel
    lines = [
        f"name = {truth.name}",
        f"seed = {truth.seed}",
        f"noise_sigma_hu = {truth.noise_sigma_hu!r}",
        f"vessel.contrast_hu = {v.contrast_hu!r}",
        f"vessel.wall_hu = {v.wall_hu!r}",
        f"vessel.background_hu = {v.background_hu!r}",
        f"vessel.wall_thickness_vox = {v.wall_thickness_vox!r}",
        "vessel.centerline = " + ";".join(
            ",".join(repr(float(c)) for c in p) for p in v.centerline),
        "vessel.radius_profile = " + ";".join(
            repr(float(r)) for r in v.radius_profile),
        f"plaque.count = {len(truth.plaques)}",
    ]
    for i, pl in enumerate(truth.plaques):
        lines += [
            f"plaque.{i}.interval = {pl.interval[0]},{pl.interval[1]}",
            f"plaque.{i}.quadrants = {pl.quadrants}",
            f"plaque.{i}.radial_thickness_vox = {pl.radial_thickness_vox!r}",
            f"plaque.{i}.plaque_hu = {pl.plaque_hu!r}",
            f"plaque.{i}.narrowing = {pl.narrowing!r}",
            f"plaque.{i}.narrowing_margin = {pl.narrowing_margin}",
            f"plaque.{i}.true_stenosis_pct = {truth.true_stenosis_pct[i]!r}",
        ]
    with open(txt_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    save_volume(Volume(truth.labels.astype(np.int16), spacing_mm),
                labels_ctv_path)


def load_truth(txt_path, labels_ctv_path) -> PhantomTruth:
    kv = {}
    with open(txt_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    cl = np.array([[float(c) for c in p.split(",")]
                   for p in kv["vessel.centerline"].split(";")])
    radii = np.array([float(r) for r in kv["vessel.radius_profile"].split(";")])
    vessel = VesselModel(cl, radii,
                         contrast_hu=float(kv["vessel.contrast_hu"]),
                         wall_hu=float(kv["vessel.wall_hu"]),
                         background_hu=float(kv["vessel.background_hu"]),
                         wall_thickness_vox=float(kv["vessel.wall_thickness_vox"]))
    plaques = []
    stenosis = []
    for i in range(int(kv["plaque.count"])):
        i0, i1 = kv[f"plaque.{i}.interval"].split(",")
        plaques.append(PlaqueModel(
            (int(i0), int(i1)),
            quadrants=int(kv[f"plaque.{i}.quadrants"]),
            radial_thickness_vox=float(kv[f"plaque.{i}.radial_thickness_vox"]),
            plaque_hu=float(kv[f"plaque.{i}.plaque_hu"]),
            narrowing=float(kv[f"plaque.{i}.narrowing"]),
            narrowing_margin=int(kv.get(f"plaque.{i}.narrowing_margin", 0))))
        stenosis.append(float(kv[f"plaque.{i}.true_stenosis_pct"]))
    labels = load_volume(labels_ctv_path).data.astype(np.uint8)
    return PhantomTruth(vessel, plaques, labels, stenosis,
                        name=kv.get("name", "phantom"),
                        seed=int(kv.get("seed", 0)),
                        noise_sigma_hu=float(kv.get("noise_sigma_hu", 0.0)))

"""Volume preprocessing: reorientation, bias correction, denoising,
template registration, z-scoring and longitudinal subtraction.

The chain ``reorient -> correct_bias -> denoise -> register_to_template ->
znormalize`` is deterministic. :func:`preprocess_paths` runs it over files with
an on-disk cache keyed by file content, pipeline version and settings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from nibabel import orientations as ornt
from numpy.polynomial import legendre
from scipy import ndimage, optimize

from .volume import SpaceTag, VolumeGrid, load_volume, save_volume

logger = logging.getLogger(__name__)

PIPELINE_VERSION = "1"


class OrientationError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------- reorientation


def reorient(v: VolumeGrid, target: str = "RAS") -> VolumeGrid:
    """Permute/flip voxel axes so that indices increase towards ``target``."""
    if not v.orientation:
        raise OrientationError(f"{v.source}: orientation metadata missing")
    start = ornt.axcodes2ornt(tuple(v.orientation))
    end = ornt.axcodes2ornt(tuple(target))
    transform = ornt.ornt_transform(start, end)
    data = ornt.apply_orientation(v.voxels, transform)
    new_aff = v.affine @ ornt.inv_ornt_aff(transform, v.shape)
    spacing = tuple(float(np.linalg.norm(new_aff[:3, i])) for i in range(3))
    return v.with_voxels(
        np.ascontiguousarray(data),
        spacing=spacing,
        orientation=target,
        origin=tuple(new_aff[:3, 3]),
    )


# ------------------------------------------------------------ bias correction


def _legendre_basis(coords: Sequence[np.ndarray], degree: int) -> np.ndarray:
    """Tensor-product Legendre polynomials of total degree <= ``degree``."""
    cols = []
    per_axis = [legendre.legvander(c, degree) for c in coords]
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            for k in range(degree + 1 - i - j):
                cols.append(per_axis[0][:, i] * per_axis[1][:, j] * per_axis[2][:, k])
    return np.stack(cols, axis=1)


def _sharpen(u: np.ndarray, n_bins: int, fwhm: float, wiener_noise: float) -> np.ndarray:
    """Expected log-intensity given the observed one, after deconvolving the
    histogram by a Gaussian blur of width ``fwhm`` (N4's sharpening step)."""
    lo, hi = float(u.min()), float(u.max())
    if hi - lo < 1e-9:
        return u.copy()
    width = (hi - lo) / (n_bins - 1)
    pos = (u - lo) / width
    left = np.floor(pos).astype(int).clip(0, n_bins - 1)
    frac = pos - left
    hist = np.zeros(n_bins)
    np.add.at(hist, left, 1.0 - frac)
    np.add.at(hist, np.minimum(left + 1, n_bins - 1), frac)

    size = 1 << int(np.ceil(np.log2(2 * n_bins)))
    padded = np.zeros(size)
    padded[:n_bins] = hist
    sigma = fwhm / width / np.sqrt(8 * np.log(2))
    offsets = np.minimum(np.arange(size), size - np.arange(size))
    kernel = np.exp(-0.5 * (offsets / max(sigma, 1e-6)) ** 2)
    kernel /= kernel.sum()
    g = np.fft.fft(kernel)
    deconv = np.real(np.fft.ifft(np.fft.fft(padded) * np.conj(g) / (np.abs(g) ** 2 + wiener_noise)))
    deconv = np.clip(deconv, 0.0, None)
    centers = lo + np.arange(size) * width
    num = np.real(np.fft.ifft(np.fft.fft(deconv * centers) * g))
    den = np.real(np.fft.ifft(np.fft.fft(deconv) * g))
    expected = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), centers)[:n_bins]
    return np.interp(pos, np.arange(n_bins), expected)


def correct_bias(
    v: VolumeGrid,
    degree: int = 3,
    n_iter: int = 50,
    n_bins: int = 200,
    fwhm: float = 0.15,
    wiener_noise: float = 0.01,
    tol: float = 1e-4,
    shrink: int | None = None,
) -> VolumeGrid:
    """N4-style multiplicative bias removal.

    Alternates histogram sharpening of the log image with a least-squares fit
    of a smooth (Legendre polynomial) log-field to the residual. The field is
    normalised to zero mean over the foreground so overall brightness is kept.
    """
    x = np.asarray(v.voxels, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError(f"{v.source}: bias correction needs nonnegative intensities")
    mask = x > 0
    if not mask.any():
        warnings.warn(f"{v.source}: all-zero volume, bias correction skipped")
        return v.with_voxels(x.astype(np.float32))
    if shrink is None:
        shrink = max(1, int(round((x.size / 2e5) ** (1 / 3))))

    axes = [np.linspace(-1.0, 1.0, n) for n in x.shape]
    fit_mask = np.zeros_like(mask)
    fit_mask[::shrink, ::shrink, ::shrink] = mask[::shrink, ::shrink, ::shrink]
    idx = np.nonzero(fit_mask)
    basis = _legendre_basis([axes[d][idx[d]] for d in range(3)], degree)
    u = np.log(x[idx])
    coef = np.zeros(basis.shape[1])
    for _ in range(n_iter):
        uc = u - basis @ coef
        resid = uc - _sharpen(uc, n_bins, fwhm, wiener_noise)
        delta, *_ = np.linalg.lstsq(basis, resid, rcond=None)
        coef += delta
        if np.std(basis @ delta) < tol:
            break

    full_idx = np.nonzero(mask)
    field_fg = _legendre_basis([axes[d][full_idx[d]] for d in range(3)], degree) @ coef
    offset = field_fg.mean()
    out = np.zeros_like(x)
    out[full_idx] = x[full_idx] / np.exp(field_fg - offset)
    corrected = v.with_voxels(out.astype(np.float32))
    corrected.meta["bias_field_coefficients"] = coef.tolist()
    return corrected


# ------------------------------------------------------------------ denoising


def estimate_noise_sigma(x: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Robust Gaussian noise level from 6-neighbour pseudo-residuals."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.zeros((3, 3, 3))
    kernel[1, 1, 1] = 1.0
    for a in range(3):
        for d in (0, 2):
            pos = [1, 1, 1]
            pos[a] = d
            kernel[tuple(pos)] = -1.0 / 6.0
    resid = np.sqrt(6.0 / 7.0) * ndimage.convolve(x, kernel, mode="nearest")
    if mask is None:
        mask = x != 0
        if mask.sum() < 27:
            mask = np.ones_like(x, dtype=bool)
    vals = resid[mask]
    if vals.size == 0:
        return 0.0
    med = np.median(vals)
    return float(1.4826 * np.median(np.abs(vals - med)))


def denoise(
    v: VolumeGrid,
    patch_radius: int = 1,
    search_radius: int = 2,
    beta: float = 1.0,
    sigma: float | None = None,
) -> VolumeGrid:
    """Non-local means denoising assuming additive Gaussian noise.

    Patch weights are ``exp(-d / (2 beta sigma^2))`` with ``d`` the mean squared
    patch difference, so flat regions average and edges are left in place.
    """
    x = np.asarray(v.voxels, dtype=np.float64)
    if sigma is None:
        sigma = estimate_noise_sigma(x)
    if sigma <= 0 or not np.isfinite(sigma):
        return v.with_voxels(x.astype(np.float32))

    nz = np.nonzero(x)
    if nz[0].size == 0:
        return v.with_voxels(x.astype(np.float32))
    pad = search_radius + patch_radius
    lo = [max(0, int(a.min()) - pad) for a in nz]
    hi = [min(s, int(a.max()) + pad + 1) for a, s in zip(nz, x.shape)]
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    sub = x[box]

    padded = np.pad(sub, search_radius, mode="reflect")
    acc = np.zeros_like(sub)
    wsum = np.zeros_like(sub)
    h2 = 2.0 * beta * sigma**2
    size = 2 * patch_radius + 1
    r = search_radius
    for dz in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                shifted = padded[
                    r + dz : r + dz + sub.shape[0],
                    r + dy : r + dy + sub.shape[1],
                    r + dx : r + dx + sub.shape[2],
                ]
                d = ndimage.uniform_filter((sub - shifted) ** 2, size=size, mode="reflect")
                w = np.exp(-d / h2)
                acc += w * shifted
                wsum += w
    out = x.copy()
    out[box] = acc / wsum
    den = v.with_voxels(out.astype(np.float32))
    den.meta["noise_sigma"] = float(sigma)
    return den


# --------------------------------------------------------------- registration


def _rotation(angles: np.ndarray) -> np.ndarray:
    a, b, c = angles
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _world_matrix(params: np.ndarray, kind: str, center: np.ndarray) -> np.ndarray:
    """Template-world -> moving-world 4x4 matrix, rotating about ``center``."""
    lin = np.eye(3)
    if kind == "translation":
        t = params[:3]
    elif kind == "rigid":
        t = params[:3]
        lin = _rotation(params[3:6])
    else:
        t = params[:3]
        lin = np.eye(3) + params[3:12].reshape(3, 3)
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = center + t - lin @ center
    return m


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def _mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins)
    p = joint / max(joint.sum(), 1.0)
    px = p.sum(1, keepdims=True)
    py = p.sum(0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (px @ py)[nz])).sum())


_METRICS = {"ncc": _ncc, "mi": _mutual_information}


def _center_of_mass(v: VolumeGrid) -> np.ndarray:
    w = np.clip(np.asarray(v.voxels, dtype=np.float64), 0, None)
    if w.sum() <= 0:
        com = (np.array(v.shape) - 1) / 2
    else:
        com = np.array(ndimage.center_of_mass(w))
    return (v.affine @ np.append(com, 1.0))[:3]


def _resample(moving: VolumeGrid, moving_data: np.ndarray, world: np.ndarray, target_aff: np.ndarray, shape, order=1):
    vox = np.linalg.inv(moving.affine) @ world @ target_aff
    return ndimage.affine_transform(
        moving_data, vox[:3, :3], offset=vox[:3, 3], output_shape=tuple(shape), order=order, cval=0.0
    )


@dataclass
class AffineFit:
    matrix: np.ndarray  # template world -> moving world
    similarity: float
    initial_similarity: float
    kind: str


_PARAM_SCALES = {
    "translation": np.ones(3),
    "rigid": np.r_[np.ones(3), np.full(3, 0.05)],
    "affine": np.r_[np.ones(3), np.full(9, 0.02)],
}


def estimate_affine(
    v: VolumeGrid,
    template: VolumeGrid,
    metric: str = "ncc",
    stages: Sequence[str] = ("translation", "rigid", "affine"),
    levels: Sequence[int] | None = None,
    max_evals: int = 2000,
) -> AffineFit:
    """Multi-resolution staged affine alignment of ``v`` onto ``template``.

    Starts from centre-of-mass alignment, then optimises translation, rigid and
    full affine parameters in turn (Powell, coarse to fine).
    """
    score = _METRICS[metric]
    center = _center_of_mass(template)
    params = {"translation": _center_of_mass(v) - center}
    if levels is None:
        levels = [f for f in (4, 2, 1) if min(template.shape) / f >= 8] or [1]

    t_aff = template.affine
    tdata = np.asarray(template.voxels, dtype=np.float64)
    mdata = np.asarray(v.voxels, dtype=np.float64)

    def level_data(f):
        if f == 1:
            return tdata, mdata, t_aff, template.shape
        ts = ndimage.gaussian_filter(tdata, f / 2.0)[::f, ::f, ::f]
        scale = np.diag([f, f, f, 1.0])
        m_sigma = [f * template.spacing[i] / v.spacing[i] / 2.0 for i in range(3)]
        ms = ndimage.gaussian_filter(mdata, m_sigma)
        return ts, ms, t_aff @ scale, ts.shape

    def convert(z, src, dst):
        if dst == "translation":
            return z[:3].copy()
        lin = _world_matrix(z, src, center)[:3, :3] if src != "translation" else np.eye(3)
        if dst == "rigid":
            # rotation angles cannot be recovered from a general affine; only
            # translation-to-rigid conversions happen in the default order
            return np.r_[z[:3], z[3:6] if src == "rigid" else np.zeros(3)]
        return np.r_[z[:3], (lin - np.eye(3)).ravel()]

    def full_res_similarity(m):
        return score(tdata, _resample(v, mdata, m, t_aff, template.shape))

    z = params["translation"]
    initial = full_res_similarity(_world_matrix(z, "translation", center))
    # each stage starts from the best full-resolution candidate so far, so the
    # chain never ends below the centre-of-mass start
    best = (initial, _world_matrix(z, "translation", center), "translation", z, "translation")
    pyramid = [level_data(f) for f in levels]
    for kind in stages:
        z = convert(best[3], best[4], kind)
        scales = _PARAM_SCALES[kind]
        for ts, ms, aff, shape in pyramid:

            def cost(q, kind=kind, scales=scales, ts=ts, ms=ms, aff=aff, shape=shape):
                warped = _resample(v, ms, _world_matrix(q * scales, kind, center), aff, shape)
                return -score(ts, warped)

            res = optimize.minimize(
                cost, z / scales, method="Powell",
                options={"xtol": 1e-2, "ftol": 1e-5, "maxfev": max_evals},
            )
            z = res.x * scales
            if not np.all(np.isfinite(z)):
                raise RegistrationError(f"{v.source}: non-finite registration parameters")
        m = _world_matrix(z, kind, center)
        sim = full_res_similarity(m)
        if sim > best[0]:
            best = (sim, m, kind, z, kind)
    sim, matrix, kind = best[0], best[1], best[2]
    return AffineFit(matrix=matrix, similarity=sim, initial_similarity=float(initial), kind=kind)


def register_to_template(
    v: VolumeGrid,
    template: VolumeGrid,
    metric: str = "ncc",
    stages: Sequence[str] = ("translation", "rigid", "affine"),
    levels: Sequence[int] | None = None,
) -> VolumeGrid:
    """Resample ``v`` onto the template grid after affine alignment (trilinear).

    Raises :class:`RegistrationError` when the optimiser returns a degenerate
    transform or ends below its starting similarity.
    """
    if v.orientation != template.orientation:
        raise OrientationError(f"{v.source}: reorient before registration ({v.orientation} vs {template.orientation})")
    fit = estimate_affine(v, template, metric=metric, stages=stages, levels=levels)
    det = np.linalg.det(fit.matrix[:3, :3])
    if not (0.2 < det < 5.0):
        raise RegistrationError(f"{v.source}: degenerate transform (det={det:.3g})")
    if not np.isfinite(fit.similarity) or fit.similarity < fit.initial_similarity - 1e-6:
        raise RegistrationError(
            f"{v.source}: registration did not converge ({fit.initial_similarity:.4f} -> {fit.similarity:.4f})"
        )
    data = _resample(v, np.asarray(v.voxels, dtype=np.float64), fit.matrix, template.affine, template.shape)
    out = VolumeGrid(
        voxels=data.astype(np.float32),
        spacing=template.spacing,
        orientation=template.orientation,
        space_tag=SpaceTag.template,
        origin=template.origin,
        source=v.source,
        flags=list(v.flags),
        meta={**v.meta, "registration_matrix": fit.matrix.tolist(), "registration_similarity": fit.similarity},
    )
    return out


# --------------------------------------------------------------- normalization


def znormalize(v: VolumeGrid) -> VolumeGrid:
    """Z-score the nonzero support; background zeros stay zero."""
    x = np.asarray(v.voxels, dtype=np.float64)
    support = x != 0
    vals = x[support]
    if vals.size == 0 or np.std(vals) == 0:
        raise ValueError(f"{v.source}: z-score undefined for a constant volume")
    out = np.zeros_like(x)
    out[support] = (vals - vals.mean()) / vals.std()
    return v.with_voxels(out.astype(np.float32))


def subtract(curr: VolumeGrid, prev: VolumeGrid) -> VolumeGrid:
    """Voxel-wise ``curr - prev``; metadata is taken from ``curr``."""
    if curr.shape != prev.shape:
        raise ShapeMismatchError(f"cannot subtract {prev.shape} from {curr.shape}")
    return curr.with_voxels(np.asarray(curr.voxels, dtype=np.float32) - np.asarray(prev.voxels, dtype=np.float32))


# ------------------------------------------------------------ pipeline + cache


@dataclass(frozen=True)
class PreprocessConfig:
    reorient: bool = True
    bias: bool = True
    denoise: bool = True
    register: bool = True
    normalize: bool = True
    metric: str = "ncc"
    bias_degree: int = 3
    nlm_patch_radius: int = 1
    nlm_search_radius: int = 2

    def key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def run_chain(v: VolumeGrid, template: VolumeGrid | None, cfg: PreprocessConfig = PreprocessConfig()):
    """Apply the enabled steps in order; returns the volume and step timings."""
    timings: dict[str, float] = {}

    def step(name, fn, vol):
        t0 = time.perf_counter()
        out = fn(vol)
        timings[name] = time.perf_counter() - t0
        return out

    if cfg.reorient:
        v = step("reorient", reorient, v)
    if cfg.bias:
        v = step("bias", lambda x: correct_bias(x, degree=cfg.bias_degree), v)
    if cfg.denoise:
        v = step("denoise", lambda x: denoise(x, cfg.nlm_patch_radius, cfg.nlm_search_radius), v)
    if cfg.register:
        if template is None:
            raise ValueError("registration enabled but no template given")
        v = step("register", lambda x: register_to_template(x, template, metric=cfg.metric), v)
    if cfg.normalize:
        v = step("normalize", znormalize, v)
    return v, timings


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class CacheEntry:
    source: str
    output: str | None
    status: str  # "ok", "cached" or "flagged"
    reason: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def usable(self) -> bool:
        return self.output is not None


def _cache_key(path: str, cfg: PreprocessConfig, template_digest: str) -> str:
    h = hashlib.sha256()
    h.update(file_digest(path).encode())
    h.update(PIPELINE_VERSION.encode())
    h.update(cfg.key().encode())
    h.update(template_digest.encode())
    return h.hexdigest()


def preprocess_file(path: str, template_path: str | None, cache_dir: str | Path, cfg: PreprocessConfig) -> CacheEntry:
    cache_dir = Path(cache_dir)
    tdig = file_digest(template_path) if template_path else "none"
    key = _cache_key(path, cfg, tdig)
    out = cache_dir / key[:2] / f"{key}.nii.gz"
    failed = out.with_suffix("").with_suffix(".failed.json")
    if out.exists():
        return CacheEntry(path, str(out), "cached")
    if failed.exists():
        return CacheEntry(path, None, "flagged", json.loads(failed.read_text())["reason"])
    template = load_volume(template_path) if template_path else None
    try:
        vol, timings = run_chain(load_volume(path), template, cfg)
    except (RegistrationError, OrientationError, ValueError) as exc:
        failed.parent.mkdir(parents=True, exist_ok=True)
        failed.write_text(json.dumps({"source": path, "reason": str(exc)}))
        logger.warning("excluding %s: %s", path, exc)
        return CacheEntry(path, None, "flagged", str(exc))
    tmp = out.parent / f".{key}.tmp.nii.gz"
    save_volume(vol, tmp)
    tmp.replace(out)
    return CacheEntry(path, str(out), "ok", timings=timings)


def _star(args):
    return preprocess_file(*args)


def preprocess_paths(
    paths: Iterable[str],
    template_path: str | None,
    cache_dir: str | Path,
    cfg: PreprocessConfig = PreprocessConfig(),
    workers: int = 1,
    log_path: str | Path | None = None,
) -> dict[str, CacheEntry]:
    """Preprocess many files (optionally in parallel) and write a log table."""
    paths = sorted(set(map(str, paths)))
    jobs = [(p, template_path, str(cache_dir), cfg) for p in paths]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_star, jobs))
    else:
        entries = [_star(j) for j in jobs]
    result = {e.source: e for e in entries}
    if log_path is not None:
        write_preprocess_log(entries, log_path, cfg)
    return result


STEP_NAMES = ("reorient", "bias", "denoise", "register", "normalize")


def write_preprocess_log(entries: Iterable[CacheEntry], path: str | Path, cfg: PreprocessConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["source", "output", "status", "reason", *(f"{s}_seconds" for s in STEP_NAMES), "settings"])
        for e in entries:
            w.writerow([
                e.source, e.output or "", e.status, e.reason,
                *(f"{e.timings[s]:.4f}" if s in e.timings else "" for s in STEP_NAMES),
                cfg.key(),
            ])
    return path

"""CT slice ingestion, HU windowing, patient-level splits, synthetic data.

File contracts (bit-exact, dependency-free):
  - images: 16-byte header b"CAMI" + u32 H + u32 W + u32 reserved, then
    H*W little-endian float32 Hounsfield units, row-major;
  - masks: 8-bit binary PGM (P5), 0 = background, 255 = lesion;
  - manifest: CSV patient_id,slice_id,image_path,mask_path,label,split with
    paths relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"CAMI"

HU_CENTER = 40.0
HU_WIDTH = 80.0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SliceRecord:
    patient_id: str
    slice_id: str
    image_path: str
    mask_path: str | None
    label: int
    split: str = ""


def window_hu(raw: np.ndarray, center: float = HU_CENTER, width: float = HU_WIDTH) -> np.ndarray:
    """Clamp to [center - width/2, center + width/2] and rescale to [0, 1]."""
    lo = center - width / 2.0
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / width, 0.0, 1.0)


def write_image(path: str | Path, hu: np.ndarray) -> None:
    hu = np.asarray(hu, dtype=np.float64)
    h, w = hu.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", h, w, 0))
        f.write(hu.astype("<f4").tobytes())


def read_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != IMAGE_MAGIC:
        raise DatasetError(f"{path}: not a CAMI image")
    h, w, _ = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * h * w:
        raise DatasetError(f"{path}: payload size mismatch for {h}x{w}")
    img = np.frombuffer(data, dtype="<f4", count=h * w, offset=16).reshape(h, w)
    out = img.astype(np.float64)
    if not np.isfinite(out).all():
        raise DatasetError(f"{path}: non-finite pixel values")
    return out


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM mask")
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DatasetError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    if len(data) - pos != h * w:
        raise DatasetError(f"{path}: payload size mismatch for {h}x{w}")
    return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w) > 0


def write_manifest(path: str | Path, records: list[SliceRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id", "slice_id", "image_path", "mask_path", "label", "split"])
        for r in records:
            writer.writerow([r.patient_id, r.slice_id, r.image_path, r.mask_path or "",
                             r.label, r.split])


def read_manifest(path: str | Path) -> list[SliceRecord]:
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        need = {"patient_id", "slice_id", "image_path", "mask_path", "label", "split"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DatasetError(f"{path}: manifest header must contain {sorted(need)}")
        for i, row in enumerate(reader, start=2):
            try:
                records.append(SliceRecord(
                    patient_id=row["patient_id"],
                    slice_id=row["slice_id"],
                    image_path=row["image_path"],
                    mask_path=row["mask_path"] or None,
                    label=int(row["label"]),
                    split=row["split"],
                ))
            except (TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{i}: {e}")
    if not records:
        raise DatasetError(f"{path}: empty manifest")
    seen = set()
    for r in records:
        if r.slice_id in seen:
            raise DatasetError(f"{path}: duplicate slice id {r.slice_id!r}")
        seen.add(r.slice_id)
        if (r.label == 1) != (r.mask_path is not None):
            raise DatasetError(f"{path}: slice {r.slice_id!r} label/mask mismatch")
        img = path.parent / r.image_path
        if not img.exists():
            raise DatasetError(f"{path}: missing image file {img}")
        if r.mask_path and not (path.parent / r.mask_path).exists():
            raise DatasetError(f"{path}: missing mask file {path.parent / r.mask_path}")
    return records


def load_slice(manifest_path: str | Path, record: SliceRecord):
    """Returns (hu_image, mask_or_None) with paths resolved."""
    base = Path(manifest_path).parent
    hu = read_image(base / record.image_path)
    mask = read_mask(base / record.mask_path) if record.mask_path else None
    return hu, mask


def _quota(fraction: float, n: int) -> int:
    return math.ceil(fraction * n - 1e-9)


def patient_split(records: list[SliceRecord], test_fraction: float = 0.2,
                  seed: int = 0) -> list[SliceRecord]:
    """Assign every slice of each patient to train or test, stratified by
    whether the patient has any positive slice."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test fraction {test_fraction} not in (0, 1)")
    by_patient: dict[str, list[SliceRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    patients = sorted(by_patient)
    if len(patients) < 2:
        raise DatasetError("patient split needs at least 2 patients")
    strata = {
        "pos": [p for p in patients if any(r.label == 1 for r in by_patient[p])],
        "neg": [p for p in patients if all(r.label == 0 for r in by_patient[p])],
    }
    total_test = _quota(test_fraction, len(patients))
    quotas = {}
    fracs = []
    for key in ("pos", "neg"):
        exact = test_fraction * len(strata[key])
        quotas[key] = math.floor(exact + 1e-9)
        fracs.append((exact - quotas[key], len(strata[key]), key))
    short = total_test - sum(quotas.values())
    for _, _, key in sorted(fracs, reverse=True)[:max(short, 0)]:
        quotas[key] += 1

    rng = np.random.default_rng(seed)
    test_patients: set[str] = set()
    for key in ("pos", "neg"):
        pool = strata[key]
        if not pool:
            continue
        order = rng.permutation(len(pool))
        test_patients.update(pool[i] for i in order[: quotas[key]])
    return [replace(r, split="test" if r.patient_id in test_patients else "train")
            for r in records]


SYNTH_IMAGE_SIZE = 64
LESION_CUT_HU = 15.0  # mask = pixels whose blob contribution exceeds this


def synth_dataset(n_patients: int, slices_per_patient: int, seed: int,
                  out_dir: str | Path) -> list[SliceRecord]:
    """Generate a deterministic stand-in dataset of head-CT-like slices.

    Each slice is a dark elliptical "skull" interior over air; roughly a
    quarter of slices carry a bright Gaussian lesion whose above-cut support
    is the ground-truth mask.  Images store raw HU; callers window them.
    """
    if n_patients < 2 or slices_per_patient < 1:
        raise DatasetError("need >= 2 patients and >= 1 slice per patient")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    size = SYNTH_IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rng = np.random.default_rng(seed)

    n_pos_patients = max(1, round(0.625 * n_patients))
    pos_patients = set(rng.permutation(n_patients)[:n_pos_patients].tolist())
    n_pos_slices = max(1, round(0.4 * slices_per_patient))

    records = []
    for p in range(n_patients):
        pid = f"p{p:03d}"
        cy = 31.5 + rng.uniform(-2.0, 2.0)
        cx = 31.5 + rng.uniform(-2.0, 2.0)
        ry = rng.uniform(24.0, 27.0)
        rx = rng.uniform(20.0, 24.0)
        tissue = rng.uniform(22.0, 30.0)
        ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

        positive_range = range(0)
        if p in pos_patients:
            start = int(rng.integers(0, slices_per_patient - n_pos_slices + 1))
            positive_range = range(start, start + n_pos_slices)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = rng.uniform(0.0, 0.5)
            ly = cy + rad * ry * np.sin(ang)
            lx = cx + rad * rx * np.cos(ang)
            sigma_p = rng.uniform(3.0, 6.0)
            amp_p = rng.uniform(40.0, 60.0)

        for s in range(slices_per_patient):
            sid = f"{pid}s{s:03d}"
            hu = np.full((size, size), -1000.0)
            hu[ellipse] = tissue + rng.normal(0.0, 2.5, int(ellipse.sum()))
            mask_path = None
            if s in positive_range:
                jy = ly + rng.uniform(-1.5, 1.5)
                jx = lx + rng.uniform(-1.5, 1.5)
                sigma = sigma_p + rng.uniform(-0.4, 0.4)
                amp = amp_p + rng.uniform(-4.0, 4.0)
                blob = amp * np.exp(-(((yy - jy) ** 2) + (xx - jx) ** 2) / (2.0 * sigma**2))
                blob *= ellipse
                hu += blob
                mask = blob > LESION_CUT_HU
                if not mask.any():
                    raise DatasetError(f"generator produced an empty lesion for {sid}")
                mask_path = f"masks/{sid}.pgm"
                write_mask(out_dir / mask_path, mask)
            image_path = f"images/{sid}.cami"
            write_image(out_dir / image_path, hu)
            records.append(SliceRecord(pid, sid, image_path, mask_path,
                                       int(mask_path is not None)))
    return records

"""Cases on disk and in memory.

A data directory holds ``<case_id>_ct.h3v``, ``<case_id>_pet.h3v`` and
``<case_id>_mask.h3v`` per case, in raw units.  Loading preprocesses each
pair onto its common grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .synth import synth_case
from .volume import Volume, preprocess_pair, read_volume, write_volume

SUFFIXES = ("ct", "pet", "mask")


@dataclass
class Case:
    case_id: str
    image: np.ndarray  # (2, D, H, W) preprocessed CT, PET
    mask: np.ndarray  # (D, H, W) labels in {0, 1, 2}


def case_paths(root, case_id: str) -> dict[str, Path]:
    return {s: Path(root) / f"{case_id}_{s}.h3v" for s in SUFFIXES}


def save_raw_case(root, case_id: str, ct: Volume, pet: Volume, mask: Volume) -> None:
    paths = case_paths(root, case_id)
    Path(root).mkdir(parents=True, exist_ok=True)
    write_volume(ct, paths["ct"])
    write_volume(pet, paths["pet"])
    write_volume(mask, paths["mask"])


def case_from_volumes(case_id: str, ct: Volume, pet: Volume, mask: Volume) -> Case:
    pre = preprocess_pair(ct, pet, mask)
    return Case(case_id, pre.image, pre.mask)


def list_case_ids(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    ids = sorted(p.name[:-len("_ct.h3v")] for p in root.glob("*_ct.h3v"))
    if not ids:
        raise DataError(f"no *_ct.h3v files in {root}")
    return ids


def load_cases(root) -> list[Case]:
    cases = []
    for cid in list_case_ids(root):
        paths = case_paths(root, cid)
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise DataError(f"case {cid} is incomplete, missing {missing}")
        vols = [read_volume(paths[s]) for s in SUFFIXES]
        cases.append(case_from_volumes(cid, *vols))
    return cases


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_raw(n: int, seed: int = 0, extents=(48, 48, 48)) -> list[tuple[str, Volume, Volume, Volume]]:
    return [(f"case_{i:03d}",) + synth_case(case_seed(seed, i), extents) for i in range(n)]


def synth_dataset(n: int, seed: int = 0, extents=(48, 48, 48)) -> list[Case]:
    """``n`` preprocessed synthetic cases."""
    return [case_from_volumes(*raw) for raw in synth_raw(n, seed, extents)]

#!/usr/bin/env python3
"""Convert benchmark downloads into the npz layout read by `udfa`.

Synapse (the common preprocessed release):
    convert_data.py synapse SRC DST
  SRC/train_npz/*.npz are copied as float32 image / uint8 label,
  SRC/test_vol_h5/<case>.npy.h5 become DST/test_vol_npz/<case>.npz.

ACDC (the official NIfTI release, needs nibabel):
    convert_data.py acdc SRC DST
  SRC/**/patientNNN/patientNNN_frameXX.nii.gz with its _gt file. The ED and
  ES frames of a patient are stacked along depth into
  DST/volumes/patientNNN.npz, intensities min-max scaled per frame.

Run `udfa prepare-data --dataset <name> --root DST` afterwards to write the
manifest.
"""
import argparse
import re
import sys
from pathlib import Path

import numpy as np


def save(path, image, label, spacing=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"image": image.astype(np.float32), "label": label.astype(np.uint8)}
    if spacing is not None:
        arrays["spacing"] = np.asarray(spacing, dtype=np.float32)
    # uncompressed: the reader does not inflate
    np.savez(path, **arrays)


def synapse(src, dst):
    n = 0
    for f in sorted((src / "train_npz").glob("*.npz")):
        d = np.load(f)
        save(dst / "train_npz" / f.name, d["image"], d["label"])
        n += 1
    import h5py

    for f in sorted((src / "test_vol_h5").glob("*.npy.h5")):
        with h5py.File(f, "r") as h:
            case = f.name.split(".")[0]
            save(dst / "test_vol_npz" / f"{case}.npz", h["image"][:], h["label"][:])
        n += 1
    return n


def scale(x):
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def acdc(src, dst):
    import nibabel as nib

    frames = {}
    for f in sorted(src.rglob("patient*_frame*_gt.nii.gz")):
        m = re.match(r"(patient\d{3})_frame\d+_gt", f.name)
        frames.setdefault(m.group(1), []).append(f)
    for pid, gts in sorted(frames.items()):
        images, labels, spacing = [], [], None
        for gt in gts:
            img = nib.load(str(gt).replace("_gt", ""))
            lab = nib.load(str(gt))
            # nibabel gives (W, H, D); the reader wants (D, H, W)
            images.append(scale(np.transpose(img.get_fdata(), (2, 1, 0))))
            labels.append(np.transpose(lab.get_fdata(), (2, 1, 0)).round())
            zooms = img.header.get_zooms()
            spacing = (zooms[2], zooms[1], zooms[0])
        save(dst / "volumes" / f"{pid}.npz", np.concatenate(images), np.concatenate(labels), spacing)
    return len(frames)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("dataset", choices=["synapse", "acdc"])
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    a = ap.parse_args()
    n = (synapse if a.dataset == "synapse" else acdc)(a.src, a.dst)
    if n == 0:
        sys.exit(f"no input files found under {a.src}")
    print(f"{n} files written under {a.dst}")


if __name__ == "__main__":
    main()

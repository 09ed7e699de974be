#!/usr/bin/env python3
"""Export VGG16 features + LPIPS linear heads into a cpmark tensor archive.

Needs torch, torchvision and the `lpips` package (for its v0.1 linear weights).
Both weight sets are downloaded on first use by those packages.

    python3 tools/export_lpips_vgg16.py data/lpips_vgg16.ckpt
"""

import argparse
import json
import os
import struct
import sys

import torch

MAGIC = b"CPMARK-CKPT-v1\n"
CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]


def write_archive(path, meta, tensors):
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        t = t.detach().to(torch.float32).contiguous().cpu()
        raw = t.numpy().tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="output archive path")
    args = ap.parse_args()

    try:
        import lpips
        from torchvision.models import VGG16_Weights, vgg16
    except ImportError as e:
        sys.exit(f"missing dependency: {e.name} (pip install torchvision lpips)")

    features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.state_dict()
    heads = lpips.LPIPS(net="vgg", verbose=False).state_dict()

    tensors = []
    for i in CONV_INDICES:
        tensors.append((f"features.{i}.weight", features[f"{i}.weight"]))
        tensors.append((f"features.{i}.bias", features[f"{i}.bias"]))
    for g in range(5):
        tensors.append((f"lin{g}.weight", heads[f"lin{g}.model.1.weight"]))

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_archive(args.out, {"kind": "perceptual_backend", "layout": "vgg16", "source": "torchvision+lpips v0.1"},
                  tensors)
    print(args.out)


if __name__ == "__main__":
    main()

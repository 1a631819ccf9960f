#!/usr/bin/env python3
"""Write a synthetic paired dataset (low-light PNG + reference PNG + manifest).

The generator produces smooth random references and degrades them with a
gamma curve, darkening, a red-channel gain, and sensor noise, so the pairs
carry exactly the kind of channel miscalibration the alignment loss targets.
"""

import argparse
from pathlib import Path

from calflow.dataset import PairEntry, PairManifest, make_synthetic_dataset, save_manifest
from calflow.image import Image, save_png


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path, help="directory for PNGs and manifest.json")
    parser.add_argument("--pairs", type=int, default=8)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--split", default="train")
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    pairs = make_synthetic_dataset(args.pairs, size=args.size, seed=args.seed)
    entries = []
    for i, (low, ref) in enumerate(pairs):
        low_name = f"pair{i:03d}_low.png"
        ref_name = f"pair{i:03d}_ref.png"
        save_png(Image(low), args.out_dir / low_name)
        save_png(Image(ref), args.out_dir / ref_name)
        entries.append(PairEntry(low=low_name, ref=ref_name, spectrum="synthetic"))

    manifest_path = args.out_dir / "manifest.json"
    save_manifest(PairManifest(split=args.split, entries=tuple(entries)), manifest_path)
    print(f"wrote {len(entries)} pairs and {manifest_path}")


if __name__ == "__main__":
    main()

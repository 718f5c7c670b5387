"""Run (or resume) the scaled circular-data sweep used by the acceptance suite.

Records are appended to acceptance/records.jsonl; the acceptance tests reuse
every record whose code fingerprint and configuration still match.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from mdcn.experiments import circular_leave_one_out
from mdcn.trainer import TrainConfig

ROOT = Path(__file__).resolve().parents[1]
VARIANTS = ("MDCN", "CFR", "DCFR", "MLP")
SEEDS = (0, 1, 2, 3, 4)
N_ITER = 1500
SAMPLES = 500


def default_cache():
    return Path(os.environ.get("MDCN_ACCEPTANCE_CACHE", ROOT / "acceptance" / "records.jsonl"))


def sweep(cache=None, progress=None, variants=VARIANTS, seeds=SEEDS):
    cache = Path(cache or default_cache())
    cache.parent.mkdir(parents=True, exist_ok=True)
    base = replace(TrainConfig(), n_iter=N_ITER)
    return circular_leave_one_out(variants, seeds, base=base, samples_per_domain=SAMPLES,
                                  cache=cache, progress=progress)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=None)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    args = ap.parse_args(argv)

    def show(rec):
        print(f"{rec.variant:6s} seed={rec.seed} target={rec.target} pehe={rec.pehe:.4f} "
              f"({rec.seconds:.1f}s)", flush=True)

    sweep(args.cache, show, tuple(args.variants.split(",")))
    return 0


if __name__ == "__main__":
    sys.exit(main())

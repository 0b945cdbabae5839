"""Run the bundled scenario configs and print one status line per run.

    python scripts/run_scenarios.py                 # every config under scripts/configs
    python scripts/run_scenarios.py rv_ladder_flat  # selected configs by stem
    python scripts/run_scenarios.py --out runs2     # redirect outputs

Outputs land in each config's ``output`` directory (relative to the current
working directory) unless ``--out`` is given, in which case each scenario
writes to ``<out>/<config stem>``.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from arefs.cli import main as arefs_main

CONFIGS = Path(__file__).resolve().parent / "configs"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("names", nargs="*", help="config stems (default: all)")
    ap.add_argument("--out", help="root directory for outputs")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    paths = sorted(CONFIGS.glob("*.json"))
    if args.names:
        paths = [CONFIGS / f"{n}.json" for n in args.names]
    status = 0
    for path in paths:
        scenario = json.loads(path.read_text())["scenario"]
        cli = [scenario, "--config", str(path)]
        if args.out:
            cli += ["--out", str(Path(args.out) / path.stem)]
        if args.seed is not None:
            cli += ["--seed", str(args.seed)]
        t0 = time.perf_counter()
        code = arefs_main(cli)
        print(f"{path.stem:22s} exit={code} {time.perf_counter() - t0:8.1f}s", flush=True)
        status = max(status, code)
    return status


if __name__ == "__main__":
    sys.exit(main())

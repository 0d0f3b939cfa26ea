"""Run every CLI subcommand for each benchmark config.

    python3 scripts/run_all.py [--out out] [--threads 4] [--only pitchfork duffing]

Outputs land in ``<out>/<config name>/``; the script stops at the first
config whose fit fails and reports the exit code of every command.
"""

import argparse
import sys
from pathlib import Path

from koopman_reproj import cli

ROOT = Path(__file__).resolve().parents[1]
COMMANDS = {
    "pitchfork": ["predict", "bifurcation", "newton-bench", "multistep", "simulate"],
    "duffing": ["predict", "newton-bench", "multistep", "simulate"],
    "lorenz": ["predict", "newton-bench", "multistep", "simulate"],
    "lorenz_nox1": ["predict", "newton-bench", "simulate"],
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "out"))
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--only", nargs="*", choices=sorted(COMMANDS))
    args = ap.parse_args()
    worst = 0
    for name in args.only or COMMANDS:
        cfg = ROOT / "configs" / f"{name}.json"
        out = Path(args.out) / name
        model = out / "model.json"
        print(f"== {name}")
        code = cli.main(["fit", "--config", str(cfg), "--out", str(out)])
        if code:
            print(f"fit failed with exit code {code}")
            return code
        for cmd in COMMANDS[name]:
            code = cli.main([cmd, "--config", str(cfg), "--out", str(out), "--model", str(model), "--threads", str(args.threads)])
            print(f"-- {cmd}: exit {code}")
            worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())

"""Adaptive multistep prediction: reprojection intervals per trigger factor."""

import numpy as np

from koopman_reproj.experiments import RunConfig, fit_pipeline, multistep_runs

from _common import config_path


def main():
    for name in ("pitchfork", "duffing"):
        cfg = RunConfig.load(config_path(name))
        fr = fit_pipeline(cfg)
        print(f"== {name} ({cfg.multistep.measure}, p = {cfg.multistep.param})")
        for run in multistep_runs(cfg, fr.model, fr.Q):
            iv = run["intervals"]
            typical = int(np.median(iv)) if iv else None
            print(
                f"factor {run['factor']:>6g}: typical interval {typical}, "
                f"{len(iv)} reprojections, max error {np.max(run['errors']):.3e}"
            )


if __name__ == "__main__":
    main()

"""Lorenz predictions with the full and the x1-free dictionary.

For each configured rho the script reports how far the three predictors
wander from the state box and their error at a few checkpoints.
"""

import numpy as np

from koopman_reproj.experiments import RunConfig, fit_pipeline, run_predictions

from _common import config_path

CHECKPOINTS = (50, 100, 200, 500)


def box_excursion(xs, box):
    """Largest ratio of distance-from-centre to half-width, over steps and axes."""
    half = 0.5 * (box.hi - box.lo)
    return float(np.nanmax(np.abs(xs - box.center) / half))


def main():
    for name in ("lorenz", "lorenz_nox1"):
        cfg = RunConfig.load(config_path(name))
        fr = fit_pipeline(cfg)
        box = cfg.system_obj().state_domain
        print(f"== {name}: M={fr.diagnostics['M']}, residual rms {fr.diagnostics['residual_rms']:.3e}")
        head = " ".join(f"{'e@' + str(k):>9s}" for k in CHECKPOINTS)
        print(f"{'run':38s} {'excursion':>9s} {head}")
        for rec in run_predictions(cfg, fr.model, fr.Q):
            if rec.error:
                print(f"{rec.name:38s} failed: {rec.error}")
                continue
            errs = " ".join(f"{rec.errors[k]:9.3g}" if k < len(rec.errors) else f"{'-':>9s}" for k in CHECKPOINTS)
            print(f"{rec.name:38s} {box_excursion(rec.trace.x, box):9.3g} {errs}")


if __name__ == "__main__":
    main()

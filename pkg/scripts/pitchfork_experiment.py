"""Pitchfork trajectories and one-step maps for both parameter regimes.

Prints terminal states and errors of the three predictors for p in {-1, 1}
and x0 in {0.5, 1.25}, then the diagonal crossings of each one-step map
over the bifurcation sweep.
"""

import numpy as np

from koopman_reproj.experiments import RunConfig, bifurcation_table, diagonal_crossings, fit_pipeline, run_predictions

from _common import config_path


def main():
    cfg = RunConfig.load(config_path("pitchfork"))
    fr = fit_pipeline(cfg)
    print(f"fit: residual rms {fr.diagnostics['residual_rms']:.3e}")
    print(f"{'run':34s} {'x(T)':>10s} {'error(T)':>10s}")
    for rec in run_predictions(cfg, fr.model, fr.Q):
        print(f"{rec.name:34s} {rec.trace.x[-1, 0]:10.4f} {rec.errors[-1]:10.3e}")

    table = bifurcation_table(cfg, fr.model, fr.Q)
    print("\ndiagonal crossings of the one-step maps")
    for p, maps, truth in table["rows"]:
        print(f"p = {p[0]:g}")
        for label, ys in {**maps, "truth": truth}.items():
            print(f"  {label:16s} {np.round(diagonal_crossings(table['x'], ys), 3).tolist()}")


if __name__ == "__main__":
    main()

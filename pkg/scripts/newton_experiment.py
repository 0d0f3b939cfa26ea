"""Newton iteration statistics along maximum-likelihood prediction runs.

For every configured run the script reports the iteration counts of the
warm-started solves and the superlinear rate constant of their final steps,
and lists the steps where that constant exceeds 10.
"""

import numpy as np

from koopman_reproj.experiments import RunConfig, fit_pipeline, newton_bench
from koopman_reproj.prediction import PredictorConfig, predict

from _common import config_path, rate_constant


def main():
    ml = PredictorConfig(mode="max_likelihood")
    for name in ("duffing", "lorenz", "lorenz_nox1"):
        cfg = RunConfig.load(config_path(name))
        fr = fit_pipeline(cfg)
        print(f"== {name}")
        for p in cfg.params:
            for x0 in cfg.initial_states:
                tr = predict(fr.model, fr.Q, ml, x0, p, cfg.n_steps)
                C = np.array([rate_constant(n) for n in tr.step_norms[1:]])
                its = tr.newton_iterations[1:]
                slow = (np.flatnonzero(C > 10) + 1).tolist()
                print(
                    f"p={p[0]:g}: iterations max {its.max()} mean {its.mean():.2f}, "
                    f"failures {int((~tr.newton_converged).sum())}, max C {C.max():.3g}, C>10 at {slow}"
                )
        bench = newton_bench(cfg, fr.model, fr.Q)
        warm = [len(cp["warm"]) for cp in bench["checkpoints"]]
        cold = [len(cp["cold"]) for cp in bench["checkpoints"]]
        print(f"checkpoint iterations warm {warm} cold {cold}")


if __name__ == "__main__":
    main()

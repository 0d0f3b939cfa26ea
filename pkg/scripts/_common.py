from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def config_path(name: str) -> Path:
    return ROOT / "configs" / f"{name}.json"


def rate_constant(norms) -> float:
    """Largest ``|v_{k+1}| / |v_k|^1.5`` over the final three step norms."""
    ns = list(norms)[-3:]
    return max((b / a**1.5 for a, b in zip(ns, ns[1:]) if a > 0), default=0.0)

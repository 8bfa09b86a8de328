"""Central finite-difference gradient checks against ``nn.backward``."""
import numpy as np

from lanebench import nn

REL_TOL = 1e-3
STEP = 1e-4


def _loss(spec, params, x, weights):
    out, _ = nn.forward(spec, params, x)
    return sum(float(np.sum(out[k] * weights[k])) for k in weights)


def check(spec, params, x, rng, max_coords=None):
    """Return ``(fraction of agreeing coordinates, coordinates checked)``.

    The scalar loss is a fixed random projection of every head. Each
    coordinate uses ``h = STEP * max(1, |theta|)``; a coordinate agrees when
    ``|analytic - numeric| <= REL_TOL * max(|analytic|, |numeric|)`` or both
    are below 1e-8 in magnitude.
    """
    out, cache = nn.forward(spec, params, x)
    weights = {k: rng.standard_normal(v.shape) for k, v in out.items()}
    grads = nn.backward(spec, params, cache, weights)
    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    if max_coords is not None and len(coords) > max_coords:
        # stratify so every tensor is represented
        per = max(1, max_coords // len(params))
        picked = []
        for k in sorted(params):
            n = params[k].size
            idx = rng.choice(n, size=min(per, n), replace=False)
            picked += [(k, int(i)) for i in idx]
        coords = picked
    ok = 0
    for k, i in coords:
        flat = params[k].reshape(-1)
        orig = flat[i]
        h = STEP * max(1.0, abs(orig))
        flat[i] = orig + h
        up = _loss(spec, params, x, weights)
        flat[i] = orig - h
        down = _loss(spec, params, x, weights)
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[k].reshape(-1)[i]
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-8 or abs(analytic - numeric) <= REL_TOL * scale:
            ok += 1
    return ok / len(coords), len(coords)


def layer_kind_cases():
    """One small network per layer kind, each well under 1,000 parameters."""
    rng = np.random.default_rng(0)
    return {
        "dense": (nn.NetworkSpec((6,), (nn.Dense(8),), (("out", (nn.Dense(3),)),)),
                  rng.standard_normal((4, 6))),
        "relu": (nn.NetworkSpec((6,), (nn.Dense(10), nn.ReLU()), (("out", (nn.Dense(3),)),)),
                 rng.standard_normal((4, 6))),
        "conv": (nn.NetworkSpec((2, 7, 7), (nn.Conv2D(3, 3, 2), nn.Flatten()), (("out", (nn.Dense(2),)),)),
                 rng.standard_normal((3, 2, 7, 7))),
        "flatten": (nn.NetworkSpec((2, 3, 3), (nn.Flatten(), nn.Dense(4)), (("out", (nn.Dense(2),)),)),
                    rng.standard_normal((3, 2, 3, 3))),
        "softmax": (nn.NetworkSpec((5,), (nn.Dense(6),), (("probs", (nn.Dense(4), nn.Softmax())),)),
                    rng.standard_normal((4, 5))),
        "image": (nn.NetworkSpec((9, 9, 3), (nn.ImageInput(), nn.Conv2D(4, 3, 2), nn.ReLU(), nn.Flatten()),
                                 (("a", (nn.Dense(3),)), ("b", (nn.Dense(1),)))),
                  rng.integers(0, 256, (2, 9, 9, 3)).astype(np.uint8)),
    }


def jitter(params, rng, scale=0.1):
    """Add Gaussian noise so no parameter (zero biases in particular) sits exactly at a kink."""
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}

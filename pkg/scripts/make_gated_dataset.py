"""Generate the bundled six-group gated dataset and its run config.

Writes data/election_like.csv and data/election_like.json: a synthetic
survey-style dataset with a standardized continuous covariate, a
six-level grouping column, a per-level logistic outcome model, and a
nonignorable response mechanism whose linear predictor includes the
outcome.  Regenerating with the committed seed reproduces the files
byte for byte.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fimnar.basis import categorical, continuous, parse_formula
from fimnar.expfam import Component, Family, OutcomeSpec, log_odds_normalizer, sample, tilt
from fimnar.response import ResponseSpec
from scipy.special import expit

SEED = 20240517
N = 1200
LEVELS = [str(d) for d in range(1, 7)]
KINDS = {"x": continuous(), "z": categorical(LEVELS)}

OUTCOME_FORMULA = (
    "[z=1](1 + x + x^2 + x^3) + [z=2](1 + x) + [z=3](1 + x + x^2) + "
    "[z=4](1 + x) + [z=5](1 + x + x^2) + [z=6](1 + x + x^2)"
)
OUTCOME_COEF = (
    -0.1, -1.1, -0.7, 0.5,   # z=1
    0.3, 0.8,                # z=2
    -0.5, 1.2, -0.4,         # z=3
    0.2, -0.6,               # z=4
    0.7, 0.3, 0.2,           # z=5
    -0.7, -0.9, -0.6,        # z=6
)
RESPONSE_FORMULA = (
    "[z=1](1 + x) + [z=2](1 + x) + [z=3](1 + x) + "
    "[z=4](1 + x) + [z=5](1 + x) + [z=6](1 + x)"
)
RESPONSE_ALPHA = (1.5, 0.2, 1.3, -0.1, 1.6, 0.3, 1.4, 0.1, 1.7, -0.2, 1.2, 0.25)
BETA = -0.4


def coef_in_canonical_order(formula, coef_by_term, kinds):
    basis = parse_formula(formula, kinds)
    return tuple(coef_by_term[t.render()] for t in basis.terms)


def main() -> None:
    out_dir = Path(__file__).resolve().parents[1] / "data"
    out_dir.mkdir(exist_ok=True)

    outcome_basis = parse_formula(OUTCOME_FORMULA, KINDS)
    response_basis = parse_formula(RESPONSE_FORMULA, KINDS)
    # map the human-readable coefficient blocks onto canonical term order
    mean_terms = [
        "[z=1]1", "[z=1]x", "[z=1]x^2", "[z=1]x^3",
        "[z=2]1", "[z=2]x",
        "[z=3]1", "[z=3]x", "[z=3]x^2",
        "[z=4]1", "[z=4]x",
        "[z=5]1", "[z=5]x", "[z=5]x^2",
        "[z=6]1", "[z=6]x", "[z=6]x^2",
    ]
    mean_map = dict(zip(mean_terms, OUTCOME_COEF))
    h_terms = [f"[z={d}]{t}" for d in range(1, 7) for t in ("1", "x")]
    h_map = dict(zip(h_terms, RESPONSE_ALPHA))

    outcome = OutcomeSpec(
        Family.BERNOULLI,
        (Component(outcome_basis, coef_in_canonical_order(OUTCOME_FORMULA, mean_map, KINDS)),),
    )
    response = ResponseSpec(
        response_basis, coef_in_canonical_order(RESPONSE_FORMULA, h_map, KINDS), BETA
    )

    rng = np.random.default_rng(SEED)
    x = rng.normal(size=N)
    z = rng.choice(LEVELS, size=N, p=[0.22, 0.20, 0.18, 0.16, 0.14, 0.10])
    columns = {"x": x, "z": z}
    lognorm = log_odds_normalizer(outcome, BETA, columns)
    p1 = expit(response.h(columns) - lognorm)
    delta = (rng.random(N) < p1).astype(int)
    y = np.empty(N)
    resp = delta == 1
    y[resp] = sample(outcome, {"x": x[resp], "z": z[resp]}, rng)
    y[~resp] = sample(tilt(outcome, BETA), {"x": x[~resp], "z": z[~resp]}, rng)

    csv_path = out_dir / "election_like.csv"
    with open(csv_path, "w") as fh:
        fh.write("x,z,y,delta\n")
        for i in range(N):
            y_cell = "NA" if delta[i] == 0 else f"{int(y[i])}"
            fh.write(f"{float(x[i])!r},{z[i]},{y_cell},{delta[i]}\n")

    config = {
        "covariates": {
            "x": "continuous",
            "z": {"kind": "categorical", "levels": LEVELS},
        },
        "y": "y",
        "delta": "delta",
        "response": {"h": RESPONSE_FORMULA},
        "outcome": {
            "family": "bernoulli",
            "candidates": [{"components": [OUTCOME_FORMULA]}],
        },
        "controls": {"tol": 1e-8, "max_iter": 1000},
        "seed": 7,
    }
    (out_dir / "election_like.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"wrote {csv_path} ({N} rows, response rate {delta.mean():.3f})")


if __name__ == "__main__":
    main()

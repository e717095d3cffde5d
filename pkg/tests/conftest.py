import numpy as np
import pytest

from mfsocial.scenario import scenario_from_dict


def scalar_doc(a=-1.0, a_lag=0.0, a_mix=0.0, b=1.0, b_lag=0.0, b_mix=0.0,
               d=0.0, d_lag=0.0, q=1.0, q_lag=0.0, s=0.0, s_lag=0.0,
               r=1.0, r_lag=0.0, g=0.0, gamma=0.0, T=1.0, delta=0.0, theta=0.0,
               xi_kind="point", xi_mean=1.0, xi_var=0.0, x0=1.0, u0=0.0,
               name="scalar"):
    return {
        "name": name,
        "K": 1, "n": 1, "d": 1, "T": T, "delta": delta, "theta": theta,
        "pi": [1.0],
        "dynamics": {
            "A": [a], "A_lag": [a_lag], "A_mix": a_mix,
            "B": b, "B_lag": b_lag, "B_mix": b_mix, "D": d, "D_lag": d_lag,
        },
        "cost": {
            "Q": q, "Q_lag": q_lag, "S": s, "S_lag": s_lag,
            "R": [r], "R_lag": [r_lag], "G": g, "Gamma": gamma,
        },
        "initial": {
            "xi": [{"kind": xi_kind, "mean": [xi_mean], "cov": [[xi_var]]}],
            "x0": x0, "u0": u0,
        },
    }


def make_scalar(**kw):
    return scenario_from_dict(scalar_doc(**kw))


def two_type_doc(a=(-1.0, -2.0), a_lag=(0.1, 0.2), a_mix=0.1, b=1.0, b_lag=0.1,
                 b_mix=0.1, d=0.0, d_lag=0.0, q=1.0, q_lag=0.1, s=0.2, s_lag=0.1,
                 r=(1.0, 1.2), r_lag=(0.1, 0.1), g=0.2, gamma=0.3,
                 T=1.0, delta=0.1, theta=0.1, pi=(0.5, 0.5),
                 xi=((1.0, 0.0), (0.5, 0.0)), x0=1.0, u0=0.0, name="two-type"):
    return {
        "name": name,
        "K": 2, "n": 1, "d": 1, "T": T, "delta": delta, "theta": theta,
        "pi": list(pi),
        "dynamics": {
            "A": list(a), "A_lag": list(a_lag), "A_mix": a_mix,
            "B": b, "B_lag": b_lag, "B_mix": b_mix, "D": d, "D_lag": d_lag,
        },
        "cost": {
            "Q": q, "Q_lag": q_lag, "S": s, "S_lag": s_lag,
            "R": list(r), "R_lag": list(r_lag), "G": g, "Gamma": gamma,
        },
        "initial": {
            "xi": [{"kind": "gaussian", "mean": [m], "cov": [[v]]} for m, v in xi],
            "x0": x0, "u0": u0,
        },
    }


def make_two_type(**kw):
    return scenario_from_dict(two_type_doc(**kw))


def reference_certified_doc(**over):
    """Strongly stable scalar scenario with small couplings and both delays."""
    base = dict(
        a=-2.0, a_lag=0.1, a_mix=0.05, b=0.2, b_lag=0.1, b_mix=0.05,
        d=0.1, d_lag=0.05, q=0.2, q_lag=0.1, s=0.3, s_lag=0.2,
        r=1.0, r_lag=0.2, g=0.1, gamma=0.2,
        T=1.0, delta=0.1, theta=0.1,
        xi_kind="gaussian", xi_mean=1.0, xi_var=0.25, x0=1.0, u0=0.0,
        name="reference-certified",
    )
    base.update(over)
    return scalar_doc(**base)


@pytest.fixture
def ref_certified():
    return scenario_from_dict(reference_certified_doc())


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

import numpy as np
import pytest

from marsest.frame import RoleBinding, Table, bind_roles


def make_dataset(label, annotated, score, predictions=None, eta=1e-6, **extra):
    """Build a validated dataset from plain vectors; ``extra`` maps role -> values."""
    label = np.asarray(label, dtype=float)
    cols = {"m": label, "a": np.asarray(annotated, dtype=np.int64), "pi": np.asarray(score, dtype=float)}
    roles = {"label": "m", "annotated": "a", "score": "pi"}
    if predictions is not None:
        cols["pred"] = np.asarray(predictions, dtype=float)
        roles["prediction"] = "pred"
    for role, values in extra.items():
        if isinstance(values, dict):
            names = []
            for name, v in values.items():
                cols[name] = np.asarray(v)
                names.append(name)
            roles[role] = tuple(names)
        else:
            cols[role] = np.asarray(values)
            roles[role] = role
    return bind_roles(Table.from_columns(cols), RoleBinding.from_dict(roles), eta)


@pytest.fixture
def four_rows():
    # the worked example: (A=1,M=2,mu=1), (A=0,mu=3), (A=1,M=4,mu=5), (A=0,mu=1), pi = 0.5
    return make_dataset([2, np.nan, 4, np.nan], [1, 0, 1, 0], [0.5] * 4, [1, 3, 5, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)

"""Shared fixtures; the expensive toy-scale runs are built once per session."""

import pytest

from vqgrid import Workspace, run_compress, run_eval, run_gen_scene, run_train
from vqgrid.pipeline import default_config


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Two identical toy-scale pipeline runs (64^3 grid, 40 views, K = 256).

    Each run executes gen-scene, train, compress, and eval with the default
    config, so the pair doubles as the reproducibility evidence.  Takes on
    the order of a minute; everything downstream reads from these
    workspaces instead of re-running stages.
    """
    cfg = default_config()
    runs = []
    for tag in ("first", "second"):
        out = tmp_path_factory.mktemp(f"toy_{tag}")
        run_gen_scene(cfg, out)
        fit = run_train(cfg, out)
        comp = run_compress(cfg, out)
        pooled = run_eval(cfg, out)
        runs.append((Workspace(out), fit, comp, pooled))
    return cfg, runs

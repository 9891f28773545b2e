import json
from types import SimpleNamespace

import pytest

from forensicff.fixture import FixtureSpec, emit_fixture
from forensicff.imageio import scan_dataset


@pytest.fixture(scope="session")
def fixture_tree(tmp_path_factory):
    """The default 64+64 planted-feature corpus plus its model, emitted once."""
    out = tmp_path_factory.mktemp("fixture")
    spec = FixtureSpec()
    graph = emit_fixture(spec, out)
    truth = json.loads((out / "fixture_truth.json").read_text())
    entries = scan_dataset(root=out)
    return SimpleNamespace(
        dir=out,
        spec=spec,
        graph=graph,
        truth=truth,
        real_paths=[p for p, label in entries if label == 0],
        fake_paths=[p for p, label in entries if label == 1],
    )

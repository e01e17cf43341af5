import pytest

from vgsalign.dataset import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """4 classes x 5 pairs; returns the manifest path."""
    root = tmp_path_factory.mktemp("small_synth")
    return generate_synthetic(SyntheticSpec(n_classes=4, pairs_per_class=5), root, seed=0)


@pytest.fixture(scope="session")
def full_synth(tmp_path_factory):
    """The 16-class / 400-pair synthetic set."""
    root = tmp_path_factory.mktemp("full_synth")
    return generate_synthetic(SyntheticSpec(), root, seed=0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, title, passed, detail)`` once per acceptance test; the summary prints one line each."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    recorded = []

    def record(n, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        recorded.append(line)
        lines.append((n, line))

    yield record
    if not recorded:
        lines.append((0, f"[FAIL] {request.node.name}: raised before its check completed"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

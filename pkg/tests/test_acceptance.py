"""The eleven acceptance criteria, each run through its shipped named config."""
import pytest

from boxlab import harness as hs

from conftest import ACCEPTANCE_LINES

CONFIGS = {raw["criterion"]: name for name, raw in hs.named_configs().items() if "criterion" in raw}

KNOWN_RED = {
    5: ("the Dirichlet boundary term of Weyl's law thins the unfolded levels near T = 1e5, so the "
        "pair counts sit about 7.5% below the window length, outside the 5% band"),
}


def criterion_params():
    for k in range(1, 12):
        marks = [pytest.mark.slow]
        if k in KNOWN_RED:
            marks.append(pytest.mark.xfail(strict=True, reason=KNOWN_RED[k]))
        yield pytest.param(k, marks=marks, id=f"criterion-{k:02d}")


@pytest.mark.parametrize("k", list(criterion_params()))
def test_criterion(k, tmp_path):
    cfg = hs.ExperimentConfig.load(CONFIGS[k]).override(output_dir=str(tmp_path))
    entry = hs.run(cfg)
    (a,) = entry["assertions"]
    line = f"{'PASS' if a['passed'] else 'FAIL'} {k:2d} {a['name']}: {a['detail']}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert a["passed"], line

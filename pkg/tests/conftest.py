import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    row = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    row["ok"] = row["ok"] and rep.passed
    if rep.when == "call":
        row["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        row = _CRITERIA[number]
        status = "PASS" if row["ok"] else "FAIL"
        notes = f"  [{', '.join(row['notes'])}]" if row["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {row['title']}{notes}")


@pytest.fixture(scope="session")
def desk_pretrained():
    """Desk-scale MAE pre-training per seed on the fine-tune train split, computed once per session."""
    from maelab.engine import desk_config, load_dataset, pretrain

    cache = {}
    train = load_dataset(desk_config("finetune"), "train")

    def get(seed: int):
        if seed not in cache:
            cache[seed] = pretrain(desk_config("pretrain").override({"seed": seed}), train).checkpoint
        return cache[seed]

    return get

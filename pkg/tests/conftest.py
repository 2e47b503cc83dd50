import csv
import importlib.resources
import re
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def imdb_csv(tmp_path_factory):
    """The 25,000 IMDb reviews of the ``movie-reviews`` bundle as a label,text CSV."""
    pytest.importorskip("movie_reviews")
    src = importlib.resources.files("movie_reviews") / "data" / "combined_movie_reviews.csv"
    out = tmp_path_factory.mktemp("imdb") / "imdb.csv"
    with src.open(newline="", encoding="utf-8") as fin, open(out, "w", newline="", encoding="utf-8") as fout:
        w = csv.writer(fout)
        w.writerow(["label", "text"])
        for row in csv.DictReader(fin):
            if row["source"] == "imdb":
                w.writerow([row["label"], row["text"]])
    return out


@pytest.fixture
def mini_config(tmp_path):
    """Path to a copy of the bundled mini config writing under ``tmp_path``."""
    text = (REPO / "configs" / "mini.yaml").read_text()
    text = text.replace("output_dir: runs/mini", f"output_dir: {tmp_path / 'run'}")
    p = tmp_path / "mini.yaml"
    p.write_text(text)
    return p


_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, log, number, title):
        self.log, self.number, self.title, self.detail = log, number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            status = "PASS"
        elif issubclass(exc_type, pytest.skip.Exception):
            status, self.detail = "SKIP", str(exc)
        else:
            status = "FAIL"
            if not self.detail or not isinstance(exc, AssertionError):
                self.detail = f"{exc_type.__name__}: {exc}".splitlines()[0]
        self.log.append(f"{status} criterion {self.number}: {self.title}" + (f" [{self.detail}]" if self.detail else ""))
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title: _Criterion(log, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(re.search(r"criterion (\d+)", s).group(1))):
            terminalreporter.write_line(line)

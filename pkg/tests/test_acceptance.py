"""Acceptance suite: one test per criterion, each at its stated tolerance.

A pass/fail line per criterion is printed in the "acceptance criteria"
section of the pytest summary. The IMDb criteria use the 25,000 reviews of
the ``movie-reviews`` bundle (subsampled to 5,000); the optional full-scale
run needs a 50,000-review ``aclImdb`` directory in ``PELM3D_IMDB_DIR``.
"""

import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import hadamard

from pelm3d import config, encoding, experiments, learning, optics, pipeline

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "imdb_desk.yaml"


def ridge_by_gradient_descent(H, y, lam, iters=20000):
    L = 2 * (np.linalg.norm(H, 2) ** 2 + lam)
    b = np.zeros(H.shape[1])
    for _ in range(iters):
        b -= (2 * (H.T @ (H @ b - y)) + 2 * lam * b) / L
    return b


def test_criterion_1_wht_oracle(criterion):
    with criterion(1, "fast WHT = naive sign-matrix product (rel 1e-12), Parseval (rel 1e-10)") as c:
        rng = np.random.default_rng(0)
        worst_oracle = worst_parseval = 0.0
        for d in range(11):
            L = 1 << d
            V = rng.standard_normal((100, L))
            fast = encoding.fwht(V)
            ref = V @ hadamard(L).T
            worst_oracle = max(worst_oracle, float(np.max(np.linalg.norm(fast - ref, axis=1) / np.linalg.norm(ref, axis=1))))
            e_fast = np.sum(fast ** 2, axis=1)
            e_in = L * np.sum(V ** 2, axis=1)
            worst_parseval = max(worst_parseval, float(np.max(np.abs(e_fast - e_in) / e_in)))
        c.detail = f"oracle {worst_oracle:.1e}, parseval {worst_parseval:.1e}"
        assert worst_oracle <= 1e-12 and worst_parseval <= 1e-10


def test_criterion_2_ridge(criterion):
    with criterion(2, "primal = dual ridge (rel 1e-8, 50 shapes); gradient-descent oracle (rel 1e-6, 10 instances)") as c:
        rng = np.random.default_rng(0)
        worst_pd = worst_gd = 0.0
        for _ in range(50):
            n = int(rng.integers(10, 120))
            m = max(1, n + int(rng.integers(-n // 2, n // 2 + 1)))
            H = rng.standard_normal((n, m))
            y = rng.integers(0, 2, n).astype(float)
            y[0] = 1.0
            lam = 10.0 ** rng.uniform(-4, 2)
            p = learning.fit_ridge(H, y, lam, form="primal").beta
            q = learning.fit_ridge(H, y, lam, form="dual").beta
            worst_pd = max(worst_pd, float(np.linalg.norm(p - q) / np.linalg.norm(q)))
        for _ in range(10):
            n, m = (int(v) for v in rng.integers(4, 16, size=2))
            H = rng.standard_normal((n, m))
            y = rng.integers(0, 2, n).astype(float)
            y[0] = 1.0
            lam = 10.0 ** rng.uniform(-1, 1)
            b = learning.fit_ridge(H, y, lam).beta
            g = ridge_by_gradient_descent(H, y, lam)
            worst_gd = max(worst_gd, float(np.linalg.norm(b - g) / np.linalg.norm(g)))
        c.detail = f"primal/dual {worst_pd:.1e}, gradient descent {worst_gd:.1e}"
        assert worst_pd <= 1e-8 and worst_gd <= 1e-6


def test_criterion_3_optics(criterion):
    with criterion(3, "propagation unitary (rel 1e-9); desk preset off-diagonal |rho| < 0.05 over 64 masks") as c:
        w, planes, g = pipeline.build_optics(config.load_config(DESK_CONFIG), 128)
        masks = np.random.default_rng(0).uniform(0, np.pi, (64, 128, 128))
        fld = optics.synthesize_field(masks[:8], w, g.slm_bits, g)
        e0 = fld.energy
        worst = 0.0
        for mode in optics.MODES:
            for p in planes:
                out = optics.propagate(fld, optics.PlaneSpec(p.plane_id, p.z, 0, mode), g)
                worst = max(worst, float(np.max(np.abs(out.energy - e0) / e0)))
        rho = experiments.plane_correlation_diagnostic(masks, w, planes, g).max_off_diagonal()
        c.detail = f"energy error {worst:.1e}, max |rho| {rho:.4f}"
        assert worst <= 1e-9 and rho < 0.05


def test_criterion_4_synthetic_double_descent(criterion):
    with criterion(4, "synthetic dip within one grid step of n_train in {64,128,256}; over-parametrized train >= 0.99") as c:
        ratios = (0.25, 0.5, 0.75, 0.875, 1.0, 1.125, 1.25, 1.5, 2.0, 4.0)
        H, y = experiments.synthetic_task(256 + 2000, 1024, seed=11)
        train_idx, test_idx = np.arange(256), np.arange(256, 2256)
        found, worst_train = {}, 1.0
        for n in (64, 128, 256):
            grid = experiments.SweepGrid(tuple(int(r * n) for r in ratios), (n,), 5)
            res = experiments.run_double_descent(H, y, grid, train_idx, test_idx, 1e-4)
            found[n] = experiments.locate_interpolation_dip(res)[n]
            worst_train = min([worst_train] + [r["train_accuracy"] for r in res.records if r["regime"] == "over"])
            Ms = list(grid.M_values)
            assert found[n] is not None and abs(Ms.index(found[n]) - Ms.index(n)) <= 1, found
        c.detail = f"M* = {found}, min over-parametrized train accuracy {worst_train:.3f}"
        assert worst_train >= 0.99


@pytest.fixture(scope="module")
def desk(imdb_csv, tmp_path_factory):
    """Desk-scale IMDb run at full precision plus its 8-bit twin sharing the prepare stage."""
    root = tmp_path_factory.mktemp("desk")
    cfg = config.load_config(DESK_CONFIG, {"corpus.source": str(imdb_csv), "output_dir": str(root / "fp")})
    cfg8 = config.load_config(DESK_CONFIG, {"corpus.source": str(imdb_csv), "output_dir": str(root / "b8"), "optics.bits": 8})
    pipeline.prepare(cfg)
    shutil.copytree(root / "fp" / "prepare", root / "b8" / "prepare")
    pipeline.simulate(cfg)
    pipeline.simulate(cfg8)
    return {"cfg": cfg, "cfg8": cfg8, "report": pipeline.train(cfg), "report8": pipeline.train(cfg8)}


@pytest.mark.slow
def test_criterion_5_desk_imdb(desk, criterion):
    with criterion(5, "desk IMDb (5000 reviews, V=1e4, 128x128, 3 planes, M=4000, n_train=1500): test >= 0.70") as c:
        cfg, rep = desk["cfg"], desk["report"]
        d, labels, train_idx, test_idx, enc = pipeline.load_prepared(cfg)
        fm = pipeline.load_features(cfg)
        vocab = [t for t in (d / "vocabulary.tsv").read_text().splitlines() if not t.startswith("#")]
        assert len(vocab) == 10_000 and enc["side"] == 128 and len(labels) == 5000
        assert len(train_idx) == 3350 and len(test_idx) == 1650
        assert len(fm.planes) == 3 and fm.bits == 0
        assert (rep.M, rep.n_train, rep.regime) == (4000, 1500, "over")
        c.detail = f"test accuracy {rep.test_accuracy:.4f}, train {rep.train_accuracy:.4f}"
        assert rep.test_accuracy >= 0.70


@pytest.mark.slow
def test_criterion_6_eight_bit_gap(desk, criterion):
    with criterion(6, "8-bit detection lowers desk test accuracy by >= 0.01") as c:
        a0, a8 = desk["report"].test_accuracy, desk["report8"].test_accuracy
        assert pipeline.load_features(desk["cfg8"]).bits == 8
        c.detail = f"full precision {a0:.4f}, 8-bit {a8:.4f}, gap {a0 - a8:+.4f}"
        assert a0 - a8 >= 0.01


def test_criterion_7_capacity(criterion):
    with criterion(7, "capacity(362^2, 120000) = 15,725,280,000 exactly") as c:
        cap = experiments.capacity(362 ** 2, 120_000).capacity
        c.detail = f"{cap:,}"
        assert cap == 15_725_280_000 and isinstance(cap, int)


@pytest.mark.slow
def test_criterion_8_split_study(desk, criterion):
    with criterion(8, "desk split study: 20% train fraction within 0.02 of the best fraction (over-parametrized M)") as c:
        out = pipeline.sweep(desk["cfg"])
        rows = out["split_study"]["summary"]
        Ms = {r["M"] for r in rows}
        assert all(m > 0.8 * 5000 for m in Ms)
        gaps = []
        for m in sorted(Ms):
            means = {r["fraction"]: r for r in rows if r["M"] == m}
            best = max(r["test_mean"] for r in means.values())
            at20 = means[0.2]
            gaps.append(best - at20["test_mean"])
            c.detail = (f"M={m}: 20% -> {at20['test_mean']:.4f} +- {at20['test_std']:.4f}, "
                        f"best {best:.4f}, gap {best - at20['test_mean']:.4f}")
        assert max(gaps) <= 0.02


def _end_to_end(cfg):
    pipeline.prepare(cfg)
    pipeline.simulate(cfg)
    pipeline.train(cfg)
    pipeline.sweep(cfg)


def test_criterion_9_determinism(tmp_path, criterion):
    with criterion(9, "two identical end-to-end runs give bit-identical features, models and sweep CSVs") as c:
        src = REPO / "configs" / "mini.yaml"
        runs = [tmp_path / "a", tmp_path / "b"]
        for r in runs:
            _end_to_end(config.load_config(src, {"output_dir": str(r)}))
        names = ["simulate/features.bin", "simulate/features.bin.json", "train/model.bin", "train/report.csv",
                 "sweep/sweep.csv", "sweep/plot_data.csv", "prepare/masks.bin", "prepare/tfidf.triplets"]
        differ = [n for n in names if (runs[0] / n).read_bytes() != (runs[1] / n).read_bytes()]
        c.detail = f"{len(names) - len(differ)}/{len(names)} artifacts identical"
        assert not differ, differ


@pytest.mark.extended
@pytest.mark.skipif(not os.environ.get("PELM3D_IMDB_DIR"), reason="set PELM3D_IMDB_DIR to a 50,000-review aclImdb directory")
def test_criterion_5_full_scale(tmp_path, criterion):
    with criterion(5, "extended full-scale IMDb (N=5e4, V full, 362x362, M=4e4): test within 0.83 +- 0.05") as c:
        cfg = config.load_config(DESK_CONFIG, {
            "corpus.source": os.environ["PELM3D_IMDB_DIR"], "corpus.format": "dir", "corpus.max_terms": None,
            "corpus.subsample": None, "optics.preset": "paper", "learning.M": 40_000,
            "learning.n_train": None, "output_dir": str(tmp_path),
        })
        pipeline.prepare(cfg)
        pipeline.simulate(cfg)
        rep = pipeline.train(cfg)
        c.detail = f"test accuracy {rep.test_accuracy:.4f}"
        assert abs(rep.test_accuracy - 0.83) <= 0.05


def test_skipped_extended_run_is_reported(criterion):
    if os.environ.get("PELM3D_IMDB_DIR"):
        pytest.skip("full-scale run requested")
    with criterion(5, "extended full-scale IMDb run"):
        pytest.skip("not run: PELM3D_IMDB_DIR unset (needs 50,000 reviews, hours, several GB)")

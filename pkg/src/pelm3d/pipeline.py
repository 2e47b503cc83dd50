"""On-disk stages behind the CLI: prepare, simulate, train, sweep, diagnose.

Each stage writes into ``<output_dir>/<stage>/`` and finishes by writing a
``manifest.json`` holding the stage fingerprint and the SHA-256 of every
artifact. A stage whose manifest fingerprint matches the current config is
skipped after its checksums are verified. Files are written under a
``.partial`` name and renamed when complete, so an interrupted run never
leaves a file that looks finished.
"""

from __future__ import annotations

import importlib.resources
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__, corpus, encoding, experiments, learning, optics
from .config import file_digest, fingerprint, source_digest
from .stopwords import STOPWORDS_VERSION

log = logging.getLogger(__name__)

BUNDLED_PREFIX = "bundled:"


class ArtifactMissing(OSError):
    """An upstream stage has not been run."""


class ValidationFailure(ValueError):
    """An artifact is corrupted, stale or inconsistent."""


def resolve_source(source: str) -> Path:
    if source.startswith(BUNDLED_PREFIX):
        name = source[len(BUNDLED_PREFIX):]
        return Path(str(importlib.resources.files("pelm3d") / "data" / f"{name}_corpus.csv"))
    return Path(source)


def stage_dir(cfg, stage: str) -> Path:
    return Path(cfg["output_dir"]) / stage


def _manifest(d: Path):
    p = d / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else None


def _verify(d: Path, manifest: dict, hint: str) -> None:
    for name, digest in manifest["files"].items():
        p = d / name
        if not p.exists():
            raise ArtifactMissing(f"{p}: missing; {hint}")
        if file_digest(p) != digest:
            raise ValidationFailure(f"{p}: checksum mismatch (corrupted or modified); {hint}")


def _finish(d: Path, fp: str, names, extra=None) -> None:
    manifest = {"fingerprint": fp, "version": __version__, "files": {n: file_digest(d / n) for n in names}}
    manifest.update(extra or {})
    experiments.write_json(d / "manifest.json", manifest)


def _up_to_date(d: Path, fp: str, stage: str) -> bool:
    m = _manifest(d)
    if m is None or m["fingerprint"] != fp:
        return False
    _verify(d, m, f"delete {d} and rerun `pelm3d {stage}`")
    return True


def _require(d: Path, expected_fp: str, stage: str) -> dict:
    m = _manifest(d)
    if m is None:
        raise ArtifactMissing(f"{d}: no {stage} artifacts; run `pelm3d {stage}` first")
    if m["fingerprint"] != expected_fp:
        raise ValidationFailure(f"{d}: {stage} artifacts are stale for this config; rerun `pelm3d {stage}`")
    _verify(d, m, f"rerun `pelm3d {stage}`")
    return m


def prepare_fingerprint(cfg) -> str:
    src = resolve_source(cfg["corpus"]["source"])
    if not src.exists():
        raise FileNotFoundError(f"corpus source not found: {src}")
    return fingerprint("prepare", __version__, STOPWORDS_VERSION, source_digest(src), cfg["corpus"], cfg["split"])


def simulate_fingerprint(cfg) -> str:
    return fingerprint("simulate", prepare_fingerprint(cfg), cfg["optics"])


def prepare(cfg) -> str:
    """Corpus -> vocabulary, tf-idf, split, encoding bounds and mask cache."""
    d = stage_dir(cfg, "prepare")
    fp = prepare_fingerprint(cfg)
    if _up_to_date(d, fp, "prepare"):
        log.info("prepare: up-to-date (%s)", fp[:12])
        return "up-to-date"
    c = cfg["corpus"]
    docs = corpus.ingest_corpus(resolve_source(c["source"]), c["format"])
    if c.get("subsample"):
        if c["subsample"] > len(docs):
            raise ValidationFailure(f"subsample {c['subsample']} exceeds corpus size {len(docs)}")
        keep = np.sort(np.random.default_rng(c["subsample_seed"]).choice(len(docs), c["subsample"], replace=False))
        docs = [docs[i] for i in keep]
    log.info("prepare: %d documents", len(docs))
    tokens = corpus.tokenize_all(docs)
    vocab = corpus.build_vocabulary(tokens, c["min_frequency"], c.get("max_terms"))
    tf = corpus.tfidf(tokens, vocab)
    split = learning.make_split(len(docs), cfg["split"]["train_fraction"], cfg["split"]["seed"])
    enc = encoding.fit_bounds(tf.values[split.train_idx])
    masks = encoding.encode_matrix(tf.values, enc)
    log.info("prepare: V=%d, padded to %d, masks %dx%d", len(vocab), enc.padded_length, enc.side, enc.side)

    d.mkdir(parents=True, exist_ok=True)
    corpus.write_vocabulary(vocab, d / "vocabulary.tsv")
    corpus.write_triplets(tf, d / "tfidf.triplets")
    experiments.write_json(d / "labels.json", {"ids": [x.id for x in docs], "labels": [x.label for x in docs],
                                                "empty_rows": tf.empty_rows.tolist()})
    experiments.write_json(d / "split.json", {"train_fraction": split.train_fraction, "seed": split.seed,
                                               "train_idx": split.train_idx.tolist(), "test_idx": split.test_idx.tolist()})
    experiments.write_json(d / "encoding.json", {**enc.to_dict(), "vocabulary_size": len(vocab)})
    encoding.write_mask_cache(d / "masks.bin", masks, enc)
    names = ["vocabulary.tsv", "tfidf.triplets", "labels.json", "split.json", "encoding.json", "masks.bin"]
    _finish(d, fp, names)
    return fp


def load_prepared(cfg, verify=True):
    d = stage_dir(cfg, "prepare")
    if verify:
        _require(d, prepare_fingerprint(cfg), "prepare")
    labels = json.loads((d / "labels.json").read_text())
    split = json.loads((d / "split.json").read_text())
    enc = json.loads((d / "encoding.json").read_text())
    return d, np.asarray(labels["labels"]), np.asarray(split["train_idx"]), np.asarray(split["test_idx"]), enc


def build_optics(cfg, side: int):
    o = cfg["optics"]
    planes = [optics.PlaneSpec(j, float(z), o["bits"], o["mode"]) for j, z in enumerate(o["z"])]
    geometry = optics.Geometry(o["wavelength"], o["pitch"], o["grid"], o["slm_bits"], o["noise_std"],
                               o["noise_seed"], o["plane_seed"])
    w = optics.make_embedding(side, o["embedding_seed"])
    return w, planes, geometry


def simulate(cfg) -> str:
    """Masks -> feature matrix (plus JSON sidecar)."""
    d = stage_dir(cfg, "simulate")
    fp = simulate_fingerprint(cfg)
    if _up_to_date(d, fp, "simulate"):
        log.info("simulate: up-to-date (%s)", fp[:12])
        return "up-to-date"
    pdir = stage_dir(cfg, "prepare")
    if not (pdir / "masks.bin").exists():
        raise ArtifactMissing(f"{pdir / 'masks.bin'}: mask cache missing; run `pelm3d prepare` first")
    _, labels, train_idx, _, enc = load_prepared(cfg)
    masks, _, _ = encoding.read_mask_cache(pdir / "masks.bin")
    w, planes, geometry = build_optics(cfg, enc["side"])
    o = cfg["optics"]
    calibration = None
    if o["bits"]:
        calib_rows = train_idx[: o["calibration_size"]]
        calibration = optics.calibrate(masks[calib_rows], w, planes, geometry, o["batch_size"])

    def progress(done, total):
        log.info("simulate: %d/%d masks", done, total)

    fm = optics.map_dataset(masks, w, planes, o["block"], geometry, calibration, o["batch_size"], progress)
    d.mkdir(parents=True, exist_ok=True)
    optics.write_features(d / "features.bin", fm)
    _finish(d, fp, ["features.bin", "features.bin.json"], {"calibration": calibration})
    return fp


def load_features(cfg) -> optics.FeatureMatrix:
    d = stage_dir(cfg, "simulate")
    _require(d, simulate_fingerprint(cfg), "simulate")
    return optics.read_features(d / "features.bin")


REPORT_FIELDS = ("train_accuracy", "test_accuracy", "M", "n_train", "regime", "lambda")


def train(cfg) -> learning.EvalReport:
    fm = load_features(cfg)
    _, labels, train_idx, test_idx, _ = load_prepared(cfg)
    lc = cfg["learning"]
    rng = np.random.default_rng(lc["seed"])
    report, model = learning.evaluate(fm, labels, train_idx, test_idx, lc["M"], rng, lc["lambda"],
                                      n_train=lc["n_train"], bias=lc["bias"],
                                      lambda_grid=lc["lambda_grid"], folds=lc["cv_folds"])
    model = learning.ReadoutModel(model.beta, model.lam, model.channel_subset, model.bias, model.form,
                                  {"learning": lc["seed"], "embedding": cfg["optics"]["embedding_seed"],
                                   "plane": cfg["optics"]["plane_seed"], "split": cfg["split"]["seed"]})
    d = stage_dir(cfg, "train")
    d.mkdir(parents=True, exist_ok=True)
    learning.write_model(d / "model.bin", model)
    row = {**report.to_dict(), "lambda": model.lam}
    experiments.write_records_csv(d / "report.csv", [row], REPORT_FIELDS)
    fp = fingerprint("train", simulate_fingerprint(cfg), lc)
    experiments.write_json(d / "report.json", {"fingerprint": fp, "config_fingerprint": fingerprint(cfg), "config": cfg, "report": row})
    _finish(d, fp, ["model.bin", "report.csv", "report.json"])
    return report


def sweep_lambda(cfg) -> float:
    """The sweep's fixed lambda: ``sweep.lambda``, else a numeric ``learning.lambda``, else the default."""
    lam = cfg["sweep"].get("lambda")
    if lam is None:
        lam = cfg["learning"]["lambda"]
    return learning.DEFAULT_LAMBDA if lam == "cv" else float(lam)


def sweep(cfg) -> dict:
    fm = load_features(cfg)
    _, labels, train_idx, test_idx, _ = load_prepared(cfg)
    sc = cfg["sweep"]
    lam = sweep_lambda(cfg)
    fp = fingerprint("sweep", simulate_fingerprint(cfg), lam, sc)
    grid = experiments.SweepGrid(tuple(sc["M_values"]), tuple(sc["n_train_values"]), sc["repeats"],
                                 tuple(sc["seeds"]) if sc["seeds"] else None)
    result = experiments.run_double_descent(fm, labels, grid, train_idx, test_idx, lam, sc["n_jobs"], fp)
    d = stage_dir(cfg, "sweep")
    d.mkdir(parents=True, exist_ok=True)
    experiments.write_records_csv(d / "sweep.csv", result.records, experiments.RECORD_FIELDS)
    plot_rows = experiments.plot_rows_double_descent(result)
    out = {}
    try:
        dips = experiments.locate_interpolation_dip(result)
    except experiments.ExperimentError as e:
        log.warning("dip location skipped: %s", e)
        dips = {}
    out["dips"] = {str(k): v for k, v in dips.items()}
    names = ["sweep.csv"]

    ss = sc.get("split_study")
    if ss:
        study = experiments.run_split_study(fm, labels, ss["fractions"], ss["M_values"], ss.get("repeats", 5),
                                            lam, ss.get("tolerance", 0.02), sc["seeds"])
        experiments.write_records_csv(d / "split_study.csv", study.records,
                                      ("M", "fraction", "repeat", "seed", "n_train", "train_accuracy", "test_accuracy"))
        plot_rows += experiments.plot_rows_split(study)
        out["split_study"] = {"summary": study.summary(),
                              "smallest_sufficient_fraction": {str(k): v for k, v in study.smallest_sufficient_fraction().items()}}
        names.append("split_study.csv")

    sat = sc.get("saturation")
    if sat:
        H_by_L, ctx = {}, None
        for run in sat["runs"]:
            rd = Path(run)
            enc = json.loads((rd / "prepare" / "encoding.json").read_text())
            sp_ = json.loads((rd / "prepare" / "split.json").read_text())
            lab = np.asarray(json.loads((rd / "prepare" / "labels.json").read_text())["labels"])
            H_by_L[enc["side"] ** 2] = optics.read_features(rd / "simulate" / "features.bin")
            this = (lab.tolist(), sp_["train_idx"], sp_["test_idx"])
            if ctx is not None and this != ctx:
                raise ValidationFailure("saturation runs must share documents, labels and split")
            ctx = this
        fits = experiments.run_saturation_study(H_by_L, np.asarray(ctx[0]), sat["M_values"], np.asarray(ctx[1]),
                                                np.asarray(ctx[2]), sat.get("n_train"), 1, lam, sat.get("epsilon", 1e-3))
        plot_rows += experiments.plot_rows_saturation(fits)
        out["saturation"] = {str(L): {"slope": f.slope, "intercept": f.intercept, "plateau": f.plateau,
                                      "onset_M": f.onset_M} for L, f in fits.items()}

    experiments.write_records_csv(d / "plot_data.csv", plot_rows, experiments.PLOT_FIELDS)
    names.append("plot_data.csv")
    # wall_time lives only in the JSON; the CSVs are reproducible byte for byte.
    experiments.write_json(d / "sweep.json", {"fingerprint": fp, "config_fingerprint": fingerprint(cfg), "config": cfg, "records": result.records,
                                              "summary": result.summary(), **out})
    names.append("sweep.json")
    _finish(d, fp, names)
    out["result"] = result
    return out


def diagnose(cfg) -> experiments.CorrelationReport:
    _, _, _, _, enc = load_prepared(cfg)
    dc = cfg["diagnose"]
    w, planes, geometry = build_optics(cfg, enc["side"])
    rng = np.random.default_rng(dc["seed"])
    masks = rng.uniform(0.0, np.pi, size=(dc["masks"], enc["side"], enc["side"]))
    rep = experiments.plane_correlation_diagnostic(masks, w, planes, geometry)
    d = stage_dir(cfg, "diagnose")
    d.mkdir(parents=True, exist_ok=True)
    rows = [{"plane_a": pa.plane_id, "plane_b": pb.plane_id, "z_a": pa.z, "z_b": pb.z,
             "mean_rho": float(rep.mean[i, j]), "mean_abs_rho": float(rep.mean_abs[i, j])}
            for i, pa in enumerate(planes) for j, pb in enumerate(planes)]
    experiments.write_records_csv(d / "correlation.csv", rows, ("plane_a", "plane_b", "z_a", "z_b", "mean_rho", "mean_abs_rho"))
    fp = fingerprint("diagnose", prepare_fingerprint(cfg), cfg["optics"], dc)
    experiments.write_json(d / "correlation.json", {"fingerprint": fp, "pairs": rows, "undefined": rep.undefined,
                                                    "max_off_diagonal_abs": rep.max_off_diagonal()})
    _finish(d, fp, ["correlation.csv", "correlation.json"])
    return rep
